import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvcar import kvcache as K
from kvcar.autoencoder import Autoencoder
from kvcar.kvcache import (KINDS, CacheConsistencyError, CacheLayout, CodecSpec, KVCache, ReusePlan, bytes_used,
                           dense_kv_bytes, make_codec, savings_report)
from kvcar.model import ModelConfig


@st.composite
def layouts(draw):
    L = draw(st.integers(1, 4))
    h = draw(st.integers(1, 4))
    dk = draw(st.integers(1, 4))
    D = h * dk
    latents = {}
    for layer in range(L):
        if draw(st.booleans()):
            latents[layer] = h * draw(st.integers(1, dk))
    quant = [l for l in latents if draw(st.booleans())]
    slots = [(l, j, k) for l in range(1, L) for j in range(h) for k in KINDS]
    chosen = draw(st.lists(st.sampled_from(slots), unique=True) if slots else st.just([]))
    plan = ReusePlan(L, h, frozenset(chosen))
    return L, h, D, latents, plan, quant


def enumerate_bytes(L, h, D, latents, plan, quant, seq, batch, P):
    """Walk every (batch, position, layer, kind, head) slot and add up what is stored."""
    total = 0
    for _b, _t, layer, kind in itertools.product(range(batch), range(seq), range(L), KINDS):
        width = latents.get(layer, D) // h
        live = [j for j in range(h) if (layer, j, kind) not in plan.slots]
        if layer in quant:
            total += 6 if live else 0
            total += width * len(live)
        else:
            total += P * width * len(live)
    return total


@settings(max_examples=150, deadline=None)
@given(st.sampled_from([1, 2, 4]), st.integers(1, 6), st.integers(1, 5), st.integers(1, 64),
       st.integers(0, 50), st.integers(0, 9))
def test_identity_layout_reduces_to_dense_formula(P, L, h, dk, seq, batch):
    D = h * dk
    stats = bytes_used(CacheLayout.build(L, h, D), seq, batch, P)
    assert stats.total_bytes == 2 * P * L * D * seq * batch == dense_kv_bytes(P, L, D, seq, batch)
    assert stats.savings_fraction == 0.0


@settings(max_examples=150, deadline=None)
@given(layouts(), st.integers(0, 5), st.integers(1, 3), st.sampled_from([1, 2, 4]))
def test_closed_form_matches_enumeration(layout, seq, batch, P):
    L, h, D, latents, plan, quant = layout
    lay = CacheLayout.build(L, h, D, latents, plan, quant)
    stats = bytes_used(lay, seq, batch, P)
    assert stats.total_bytes == enumerate_bytes(L, h, D, latents, plan, quant, seq, batch, P)
    assert 0.0 <= stats.savings_fraction < 1.0 or stats.baseline_bytes == 0 or quant


@settings(max_examples=40, deadline=None)
@given(layouts(), st.integers(1, 6))
def test_live_cache_holds_what_accounting_predicts(layout, seq):
    L, h, D, latents, plan, quant = layout
    rng = np.random.default_rng(seq)
    codecs = {l: make_codec(l, D, h, d, plan, "autoencoder_int8" if l in quant else "autoencoder", rng=l)
              for l, d in latents.items()}
    cache = KVCache(ModelConfig(n_layers=L, n_heads=h, d_model=D), codecs, plan)
    for layer in range(L):
        cache.append(layer, rng.normal(size=(seq, D)), rng.normal(size=(seq, D)))
    lay = CacheLayout.build(L, h, D, latents, plan, quant)
    # float stores hold 4-byte elements, so the P=4 figure is exact
    assert sum(lc.bytes_used for lc in cache.layers) == bytes_used(lay, seq, 1, 4).total_bytes
    assert cache.stats(4).total_bytes == bytes_used(lay, seq, 1, 4).total_bytes


ALTERNATE = range(1, 12, 2)
ALIAS_TABLE = [
    ("all K and V", ReusePlan.full(12, 12, layers=ALTERNATE), 50.0),
    ("all K", ReusePlan.full(12, 12, layers=ALTERNATE, kinds=("k",)), 25.0),
    ("all V", ReusePlan.full(12, 12, layers=ALTERNATE, kinds=("v",)), 25.0),
]


def first_slots(kinds, n, L=12, h=12):
    slots = [(l, j, k) for l in range(1, L) for j in range(h) for k in kinds]
    return ReusePlan(L, h, frozenset(slots[:n]))


@pytest.mark.parametrize("name,plan,expected", ALIAS_TABLE + [
    ("19 K heads", first_slots(("k",), 19), 19 / 288 * 100),
    ("25 V heads", first_slots(("v",), 25), 25 / 288 * 100),
    ("36 K+V slots", first_slots(KINDS, 36), 12.5),
])
def test_reuse_savings_table(name, plan, expected):
    s = savings_report(12, 12, 768, None, plan)["reuse_only"].savings_percent
    assert s == pytest.approx(expected, abs=1e-9)


def test_reuse_savings_depend_only_on_slot_count():
    rng = np.random.default_rng(0)
    slots = [(l, j, k) for l in range(1, 12) for j in range(12) for k in KINDS]
    for _ in range(20):
        pick = rng.choice(len(slots), 19, replace=False)
        plan = ReusePlan(12, 12, frozenset(slots[i] for i in pick))
        s = savings_report(12, 12, 768, None, plan)["reuse_only"].savings_fraction
        assert s == pytest.approx(19 / 288)


def test_autoencoder_and_combined_savings():
    half = {l: 384 for l in range(10)}
    plan = first_slots(KINDS, 36)
    rep = savings_report(12, 12, 768, half, plan)
    assert rep["autoencoder_only"].savings_percent == pytest.approx(10 / 12 * 50)
    # aliased slots count once, as reuse; the rest of the 10 compressed layers halve
    in_layers = sum(1 for l, _, _ in plan.slots if l < 10)
    expected = (36 + 0.5 * (10 * 24 - in_layers)) / 288
    assert rep["combined"].savings_fraction == pytest.approx(expected)


def test_int8_accounting_per_row():
    lay = CacheLayout.build(1, 2, 8, {0: 4}, None, [0])
    # K and V rows of 4 int8 elements + 6-byte header each
    assert bytes_used(lay, 3, 2, 2).total_bytes == 2 * 3 * 2 * (4 + 6)


def test_layout_validation():
    with pytest.raises(ValueError):
        CacheLayout.build(2, 4, 32, {0: 6})
    with pytest.raises(ValueError):
        CacheLayout.build(2, 4, 32, {0: 64})
    with pytest.raises(ValueError):
        CacheLayout.build(2, 4, 32, {}, None, [1])
    with pytest.raises(ValueError):
        bytes_used(CacheLayout.build(1, 1, 1), 1, 1, 3)


def test_reuse_plan_validation_and_round_trip():
    with pytest.raises(ValueError):
        ReusePlan(3, 2, frozenset({(0, 0, "k")}))
    with pytest.raises(ValueError):
        ReusePlan(3, 2, frozenset({(1, 2, "k")}))
    with pytest.raises(ValueError):
        ReusePlan(3, 2, frozenset({(1, 0, "q")}))
    p = ReusePlan(3, 2, frozenset({(1, 0, "k"), (2, 1, "v")}))
    assert ReusePlan.from_dict(p.to_dict()) == p
    assert ReusePlan.from_bitmap(p.bitmap()) == p
    assert p.live_heads(1, "k") == [1] and p.count("v") == 1


def cfg(L=3, h=2, D=8):
    return ModelConfig(n_layers=L, n_heads=h, d_model=D, d_ff=8, max_seq=32)


def fill(cache, n=5, seed=0):
    rng = np.random.default_rng(seed)
    for layer in range(cache.n_layers):
        cache.append(layer, rng.normal(size=(n, cache.d_model)), rng.normal(size=(n, cache.d_model)))


def test_identity_cache_returns_what_was_appended():
    c = KVCache(cfg())
    rng = np.random.default_rng(1)
    k, v = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    c.append(0, k[:3], v[:3])
    c.append(0, k[3], v[3])
    rk, rv = c.read(0)
    np.testing.assert_array_equal(rk.data, k.astype(np.float32))
    np.testing.assert_array_equal(rv.data, v.astype(np.float32))
    assert c.length(0) == 4 and c.length(1) == 0


def test_fully_aliased_layer_reads_source_bitwise():
    plan = ReusePlan.full(3, 2, layers=[2])
    codecs = {1: make_codec(1, 8, 2, 4, plan, rng=0)}
    c = KVCache(cfg(), codecs, plan)
    fill(c)
    for a, b in zip(c.read(2), c.read(1)):
        np.testing.assert_array_equal(a.data, b.data)
    assert c.layers[2].bytes_used == 0


def test_partial_alias_mixes_heads_transitively():
    plan = ReusePlan(3, 2, frozenset({(1, 0, "k"), (2, 0, "k"), (2, 1, "v")}))
    c = KVCache(cfg(), None, plan)
    rng = np.random.default_rng(3)
    ks = [rng.normal(size=(2, 8)).astype(np.float32) for _ in range(3)]
    vs = [rng.normal(size=(2, 8)).astype(np.float32) for _ in range(3)]
    for i in range(3):
        c.append(i, ks[i], vs[i])
    k2, v2 = c.read(2)
    np.testing.assert_array_equal(k2.data[:, :4], ks[0][:, :4])  # head 0 K: layer 2 -> 1 -> 0
    np.testing.assert_array_equal(k2.data[:, 4:], ks[2][:, 4:])
    np.testing.assert_array_equal(v2.data[:, :4], vs[2][:, :4])
    np.testing.assert_array_equal(v2.data[:, 4:], vs[1][:, 4:])


def test_aliased_read_needs_source_rows():
    c = KVCache(cfg(), None, ReusePlan.full(3, 2, layers=[1]))
    c.append(1, np.zeros((2, 8)), np.zeros((2, 8)))
    with pytest.raises(CacheConsistencyError):
        c.read(1)


def test_codec_shape_errors():
    plan = ReusePlan(3, 2, frozenset({(1, 0, "k")}))
    wrong = make_codec(1, 8, 2, 4, None, rng=0)  # sized for both heads live
    with pytest.raises(ValueError):
        KVCache(cfg(), {1: wrong}, plan)
    with pytest.raises(IndexError):
        KVCache(cfg(), {5: wrong})
    with pytest.raises(ValueError):
        KVCache(cfg(), None, ReusePlan.empty(2, 2))
    c = KVCache(cfg())
    with pytest.raises(K.T.ShapeError):
        c.append(0, np.zeros((2, 8)), np.zeros((3, 8)))


def test_int8_cache_round_trip_within_step():
    ident = Autoencoder.identity(8)
    codec = CodecSpec("autoencoder_int8", 8, ident, Autoencoder.identity(8))
    c = KVCache(cfg(L=1), {0: codec})
    rng = np.random.default_rng(4)
    k = rng.normal(size=(6, 8)) * 0.3
    c.append(0, k, k)
    back = c.read(0)[0].data
    step = (k.max(axis=1) - k.min(axis=1)) / 255
    assert np.all(np.abs(back - k) <= step[:, None] + 1e-4)


@pytest.mark.parametrize("kind", ["autoencoder", "autoencoder_int8"])
def test_memoized_reads_match_recompute(kind):
    plan = ReusePlan(3, 2, frozenset({(2, 1, "k")}))
    codecs = {l: make_codec(l, 8, 2, 4, plan, kind, rng=l) for l in (0, 2)}
    a, b = KVCache(cfg(), codecs, plan), KVCache(cfg(), codecs, plan, memoize_decoded=True)
    rng = np.random.default_rng(5)
    for step in range(4):
        for layer in range(3):
            k, v = rng.normal(size=(1 + step % 2, 8)), rng.normal(size=(1 + step % 2, 8))
            a.append(layer, k, v)
            b.append(layer, k, v)
        for layer in range(3):
            for x, y in zip(a.read(layer), b.read(layer)):
                np.testing.assert_allclose(x.data, y.data, atol=1e-6)


@pytest.mark.parametrize("kind", ["identity", "autoencoder", "autoencoder_int8"])
def test_snapshot_round_trip(tmp_path, kind):
    plan = ReusePlan(3, 2, frozenset({(1, 0, "k"), (2, 0, "v"), (2, 1, "v")}))
    codecs = {} if kind == "identity" else {l: make_codec(l, 8, 2, 4, plan, kind, rng=l) for l in (1, 2)}
    c = KVCache(cfg(), codecs, plan)
    fill(c, 7)
    path = tmp_path / "cache.bin"
    c.save(path)
    back = KVCache.load(path, codecs=codecs)
    assert back.plan == plan and len(back) == 7
    for layer in range(3):
        for x, y in zip(c.read(layer), back.read(layer)):
            np.testing.assert_array_equal(x.data, y.data)
    assert back.stored_elements() == c.stored_elements()
    if kind == "identity":
        header = path.read_bytes()
        hlen = int.from_bytes(header[6:10], "little")
        n_floats = sum(e for _, _, e, _ in c.stored_elements())
        assert len(header) == 10 + hlen + 3 * 2 * 2 + 4 * n_floats


def test_snapshot_rejects_missing_codecs(tmp_path):
    c = KVCache(cfg(), {0: make_codec(0, 8, 2, 4, rng=0)})
    fill(c, 2)
    c.save(tmp_path / "s.bin")
    with pytest.raises(ValueError):
        KVCache.load(tmp_path / "s.bin")
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        KVCache.load(tmp_path / "bad.bin")
