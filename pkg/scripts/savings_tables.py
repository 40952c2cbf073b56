"""Print KV savings for the standard reuse and autoencoder configurations.

    python scripts/savings_tables.py [--P 2]
"""

import argparse

from kvcar.kvcache import KINDS, ReusePlan, savings_report


def first_slots(L, h, kinds, n, layers=None):
    layers = range(1, L) if layers is None else layers
    slots = [(l, j, k) for l in layers for j in range(h) for k in kinds]
    if n > len(slots):
        raise ValueError(f"only {len(slots)} slots available")
    return ReusePlan(L, h, frozenset(slots[:n]))


def row(name, stats):
    return f"  {name:<34} {100 * stats.savings_fraction:8.3f}%"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--P", type=int, default=2, choices=(1, 2, 4))
    args = ap.parse_args()

    L, h, D = 12, 12, 768
    alternate = range(1, L, 2)
    print(f"head reuse, L={L} h={h}")
    for name, plan in [
        ("K and V on alternate layers", ReusePlan.full(L, h, layers=alternate)),
        ("K on alternate layers", ReusePlan.full(L, h, layers=alternate, kinds=("k",))),
        ("V on alternate layers", ReusePlan.full(L, h, layers=alternate, kinds=("v",))),
        ("19 K heads", first_slots(L, h, ("k",), 19)),
        ("25 V heads", first_slots(L, h, ("v",), 25)),
        ("36 K+V slots", first_slots(L, h, KINDS, 36)),
    ]:
        print(row(name, savings_report(L, h, D, plan=plan, P=args.P)["reuse_only"]))

    print("\nautoencoders at d = D/2")
    for n_layers, n_ae in [(22, 11), (22, 22), (22, 5), (22, 6), (12, 10)]:
        rep = savings_report(n_layers, h, D, {l: D // 2 for l in range(n_ae)}, P=args.P)
        print(row(f"{n_ae} of {n_layers} layers", rep["autoencoder_only"]))

    print("\ncombined, L=12: 10 layers at d = D/2 holding 36 aliased slots")
    half = {l: D // 2 for l in range(2, L)}
    rep = savings_report(L, h, D, half, first_slots(L, h, KINDS, 36, layers=range(2, L)), P=args.P)
    for name, stats in rep.items():
        print(row(name, stats))
    rep = savings_report(L, h, D, half, None, quantized=True, P=args.P)
    print(row("same layers with int8 storage", rep["autoencoder_only"]))


if __name__ == "__main__":
    main()
