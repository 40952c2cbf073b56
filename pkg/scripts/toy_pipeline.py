"""End-to-end run on the synthetic word corpus: pretrain, fit autoencoders on
alternate layers, finetune them jointly, then add head reuse.

    python scripts/toy_pipeline.py [--layers 4] [--seed 0]
"""

import argparse

from kvcar import corpus as C
from kvcar.evaluation import perplexity
from kvcar.kvcache import savings_report
from kvcar.model import ModelConfig, TransformerModel
from kvcar.training import (TrainConfig, collect_head_stats, finetune_reuse, plan_from_percentile, pretrain,
                            train_ae_stage1, train_ae_stage2)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--layers", type=int, default=4)
    ap.add_argument("--d-model", type=int, default=32)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--corpus-kb", type=int, default=64)
    ap.add_argument("--reuse-percentile", type=float, default=25.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    corp = C.from_bytes(C.word_text(args.corpus_kb * 1024, seed=args.seed), seed=args.seed)
    cfg = ModelConfig(n_layers=args.layers, n_heads=args.heads, d_model=args.d_model, d_ff=2 * args.d_model,
                      max_seq=64)
    m = TransformerModel(cfg, seed=args.seed)
    pretrain(m, corp.train, TrainConfig(lr=0.5, epochs=3, seed=args.seed))

    def ppl(codecs=None, plan=None):
        return perplexity(m, corp.heldout, 32, codecs, plan, cached=True, max_windows=64)

    base = ppl()
    print(f"baseline perplexity {base:.4f}")

    selected = tuple(range(1, cfg.n_layers, 2))
    latent = cfg.d_model // 2
    codecs = {}
    for layer in selected:
        r = train_ae_stage1(m, layer, corp.train, TrainConfig(lr=0.3, epochs=2, seed=args.seed), latent_dim=latent,
                            eval_tokens=corp.heldout)
        codecs[layer] = r.codec
        print(f"stage 1 layer {layer}: recon L1 {r.recon_init:.4f} -> {r.recon_final:.4f}")
    s2 = train_ae_stage2(m, codecs, corp.train,
                         TrainConfig(lr=0.3, l1_scale=0.1, selected_layers=selected, seed=args.seed),
                         eval_tokens=corp.heldout)
    print(f"stage 2: loss {s2.start_loss:.4f} -> {s2.end_loss:.4f}")
    for kind in ("autoencoder", "autoencoder_int8"):
        cs = {l: c.with_kind(kind) for l, c in s2.codecs.items()}
        rep = savings_report(cfg.n_layers, cfg.n_heads, cfg.d_model, {l: latent for l in cs}, None,
                             kind == "autoencoder_int8")
        print(f"{kind:<17} perplexity {ppl(cs):.4f}, kv savings {100 * rep['combined'].savings_fraction:.2f}%")

    stats = collect_head_stats(m, corp.train)
    plan = plan_from_percentile(stats, args.reuse_percentile)
    res = finetune_reuse(m, plan, corp.train, TrainConfig(lr=0.1, l1_scale=0.1, seed=args.seed),
                         eval_tokens=corp.heldout)
    rep = savings_report(cfg.n_layers, cfg.n_heads, cfg.d_model, None, plan)
    print(f"reuse of {len(plan)} slots: CE {res.start_ce:.4f} -> {res.end_ce:.4f}, "
          f"perplexity {ppl(plan=plan):.4f}, kv savings {100 * rep['reuse_only'].savings_fraction:.2f}%")


if __name__ == "__main__":
    main()
