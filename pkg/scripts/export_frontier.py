"""Write max-context-vs-batch frontiers for a GPT-2-Medium-shaped model as CSV.

    python scripts/export_frontier.py --budget-gb 48 --out frontier.csv
"""

import argparse
import sys

from kvcar.planner import GPT2_MEDIUM, MemoryQuery, Scheme, frontier


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--budget-gb", type=float, default=48.0, help="device memory in GiB")
    ap.add_argument("--overhead-gb", type=float, default=0.0, help="fixed runtime overhead in GiB")
    ap.add_argument("--compression", type=float, nargs="+", default=[0.0, 0.25, 0.5, 0.75])
    ap.add_argument("--batches", type=int, nargs="+", default=[1, 2, 4, 8, 16, 32, 64, 128])
    ap.add_argument("--out", default=None, help="CSV path (stdout if omitted)")
    args = ap.parse_args()

    q = MemoryQuery(budget_bytes=int(args.budget_gb * 2**30), overhead_bytes=int(args.overhead_gb * 2**30),
                    **GPT2_MEDIUM)
    schemes = [Scheme.uniform(c, q.n_layers, q.n_heads, q.d_model, name="identity" if c == 0 else f"{c:g}")
               for c in args.compression]
    f = frontier(q, args.batches, schemes)
    if args.out:
        f.write_csv(args.out)
        print(f"wrote {sum(len(v) for v in f.curves.values())} rows to {args.out}", file=sys.stderr)
    else:
        sys.stdout.write(f.to_csv())


if __name__ == "__main__":
    main()
