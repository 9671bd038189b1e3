"""Sweep layouts, sizes and KV variants; write the bench table and the complexity check.

    python3 scripts/bench_sweep.py --out bench.tsv
"""

import argparse

from mtfm.bench import bench, verify_complexity
from mtfm.config import ModelConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--layouts", default="(0:1)x4,(1:1)x4,(3:1)x4,(5:1)x4,(1:0)x4")
    ap.add_argument("--sizes", default="512:16,1024:32,2048:64")
    ap.add_argument("--repeats", type=int, default=2)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", default="bench.tsv")
    args = ap.parse_args()

    sizes = [[int(v) for v in s.split(":")] for s in args.sizes.split(",")]
    result = bench(args.layouts.split(","), sizes, ("G=H", "G=1"), ModelConfig(), args.repeats, args.threads)
    with open(args.out, "w") as fh:
        fh.write(result.to_tsv())
    print(f"wrote {len(result.rows)} rows to {args.out}; per-layer attention MACs monotone: {result.monotone}")
    for c in verify_complexity(ModelConfig(), [tuple(s) for s in sizes]):
        print(f"K={c.k} N={c.n} L_T={c.l_t}: measured {c.measured:.5f} vs formula {c.predicted:.5f} (exact counts {c.exact_counts})")


if __name__ == "__main__":
    main()
