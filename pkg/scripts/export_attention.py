"""Dump per-layer attention weights of one user sample to a text file.

    python3 scripts/export_attention.py --checkpoint model.ckpt --data dataset.jsonl --user 0
"""

import argparse
from pathlib import Path

import torch

from mtfm.data import deserialize_dataset
from mtfm.engine import load_checkpoint
from mtfm.hta import dump_trace


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--data", required=True)
    ap.add_argument("--user", type=int, default=0)
    ap.add_argument("--out", default="attention.txt")
    args = ap.parse_args()

    model, _ = load_checkpoint(args.checkpoint)
    data = deserialize_dataset(Path(args.data).read_bytes())
    sample = next(s for s in data.samples if s.user_id == args.user)
    trace = []
    with torch.no_grad():
        model.encode([sample], trace)
    Path(args.out).write_text(dump_trace(trace))
    print(f"wrote {len(trace)} layers for user {args.user} to {args.out}")


if __name__ == "__main__":
    main()
