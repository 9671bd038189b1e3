"""Command-line entry point: ``mtfm {gen-data,train,eval,infer,bench,verify}``.

Precedence: command-line flags > ``--config`` file > built-in defaults.
Verbosity follows the ``MTFM_LOG`` environment variable (e.g. ``MTFM_LOG=debug``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import yaml

from mtfm.config import RunConfig, load_generator_config, parse_layout, run_config_from_dict
from mtfm.errors import ConfigurationError, MTFMError

log = logging.getLogger("mtfm")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    with p.open("r", encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise UsageError(f"{path}: cannot parse config: {exc}") from exc
    if isinstance(raw, dict) and raw and not set(raw) & {"data", "model", "train", "bench"}:
        # flat generator config (n_scenarios, n_users, ...)
        return RunConfig(data=load_generator_config(p))
    return run_config_from_dict(raw)


def _apply_common(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg.data.seed = args.seed
        cfg.train.seed = args.seed
    if args.threads is not None:
        cfg.train.threads = args.threads
    if args.precision is not None:
        cfg.train.precision = args.precision
        cfg.bench.precision = args.precision
    return cfg


def _write(path: str | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _read_dataset(path: str):
    from mtfm.data import deserialize_dataset

    p = Path(path)
    if not p.is_file():
        raise UsageError(f"dataset not found: {path}")
    return deserialize_dataset(p.read_bytes())


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    from mtfm.data import compression_report, generate_dataset, serialize_dataset

    if args.users is not None:
        cfg.data.n_users = args.users
    if args.scenarios is not None:
        cfg.data.n_scenarios = args.scenarios
    cfg.data.validate()
    data = generate_dataset(cfg.data)
    payload = serialize_dataset(data)
    out = Path(args.out or "dataset.jsonl")
    out.write_bytes(payload)
    n_raw = sum(len(s.exposures) for s in data.samples)
    print(f"wrote {len(data)} user samples to {out} ({n_raw} exposures)")
    print(compression_report(n_raw, data.samples))
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    import torch

    from mtfm.engine import save_checkpoint, train

    if args.steps is not None:
        cfg.train.steps = args.steps
    if args.lr is not None:
        cfg.train.lr = args.lr
    if args.batch_size is not None:
        cfg.train.batch_size = args.batch_size
    if args.layout is not None:
        k, p, b = parse_layout(args.layout)
        cfg.model = replace(cfg.model, target_layers=k, full_layers=p, blocks=b)
    cfg.validate()
    data = _read_dataset(args.data)
    result = train(data, cfg.model, cfg.train)
    out = Path(args.out or "model.ckpt")
    final_auc = result.evals[-1]["ctr_auc"] if result.evals else None
    save_checkpoint(out, result.model, {"train": asdict(cfg.train), "final_ctr_auc": final_auc})
    history = {
        "config": {"model": asdict(cfg.model), "train": asdict(cfg.train)},
        "threads": torch.get_num_threads(),
        "losses": result.losses,
        "evals": [{"step": e["step"], "ctr_auc": e["ctr_auc"]} for e in result.evals],
        "seconds": result.seconds,
    }
    Path(str(out) + ".history.json").write_text(json.dumps(history, indent=1) + "\n")
    print(f"trained {cfg.model.label} for {cfg.train.steps} steps in {result.seconds:.1f}s; held-out CTR AUC {final_auc}")
    print(f"checkpoint: {out}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    from mtfm.bench import pruning_report
    from mtfm.engine import evaluate, load_checkpoint, split_users
    from mtfm.heads import format_table

    model, meta = load_checkpoint(args.checkpoint)
    data = _read_dataset(args.data)
    samples = data.samples
    if not args.all_users:
        train_cfg = meta.get("extra", {}).get("train", {})
        _, samples = split_users(samples, train_cfg.get("holdout_fraction", 0.1), train_cfg.get("seed", cfg.train.seed))
    report = evaluate(model, samples)
    text = f"# threads {cfg.train.threads}\n" + format_table(report["table"]) + "\n"
    if args.prune:
        pr = pruning_report(model, samples)
        text += f"\n# 2:4 pruning: {pr['layers']} projections, valid pattern {pr['valid_2_4']}, covered sparsity {pr['covered_sparsity']:.2f}\n"
        text += format_table([{k: r[k] for k in ("scenario", "task", "auc_dense", "auc_pruned", "delta")} for r in pr["rows"]]) + "\n"
    _write(args.out, text)
    return EXIT_OK


def cmd_infer(args, cfg: RunConfig) -> int:
    from mtfm.bench import extract_subgraph, infer_request
    from mtfm.data import InferenceRequest, request_from_json
    from mtfm.engine import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    if args.requests:
        lines = Path(args.requests).read_text(encoding="utf-8").splitlines()
        requests = [request_from_json(json.loads(line)) for line in lines if line.strip()]
    elif args.data:
        requests = []
        for sample in _read_dataset(args.data).samples:
            groups: dict[tuple[int, int], list] = {}
            for e in sample.exposures:
                groups.setdefault((e.scenario_id, e.timestamp), []).append(replace(e, labels={}))
            for (s, _), cands in sorted(groups.items()):
                requests.append(
                    InferenceRequest(sample.user_id, s, sample.historical_sequences, sample.realtime_sequences, tuple(cands))
                )
    else:
        raise UsageError("infer needs --requests or --data")
    if args.scenario is not None:
        requests = [r for r in requests if r.scenario_id == args.scenario]
    subgraphs = {}
    lines = []
    for req in requests:
        if req.scenario_id not in subgraphs:
            subgraphs[req.scenario_id] = extract_subgraph(model, req.scenario_id)
        for r in infer_request(req, subgraphs[req.scenario_id]):
            lines.append(
                json.dumps(
                    {"user_id": r.user_id, "scenario": r.scenario_id, "candidate": r.exposure_index, "task": r.task, "p": r.probability},
                    sort_keys=True,
                )
            )
    _write(args.out, "\n".join(lines) + ("\n" if lines else ""))
    log.info("scored %d requests", len(requests))
    return EXIT_OK


def cmd_bench(args, cfg: RunConfig) -> int:
    from mtfm.bench import bench
    from mtfm.engine import dtype_of

    b = cfg.bench
    if args.layouts:
        b.configs = [s.strip() for s in args.layouts.split(",")]
    if args.sizes:
        b.sizes = [[int(v) for v in pair.split(":")] for pair in args.sizes.split(",")]
    if args.kv:
        b.kv_variants = [s.strip() for s in args.kv.split(",")]
    if args.repeats is not None:
        b.repeats = args.repeats
    b.validate()
    result = bench(b.configs, b.sizes, b.kv_variants, cfg.model, b.repeats, cfg.train.threads, dtype_of(b.precision))
    _write(args.out, result.to_tsv())
    print(f"# monotone per-layer attention MACs: {result.monotone}", file=sys.stderr)
    return EXIT_OK if result.monotone else EXIT_RUNTIME


def cmd_verify(args, cfg: RunConfig) -> int:
    import torch

    from mtfm.verify import SUITES, run_suites

    torch.set_num_threads(cfg.train.threads)
    names = ["masks"] if args.masks else (args.suite or list(SUITES))
    unknown = set(names) - set(SUITES)
    if unknown:
        raise UsageError(f"unknown suite(s): {', '.join(sorted(unknown))}")
    results = run_suites(names)
    n_pass = sum(r.passed for r in results)
    print(f"{n_pass}/{len(results)} suites passed (threads={cfg.train.threads})")
    return EXIT_OK if n_pass == len(results) else EXIT_RUNTIME


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--precision", choices=("f32", "f64"))
    common.add_argument("--out", help="output path (stdout for reports when omitted)")

    parser = argparse.ArgumentParser(prog="mtfm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic multi-scenario dataset")
    p.add_argument("--users", type=int)
    p.add_argument("--scenarios", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--layout", help="block layout, e.g. '(3:1)x4'")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="per-scenario, per-task AUC/GAUC report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--all-users", action="store_true", help="evaluate every user, not only the held-out split")
    p.add_argument("--prune", action="store_true", help="also report AUC after 2:4 pruning")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="score requests with scenario subgraphs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--requests", help="JSON-lines inference requests")
    p.add_argument("--data", help="derive requests from a dataset instead")
    p.add_argument("--scenario", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", parents=[common], help="MAC counts and throughput per layout")
    p.add_argument("--layouts", help="comma-separated, e.g. '(0:1)x4,(3:1)x4'")
    p.add_argument("--sizes", help="comma-separated N:L_T pairs, e.g. '512:16,1024:32'")
    p.add_argument("--kv", help="comma-separated subset of G=H,G=1")
    p.add_argument("--repeats", type=int)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", parents=[common], help="run the oracle suites")
    p.add_argument("--masks", action="store_true", help="only the mask oracle comparison")
    p.add_argument("--suite", action="append", help="run only this suite (repeatable)")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get("MTFM_LOG", "WARNING").upper(), logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _apply_common(_load_config(args.config), args)
        cfg.validate()
        return args.func(args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mtfm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigurationError as exc:
        print(f"mtfm {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MTFMError, OSError, ValueError) as exc:
        print(f"mtfm {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def run(argv: list[str]) -> int:
    """Exit code of ``mtfm`` for ``argv`` (argparse usage errors included)."""
    try:
        return main(argv)
    except SystemExit as exc:
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
