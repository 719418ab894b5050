"""Command-line entry point: ``ssmfuse <subcommand> [flags]``.

Exit status is 0 on success, 2 for invalid input or configuration and 1 for
runtime failures (including a failing gradient check).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ABLATIONS, MODES, RunConfig
from .errors import SsmfuseError, ValidationError

logger = logging.getLogger("ssmfuse")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def _common(p: argparse.ArgumentParser, *, ablation=False, mode=False, chunk=False) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="output directory")
    if ablation:
        p.add_argument("--ablation", choices=ABLATIONS)
    if mode:
        p.add_argument("--mode", choices=MODES)
    if chunk:
        p.add_argument("--chunk", type=int, help="scan chunk size; 0 selects the fused sequential kernel")


def _lengths(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"--lengths expects comma-separated integers, got {text!r}") from exc
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("--lengths needs positive integers")
    return vals


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssmfuse", description="Shared-transition selective SSM fusion toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("gen-data", help="generate and cache a synthetic dataset")
    _common(p, mode=True)
    p.add_argument("--n-samples", type=int)

    p = sub.add_parser("gen-questions", help="run the question-generation pipeline")
    _common(p)
    p.add_argument("--input", type=Path, help="narration CSV (id,narration,verb,noun); default: synthetic vocabulary")
    p.add_argument("--training", action="store_true", help="apply leak masking to the emitted questions")

    p = sub.add_parser("train", help="train a fusion classifier")
    _common(p, ablation=True, mode=True, chunk=True)
    p.add_argument("--data", type=Path, help="cached dataset from gen-data")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p, ablation=True, mode=True, chunk=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--force", action="store_true", help="accept a checkpoint written for another configuration")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    _common(p)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--quick", action="store_true", help="skip the architecture variants")

    p = sub.add_parser("bench", help="time the scans across sequence lengths")
    _common(p, chunk=True)
    p.add_argument("--lengths", type=_lengths, default=[1024, 2048, 4096])
    p.add_argument("--methods", default="sequential,chunked,fused")
    p.add_argument("--repeats", type=int, default=5)

    p = sub.add_parser("count", help="parameter and FLOP report")
    _common(p)
    p.add_argument("--include-encoders", action="store_true")
    return parser


def effective_config(args: argparse.Namespace) -> RunConfig:
    """Config file (or defaults) with explicit flags applied on top."""
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for flag, key in (("seed", "seed"), ("ablation", "ablation"), ("mode", "mode"), ("chunk", "chunk"),
                      ("n_samples", "n_samples")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides[key] = val
    for flag in ("out", "data", "checkpoint"):
        val = getattr(args, flag, None)
        if val is not None:
            overrides[flag] = str(val)
    return cfg.replace(**overrides) if overrides else cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
    return out


def cmd_gen_data(args, cfg: RunConfig) -> int:
    from .synth import gen_split

    out = _out_dir(cfg)
    ds = gen_split(cfg.seed, cfg.n_samples, cfg)
    path = out / "dataset.ssmf"
    ds.save(path)
    print(f"wrote {len(ds)} samples ({len(ds.split('train'))} train / {len(ds.split('val'))} val) to {path}")
    return EXIT_OK


def cmd_gen_questions(args, cfg: RunConfig) -> int:
    from . import qa
    from .synth import noun_names, verb_names

    out = _out_dir(cfg)
    if args.input:
        items = qa.read_narrations(args.input)
    else:
        items = [qa.Narration(f"{i:05d}", f"{v} {n}", v, n)
                 for i, (v, n) in enumerate((v, n) for v in verb_names(cfg.n_verbs) for n in noun_names(cfg.n_nouns))]
    client = qa.default_client()
    records = qa.run_pipeline(items, client, training=args.training)
    path = out / "questions.jsonl"
    qa.write_records(path, records)
    print(f"wrote {len(records)} records to {path} using {type(client).__name__}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    from .train import train

    out = _out_dir(cfg)
    result = train(cfg, out_dir=out)
    final = result.final()
    print(f"val verb {final['verb_acc']:.4f}  noun {final['noun_acc']:.4f}  action {final['action_acc']:.4f}  "
          f"recall@5 {final['recall5']:.4f}  ({result.seconds:.1f}s)")
    print(f"metrics: {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    from .fusion import FusionBlock
    from .synth import dataset_for
    from .train import Checkpoint, evaluate, write_csv

    out = _out_dir(cfg)
    ckpt = Checkpoint.load(args.checkpoint, expected_hash=cfg.config_hash(), force=args.force)
    block = FusionBlock.build(cfg)
    ckpt.restore(block)
    metrics = evaluate(block, dataset_for(cfg), args.split)
    fields = ("split", "loss", "verb_acc", "noun_acc", "action_acc", "recall5")
    write_csv(out / "eval.csv", fields, [[args.split] + [metrics[k] for k in fields[1:]]])
    print(",".join(fields))
    print(",".join([args.split] + [repr(metrics[k]) for k in fields[1:]]))
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .gradcheck import run_suite
    from .plotting import plot_gradcheck
    from .train import write_csv

    report = run_suite(cfg.seed, tol=args.tol, variants=not args.quick)
    print(report.to_text())
    if args.out is not None:
        out = _out_dir(cfg)
        write_csv(out / "gradcheck.csv", ("check", "rel_err", "ok"),
                  ([r["check"], r["rel_err"], int(r["ok"])] for r in report.rows))
        plot_gradcheck(report.rows, out / "gradcheck.png", args.tol)
    print(f"max relative error {report.max_error:.3e} (tolerance {args.tol:g}): {'PASS' if report.ok else 'FAIL'}")
    return EXIT_OK if report.ok else EXIT_RUNTIME


def cmd_bench(args, cfg: RunConfig) -> int:
    from .bench import BENCH_FIELDS, METHODS, run_bench
    from .plotting import plot_bench
    from .train import write_csv

    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ValidationError(f"unknown bench method(s) {bad}; choose from {METHODS}")
    rows = run_bench(args.lengths, methods, repeats=args.repeats, seed=cfg.seed, chunk=cfg.chunk or 64)
    print(",".join(BENCH_FIELDS))
    for r in rows:
        print(",".join(str(r[f]) for f in BENCH_FIELDS))
    if args.out is not None:
        out = _out_dir(cfg)
        write_csv(out / "bench.csv", BENCH_FIELDS, ([r[f] for f in BENCH_FIELDS] for r in rows))
        plot_bench(rows, out / "bench.png")
    return EXIT_OK


def cmd_count(args, cfg: RunConfig) -> int:
    from .model import count_params_flops

    report = count_params_flops(cfg, include_encoders=args.include_encoders)
    print(report.to_text())
    if args.out is not None:
        out = _out_dir(cfg)
        (out / "count.csv").write_text(report.to_csv(), encoding="utf-8")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "gen-questions": cmd_gen_questions,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
    "count": cmd_count,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args)
        return COMMANDS[args.command](args, cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SsmfuseError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
