"""Command-line entry point: ``flp meta-train | evaluate | analyze | verify-universality``.

Environment variables: ``FLP_THREADS`` (evaluation worker processes) and
``FLP_DATA_DIR`` (Omniglot root). Nothing else is read from the environment.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import subprocess
import sys
from importlib import metadata
from pathlib import Path

import numpy as np
import yaml

from . import analysis
from .checkpoint import CheckpointError, load_checkpoint
from .config import DEFAULT_PRESET, PRESETS, TASKS, TrainConfig, dump_config, from_mapping
from .meta import eval_episodes, evaluate, lifetime_metric, meta_train, metric_name, run_lifetime
from .universality import ConstructionConfig, verify

ANALYSES = ("probe", "interference", "alignment", "magnitudes")

log = logging.getLogger("flp")


def _version() -> str:
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{version}+{rev}" if rev else version


def write_manifest(out: Path, cfg: TrainConfig | None, argv: list[str], **extra) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": ["flp", *argv],
        "config": cfg.to_dict() if cfg else None,
        "config_hash": cfg.hash() if cfg else None,
        "seed": cfg.seed if cfg else None,
        "version": _version(),
        "output_dir": str(out.resolve()),
        **extra,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = yaml.safe_load(value)
    return out


def build_config(args: argparse.Namespace) -> TrainConfig:
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file {path} not found")
        mapping = yaml.safe_load(path.read_text()) or {}
    else:
        mapping = {}
    if args.preset:
        mapping["preset"] = args.preset
    elif not args.config:
        mapping["preset"] = DEFAULT_PRESET[args.task or "sine"]
    flags = {
        "task": args.task,
        "learner": args.learner,
        "n_plastic": args.plastic_layers,
        "ordering": args.ordering,
        "seed": args.seed,
        "init_from": args.init_from,
        "n_meta_epochs": args.epochs,
        "rule": args.rule,
    }
    mapping.update({k: v for k, v in flags.items() if v is not None})
    mapping.update(_parse_set(args.set))
    return from_mapping(mapping)


# subcommands ---------------------------------------------------------------


def cmd_meta_train(args: argparse.Namespace, argv: list[str]) -> int:
    cfg = build_config(args)
    out = Path(args.out)
    write_manifest(out, cfg, argv)
    dump_config(cfg, out / "config.yaml")
    result = meta_train(cfg, out, resume=args.resume, stop_at=args.stop_at)
    print(f"trained {result.checkpoint.step} meta-steps; checkpoint at {out / 'checkpoint.flp'}")
    return 0


def _load(path: str):
    ckpt = load_checkpoint(path)
    if ckpt.config is None:
        raise CheckpointError(f"checkpoint {path} carries no config")
    return ckpt, TrainConfig(**ckpt.config)


def _out_dir(args, ckpt_path: str) -> Path:
    if args.out:
        return Path(args.out)
    p = Path(ckpt_path)
    return p if p.is_dir() else p.parent


def cmd_evaluate(args: argparse.Namespace, argv: list[str]) -> int:
    ckpt, cfg = _load(args.checkpoint)
    ordering = args.ordering or cfg.ordering
    out = _out_dir(args, args.checkpoint)
    out.mkdir(parents=True, exist_ok=True)
    mean, err, values = evaluate(ckpt, args.lifetimes, ordering, cfg)
    name = metric_name(cfg)
    path = out / f"eval_{ordering}.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("lifetime", "metric", "value"))
        w.writerows((i, name, repr(float(v))) for i, v in enumerate(values))
    print(f"{name} {mean:.6g} ± {err:.3g} over {len(values)} {ordering} lifetimes -> {path}")
    return 0


def cmd_analyze(args: argparse.Namespace, argv: list[str]) -> int:
    ckpt, cfg = _load(args.checkpoint)
    meta = ckpt.meta
    out = _out_dir(args, args.checkpoint)
    out.mkdir(parents=True, exist_ok=True)
    which = ANALYSES if args.which == "all" else (args.which,)
    for name in which:
        if name == "probe":
            eps = eval_episodes(cfg, args.episodes, "iid")
            rec = analysis.feature_probe(meta, eps, args.probe_epochs, lifetime_metric)
            path = analysis.write_csv([rec], out / "probe.csv")
        elif name == "interference":
            by_t: dict[int, list[float]] = {}
            for ep in eval_episodes(cfg, args.episodes, "continual"):
                trace = run_lifetime(meta, ep).trace
                for r in analysis.interference(trace, meta, ep):
                    by_t.setdefault(r.t, []).append(r.drift)
            recs = [analysis.InterferenceRecord(t, float(np.mean(v))) for t, v in sorted(by_t.items())]
            path = analysis.write_csv(recs, out / "interference.csv", analysis.InterferenceRecord)
        else:
            ep = eval_episodes(cfg, 1, args.ordering or cfg.ordering)[0]
            trace = run_lifetime(meta, ep).trace
            if name == "alignment":
                recs = analysis.lifetime_alignment(trace, meta, ep, use_rates=args.per_weight_rates)
                path = analysis.write_csv(recs, out / "alignment.csv", analysis.AlignmentRecord)
            else:
                recs = analysis.update_magnitudes(trace)
                path = analysis.write_csv(recs, out / "magnitudes.csv", analysis.MagnitudeRecord)
        print(f"{name} -> {path}")
    return 0


def cmd_verify_universality(args: argparse.Namespace, argv: list[str]) -> int:
    cfg = ConstructionConfig(J=args.J, d=args.d, K=args.K, alpha=args.alpha, rule=args.rule, eps=args.eps)
    report = verify(cfg, args.trials, args.seed)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0 if report["recovery_rate"] == 1.0 else 1


# parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("meta-train", help="meta-train a learner")
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--learner", choices=("flp", "gradient"))
    p.add_argument("--plastic-layers", type=int)
    p.add_argument("--ordering", choices=("iid", "continual"))
    p.add_argument("--rule", choices=("oja", "hebb"))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, help="number of meta-training episodes")
    p.add_argument("--init-from", help="checkpoint whose forward weights initialize this run")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-at", type=int, help="stop after this meta-step")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config field")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on held-out lifetimes")
    p.add_argument("checkpoint")
    p.add_argument("--lifetimes", type=int, default=50)
    p.add_argument("--ordering", choices=("iid", "continual"))
    p.add_argument("--out", help="directory for the CSV (default: next to the checkpoint)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="run diagnostics on a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--which", required=True, choices=(*ANALYSES, "all"))
    p.add_argument("--episodes", type=int, default=10, help="lifetimes for probe and interference")
    p.add_argument("--probe-epochs", type=int, default=1000)
    p.add_argument("--ordering", choices=("iid", "continual"))
    p.add_argument(
        "--per-weight-rates", action="store_true",
        help="compare against the rate-scaled gradient (gradient learner)",
    )
    p.add_argument("--out", help="directory for the CSVs (default: next to the checkpoint)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("verify-universality", help="round-trip test of the paired-layer construction")
    p.add_argument("--J", type=int, default=3)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--K", type=int, default=3)
    p.add_argument("--alpha", type=float, default=1e-4)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--rule", choices=("hebb", "oja"), default="oja")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_verify_universality)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
    )
    try:
        return args.func(args, argv)
    except (FileNotFoundError, CheckpointError, KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        if isinstance(exc, FileNotFoundError) and args.command == "meta-train":
            parser.print_usage(sys.stderr)
        print(f"flp {args.command}: error: {msg}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any failure maps to a nonzero exit
        print(f"flp {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
