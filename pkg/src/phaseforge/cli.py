"""Command-line entry point: ``phaseforge <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigurationError, ProviderError, TrainingError

logger = logging.getLogger("phaseforge")


def _read_options(path) -> dict:
    """Optional per-command settings file (TOML or JSON)."""
    if path is None:
        return {}
    path = Path(path)
    if path.suffix == ".toml":
        import tomli

        return tomli.loads(path.read_text())
    return json.loads(path.read_text())


def cmd_train(args) -> int:
    from .trainer import Trainer, load_config

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    cfg = load_config(args.config, overrides=overrides)
    result = Trainer(cfg, resume=not args.no_resume).train()
    print(json.dumps({"best": str(result.best_checkpoint), "last": str(result.last_checkpoint),
                      "metrics": str(result.metrics_path)}))
    return 0


def cmd_enhance(args) -> int:
    from .evaluation import enhance

    opts = _read_options(args.config)
    checkpoint = args.checkpoint or opts.get("checkpoint")
    in_dir = args.input or opts.get("input")
    if not checkpoint or not in_dir or not args.out:
        raise ConfigurationError("enhance needs --checkpoint, --in and --out")
    report = enhance(checkpoint, in_dir, args.out)
    for name, err in report.errors.items():
        print(f"error: {name}: {err}", file=sys.stderr)
    print(f"wrote {len(report.written)} files to {args.out}")
    return 0 if not report.errors else 2


def cmd_evaluate(args) -> int:
    from .evaluation import NATIVE_METRICS, evaluate, evaluate_dirs, load_adapters

    opts = _read_options(args.config)
    metrics = args.metrics.split(",") if args.metrics else opts.get("metrics", list(NATIVE_METRICS))
    adapters_path = args.adapters or opts.get("adapters")
    adapters = load_adapters(adapters_path) if adapters_path else {}
    if args.estimates:
        result = evaluate_dirs(args.references, args.estimates, metrics, adapters)
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            (Path(args.out) / "metrics.json").write_text(json.dumps(result.to_dict(), indent=2))
    else:
        checkpoint = args.checkpoint or opts.get("checkpoint")
        manifest = args.manifest or opts.get("manifest")
        if not checkpoint or not manifest:
            raise ConfigurationError("evaluate needs --checkpoint and --manifest "
                                     "(or --references with --estimates)")
        result = evaluate(checkpoint, manifest, metrics, adapters, split=args.split, out_dir=args.out)
    print(json.dumps(result.summary, indent=2))
    return 0


def cmd_layer_analysis(args) -> int:
    from .experiments import layer_analysis

    opts = _read_options(args.config)
    if args.steps is not None:
        opts["steps"] = args.steps
    if args.manifest is not None:
        opts["manifest"] = args.manifest
    out = layer_analysis(args.out or "runs/layer-analysis", seed=args.seed or 0, **opts)
    print((Path(args.out or "runs/layer-analysis") / "table2.md").read_text())
    print("learned weights:", json.dumps({str(k): round(v, 4) for k, v in out["weights"].items()}))
    return 0


def cmd_synth_data(args) -> int:
    from .data import generate_dataset

    opts = _read_options(args.config)
    for key in ("num_utterances", "duration"):
        if getattr(args, key) is not None:
            opts[key] = getattr(args, key)
    if args.unpaired:
        opts["paired"] = False
    manifest = generate_dataset(args.out or "data/synthetic", seed=args.seed or 0, **opts)
    print(manifest)
    return 0


def cmd_report(args) -> int:
    from .report import report

    opts = _read_options(args.config)
    db = args.db or opts.get("db")
    if not db:
        raise ConfigurationError("report needs --db")
    weights = None
    if args.weights:
        weights = {int(k): float(v) for k, v in json.loads(Path(args.weights).read_text()).items()}
    written = report(db, args.out or "reports", metrics=opts.get("metrics"), layer_weights=weights)
    for path in written.values():
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phaseforge",
                                     description="Speech enhancement with phonetic features.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML or JSON settings file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.set_defaults(func=func)
        return p

    p = command("train", cmd_train, "train an enhancer")
    p.add_argument("--no-resume", action="store_true", help="ignore an existing checkpoint")

    p = command("enhance", cmd_enhance, "enhance a folder of WAV files")
    p.add_argument("--checkpoint")
    p.add_argument("--in", dest="input", help="folder of noisy WAVs")

    p = command("evaluate", cmd_evaluate, "score a checkpoint or a folder of estimates")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--split", default=None)
    p.add_argument("--metrics", help="comma-separated, e.g. SI-SNR,LSD,PESQ")
    p.add_argument("--adapters", help="JSON file mapping metric name -> command")
    p.add_argument("--references", help="folder of clean WAVs (with --estimates)")
    p.add_argument("--estimates", help="folder of enhanced WAVs")

    p = command("layer-analysis", cmd_layer_analysis, "sweep phonetic layer selections")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--manifest", default=None)

    p = command("synth-data", cmd_synth_data, "generate a synthetic dataset and manifest")
    p.add_argument("--num-utterances", type=int, default=None)
    p.add_argument("--duration", type=float, default=None)
    p.add_argument("--unpaired", action="store_true", help="store noise + SNR instead of mixtures")

    p = command("report", cmd_report, "render the settings and layer-sweep tables")
    p.add_argument("--db", help="results CSV")
    p.add_argument("--weights", help="JSON of learned layer weights for the chart")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, ProviderError, TrainingError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
