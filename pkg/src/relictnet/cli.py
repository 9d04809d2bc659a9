"""Command-line entry point: ``relictnet <command> --config run.yaml``.

Exit codes: 0 ok, 2 configuration error, 3 missing upstream artifact,
4 runtime failure. Every command prints one JSON summary line on stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import config as config_mod
from .config import ConfigError
from .pipeline import ConfigHashMismatch, MissingArtifactError, Pipeline
from .training import Combination, CombinationError

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4

COMMANDS = ("synth", "prepare-labeled", "prepare-cluster", "augment", "pretrain",
            "train", "predict", "evaluate", "grid")


def _k_arg(value: str):
    return None if value in ("na", "none") else int(value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relictnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, select=False, seeds=False, ks=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", "-c", required=True, help="pipeline YAML document")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a scalar config field, e.g. finetune.epochs=10")
        p.add_argument("--allow-any-k", action="store_true", help="accept k outside {2,4,...,12}")
        p.add_argument("-v", "--verbose", action="store_true")
        if ks:
            p.add_argument("--k", type=int, action="append", help="cluster counts (default: config k_values)")
        if seeds:
            p.add_argument("--seed", type=int, action="append",
                           help="training seed(s) (default: config grid_seeds)")
        if select:
            p.add_argument("--framework", action="append", choices=("standard", "proposed"))
            p.add_argument("--arch", action="append", choices=("unet", "fpn", "linknet"))
            p.add_argument("--k", type=_k_arg, action="append", help="cluster count, or 'na'")
            p.add_argument("--dataset", action="append", help="LD30, LD50, ...")
            p.add_argument("--force", action="store_true", help="ignore config hash mismatches")
        return p

    add("synth", "generate synthetic scenes, scar polygons and masks")
    add("prepare-labeled", "rasterize landslides, split train/test, tile and label")
    add("prepare-cluster", "k-means pseudo-labels, cluster dataset and balancing", ks=True)
    a = add("augment", "flip-augment positive train tiles into LD datasets")
    a.add_argument("--dataset", action="append", help="LD30, LD50, ...")
    add("pretrain", "pre-train the encoder as a cluster classifier", seeds=True, ks=True)
    add("train", "fine-tune segmenters for the selected combinations", select=True, seeds=True)
    add("predict", "predict the labeled scene with trained checkpoints", select=True, seeds=True)
    add("evaluate", "precision/recall on the test area", select=True, seeds=True)
    add("grid", "train (where needed) and evaluate every combination", select=True, seeds=True)
    return parser


def _selected(pipe: Pipeline, args) -> list[Combination]:
    """Numeric --k values narrow the proposed rows; ``--k na`` alone keeps only standard rows."""
    ks = [k for k in (args.k or []) if k is not None] or None
    frameworks = args.framework
    if args.k and ks is None:
        frameworks = ["standard"]
    return pipe.grid_combinations(frameworks, args.arch, ks, args.dataset)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    summary = {"command": args.command}
    try:
        overrides = list(args.overrides)
        if args.allow_any_k:
            overrides.append("allow_any_k=true")
        cfg = config_mod.load(args.config, overrides)
        pipe = Pipeline(cfg)
        summary["config_hash"] = pipe.hash
        seeds = getattr(args, "seed", None) or cfg.grid_seeds
        if args.command == "synth":
            summary.update(pipe.synth())
        elif args.command == "prepare-labeled":
            summary.update(pipe.prepare_labeled())
        elif args.command == "prepare-cluster":
            summary.update(pipe.prepare_cluster(args.k))
        elif args.command == "augment":
            summary.update(pipe.augment(args.dataset))
        elif args.command == "pretrain":
            out = {}
            for seed in seeds:
                for k in args.k or cfg.k_values:
                    out[f"seed{seed}/k{k}"] = pipe.pretrain(k, seed).checksum()
            summary["checksums"] = out
        elif args.command == "grid":
            summary.update(pipe.grid(_selected(pipe, args), seeds))
        else:
            combos = _selected(pipe, args)
            out = {}
            for seed in seeds:
                for combo in combos:
                    key = f"seed{seed}/{combo.relpath().as_posix()}"
                    if args.command == "train":
                        out[key] = pipe.train(combo, seed, args.force).checksum()
                    elif args.command == "predict":
                        out[key] = pipe.predict(combo, seed, args.force)
                    else:
                        out[key] = pipe.evaluate(combo, seed, args.force)
            summary["results"] = out
    except (ConfigError, CombinationError) as exc:
        return _fail(summary, "config_error", exc, EXIT_CONFIG)
    except MissingArtifactError as exc:
        summary["producer"] = exc.command
        return _fail(summary, "missing_dependency", exc, EXIT_MISSING)
    except ConfigHashMismatch as exc:
        return _fail(summary, "config_hash_mismatch", exc, EXIT_CONFIG)
    except Exception as exc:  # runtime failure of any step
        logging.getLogger("relictnet").debug("runtime failure", exc_info=True)
        return _fail(summary, "runtime_error", exc, EXIT_RUNTIME)
    summary["status"] = "ok"
    print(json.dumps(summary, sort_keys=True, default=str))
    return EXIT_OK


def _fail(summary, status, exc, code) -> int:
    summary.update(status=status, error=str(exc))
    print(json.dumps(summary, sort_keys=True, default=str))
    print(f"error: {exc}", file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
