"""Command line: ``stamp {gen,train,eval,compare,ablate}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment as X
from .config import ConfigError, ExperimentConfig
from .corpus import CorpusError
from .evaluator import MeasurementError
from .kernel import KernelError, tune_allocator
from .quantizer import QuantizerError
from .trainer import TrainingDiverged

EXIT_DIVERGED = 3
EXIT_ERROR = 2


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _strs(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stamp", description="Semantic-ID recommendation with token pruning and multi-token prediction.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("config", help="experiment YAML file")
        sp.add_argument("--seed", type=int, default=None, help="override model.init_seed and train.seed")
        return sp

    with_config(sub.add_parser("gen", help="generate the dataset and fit codebooks"))
    with_config(sub.add_parser("train", help="train one run"))

    ev = sub.add_parser("eval", help="re-evaluate a trained run")
    ev.add_argument("run_dir")
    ev.add_argument("--split", choices=("val", "test"), default="test")
    ev.add_argument("--attention", type=_ints, default=[], help="comma-separated layers to export as heatmaps")

    cp = sub.add_parser("compare", help="tabulate runs against the first (baseline)")
    cp.add_argument("run_dirs", nargs="+")
    cp.add_argument("-o", "--out", default="comparison.csv")

    ab = with_config(sub.add_parser("ablate", help="module ablation and sensitivity sweeps"))
    ab.add_argument("--no-variants", action="store_true", help="skip the Base/SAP/MAP/STAMP ablation")
    ab.add_argument("--alpha", type=_floats, default=[], help="e.g. 0.25,0.333,0.5")
    ab.add_argument("--l-prune", type=_ints, default=[], help="e.g. 1,2,3")
    ab.add_argument("--strategy", type=_strs, default=[], help="e.g. sap,l2,attention_only,max_pool,avg_pool")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    tune_allocator()
    try:
        if args.command == "gen":
            out = X.cmd_gen(_load(args))
            print(out / "manifest.json")
        elif args.command == "train":
            res = X.cmd_train(_load(args))
            print(res.run_dir)
        elif args.command == "eval":
            rep = X.cmd_eval(args.run_dir, args.split, args.attention)
            print(rep.to_json())
        elif args.command == "compare":
            X.cmd_compare(args.run_dirs, args.out)
            print(Path(args.out).read_text(), end="")
        elif args.command == "ablate":
            out = X.cmd_ablate(_load(args), not args.no_variants, args.alpha, args.l_prune, args.strategy)
            print(out)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, CorpusError, QuantizerError, KernelError, MeasurementError, X.ComparisonError, X.ArtifactError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
