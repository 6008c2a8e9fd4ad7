"""Command-line entry point: ``python -m toothseg <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags, missing
inputs, malformed config).
"""

import argparse
import logging
import sys
from pathlib import Path

from .config import Config, load_config
from .data.formats import FormatError
from .data.mesh import IngestionError

USAGE_ERROR = 2
RUNTIME_ERROR = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults are used when omitted)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--mirror-categories", action="store_true", help="map 21-28 onto categories 1-8")
    common.add_argument("--no-boundary-loss", action="store_true", help="train without the boundary loss")
    common.add_argument("--nms-iou", type=float, default=None)
    common.add_argument("--graph-k", type=int, default=None)
    common.add_argument("--lambda-smooth", type=float, default=None)

    parser = _Parser(prog="toothseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("prepare", parents=[common], help="ingest OBJ+JSON scans into a processed corpus")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--points", type=int, default=None)

    p = sub.add_parser("synth", parents=[common], help="write synthetic arches as OBJ+JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--points", type=int, default=2048)

    p = sub.add_parser("train", parents=[common], help="train on a processed corpus")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--resume", default=None)

    p = sub.add_parser("infer", parents=[common], help="write BATP predictions for a processed corpus")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("postprocess", parents=[common], help="graph-cut refinement of BATP predictions")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", parents=[common], help="metrics of BATP predictions against a corpus")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suites")
    p.add_argument("--trials", type=int, default=10)
    return parser


def resolve_config(args, base: Config = None) -> Config:
    config = base if base is not None else load_config(args.config)
    if args.seed is not None:
        config.train.seed = args.seed
    if args.mirror_categories:
        config.data.mirror_categories = True
    if args.no_boundary_loss:
        config.loss.weights.lambda_ibl = 0.0
    if args.nms_iou is not None:
        config.inference.nms_iou = args.nms_iou
    if args.graph_k is not None:
        config.graphcut.k = args.graph_k
    if args.lambda_smooth is not None:
        config.graphcut.smoothing_lambda = args.lambda_smooth
    if getattr(args, "points", None) is not None and args.command == "prepare":
        config.data.points = args.points
    if getattr(args, "epochs", None) is not None:
        config.train.epochs = args.epochs
    return config


def _require_dir(path, what):
    if not Path(path).is_dir():
        raise UsageError(f"{what} {path} does not exist")


def _require_file(path, what):
    if not Path(path).is_file():
        raise UsageError(f"{what} {path} does not exist")


def cmd_prepare(args, config):
    from .pipeline import prepare_corpus

    _require_dir(args.inp, "input directory")
    paths = prepare_corpus(args.inp, args.out, config, args.workers)
    print(f"prepared {len(paths)} scans into {args.out}")


def cmd_synth(args, config):
    from .data.synth import SynthConfig, overfit_corpus_configs, write_synthetic_arch

    seed = 0 if args.seed is None else args.seed
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    configs = overfit_corpus_configs(seed, args.points)
    while len(configs) < args.count:
        configs.append(SynthConfig(points_per_scan=args.points, seed=seed * 100 + len(configs)))
    for i, cfg in enumerate(configs[: args.count]):
        write_synthetic_arch(cfg, args.out, f"synth_{seed:04d}_{i:02d}")
    print(f"wrote {args.count} synthetic arches to {args.out}")


def cmd_train(args, config):
    from .pipeline import load_corpus
    from .training import run_training

    _require_dir(args.inp, "corpus directory")
    if args.resume:
        _require_file(args.resume, "checkpoint")
    path = run_training(config, load_corpus(args.inp), args.out, resume=args.resume)
    print(f"final checkpoint: {path}")


def _load_checkpoint_model(args):
    from .training import load_model

    _require_file(args.checkpoint, "checkpoint")
    model, _, _ = load_model(args.checkpoint)
    model.config = resolve_config(args, load_config(args.config) if args.config else model.config)
    return model


def cmd_infer(args, config):
    from .pipeline import infer_corpus, load_corpus

    _require_dir(args.inp, "corpus directory")
    model = _load_checkpoint_model(args)
    paths = infer_corpus(model, load_corpus(args.inp), args.out, args.workers)
    print(f"wrote {len(paths)} prediction files to {args.out}")


def cmd_postprocess(args, config):
    from .pipeline import load_corpus, postprocess_corpus

    _require_dir(args.inp, "prediction directory")
    _require_dir(args.corpus, "corpus directory")
    paths = postprocess_corpus(args.inp, load_corpus(args.corpus), args.out, config, args.workers)
    print(f"refined {len(paths)} predictions into {args.out}")


def cmd_evaluate(args, config):
    from .pipeline import evaluate_corpus, format_table, load_corpus

    _require_dir(args.inp, "prediction directory")
    _require_dir(args.corpus, "corpus directory")
    _, summary = evaluate_corpus(args.inp, load_corpus(args.corpus), config, args.out, args.workers)
    print(format_table(summary))


def cmd_gradcheck(args, config):
    from .gradcheck import run_all

    results = run_all(trials=args.trials, seed=0 if args.seed is None else args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: max relative error {r.max_rel_error:.3e} over {r.trials} trials")
    if not all(r.passed for r in results):
        return RUNTIME_ERROR
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "postprocess": cmd_postprocess,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


def run_command(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        if args.config:
            _require_file(args.config, "config file")
        try:
            config = resolve_config(args)
        except (ValueError, TypeError) as exc:
            raise UsageError(f"malformed config: {exc}") from exc
        return COMMANDS[args.command](args, config) or 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (IngestionError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:  # noqa: BLE001 - report anything else as a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


def main():
    sys.exit(run_command())
