"""
Command-line entry point: synth, preprocess, train, eval and active.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or data error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import colorlog
import pandas as pd

from common.config import RunConfig, format_value, load_run_config
from common.errors import ConfigError, PointGCNError
from common.progress import RunProgress
from pointgcn.data import Dataset, load_off_tree, read_packed, synth_generate, write_packed
from pointgcn.model import CLUSTER_MODES, DTYPES, POOLING_MODES
from pointgcn.train import evaluate, export_active_points, load_checkpoint, save_checkpoint, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

DEFAULT_SYNTH_OUT = "data/synth.pgc"
DEFAULT_CHECKPOINT_OUT = "checkpoints/pointgcn.pgck"
DEFAULT_REPORT_OUT = "reports/train_report.csv"
DEFAULT_ACTIVE_OUT = "reports/active_points.csv"

DEFAULTS = RunConfig()

# handlers installed by setup_logging, removed again on the next call
_installed_handlers: List[logging.Handler] = []


class UsageError(ConfigError):
    """Bad command line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def setup_logging(config: RunConfig, verbose: bool = False, log_handler: Optional[logging.Handler] = None):
    """Coloured console logging at WARNING (DEBUG with --verbose), plus the run log file."""
    root = logging.getLogger()
    for handler in _installed_handlers:
        root.removeHandler(handler)
    _installed_handlers.clear()

    root.setLevel(logging.DEBUG if verbose else getattr(logging, config.log_level.upper(), logging.INFO))

    console_handler = colorlog.StreamHandler()
    console_handler.setLevel(logging.DEBUG if verbose else logging.WARNING)
    console_handler.setFormatter(colorlog.ColoredFormatter(
        "%(log_color)s%(levelname)-8s%(reset)s %(name)s: %(message)s"
    ))
    _installed_handlers.append(console_handler)
    if log_handler is not None:
        _installed_handlers.append(log_handler)
    for handler in _installed_handlers:
        root.addHandler(handler)


def _flag(parser: argparse.ArgumentParser, *names: str, dest: str, help: str, **kwargs):
    default = getattr(DEFAULTS, dest)
    shown = "" if default is None else f" (default: {format_value(default)})"
    parser.add_argument(*names, dest=dest, default=argparse.SUPPRESS, help=help + shown, **kwargs)


def _model_flags(parser: argparse.ArgumentParser):
    _flag(parser, "--pooling", dest="pooling", choices=POOLING_MODES, help="Pooling branch")
    _flag(parser, "--knn", dest="knn", help="Neighbors per point in the kNN graph")
    _flag(parser, "--order", dest="order", help="Chebyshev order K")
    _flag(parser, "--filters", dest="filters", help="Filters of the two conv layers, comma separated")
    _flag(parser, "--centroids", dest="centroids", help="Centroids of multi-resolution pooling")
    _flag(parser, "--cluster-k", dest="cluster_k", help="Points per centroid cluster")
    _flag(parser, "--cluster-mode", dest="cluster_mode", choices=CLUSTER_MODES, help="Cluster assignment")
    _flag(parser, "--keep-probs", dest="keep_probs", help="Dropout keep probabilities: conv, classifier")
    _flag(parser, "--weight-decay", dest="weight_decay", help="L2 coefficient on weights")
    _flag(parser, "--sigma", dest="sigma", help="Fixed Gaussian kernel width (default: adaptive)")
    _flag(parser, "--no-bias", dest="bias", action="store_const", const="false", help="Conv layers without bias")
    _flag(parser, "--concat-layer1", dest="concat_layer1", action="store_const", const="true",
          help="Feed layer-1 statistics to the classifier in multires mode")
    _flag(parser, "--dtype", dest="dtype", choices=DTYPES, help="Floating point precision")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", dest="config_file", default=None, help="key = value configuration file")
    common.add_argument("--verbose", "-v", action="store_true", help="Enable verbose output")
    _flag(common, "--threads", dest="threads", help="Worker threads; 1 is bit-reproducible")
    _flag(common, "--seed", dest="seed", help="Random seed")
    _flag(common, "--log-dir", dest="log_dir", help="Directory for run logs")
    _flag(common, "--quiet", dest="quiet", action="store_const", const="true", help="No progress output")

    parser = _Parser(prog="pointgcn", description="PointGCN point-cloud classification")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    commands.required = True

    p = commands.add_parser("synth", parents=[common], help="Generate a synthetic primitive dataset")
    _flag(p, "--classes", dest="classes", help="Primitive classes, comma separated")
    _flag(p, "--per-class", dest="per_class", help="Clouds per class")
    _flag(p, "--points", dest="points", help="Points per cloud")
    _flag(p, "--noise", dest="noise", help="Coordinate noise std")
    _flag(p, "--out", dest="out", help=f"Packed output file (default: {DEFAULT_SYNTH_OUT})")

    p = commands.add_parser("preprocess", parents=[common], help="Convert an OFF tree to packed train/test files")
    _flag(p, "--in", dest="input", help="Root of <class>/<split>/*.off")
    _flag(p, "--out", dest="out", help="Output directory for train.pgc and test.pgc")
    _flag(p, "--points", dest="points", help="Points per cloud after farthest subsampling")
    _flag(p, "--sample", dest="sample", help="Surface samples per mesh")

    p = commands.add_parser("train", parents=[common], help="Train a model")
    _flag(p, "--train", dest="train", help="Packed training set")
    _flag(p, "--test", dest="test", help="Packed test set")
    _model_flags(p)
    _flag(p, "--batch", dest="batch", help="Mini-batch size")
    _flag(p, "--epochs", dest="epochs", help="Training epochs")
    _flag(p, "--lr", dest="lr", help="Adam learning rate")
    _flag(p, "--no-class-weights", dest="class_weights", action="store_const", const="false",
          help="Unweighted cross-entropy")
    _flag(p, "--out-checkpoint", dest="out_checkpoint", help=f"Checkpoint file (default: {DEFAULT_CHECKPOINT_OUT})")
    _flag(p, "--report", dest="report", help=f"Report CSV (default: {DEFAULT_REPORT_OUT})")
    _flag(p, "--resume", dest="resume", help="Checkpoint to continue training from")

    p = commands.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    _flag(p, "--checkpoint", dest="checkpoint", help="Trained checkpoint")
    _flag(p, "--data", dest="data", help="Packed labeled dataset")
    _flag(p, "--confusion", dest="confusion", help="Write the confusion matrix CSV here")

    p = commands.add_parser("active", parents=[common], help="Export active points of one cloud")
    _flag(p, "--checkpoint", dest="checkpoint", help="Trained checkpoint")
    _flag(p, "--data", dest="data", help="Packed dataset")
    _flag(p, "--index", dest="index", help="Cloud index in the dataset")
    _flag(p, "--out", dest="out", help=f"Active-points CSV (default: {DEFAULT_ACTIVE_OUT})")

    return parser


def _require(value: Optional[str], flag: str) -> str:
    if not value:
        raise UsageError(f"{flag} is required")
    return value


def _check_classes(dataset: Dataset, class_count: int, what: str):
    if dataset.class_count != class_count:
        raise ConfigError(f"class_count mismatch: checkpoint has {class_count}, {what} has {dataset.class_count}")


def cmd_synth(config: RunConfig, progress: RunProgress) -> int:
    progress.set_phase('LOAD', f"{config.per_class} clouds x {len(config.classes)} classes")
    dataset = synth_generate(config.classes, config.per_class, config.points, config.noise, config.seed)
    progress.update(len(dataset))

    progress.set_phase('SAVE')
    out = config.out or DEFAULT_SYNTH_OUT
    write_packed(dataset, out)
    print(f"Wrote {len(dataset)} clouds of {config.points} points to {out}")
    return EXIT_OK


def cmd_preprocess(config: RunConfig, progress: RunProgress) -> int:
    root = Path(_require(config.input, "--in"))
    out = Path(_require(config.out, "--out"))
    if config.points > config.sample:
        raise UsageError(f"--points ({config.points}) cannot exceed --sample ({config.sample})")
    if not root.is_dir():
        raise FileNotFoundError(f"Input directory not found: {root}")

    failed = 0
    for split in ("train", "test"):
        progress.set_phase('LOAD', f"{split} split of {root}")
        dataset, failures = load_off_tree(root, split, config.points, config.sample, config.seed, progress)
        progress.stats.clouds_processed += len(dataset)
        for path, message in failures:
            progress.log(f"Failed {path}: {message}", 'warning')
            print(f"  failed: {path}: {message}", file=sys.stderr)
        progress.increment_failed(len(failures))
        failed += len(failures)

        progress.set_phase('SAVE', split)
        write_packed(dataset, out / f"{split}.pgc")
        print(f"{split}: {len(dataset)} clouds, {len(failures)} failures -> {out / f'{split}.pgc'}")

    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_train(config: RunConfig, progress: RunProgress) -> int:
    progress.set_phase('LOAD')
    train_set = read_packed(_require(config.train, "--train"))
    test_set = read_packed(_require(config.test, "--test"))

    resume = None
    if config.resume:
        resume = load_checkpoint(config.resume)
        model_config = resume.config
        _check_classes(train_set, model_config.class_count, "training set")
    else:
        model_config = config.model_config(class_count=train_set.class_count)
    settings = config.train_settings()

    progress.set_phase('CONFIG', f"{model_config.pooling} pooling, filters {model_config.filters}")
    report, checkpoint = train(model_config, train_set, test_set, settings, progress=progress, resume=resume)

    progress.set_phase('SAVE')
    save_checkpoint(config.out_checkpoint or DEFAULT_CHECKPOINT_OUT, checkpoint)
    report.to_csv(config.report or DEFAULT_REPORT_OUT)

    if len(report):
        final = report.final
        print(f"Final epoch {final.epoch}: instance accuracy {final.inst_acc:.4f}, "
              f"class accuracy {final.class_acc:.4f}, test loss {final.test_loss:.4f}")
    return EXIT_OK


def cmd_eval(config: RunConfig, progress: RunProgress) -> int:
    progress.set_phase('LOAD')
    checkpoint = load_checkpoint(_require(config.checkpoint, "--checkpoint"))
    dataset = read_packed(_require(config.data, "--data"))
    _check_classes(dataset, checkpoint.config.class_count, "dataset")

    progress.set_phase('EVAL', f"{len(dataset)} clouds")
    result = evaluate(checkpoint.params, checkpoint.config, dataset, threads=config.threads)
    progress.update(len(dataset))

    names = list(dataset.class_names)
    confusion = pd.DataFrame(result.confusion, index=pd.Index(names, name="true"), columns=names)
    print(f"Instance accuracy: {result.instance_accuracy:.4f}")
    print(f"Class accuracy:    {result.class_accuracy:.4f}")
    print(confusion.to_string())
    if config.confusion:
        Path(config.confusion).parent.mkdir(parents=True, exist_ok=True)
        confusion.to_csv(config.confusion)
        logger.info(f"Wrote confusion matrix to {config.confusion}")
    return EXIT_OK


def cmd_active(config: RunConfig, progress: RunProgress) -> int:
    progress.set_phase('LOAD')
    checkpoint = load_checkpoint(_require(config.checkpoint, "--checkpoint"))
    dataset = read_packed(_require(config.data, "--data"))
    if not 0 <= config.index < len(dataset):
        raise UsageError(f"--index {config.index} out of range for {len(dataset)} clouds")

    progress.set_phase('EXPORT')
    out = config.out or DEFAULT_ACTIVE_OUT
    frame = export_active_points(checkpoint, dataset[config.index], out)
    print(f"Wrote {len(frame)} active points to {out}")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[RunConfig, RunProgress], int]] = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "active": cmd_active,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one command and return its exit code."""
    progress = None
    try:
        args = build_parser().parse_args(argv)
        overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config_file", "verbose")}
        config = load_run_config(args.config_file, overrides)

        progress = RunProgress(args.command, log_dir=config.log_dir, quiet=config.quiet)
        setup_logging(config, verbose=args.verbose, log_handler=progress.file_handler)
        progress.set_phase('CONFIG')
        progress.log(f"Arguments: {argv if argv is not None else sys.argv[1:]}")

        code = COMMANDS[args.command](config, progress)
        progress.complete()
        return code

    except SystemExit as e:
        # --help
        return e.code if isinstance(e.code, int) else EXIT_OK
    except ConfigError as e:
        logger.error(f"{e}")
        return EXIT_USAGE
    except (PointGCNError, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        logger.debug("Traceback", exc_info=True)
        if progress is not None:
            progress.set_phase('ERROR')
            progress.log_error(e, "command")
        return EXIT_RUNTIME
    finally:
        if progress is not None:
            if progress.file_handler in _installed_handlers:
                logging.getLogger().removeHandler(progress.file_handler)
                _installed_handlers.remove(progress.file_handler)
            progress.close()
