"""
Training loop, evaluation metrics, checkpoints, multi-seed stability runs and
active-point export.

Checkpoint format (little-endian):
    magic b"PGCK" | u32 version | u32 length, config text (key = value) |
    u32 class count, per class u16 length + UTF-8 name | u32 tensor count | per tensor: u16 name length, name, u8 dtype code,
    u8 rank, rank x u32 dims, raw data | u32 CRC32 of everything before
"""

import logging
import struct
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from common.config import coerce_fields, format_key_values, parse_key_values
from common.errors import ConfigError, FormatError, ShapeError, TrainingDivergedError
from common.seeding import make_rng
from pointgcn.data import Dataset, batch_iter, pack_names, unpack_names
from pointgcn.graph import RescaledLaplacian
from pointgcn.model import (
    ModelConfig,
    ModelParams,
    backward,
    build_laplacian,
    forward,
    init_params,
    weight_decay_penalty,
)
from pointgcn.nn import LOG_EPS, ClassWeights, class_weights_from_counts
from pointgcn.optim import AdamState, adam_step
from pointgcn.pointcloud import PointCloud

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PGCK"
CHECKPOINT_VERSION = 2

DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}

REPORT_COLUMNS = ["epoch", "train_loss", "test_loss", "inst_acc", "class_acc", "seconds"]
ACTIVE_COLUMNS = ["layer", "filter", "vertex", "x", "y", "z"]


@dataclass
class TrainSettings:
    """Optimization hyperparameters; the architecture lives in ModelConfig."""

    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 28
    seed: int = 0
    threads: int = 1
    class_weighting: bool = True

    def validate(self) -> "TrainSettings":
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.threads < 1:
            raise ConfigError(f"threads must be positive, got {self.threads}")
        return self


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    test_loss: float
    inst_acc: float
    class_acc: float
    seconds: float


@dataclass
class TrainReport:
    """Per-epoch training history."""

    epochs: List[EpochStats] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def final(self) -> EpochStats:
        return self.epochs[-1]

    @property
    def test_losses(self) -> List[float]:
        return [e.test_loss for e in self.epochs]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(e) for e in self.epochs], columns=REPORT_COLUMNS)

    def to_csv(self, path: Union[str, Path]) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        logger.info(f"Wrote training report ({len(self)} epochs) to {path}")


@dataclass
class Checkpoint:
    """
    Everything needed to evaluate or resume a run.

    Random draws are derived from (seed, epoch, ...), so ``seed`` together
    with ``epoch`` is the complete random state.
    """

    config: ModelConfig
    params: ModelParams
    adam: AdamState
    epoch: int = 0
    seed: int = 0
    lr: float = 1e-3
    batch_size: int = 28
    class_weighting: bool = True
    class_names: Tuple[str, ...] = ()


@dataclass
class EvalResult:
    instance_accuracy: float
    class_accuracy: float
    confusion: np.ndarray
    loss: float
    predictions: np.ndarray


def smoothed(values: Sequence[float], window: int = 3) -> np.ndarray:
    """Trailing moving average; the first ``window - 1`` values are dropped."""
    if window < 1:
        raise ConfigError(f"window must be positive, got {window}")
    return pd.Series(values, dtype=float).rolling(window).mean().dropna().to_numpy()


# ---------------------------------------------------------------- metrics

def classification_metrics(
    labels: Sequence[int],
    predictions: Sequence[int],
    class_count: int,
) -> Tuple[float, float, np.ndarray]:
    """
    Mean instance accuracy, mean class accuracy and the confusion matrix.

    confusion[i, j] counts clouds of true class i predicted as j. Class
    accuracy averages per-class recall over the classes that occur.
    """
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    confusion = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    if len(labels) == 0:
        return 0.0, 0.0, confusion

    totals = confusion.sum(axis=1)
    present = totals > 0
    recall = np.diag(confusion)[present] / totals[present]
    return float(np.trace(confusion) / len(labels)), float(recall.mean()), confusion


def _laplacians(dataset: Dataset, config: ModelConfig, pool: ThreadPoolExecutor) -> List[RescaledLaplacian]:
    return list(pool.map(lambda cloud: build_laplacian(cloud, config), dataset.clouds))


def evaluate(
    params: ModelParams,
    config: ModelConfig,
    dataset: Dataset,
    laplacians: Optional[Sequence[RescaledLaplacian]] = None,
    threads: int = 1,
) -> EvalResult:
    """
    Eval-mode predictions over a labeled dataset.

    The reported loss is the unweighted mean cross-entropy.
    """
    if any(cloud.label is None for cloud in dataset.clouds):
        raise ConfigError("Evaluation needs a labeled dataset")
    params.check_config(config)

    def run(index: int) -> np.ndarray:
        lap = laplacians[index] if laplacians is not None else None
        return forward(dataset.clouds[index], params, config, training=False, laplacian=lap).probs

    with ThreadPoolExecutor(max_workers=threads) as pool:
        probs = list(pool.map(run, range(len(dataset))))

    labels = dataset.labels
    predictions = np.array([int(np.argmax(p)) for p in probs], dtype=np.int64)
    losses = [-float(np.log(p[label] + LOG_EPS)) for p, label in zip(probs, labels)]
    inst, cls, confusion = classification_metrics(labels, predictions, config.class_count)
    return EvalResult(
        instance_accuracy=inst,
        class_accuracy=cls,
        confusion=confusion,
        loss=float(np.mean(losses)) if losses else 0.0,
        predictions=predictions,
    )


# ---------------------------------------------------------------- training

def _check_datasets(config: ModelConfig, train_set: Dataset, test_set: Dataset) -> None:
    if len(train_set) == 0 or len(test_set) == 0:
        raise ConfigError(f"Both splits must be non-empty (train={len(train_set)}, test={len(test_set)})")
    for name, dataset in (("training", train_set), ("test", test_set)):
        if dataset.class_count != config.class_count:
            raise ConfigError(
                f"class_count mismatch: model has {config.class_count}, {name} set has {dataset.class_count}"
            )
        if any(cloud.label is None for cloud in dataset.clouds):
            raise ConfigError(f"The {name} set contains unlabeled clouds")


def _resume_state(config: ModelConfig, resume: Checkpoint) -> Tuple[ModelParams, AdamState]:
    stored, wanted = resume.config.to_dict(), config.to_dict()
    differing = [key for key in wanted if stored[key] != wanted[key]]
    if differing:
        key = differing[0]
        raise ConfigError(f"Checkpoint {key}={stored[key]} does not match config {key}={wanted[key]}")
    params = resume.params.copy()
    adam = AdamState(
        m={k: v.copy() for k, v in resume.adam.m.items()},
        v={k: v.copy() for k, v in resume.adam.v.items()},
        t=resume.adam.t,
    )
    return params, adam


def train(
    config: ModelConfig,
    train_set: Dataset,
    test_set: Dataset,
    settings: Optional[TrainSettings] = None,
    progress=None,
    resume: Optional[Checkpoint] = None,
) -> Tuple[TrainReport, Checkpoint]:
    """
    Train with Adam on mini-batches and evaluate on the test set every epoch.

    Per-cloud forward and backward passes of a batch run on ``settings.threads``
    workers; gradients are summed in batch order, so the result does not
    depend on the thread count. Every cloud's dropout and centroid draws come
    from make_rng(seed, epoch, cloud index).

    Args:
        config: Architecture
        train_set: Labeled training clouds
        test_set: Labeled test clouds
        settings: Optimization settings
        progress: Optional RunProgress for bars and the run log
        resume: Checkpoint to continue from; its seed replaces settings.seed

    Returns:
        (report of the epochs run in this call, final checkpoint)

    Raises:
        TrainingDivergedError: if a batch loss is not finite
    """
    settings = (settings or TrainSettings()).validate()
    config.validate()
    _check_datasets(config, train_set, test_set)

    seed = settings.seed
    start_epoch = 0
    if resume is not None:
        params, adam = _resume_state(config, resume)
        start_epoch = resume.epoch
        if resume.seed != seed:
            logger.info(f"Resuming with checkpoint seed {resume.seed} (settings had {seed})")
        seed = resume.seed
    else:
        params = init_params(config, seed=seed)
        adam = AdamState.for_params(params.named_tensors())

    if settings.class_weighting:
        class_weights = class_weights_from_counts(train_set.class_counts())
    else:
        class_weights = ClassWeights.uniform(config.class_count)
    logger.info(f"Class weights: {np.round(class_weights.weights, 4).tolist()}")

    report = TrainReport()
    dtype = config.np_dtype
    n_batches = -(-len(train_set) // settings.batch_size)

    with ThreadPoolExecutor(max_workers=settings.threads) as pool:
        if progress is not None:
            progress.set_phase('GRAPH', f"{len(train_set) + len(test_set)} clouds")
        train_laps = _laplacians(train_set, config, pool)
        test_laps = _laplacians(test_set, config, pool)

        if progress is not None:
            progress.set_phase('TRAIN', f"epochs {start_epoch + 1}..{settings.epochs}")
            epoch_bar = progress.progress_bar(settings.epochs - start_epoch, "Training", unit="epochs")
        else:
            epoch_bar = tqdm(total=settings.epochs - start_epoch, disable=True)

        with epoch_bar as pbar:
            for epoch in range(start_epoch, settings.epochs):
                started = time.perf_counter()
                data_losses = []
                if progress is not None:
                    batch_bar = progress.sub_progress(n_batches, f"Epoch {epoch + 1}")
                else:
                    batch_bar = tqdm(total=n_batches, disable=True)

                with batch_bar as sub:
                    for b, batch in enumerate(batch_iter(train_set, settings.batch_size, seed, epoch)):

                        def step(index: int):
                            cloud = train_set.clouds[index]
                            result = forward(
                                cloud, params, config, training=True,
                                rng=make_rng(seed, epoch, int(index)), laplacian=train_laps[index],
                            )
                            return backward(result.cache, cloud.label, class_weights, params)

                        penalty = weight_decay_penalty(params, config.weight_decay)
                        named = params.named_tensors()
                        totals = {name: np.zeros(p.shape, dtype=np.float64) for name, p in named.items()}
                        loss_sum = 0.0
                        for loss, grads in pool.map(step, batch):
                            loss_sum += loss
                            for name, g in grads.named_tensors().items():
                                totals[name] += g

                        batch_loss = loss_sum / len(batch)
                        if not np.isfinite(batch_loss):
                            raise TrainingDivergedError(epoch + 1, b, batch_loss)
                        data_losses.append(batch_loss - penalty)

                        mean_grads = {name: (t / len(batch)).astype(dtype) for name, t in totals.items()}
                        adam_step(named, mean_grads, adam, lr=settings.lr)
                        logger.debug(f"epoch {epoch + 1} batch {b + 1}/{n_batches}: loss={batch_loss:.5f}")
                        sub.update(1)

                result = evaluate(params, config, test_set, test_laps, settings.threads)
                stats = EpochStats(
                    epoch=epoch + 1,
                    train_loss=float(np.mean(data_losses)),
                    test_loss=result.loss,
                    inst_acc=result.instance_accuracy,
                    class_acc=result.class_accuracy,
                    seconds=time.perf_counter() - started,
                )
                report.epochs.append(stats)
                logger.info(
                    f"Epoch {stats.epoch}/{settings.epochs}: train_loss={stats.train_loss:.4f} "
                    f"test_loss={stats.test_loss:.4f} inst_acc={stats.inst_acc:.4f} "
                    f"class_acc={stats.class_acc:.4f} ({stats.seconds:.1f}s)"
                )
                pbar.set_postfix(loss=f"{stats.train_loss:.3f}", acc=f"{stats.inst_acc:.3f}")
                pbar.update(1)
                if progress is not None:
                    progress.increment_epochs()
                    progress.stats.clouds_processed += len(train_set)

    checkpoint = Checkpoint(
        config=config,
        params=params,
        adam=adam,
        epoch=max(settings.epochs, start_epoch),
        seed=seed,
        lr=settings.lr,
        batch_size=settings.batch_size,
        class_weighting=settings.class_weighting,
        class_names=tuple(train_set.class_names),
    )
    return report, checkpoint


@dataclass
class StabilityReport:
    seeds: List[int]
    accuracies: List[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        """Sample standard deviation."""
        return float(np.std(self.accuracies, ddof=1))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"seed": self.seeds, "inst_acc": self.accuracies})


def stability_run(
    config: ModelConfig,
    train_set: Dataset,
    test_set: Dataset,
    seeds: Sequence[int],
    settings: Optional[TrainSettings] = None,
    progress=None,
) -> StabilityReport:
    """Train once per seed and collect the final test instance accuracy."""
    if len(seeds) < 2:
        raise ConfigError(f"stability_run needs at least 2 seeds, got {len(seeds)}")
    settings = settings or TrainSettings()
    accuracies = []
    for seed in seeds:
        run_settings = TrainSettings(**{**asdict(settings), "seed": int(seed)})
        report, _ = train(config, train_set, test_set, run_settings, progress=progress)
        accuracies.append(report.final.inst_acc)
        logger.info(f"Seed {seed}: final inst_acc={report.final.inst_acc:.4f}")

    result = StabilityReport(seeds=[int(s) for s in seeds], accuracies=accuracies)
    logger.info(f"Stability over {len(seeds)} seeds: mean={result.mean:.4f} std={result.std:.4f}")
    return result


# ---------------------------------------------------------------- active points

def active_point_frame(checkpoint: Checkpoint, cloud: PointCloud) -> pd.DataFrame:
    """Eval-mode active points as a (layer, filter, vertex, x, y, z) table."""
    result = forward(cloud, checkpoint.params, checkpoint.config, training=False)
    rows = []
    for layer, vertices in sorted(result.active_vertices.items()):
        coords = cloud.points[vertices]
        rows.append(pd.DataFrame({
            "layer": layer,
            "filter": np.arange(len(vertices)),
            "vertex": vertices,
            "x": coords[:, 0],
            "y": coords[:, 1],
            "z": coords[:, 2],
        }))
    return pd.concat(rows, ignore_index=True)[ACTIVE_COLUMNS]


def export_active_points(checkpoint: Checkpoint, cloud: PointCloud, path: Union[str, Path]) -> pd.DataFrame:
    """Write one CSV row per filter of every globally pooled layer."""
    frame = active_point_frame(checkpoint, cloud)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    logger.info(f"Wrote {len(frame)} active points to {path}")
    return frame


# ---------------------------------------------------------------- checkpoints

def _config_text(checkpoint: Checkpoint) -> str:
    values = {f"model.{key}": value for key, value in checkpoint.config.to_dict().items()}
    values.update({
        "train.epoch": checkpoint.epoch,
        "train.seed": checkpoint.seed,
        "train.lr": checkpoint.lr,
        "train.batch_size": checkpoint.batch_size,
        "train.class_weighting": checkpoint.class_weighting,
        "adam.t": checkpoint.adam.t,
    })
    return format_key_values(values)


def _pack_tensor(name: str, array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array)
    dtype = array.dtype.newbyteorder("<")
    if dtype not in DTYPE_CODES:
        raise ShapeError(f"Cannot store tensor {name} of dtype {array.dtype}")
    encoded = name.encode("utf-8")
    header = struct.pack("<H", len(encoded)) + encoded + struct.pack("<BB", DTYPE_CODES[dtype], array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + array.astype(dtype, copy=False).tobytes()


def save_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> None:
    """Write a checkpoint; stored tensors round-trip bitwise."""
    tensors = dict(checkpoint.params.named_tensors())
    for name, value in checkpoint.adam.m.items():
        tensors[f"adam.m.{name}"] = value
    for name, value in checkpoint.adam.v.items():
        tensors[f"adam.v.{name}"] = value

    text = _config_text(checkpoint).encode("utf-8")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<II", CHECKPOINT_VERSION, len(text)),
        text,
        struct.pack("<I", len(checkpoint.class_names)),
        pack_names(checkpoint.class_names),
        struct.pack("<I", len(tensors)),
    ]
    parts.extend(_pack_tensor(name, array) for name, array in tensors.items())
    body = b"".join(parts)

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    logger.info(f"Saved checkpoint (epoch {checkpoint.epoch}) to {path}")


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        FormatError: on bad magic, version mismatch, truncation or checksum mismatch
    """
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError(f"{path}: checksum mismatch")

    version, text_len = struct.unpack_from("<II", body, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")

    try:
        offset = 12
        text = body[offset:offset + text_len].decode("utf-8")
        offset += text_len
        (name_count,) = struct.unpack_from("<I", body, offset)
        class_names, offset = unpack_names(body, offset + 4, name_count, path)
        (count,) = struct.unpack_from("<I", body, offset)
        offset += 4
        tensors: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, offset)
            offset += 2
            name = body[offset:offset + name_len].decode("utf-8")
            offset += name_len
            code, rank = struct.unpack_from("<BB", body, offset)
            offset += 2
            if code not in CODE_DTYPES:
                raise FormatError(f"{path}: unknown dtype code {code} for tensor {name}")
            shape = struct.unpack_from(f"<{rank}I", body, offset)
            offset += 4 * rank
            dtype = CODE_DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64))
            if offset + size * dtype.itemsize > len(body):
                raise FormatError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(body, dtype=dtype, count=size, offset=offset).reshape(shape).copy()
            offset += size * dtype.itemsize
    except (struct.error, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: truncated checkpoint ({e})") from None
    if offset != len(body):
        raise FormatError(f"{path}: {len(body) - offset} unexpected trailing bytes")

    values = parse_key_values(text, str(path))
    model_values = {k[len("model."):]: v for k, v in values.items() if k.startswith("model.")}
    config = ModelConfig(**coerce_fields(ModelConfig, model_values))
    train_values = coerce_fields(Checkpoint, {
        "epoch": values.get("train.epoch", "0"),
        "seed": values.get("train.seed", "0"),
        "lr": values.get("train.lr", "0.001"),
        "batch_size": values.get("train.batch_size", "28"),
        "class_weighting": values.get("train.class_weighting", "true"),
    })
    train_values["class_names"] = tuple(class_names)

    adam = AdamState(t=int(values.get("adam.t", "0")))
    params_named = {}
    for name, array in tensors.items():
        if name.startswith("adam.m."):
            adam.m[name[len("adam.m."):]] = array
        elif name.startswith("adam.v."):
            adam.v[name[len("adam.v."):]] = array
        else:
            params_named[name] = array
    try:
        params = ModelParams.from_named(params_named)
    except KeyError as e:
        raise FormatError(f"{path}: missing tensor {e}") from None
    params.check_config(config)

    logger.info(f"Loaded checkpoint (epoch {train_values['epoch']}) from {path}")
    return Checkpoint(config=config, params=params, adam=adam, **train_values)
