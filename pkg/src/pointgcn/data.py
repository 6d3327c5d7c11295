"""
Dataset I/O and preparation: OFF meshes, the packed point-cloud format,
synthetic primitive datasets, preprocessing and mini-batching.

Packed format (little-endian):
    magic b"PGC1" | u32 version | u32 cloud count N | u32 point count n |
    u32 class count C | C x (u16 length, UTF-8 class name) |
    N x (u16 label, n x 3 f32 coordinates) | u32 CRC32 of everything before
"""

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from common.errors import ConfigError, FormatError, GeometryError, ParseError
from common.seeding import derive_seed
from pointgcn.pointcloud import (
    PointCloud,
    TriangleMesh,
    farthest_point_sample,
    normalize_unit_sphere,
    sample_mesh_surface,
)

logger = logging.getLogger(__name__)

PACKED_MAGIC = b"PGC1"
PACKED_VERSION = 1
NO_LABEL = 0xFFFF

SYNTH_CLASSES = ("sphere", "cube", "cylinder", "torus")

DEFAULT_TARGET_POINTS = 1024
DEFAULT_SURFACE_SAMPLES = 2048


@dataclass
class Dataset:
    """Labeled clouds plus the ordered class names."""

    clouds: List[PointCloud] = field(default_factory=list)
    class_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        C = len(self.class_names)
        for i, cloud in enumerate(self.clouds):
            if cloud.label is not None and not 0 <= cloud.label < C:
                raise FormatError(f"Cloud {i} has label {cloud.label} outside {C} classes")

    def __len__(self) -> int:
        return len(self.clouds)

    def __getitem__(self, index: int) -> PointCloud:
        return self.clouds[index]

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.clouds], dtype=np.int64)

    @property
    def point_count(self) -> int:
        """Points per cloud; 0 for an empty dataset."""
        counts = {cloud.n for cloud in self.clouds}
        if len(counts) > 1:
            raise FormatError(f"Clouds have differing point counts: {sorted(counts)}")
        return counts.pop() if counts else 0

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count) if self.clouds else np.zeros(self.class_count, dtype=np.int64)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.clouds[i] for i in indices], list(self.class_names))


# ---------------------------------------------------------------- OFF meshes

def _content_lines(text: str) -> Iterator[Tuple[int, str]]:
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield number, line


def read_off(path: Union[str, Path]) -> TriangleMesh:
    """
    Parse an OFF mesh.

    Accepts an optional "OFF" header (also fused with the counts, as in
    "OFF490 518 0"), "#" comments and polygons with more than three vertices,
    which are fan-triangulated.

    Raises:
        ParseError: with the offending line number
    """
    path = Path(path)
    lines = _content_lines(path.read_text(encoding="utf-8", errors="replace"))

    def next_line(what: str) -> Tuple[int, str]:
        try:
            return next(lines)
        except StopIteration:
            raise ParseError(f"unexpected end of file while reading {what}", path=str(path)) from None

    number, line = next_line("header")
    if line.upper().startswith("OFF"):
        line = line[3:].strip()
        if not line:
            number, line = next_line("counts")

    try:
        counts = [int(tok) for tok in line.split()]
    except ValueError:
        raise ParseError(f"malformed counts line '{line}'", number, str(path)) from None
    if len(counts) < 2 or counts[0] < 0 or counts[1] < 0:
        raise ParseError(f"malformed counts line '{line}'", number, str(path))
    n_vertices, n_faces = counts[0], counts[1]

    vertices = np.empty((n_vertices, 3))
    for i in range(n_vertices):
        number, line = next_line(f"vertex {i}")
        tokens = line.split()
        try:
            vertices[i] = [float(tok) for tok in tokens[:3]]
        except ValueError:
            raise ParseError(f"malformed vertex '{line}'", number, str(path)) from None
        if len(tokens) < 3:
            raise ParseError(f"vertex needs 3 coordinates, got '{line}'", number, str(path))

    triangles: List[Tuple[int, int, int]] = []
    for i in range(n_faces):
        number, line = next_line(f"face {i}")
        try:
            tokens = [int(tok) for tok in line.split()]
        except ValueError:
            # trailing color values may be floats; only the index part must be integral
            tokens = []
            for tok in line.split():
                try:
                    tokens.append(int(tok))
                except ValueError:
                    break
        if not tokens or tokens[0] < 3 or len(tokens) < tokens[0] + 1:
            raise ParseError(f"malformed face '{line}'", number, str(path))
        polygon = tokens[1:tokens[0] + 1]
        bad = [v for v in polygon if not 0 <= v < n_vertices]
        if bad:
            raise ParseError(
                f"face index {bad[0]} out of range for {n_vertices} vertices", number, str(path)
            )
        for j in range(1, len(polygon) - 1):
            triangles.append((polygon[0], polygon[j], polygon[j + 1]))

    logger.debug(f"Read {path}: {n_vertices} vertices, {len(triangles)} triangles")
    return TriangleMesh(vertices, np.array(triangles, dtype=np.int64).reshape(-1, 3))


def preprocess(
    source: Union[TriangleMesh, PointCloud],
    target_n: int = DEFAULT_TARGET_POINTS,
    seed: int = 0,
    sample_n: int = DEFAULT_SURFACE_SAMPLES,
    label: Optional[int] = None,
) -> PointCloud:
    """
    Turn a mesh or raw cloud into a normalized cloud of exactly ``target_n``
    points.

    Meshes are first sampled with ``sample_n`` surface points. The cloud is
    normalized into the unit sphere, reduced by farthest point sampling
    (original point order kept) and normalized again so the subset itself is
    centered with radius 1.
    """
    if isinstance(source, TriangleMesh):
        cloud = sample_mesh_surface(source, sample_n, seed=seed)
    else:
        cloud = source
    if label is None:
        label = cloud.label

    cloud = normalize_unit_sphere(cloud)
    if cloud.n < target_n:
        raise GeometryError(f"Cloud has {cloud.n} points, need at least {target_n}")
    if cloud.n > target_n:
        keep = np.sort(farthest_point_sample(cloud, target_n, seed=seed))
        cloud = normalize_unit_sphere(cloud.subset(keep))
    return cloud.with_label(label)


def load_off_tree(
    root: Union[str, Path],
    split: str,
    target_n: int = DEFAULT_TARGET_POINTS,
    sample_n: int = DEFAULT_SURFACE_SAMPLES,
    seed: int = 0,
    progress=None,
) -> Tuple[Dataset, List[Tuple[Path, str]]]:
    """
    Convert a ``<class>/<split>/<object>.off`` tree into a Dataset.

    Class names are the sorted class directories, so train and test splits
    share label indices. Object i is preprocessed with derive_seed(seed, i).

    Returns:
        (dataset, [(path, error message) for every file that failed])
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"Dataset directory not found: {root}")

    class_names = sorted(p.name for p in root.iterdir() if p.is_dir())
    files = [
        (label, path)
        for label, name in enumerate(class_names)
        for path in sorted((root / name / split).glob("*.off"))
    ]
    logger.info(f"Found {len(files)} {split} meshes in {len(class_names)} classes under {root}")

    clouds: List[PointCloud] = []
    failures: List[Tuple[Path, str]] = []

    def convert(index: int, label: int, path: Path) -> None:
        try:
            mesh = read_off(path)
            clouds.append(preprocess(mesh, target_n, derive_seed(seed, index), sample_n, label))
        except (ParseError, GeometryError, OSError) as e:
            logger.warning(f"Skipping {path}: {e}")
            failures.append((path, str(e)))

    if progress is not None:
        with progress.progress_bar(len(files), f"Converting {split}", unit="meshes") as pbar:
            for index, (label, path) in enumerate(files):
                convert(index, label, path)
                pbar.update(1)
    else:
        for index, (label, path) in enumerate(files):
            convert(index, label, path)

    return Dataset(clouds, class_names), failures


# ---------------------------------------------------------------- packed format

def pack_names(names: Sequence[str]) -> bytes:
    """Names as u16-length-prefixed UTF-8 strings."""
    parts = []
    for name in names:
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
    return b"".join(parts)


def unpack_names(body: bytes, offset: int, count: int, path) -> Tuple[List[str], int]:
    """Read ``count`` names written by pack_names; returns them and the new offset."""
    names = []
    for _ in range(count):
        (length,) = struct.unpack_from("<H", body, offset)
        offset += 2
        if offset + length > len(body):
            raise FormatError(f"{path}: truncated class names")
        names.append(body[offset:offset + length].decode("utf-8"))
        offset += length
    return names, offset


def write_packed(dataset: Dataset, path: Union[str, Path]) -> None:
    """Write a dataset in the packed binary format."""
    n = dataset.point_count
    parts = [
        PACKED_MAGIC,
        struct.pack("<IIII", PACKED_VERSION, len(dataset), n, dataset.class_count),
        pack_names(dataset.class_names),
    ]
    for cloud in dataset.clouds:
        label = NO_LABEL if cloud.label is None else cloud.label
        parts.append(struct.pack("<H", label))
        parts.append(cloud.points.astype("<f4").tobytes())

    body = b"".join(parts)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    logger.info(f"Wrote {len(dataset)} clouds of {n} points to {path}")


def read_packed(path: Union[str, Path]) -> Dataset:
    """
    Read a packed dataset.

    Raises:
        FormatError: on bad magic, unsupported version, truncation or
            checksum mismatch
    """
    data = Path(path).read_bytes()
    if data[:4] != PACKED_MAGIC:
        raise FormatError(f"{path}: not a packed point-cloud file (bad magic)")
    if len(data) < 24:
        raise FormatError(f"{path}: truncated header")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError(f"{path}: checksum mismatch")

    version, N, n, C = struct.unpack_from("<IIII", body, 4)
    if version != PACKED_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")

    try:
        class_names, offset = unpack_names(body, 20, C, path)

        record = 2 + 12 * n
        if offset + N * record != len(body):
            raise FormatError(f"{path}: expected {N} records of {n} points, file size disagrees")
        clouds = []
        for _ in range(N):
            (label,) = struct.unpack_from("<H", body, offset)
            coords = np.frombuffer(body, dtype="<f4", count=3 * n, offset=offset + 2)
            clouds.append(PointCloud(coords.reshape(n, 3), None if label == NO_LABEL else label))
            offset += record
    except struct.error as e:
        raise FormatError(f"{path}: truncated file ({e})") from None

    return Dataset(clouds, class_names)


# ---------------------------------------------------------------- synthetic primitives

def _sample_sphere(rng: np.random.Generator, count: int) -> np.ndarray:
    v = rng.standard_normal((count, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_cube(rng: np.random.Generator, count: int) -> np.ndarray:
    # six faces of [-1, 1]^3, equal areas
    face = rng.integers(6, size=count)
    axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
    points = rng.uniform(-1.0, 1.0, size=(count, 3))
    points[np.arange(count), axis] = sign
    return points


def _sample_cylinder(rng: np.random.Generator, count: int, radius: float = 1.0, half_height: float = 1.0) -> np.ndarray:
    lateral = 2 * np.pi * radius * 2 * half_height
    caps = 2 * np.pi * radius ** 2
    on_side = rng.random(count) < lateral / (lateral + caps)
    angle = rng.uniform(0.0, 2 * np.pi, count)
    r = np.where(on_side, radius, radius * np.sqrt(rng.random(count)))
    z = np.where(on_side, rng.uniform(-half_height, half_height, count),
                 np.where(rng.random(count) < 0.5, half_height, -half_height))
    return np.column_stack([r * np.cos(angle), r * np.sin(angle), z])


def _sample_torus(rng: np.random.Generator, count: int, major: float = 1.0, minor: float = 0.4) -> np.ndarray:
    # rejection on the area element (major + minor cos v)
    accepted = np.empty((0, 2))
    while len(accepted) < count:
        uv = rng.uniform(0.0, 2 * np.pi, size=(2 * count, 2))
        keep = rng.random(2 * count) < (major + minor * np.cos(uv[:, 1])) / (major + minor)
        accepted = np.vstack([accepted, uv[keep]])
    u, v = accepted[:count, 0], accepted[:count, 1]
    ring = major + minor * np.cos(v)
    return np.column_stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)])


_SAMPLERS = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "cylinder": _sample_cylinder,
    "torus": _sample_torus,
}


def synth_generate(
    classes: Sequence[str] = SYNTH_CLASSES,
    per_class: int = 50,
    n_points: int = 256,
    noise_sigma: float = 0.02,
    seed: int = 0,
) -> Dataset:
    """
    Synthetic dataset of randomly rotated primitive surfaces.

    Every primitive is symmetric about its center, so points are drawn in
    antipodal pairs; that keeps each noiseless cloud centered exactly.

    Args:
        classes: Primitive names, any of sphere, cube, cylinder, torus
        per_class: Clouds per class
        n_points: Points per cloud
        noise_sigma: Std of Gaussian coordinate noise
        seed: Random seed

    Returns:
        Dataset with labels in class order
    """
    if per_class < 1:
        raise ConfigError(f"per_class must be at least 1, got {per_class}")
    if n_points < 2:
        raise ConfigError(f"n_points must be at least 2, got {n_points}")
    if noise_sigma < 0:
        raise ConfigError(f"noise_sigma must be non-negative, got {noise_sigma}")
    unknown = [c for c in classes if c not in _SAMPLERS]
    if unknown:
        raise ConfigError(f"Unknown primitive classes {unknown}; choose from {list(_SAMPLERS)}")

    rng = np.random.default_rng(seed)
    clouds = []
    for label, name in enumerate(classes):
        for _ in range(per_class):
            half = _SAMPLERS[name](rng, (n_points + 1) // 2)
            points = np.vstack([half, -half])[:n_points]
            points = Rotation.random(random_state=rng).apply(points)
            if noise_sigma > 0:
                points = points + rng.normal(0.0, noise_sigma, size=points.shape)
            clouds.append(normalize_unit_sphere(PointCloud(points, label)))

    logger.info(f"Generated {len(clouds)} synthetic clouds ({per_class} x {len(classes)} classes)")
    return Dataset(clouds, list(classes))


# ---------------------------------------------------------------- batching

def batch_iter(
    dataset: Union[Dataset, int],
    batch_size: int = 28,
    shuffle_seed: int = 0,
    epoch: int = 0,
) -> Iterator[np.ndarray]:
    """
    Yield index batches covering every cloud exactly once.

    The order is a permutation drawn from derive_seed(shuffle_seed, epoch);
    the last batch may be short.
    """
    size = dataset if isinstance(dataset, int) else len(dataset)
    if batch_size < 1:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")
    order = np.random.default_rng(derive_seed(shuffle_seed, epoch)).permutation(size)
    for start in range(0, size, batch_size):
        yield order[start:start + batch_size]
