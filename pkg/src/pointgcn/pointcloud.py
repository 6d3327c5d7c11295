"""
Point-cloud geometry: unit-sphere normalization, farthest point sampling and
area-weighted mesh surface sampling.

Coordinates are stored as float32; centroids and distances are accumulated in
float64.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from common.errors import GeometryError

logger = logging.getLogger(__name__)

COORD_DTYPE = np.float32


@dataclass(frozen=True)
class PointCloud:
    """n points in 3D with an optional class label."""

    points: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        points = np.ascontiguousarray(self.points, dtype=COORD_DTYPE)
        if points.ndim != 2 or points.shape[1] != 3:
            raise GeometryError(f"Point cloud must have shape (n, 3), got {points.shape}")
        if points.shape[0] < 1:
            raise GeometryError("Point cloud needs at least one point")
        if not np.all(np.isfinite(points)):
            raise GeometryError("Point cloud contains non-finite coordinates")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)
        if self.label is not None:
            object.__setattr__(self, "label", int(self.label))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def subset(self, indices: np.ndarray) -> "PointCloud":
        """Cloud made of the rows at ``indices``, label kept."""
        return PointCloud(self.points[np.asarray(indices)], self.label)

    def with_label(self, label: Optional[int]) -> "PointCloud":
        return PointCloud(self.points, label)


@dataclass(frozen=True)
class TriangleMesh:
    """Triangle soup: vertex coordinates plus vertex-index triples."""

    vertices: np.ndarray
    faces: np.ndarray
    areas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise GeometryError(
                f"Face index out of range for {len(vertices)} vertices"
            )
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "areas", _triangle_areas(vertices, faces))

    @property
    def total_area(self) -> float:
        return float(self.areas.sum())


def _triangle_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    if len(faces) == 0:
        return np.zeros(0)
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    """
    Center a cloud at its centroid and scale it so the farthest point has
    norm 1.

    Args:
        cloud: Input cloud

    Returns:
        Normalized cloud with point order and label preserved

    Raises:
        GeometryError: if all points coincide
    """
    points = cloud.points.astype(np.float64)
    centered = points - points.mean(axis=0)
    radius = np.sqrt((centered ** 2).sum(axis=1)).max()
    if not radius > 0:
        raise GeometryError("Cannot normalize a cloud whose points all coincide")
    return PointCloud(centered / radius, cloud.label)


def farthest_point_sample(
    cloud: PointCloud,
    m: int,
    seed: Optional[int] = 0,
    first_index: Optional[int] = None,
) -> np.ndarray:
    """
    Greedy max-min farthest point sampling.

    The first index is drawn uniformly from ``seed`` unless ``first_index`` is
    given. Each following pick maximizes the minimum distance to the points
    already picked; ties go to the lowest index.

    Args:
        cloud: Cloud to sample from
        m: Number of indices to return, 1 <= m <= n
        seed: Seed for the first pick
        first_index: Force the first pick

    Returns:
        int64 array of m distinct indices in selection order
    """
    n = cloud.n
    if not 1 <= m <= n:
        raise GeometryError(f"Cannot sample {m} points from a cloud of {n}")

    points = cloud.points.astype(np.float64)
    if first_index is None:
        first_index = int(np.random.default_rng(seed).integers(n))
    elif not 0 <= first_index < n:
        raise GeometryError(f"First index {first_index} out of range for {n} points")

    selected = np.empty(m, dtype=np.int64)
    selected[0] = first_index
    min_dist = np.full(n, np.inf)
    taken = np.zeros(n, dtype=bool)
    taken[first_index] = True

    for i in range(1, m):
        last = points[selected[i - 1]]
        np.minimum(min_dist, ((points - last) ** 2).sum(axis=1), out=min_dist)
        candidates = np.where(taken, -np.inf, min_dist)
        # argmax returns the first maximum, i.e. the lowest index on ties
        selected[i] = int(np.argmax(candidates))
        taken[selected[i]] = True

    return selected


def sample_mesh_surface(mesh: TriangleMesh, n: int, seed: Optional[int] = 0) -> PointCloud:
    """
    Sample points uniformly on a mesh surface.

    A face is picked with probability proportional to its area, then a point
    is drawn uniformly on it with square-root barycentric coordinates.

    Args:
        mesh: Triangle mesh with positive total area
        n: Number of points
        seed: Random seed

    Returns:
        PointCloud of n points
    """
    if n < 1:
        raise GeometryError(f"Sample count must be positive, got {n}")
    total = mesh.total_area
    if not total > 0:
        raise GeometryError("Mesh has zero total surface area")

    rng = np.random.default_rng(seed)
    face_ids = rng.choice(len(mesh.faces), size=n, p=mesh.areas / total)
    r1 = np.sqrt(rng.random(n))[:, None]
    r2 = rng.random(n)[:, None]

    tri = mesh.vertices[mesh.faces[face_ids]]
    points = (1.0 - r1) * tri[:, 0] + r1 * (1.0 - r2) * tri[:, 1] + r1 * r2 * tri[:, 2]
    logger.debug(f"Sampled {n} surface points from {len(mesh.faces)} faces")
    return PointCloud(points)
