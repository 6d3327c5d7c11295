"""
Exception hierarchy shared by the PointGCN modules.

Library code raises these; only the command-line layer turns them into
exit codes.
"""

from typing import Optional


class PointGCNError(Exception):
    """Base class for every error raised by this package."""


class GeometryError(PointGCNError):
    """Unusable geometry: degenerate clouds, zero-area meshes, bad counts."""


class GraphError(PointGCNError):
    """Graph construction or Laplacian preconditions violated."""


class ShapeError(PointGCNError):
    """Array shapes do not agree."""


class ConfigError(PointGCNError):
    """Invalid configuration key or value, or a checkpoint/config mismatch."""


class DatasetError(PointGCNError):
    """Dataset contents unusable: absent classes, labels outside the class list."""


class FormatError(PointGCNError):
    """Binary file with bad magic, version, length or checksum."""


class ParseError(PointGCNError):
    """Text file that cannot be parsed."""

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.line = line
        self.path = path
        location = ""
        if path is not None:
            location += f"{path}"
        if line is not None:
            location += f"{':' if location else ''}line {line}"
        super().__init__(f"{location}: {message}" if location else message)


class StaleCacheError(PointGCNError):
    """Backward pass requested on a cache that was already consumed."""


class TrainingDivergedError(PointGCNError):
    """Loss became NaN or infinite during training."""

    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"Training diverged at epoch {epoch}, batch {batch}: loss={loss}")
