"""
Core data models for image registration: images, displacement fields, masks
and label maps living on dense 1-3 dimensional grids.
"""
from enum import Enum
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from core.errors import InvalidArgumentError, InvalidFieldError, ShapeMismatchError

SUPPORTED_NDIMS = (1, 2, 3)


class TensorRole(Enum):
    """Roles a stored tensor can play"""
    IMAGE = "image"
    FIELD = "field"
    MASK = "mask"
    LABELS = "labels"

    @classmethod
    def from_string(cls, value: str) -> 'TensorRole':
        """Convert string to TensorRole enum"""
        return cls(value.strip().lower())


def _check_dims(shape: Tuple[int, ...], what: str) -> None:
    if len(shape) not in SUPPORTED_NDIMS:
        raise InvalidArgumentError(f"{what} must be 1-3 dimensional, got shape {shape}")
    if any(extent < 1 for extent in shape):
        raise InvalidArgumentError(f"{what} extents must be positive, got {shape}")


class Image:
    """Dense scalar grid, intensities nominally in [0, 1]"""

    def __init__(self, data: Any, dtype: Optional[np.dtype] = None):
        array = np.asarray(data)
        if dtype is None:
            dtype = array.dtype if array.dtype in (np.float32, np.float64) else np.float64
        self.data = np.ascontiguousarray(array, dtype=dtype)
        _check_dims(self.data.shape, "Image")
        if not np.all(np.isfinite(self.data)):
            raise InvalidArgumentError("Image values must be finite")

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def copy(self) -> 'Image':
        return Image(self.data.copy())

    def astype(self, dtype: np.dtype) -> 'Image':
        return Image(self.data, dtype=dtype)

    def __repr__(self) -> str:
        return f"Image(dims={self.dims}, dtype={self.dtype})"


class DisplacementField:
    """
    Per-grid-point displacement vectors u, in pixels of the grid the field
    lives on. Component a displaces along array axis a; the registration
    field is phi = id + u.
    """

    def __init__(self, vectors: Any, scale: float = 1.0, dtype: Optional[np.dtype] = None):
        array = np.asarray(vectors)
        if dtype is None:
            dtype = array.dtype if array.dtype in (np.float32, np.float64) else np.float64
        self.vectors = np.ascontiguousarray(array, dtype=dtype)
        if self.vectors.ndim < 2 or self.vectors.shape[-1] != self.vectors.ndim - 1:
            raise InvalidFieldError(
                f"Field vectors must have shape (*dims, n) with n = len(dims), got {self.vectors.shape}"
            )
        _check_dims(self.vectors.shape[:-1], "DisplacementField")
        if not np.all(np.isfinite(self.vectors)):
            raise InvalidFieldError("Displacement field contains non-finite values")
        self.scale = float(scale)
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise InvalidArgumentError(f"Field scale tag must be positive, got {scale}")

    @classmethod
    def zeros(cls, dims: Sequence[int], scale: float = 1.0, dtype: np.dtype = np.float64) -> 'DisplacementField':
        """Identity field (all-zero displacements) on the given grid"""
        dims = tuple(int(d) for d in dims)
        return cls(np.zeros(dims + (len(dims),), dtype=dtype), scale=scale)

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(self.vectors.shape[:-1])

    @property
    def ndim(self) -> int:
        return self.vectors.shape[-1]

    @property
    def dtype(self) -> np.dtype:
        return self.vectors.dtype

    @property
    def is_identity(self) -> bool:
        return not np.any(self.vectors)

    def norms(self) -> np.ndarray:
        """Euclidean length of every displacement vector"""
        return np.sqrt(np.sum(self.vectors * self.vectors, axis=-1))

    def copy(self) -> 'DisplacementField':
        return DisplacementField(self.vectors.copy(), scale=self.scale)

    def __repr__(self) -> str:
        return f"DisplacementField(dims={self.dims}, scale={self.scale})"


class Mask:
    """Boolean flag per grid point"""

    def __init__(self, flags: Any):
        self.flags = np.ascontiguousarray(np.asarray(flags, dtype=bool))
        _check_dims(self.flags.shape, "Mask")

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(self.flags.shape)

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.flags))

    def __repr__(self) -> str:
        return f"Mask(dims={self.dims}, count={self.count})"


class LabelMap:
    """Integer class id per grid point, 0 is background"""

    def __init__(self, labels: Any, num_classes: Optional[int] = None):
        array = np.asarray(labels)
        if array.dtype.kind not in 'iub':
            rounded = np.rint(array)
            if not np.array_equal(rounded, array):
                raise InvalidArgumentError("Label maps must hold integer class ids")
            array = rounded
        self.labels = np.ascontiguousarray(array, dtype=np.int32)
        _check_dims(self.labels.shape, "LabelMap")
        if np.any(self.labels < 0):
            raise InvalidArgumentError("Class ids must be non-negative")
        observed = int(self.labels.max()) + 1
        self.num_classes = observed if num_classes is None else int(num_classes)
        if observed > self.num_classes:
            raise InvalidArgumentError(
                f"Class id {observed - 1} exceeds declared class count {self.num_classes}"
            )

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(self.labels.shape)

    def class_mask(self, class_id: int) -> np.ndarray:
        return self.labels == class_id

    def present_classes(self) -> Dict[int, int]:
        """Map of class id to voxel count for classes present"""
        ids, counts = np.unique(self.labels, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}

    def __repr__(self) -> str:
        return f"LabelMap(dims={self.dims}, num_classes={self.num_classes})"


def require_same_dims(first: Tuple[int, ...], second: Tuple[int, ...], what: str = "grids") -> None:
    """Raise ShapeMismatchError unless the two extents agree"""
    if tuple(first) != tuple(second):
        raise ShapeMismatchError(f"{what} differ in extent: {tuple(first)} vs {tuple(second)}")
