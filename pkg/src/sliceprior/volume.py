"""Dense multi-class label volumes on a regular world grid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import CLASS_NAMES


class GridMismatchError(ValueError):
    pass


@dataclass
class LabelVolume:
    """Class ids on an (nx, ny, nz) grid.

    Voxel ``(i, j, k)`` has its centre at ``origin + (index + 0.5) * spacing``.
    """

    labels: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray
    class_names: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.spacing = np.asarray(self.spacing, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.labels.ndim != 3:
            raise ValueError(f"labels must be 3-D, got shape {self.labels.shape}")
        if self.labels.size and self.labels.max() >= len(self.class_names):
            raise ValueError(f"class id {self.labels.max()} out of range")
        if np.any(self.spacing <= 0):
            raise ValueError("spacing must be positive")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.origin.copy(), self.origin + self.spacing * np.array(self.dims)

    def grid_spec(self) -> dict:
        return {"dims": list(self.dims), "spacing": self.spacing.tolist(), "origin": self.origin.tolist()}

    def same_grid(self, other: "LabelVolume") -> bool:
        return (self.dims == other.dims and np.array_equal(self.spacing, other.spacing)
                and np.array_equal(self.origin, other.origin))

    def voxel_centers(self, index=None) -> np.ndarray:
        """World coordinates of voxel centres; all voxels (x-fastest) if ``index`` is None."""
        if index is None:
            index = np.stack(np.unravel_index(np.arange(self.labels.size), self.dims, order="F"), axis=1)
        return self.origin + (np.asarray(index) + 0.5) * self.spacing

    def class_centers(self, cls: int) -> np.ndarray:
        idx = np.argwhere(self.labels == cls)
        return self.origin + (idx + 0.5) * self.spacing

    def lookup(self, points) -> np.ndarray:
        """Nearest-neighbour labels at world points; outside the grid gives 0.

        The nearest centre along an axis is ``floor((x - origin) / spacing)``,
        which rounds half-way points up.
        """
        pts = np.asarray(points, dtype=np.float64)
        idx = np.floor((pts - self.origin) / self.spacing).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.array(self.dims)), axis=-1)
        out = np.zeros(pts.shape[:-1], dtype=np.uint8)
        ii = idx[inside]
        out[inside] = self.labels[ii[:, 0], ii[:, 1], ii[:, 2]]
        return out

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=len(self.class_names))


def grid_from_spec(spec: dict, labels=None) -> LabelVolume:
    dims = tuple(int(d) for d in spec["dims"])
    if labels is None:
        labels = np.zeros(dims, dtype=np.uint8)
    return LabelVolume(labels, spec["spacing"], spec["origin"])
