"""Per-pixel depth/normal/cost container for one reference image."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class DepthNormalMap:
    """Depth, camera-frame normal, aggregated cost and validity per pixel.

    Arrays are row-major: ``depth[v, u]``. Invalid pixels carry zero depth and
    a zero normal.
    """

    depth: np.ndarray
    normal: np.ndarray
    cost: np.ndarray
    valid: np.ndarray

    @classmethod
    def empty(cls, width: int, height: int, cost: float = 0.0) -> "DepthNormalMap":
        return cls(
            np.zeros((height, width)),
            np.zeros((height, width, 3)),
            np.full((height, width), float(cost)),
            np.zeros((height, width), dtype=bool),
        )

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    def copy(self) -> "DepthNormalMap":
        return DepthNormalMap(
            self.depth.copy(), self.normal.copy(), self.cost.copy(), self.valid.copy()
        )

    def clear_invalid(self) -> "DepthNormalMap":
        """Zero the hypothesis of every invalid pixel in place."""
        self.depth[~self.valid] = 0.0
        self.normal[~self.valid] = 0.0
        return self

    def equals(self, other: "DepthNormalMap") -> bool:
        """Bit-exact comparison (NaN payloads included)."""
        return all(
            a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()
            for a, b in (
                (self.depth, other.depth),
                (self.normal, other.normal),
                (self.cost, other.cost),
                (self.valid, other.valid),
            )
        )
