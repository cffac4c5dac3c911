"""Rectangular grids and the fields sampled on them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DomainError


@dataclass(frozen=True)
class GridSpec:
    x_min: float = -4.0
    x_max: float = 4.0
    y_min: float = -2.0
    y_max: float = 2.0
    nx: int = 201
    ny: int = 101

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DomainError("grid bounds must satisfy min < max")
        if self.nx < 1 or self.ny < 1:
            raise DomainError("grid needs at least one node per axis")

    @property
    def hx(self) -> float:
        return (self.x_max - self.x_min) / (self.nx - 1) if self.nx > 1 else 0.0

    @property
    def hy(self) -> float:
        return (self.y_max - self.y_min) / (self.ny - 1) if self.ny > 1 else 0.0

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.nx) if self.nx > 1 else np.array([self.x_min])

    @property
    def ys(self) -> np.ndarray:
        return np.linspace(self.y_min, self.y_max, self.ny) if self.ny > 1 else np.array([self.y_min])

    def mesh(self):
        """``(X, Y)`` arrays of shape (ny, nx); row j holds ``y = ys[j]``."""
        return np.meshgrid(self.xs, self.ys)

    def points(self) -> np.ndarray:
        """All nodes in row-major order (x fastest), shape (ny*nx, 2)."""
        X, Y = self.mesh()
        return np.column_stack([X.ravel(), Y.ravel()])

    @classmethod
    def single(cls, x: float, y: float) -> "GridSpec":
        return cls(x, x + 1.0, y, y + 1.0, 1, 1)

    def to_dict(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max, "y_min": self.y_min,
                "y_max": self.y_max, "nx": self.nx, "ny": self.ny}


@dataclass
class Field:
    """Grid values (shape (ny, nx)); NaN marks cells that were not computed."""

    grid: GridSpec
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape != (self.grid.ny, self.grid.nx):
            self.values = self.values.reshape(self.grid.ny, self.grid.nx)

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.values)

    @property
    def computed(self) -> np.ndarray:
        """Mask of cells holding a value (sentinel cells excluded)."""
        v = self.values
        if self.is_complex:
            return ~(np.isnan(v.real) | np.isnan(v.imag))
        return ~np.isnan(v)

    @property
    def n_sentinel(self) -> int:
        return int(self.values.size - self.computed.sum())
