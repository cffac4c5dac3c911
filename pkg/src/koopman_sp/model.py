"""Slow-fast vector fields and the critical-manifold geometry of van der Pol.

A planar slow-fast system is written in two equivalent time scales::

    fast (t):      x' = F(x, y),        y' = eps * G(x, y)
    slow (tau):    eps * dx = F(x, y),  dy = G(x, y),       tau = eps * t

The critical manifold ``W = {F = 0}`` of van der Pol (``F = x - x**3/3 + y``,
``G = -x``) has three graphs over ``y``: the attracting branches ``W_-``
(``x < -1``) and ``W_+`` (``x > 1``) and the repelling middle branch ``W_0``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Optional

import numpy as np

from .exceptions import DomainError, EvaluationError, ProjectionError

#: Half-width of the band around W_0 treated as lying on it.
TOL_W0 = 1e-9
#: Fold ordinate: the branches meet at y = +-2/3.
Y_FOLD = 2.0 / 3.0


class State(NamedTuple):
    x: float
    y: float


class TimeScale(enum.Enum):
    FAST = "fast"
    SLOW = "slow"


class ManifoldBranch(enum.Enum):
    W_MINUS = "W-"
    W_ZERO = "W0"
    W_PLUS = "W+"


class Region(enum.Enum):
    D_MINUS = "D-"
    D_PLUS = "D+"
    ON_W0 = "W0"


@dataclass(frozen=True)
class ConstrainedState:
    """A point of the attracting critical manifold ``W_-`` or ``W_+``.

    ``|xbar| == 1`` is accepted and denotes the fold (jump) point that closes
    the branch; the constrained flow leaves it by an immediate jump.
    """

    branch: ManifoldBranch
    xbar: float

    def __post_init__(self):
        if self.branch is ManifoldBranch.W_PLUS:
            ok = self.xbar >= 1.0
        elif self.branch is ManifoldBranch.W_MINUS:
            ok = self.xbar <= -1.0
        else:
            raise DomainError("constrained states live on W- or W+ only")
        if not (ok and math.isfinite(self.xbar)):
            raise DomainError(f"xbar={self.xbar!r} is not on branch {self.branch.value}")

    @property
    def ybar(self) -> float:
        x = self.xbar
        return x * x * x / 3.0 - x

    @property
    def sign(self) -> int:
        return 1 if self.branch is ManifoldBranch.W_PLUS else -1

    def as_state(self) -> State:
        return State(self.xbar, self.ybar)


def _fd_partials(fun, x, y):
    hx = 1e-6 * np.maximum(1.0, np.abs(x))
    hy = 1e-6 * np.maximum(1.0, np.abs(y))
    dx = (fun(x + hx, y) - fun(x - hx, y)) / (2 * hx)
    dy = (fun(x, y + hy) - fun(x, y - hy)) / (2 * hy)
    return dx, dy


@dataclass(frozen=True)
class SlowFastSystem:
    """The pair ``(F, G)`` together with the small parameter ``epsilon``.

    ``F`` and ``G`` must accept numpy arrays and work elementwise. ``jacobian``
    optionally returns ``(F_x, F_y, G_x, G_y)``; central differences are used
    otherwise.
    """

    F: Callable
    G: Callable
    epsilon: float = 1.0
    jacobian: Optional[Callable] = None
    name: str = "custom"
    odd_symmetric: bool = field(default=False, compare=False)

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise DomainError(f"epsilon must be positive and finite, got {self.epsilon!r}")

    def with_epsilon(self, epsilon: float) -> "SlowFastSystem":
        return replace(self, epsilon=float(epsilon))

    @property
    def is_van_der_pol(self) -> bool:
        return self.name == "van_der_pol"

    def fast_rhs(self, x, y):
        """Fast-time field ``(F, eps*G)`` on arrays."""
        return self.F(x, y), self.epsilon * self.G(x, y)

    def partials(self, x, y):
        if self.jacobian is not None:
            return self.jacobian(x, y)
        fx, fy = _fd_partials(self.F, x, y)
        gx, gy = _fd_partials(self.G, x, y)
        return fx, fy, gx, gy

    def fast_divergence(self, x, y):
        """``F_x + eps*G_y``; equals the slow-time divergence times eps."""
        fx, _, _, gy = self.partials(x, y)
        return fx + self.epsilon * gy


def _vdp_F(x, y):
    return x - x * x * x / 3.0 + y


def _vdp_G(x, y):
    return -x


def _vdp_jacobian(x, y):
    one = np.ones_like(x)
    return 1.0 - x * x, one, -one, 0.0 * one


def van_der_pol(epsilon: float = 1.0) -> SlowFastSystem:
    return SlowFastSystem(
        F=_vdp_F, G=_vdp_G, epsilon=float(epsilon), jacobian=_vdp_jacobian,
        name="van_der_pol", odd_symmetric=True,
    )


def _check_state(s) -> State:
    x, y = float(s[0]), float(s[1])
    if not (math.isfinite(x) and math.isfinite(y)):
        raise DomainError(f"state must be finite, got {(x, y)!r}")
    return State(x, y)


def eval_vector_field(sys: SlowFastSystem, s, scale: TimeScale = TimeScale.FAST):
    """Return ``(dx, dy)`` of the system at ``s`` in the requested time scale."""
    x, y = _check_state(s)
    f = float(sys.F(x, y))
    g = float(sys.G(x, y))
    if not (math.isfinite(f) and math.isfinite(g)):
        raise EvaluationError(f"vector field is not finite at {(x, y)!r}", state=State(x, y))
    if scale is TimeScale.FAST:
        return f, sys.epsilon * g
    return f / sys.epsilon, g


# -- critical manifold of van der Pol ---------------------------------------

_BRANCH_Y_OK = {
    # closures at the folds are admitted: gamma_-(2/3) = -1, gamma_+(-2/3) = 1
    ManifoldBranch.W_MINUS: lambda y: y <= Y_FOLD,
    ManifoldBranch.W_ZERO: lambda y: -Y_FOLD <= y <= Y_FOLD,
    ManifoldBranch.W_PLUS: lambda y: y >= -Y_FOLD,
}


def gamma(branch: ManifoldBranch, y: float) -> float:
    """Root of ``x**3 - 3x - 3y = 0`` on the requested branch of W.

    Closed-form trigonometric / hyperbolic solution of the depressed cubic
    followed by one Newton step.
    """
    y = float(y)
    if not math.isfinite(y) or not _BRANCH_Y_OK[branch](y):
        raise DomainError(f"y={y!r} outside the domain of branch {branch.value}")
    a = 1.5 * y
    if abs(a) <= 1.0:
        alpha = math.acos(a)
        k = {ManifoldBranch.W_PLUS: 0, ManifoldBranch.W_ZERO: 1, ManifoldBranch.W_MINUS: 2}[branch]
        x = 2.0 * math.cos((alpha - 2.0 * math.pi * k) / 3.0)
    elif a > 1.0:
        x = 2.0 * math.cosh(math.acosh(a) / 3.0)
    else:
        x = -2.0 * math.cosh(math.acosh(-a) / 3.0)
    # Newton polish; skipped at the double root where the derivative vanishes
    d = 3.0 * x * x - 3.0
    if abs(d) > 1e-6:
        x -= (x * x * x - 3.0 * x - 3.0 * y) / d
    if branch is ManifoldBranch.W_PLUS:
        x = max(x, 1.0)
    elif branch is ManifoldBranch.W_MINUS:
        x = min(x, -1.0)
    else:
        x = min(max(x, -1.0), 1.0)
    return x


def classify_region(s, tol: float = TOL_W0) -> Region:
    x, y = _check_state(s)
    if abs(y) <= Y_FOLD:
        g0 = gamma(ManifoldBranch.W_ZERO, y)
        if abs(x - g0) <= tol:
            return Region.ON_W0
        return Region.D_PLUS if x > g0 else Region.D_MINUS
    return Region.D_PLUS if y > Y_FOLD else Region.D_MINUS


def project_pi(s) -> ConstrainedState:
    """Send a state along its horizontal fibre to the attracting branch."""
    region = classify_region(s)
    y = float(s[1])
    if region is Region.ON_W0:
        raise ProjectionError(f"projection undefined on W_0 at {tuple(s)!r}")
    if region is Region.D_PLUS:
        return ConstrainedState(ManifoldBranch.W_PLUS, gamma(ManifoldBranch.W_PLUS, y))
    return ConstrainedState(ManifoldBranch.W_MINUS, gamma(ManifoldBranch.W_MINUS, y))


def classify_regions(x, y, tol: float = TOL_W0):
    """Vectorised :func:`classify_region`; returns int codes -1 (D-), 0 (W0), +1 (D+)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    out = np.where(y > 0, 1, -1)
    mid = np.abs(y) <= Y_FOLD
    if np.any(mid):
        g0 = np.array([gamma(ManifoldBranch.W_ZERO, v) for v in y[mid]])
        xm = x[mid]
        code = np.where(xm > g0, 1, -1)
        code[np.abs(xm - g0) <= tol] = 0
        out[mid] = code
    return out
