"""Independent numerical oracles used by the test and acceptance suites.

Nothing here shares code with the simulator's gradient path: finite
differences check the hand-written adjoint, and a scalar two-body
integrator run at a much finer step acts as ground truth for energy and
period checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class FDConfig:
    """Central-difference settings.

    h defaults to 1e-5; use a larger step (1e-4) for design variables
    whose sensitivity is compressed by the softmax projection.
    """

    h: float = 1e-5
    scheme: str = "central"
    coords: Sequence[int] | str = "all"

    def __post_init__(self):
        if self.h <= 0.0:
            raise ValueError(f"h must be > 0, got {self.h}")
        if self.scheme != "central":
            raise ValueError(f"only the central scheme is supported, got {self.scheme!r}")


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x0: np.ndarray, cfg: FDConfig = FDConfig()
) -> np.ndarray:
    """Central differences (f(x + h e_i) - f(x - h e_i)) / 2h.

    Returns a dense gradient the same shape as x0 when coords is "all";
    otherwise only the sampled coordinates are filled, the rest are NaN.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if isinstance(cfg.coords, str) and cfg.coords == "all":
        coords = range(x0.size)
        grad = np.zeros(x0.size)
    else:
        coords = [int(i) for i in cfg.coords]
        grad = np.full(x0.size, np.nan)
    flat = x0.ravel().copy()
    for i in coords:
        orig = flat[i]
        flat[i] = orig + cfg.h
        f_plus = f(flat.reshape(x0.shape))
        flat[i] = orig - cfg.h
        f_minus = f(flat.reshape(x0.shape))
        flat[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise FloatingPointError(f"f is non-finite near coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * cfg.h)
    return grad.reshape(x0.shape)


@dataclass
class TwoNodeSpring:
    """One spring between two point masses, no gravity or contact."""

    m1: float
    m2: float
    k: float
    l0: float
    x1: tuple[float, float]
    x2: tuple[float, float]
    v1: tuple[float, float] = (0.0, 0.0)
    v2: tuple[float, float] = (0.0, 0.0)
    damping: float = 0.0

    def angular_frequency(self) -> float:
        return math.sqrt(self.k * (1.0 / self.m1 + 1.0 / self.m2))

    def energy(self, x1, x2, v1, v2) -> float:
        l = math.hypot(x2[0] - x1[0], x2[1] - x1[1])
        return (
            0.5 * self.m1 * (v1[0] ** 2 + v1[1] ** 2)
            + 0.5 * self.m2 * (v2[0] ** 2 + v2[1] ** 2)
            + 0.5 * self.k * (l - self.l0) ** 2
        )


def reference_integrate(
    system: TwoNodeSpring, dt_fine: float, steps: int, keep_every: int = 1
) -> dict:
    """Damped symplectic Euler on the two-node spring in plain scalars.

    Matches the simulator's update order (damp velocity, add spring
    impulse, step position) so the only difference from the system under
    test is the step size.  Returns sampled positions, velocities,
    spring lengths and energies.
    """
    x1x, x1y = system.x1
    x2x, x2y = system.x2
    v1x, v1y = system.v1
    v2x, v2y = system.v2
    damp = math.exp(-system.damping * dt_fine)
    k, l0 = system.k, system.l0
    inv_m1, inv_m2 = 1.0 / system.m1, 1.0 / system.m2

    n_keep = steps // keep_every + 1
    lengths = np.empty(n_keep)
    energies = np.empty(n_keep)
    xs = np.empty((n_keep, 2, 2))
    vs = np.empty((n_keep, 2, 2))
    idx = 0

    def snapshot(i):
        nonlocal idx
        lengths[idx] = math.hypot(x2x - x1x, x2y - x1y)
        energies[idx] = system.energy((x1x, x1y), (x2x, x2y), (v1x, v1y), (v2x, v2y))
        xs[idx] = ((x1x, x1y), (x2x, x2y))
        vs[idx] = ((v1x, v1y), (v2x, v2y))
        idx += 1

    snapshot(0)
    for s in range(steps):
        dx = x2x - x1x
        dy = x2y - x1y
        l = math.hypot(dx, dy)
        f = k * (l - l0)  # tension > 0 pulls the nodes together
        jx = f * dt_fine * dx / l
        jy = f * dt_fine * dy / l
        v1x = damp * v1x + jx * inv_m1
        v1y = damp * v1y + jy * inv_m1
        v2x = damp * v2x - jx * inv_m2
        v2y = damp * v2y - jy * inv_m2
        x1x += v1x * dt_fine
        x1y += v1y * dt_fine
        x2x += v2x * dt_fine
        x2y += v2y * dt_fine
        if (s + 1) % keep_every == 0:
            snapshot(s + 1)

    return {
        "xs": xs[:idx],
        "vs": vs[:idx],
        "lengths": lengths[:idx],
        "energies": energies[:idx],
        "dt": dt_fine * keep_every,
    }


def measure_period(lengths: np.ndarray, dt: float, rest_length: float) -> float:
    """Oscillation period from upward zero crossings of l - l0."""
    sig = lengths - rest_length
    crossings = []
    for i in range(1, len(sig)):
        if sig[i - 1] < 0.0 <= sig[i]:
            # linear interpolation of the crossing instant
            frac = -sig[i - 1] / (sig[i] - sig[i - 1])
            crossings.append((i - 1 + frac) * dt)
    if len(crossings) < 2:
        raise ValueError("fewer than two zero crossings; run longer")
    diffs = np.diff(crossings)
    return float(np.mean(diffs))
