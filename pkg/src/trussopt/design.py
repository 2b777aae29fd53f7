"""Relaxed mixed-variable design representation.

Every edge carries a design vector z in [0,1]^3 over the material states
(void, skeleton, actuator).  Physics always consumes the projected state
ratios ztilde, a sharpened softmax of z, so the mixed discrete choice
stays differentiable.  This module holds both projections (the ordinary
performance one and the globally centered stability one with its
straight-through backward rule), the material property interpolation,
volume fractions, the binarization penalties, late-stage attraction
nudging, and the final hard snap to one-hot rows.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

VOID, SKELETON, ACTUATOR = 0, 1, 2
#: unordered state pairs for the orthogonality penalties, in report order
ORTHO_PAIRS = ((VOID, SKELETON), (VOID, ACTUATOR), (SKELETON, ACTUATOR))


@dataclass(frozen=True)
class MaterialLibrary:
    """3 states x 3 properties matrix: stiffness (N/m), linear density
    (kg/m), max actuation strain (dimensionless)."""

    psi: np.ndarray

    def __post_init__(self):
        psi = np.asarray(self.psi, dtype=np.float64)
        if psi.shape != (3, 3):
            raise ValueError(f"psi must be 3x3, got {psi.shape}")
        if np.any(psi[:, 0] <= 0.0) or np.any(psi[:, 1] <= 0.0):
            raise ValueError("stiffnesses and densities must be > 0")
        if np.any(psi[:, 2] < 0.0) or np.any(psi[:, 2] >= 1.0):
            raise ValueError("max strains must lie in [0, 1)")
        if psi[VOID, 2] != 0.0 or psi[SKELETON, 2] != 0.0:
            raise ValueError("only the actuator state may actuate")
        object.__setattr__(self, "psi", psi)
        psi.setflags(write=False)

    @classmethod
    def default(cls) -> "MaterialLibrary":
        # densities entered in g/m and converted to kg/m here
        g_per_m = np.array([1e-5, 30.0, 100.0])
        psi = np.column_stack(
            [
                np.array([1e-7, 4e2, 3e1]),  # stiffness N/m
                g_per_m * 1e-3,              # density kg/m
                np.array([0.0, 0.0, 0.35]),  # max actuation strain
            ]
        )
        return cls(psi=psi)

    @property
    def stiffness(self) -> np.ndarray:
        return self.psi[:, 0]

    @property
    def density(self) -> np.ndarray:
        return self.psi[:, 1]

    @property
    def max_strain(self) -> float:
        return float(self.psi[ACTUATOR, 2])


@dataclass(frozen=True)
class ProjectionConfig:
    """Softmax sharpness for the two projection passes.

    beta       ordinary (performance) projection
    beta_stab  sharp centered projection probing the discrete proxy
    beta_ste   sharpness of the Jacobian substituted on the backward pass
    """

    beta: float = 20.0
    beta_stab: float = 500.0
    beta_ste: float = 20.0

    def __post_init__(self):
        if self.beta <= 0.0 or self.beta_ste <= 0.0:
            raise ValueError("beta and beta_ste must be > 0")
        if self.beta_stab <= self.beta:
            raise ValueError("beta_stab must exceed beta")


def _softmax_rows(y: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-shift so huge sharpness cannot overflow."""
    shifted = y - y.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_rows_vjp(s: np.ndarray, g: np.ndarray) -> np.ndarray:
    """VJP of row softmax: s * (g - <g, s>)."""
    inner = (g * s).sum(axis=1, keepdims=True)
    return s * (g - inner)


def project_performance(Z: np.ndarray, beta: float) -> np.ndarray:
    """Row-wise softmax(beta * z): smooth surrogate for one-hot states."""
    Z = np.asarray(Z, dtype=np.float64)
    if not np.all(np.isfinite(Z)):
        raise ValueError("design matrix contains non-finite entries")
    if beta <= 0.0:
        raise ValueError(f"beta must be > 0, got {beta}")
    return _softmax_rows(beta * Z)


def project_performance_vjp(ztilde: np.ndarray, g: np.ndarray, beta: float) -> np.ndarray:
    return beta * _softmax_rows_vjp(ztilde, g)


def centered_softmax(Z: np.ndarray, beta: float) -> np.ndarray:
    """Softmax of beta * (z - column mean): diverging rows sharpen fast."""
    Z = np.asarray(Z, dtype=np.float64)
    if not np.all(np.isfinite(Z)):
        raise ValueError("design matrix contains non-finite entries")
    return _softmax_rows(beta * (Z - Z.mean(axis=0, keepdims=True)))


def centered_softmax_vjp(s: np.ndarray, g: np.ndarray, beta: float) -> np.ndarray:
    """VJP of the centered softmax evaluated at ratio matrix s.

    The column-mean subtraction makes every row's gradient lose its
    column average.
    """
    gy = _softmax_rows_vjp(s, g)
    return beta * (gy - gy.mean(axis=0, keepdims=True))


@dataclass(frozen=True)
class StraightThroughRule:
    """Backward contract of the stability projection: gradients are taken
    through the centered softmax at beta_ste, not the sharp beta_stab."""

    beta_ste: float

    def vjp(self, Z: np.ndarray, g: np.ndarray) -> np.ndarray:
        soft = centered_softmax(Z, self.beta_ste)
        return centered_softmax_vjp(soft, g, self.beta_ste)


def project_stability(
    Z: np.ndarray, beta_stab: float, beta_ste: float
) -> tuple[np.ndarray, StraightThroughRule]:
    if beta_stab <= 0.0:
        raise ValueError(f"beta_stab must be > 0, got {beta_stab}")
    return centered_softmax(Z, beta_stab), StraightThroughRule(beta_ste=beta_ste)


class PerformanceProjection:
    """Differentiable Z -> ztilde map used on ordinary evaluation passes."""

    def __init__(self, beta: float = 20.0):
        self.beta = float(beta)

    def apply(self, Z: np.ndarray) -> np.ndarray:
        return project_performance(Z, self.beta)

    def vjp(self, Z: np.ndarray, g: np.ndarray) -> np.ndarray:
        return project_performance_vjp(self.apply(Z), g, self.beta)


class StabilityProjection:
    """Sharp centered projection with a straight-through backward pass."""

    def __init__(self, beta_stab: float = 500.0, beta_ste: float = 20.0):
        self.beta_stab = float(beta_stab)
        self.beta_ste = float(beta_ste)

    def apply(self, Z: np.ndarray) -> np.ndarray:
        return centered_softmax(Z, self.beta_stab)

    def vjp(self, Z: np.ndarray, g: np.ndarray) -> np.ndarray:
        return StraightThroughRule(self.beta_ste).vjp(Z, g)


def interpolate_properties(ztilde: np.ndarray, lib: MaterialLibrary) -> np.ndarray:
    """Effective per-edge properties: p = ztilde @ psi, linear in ztilde."""
    return np.asarray(ztilde, dtype=np.float64) @ lib.psi


def volume_fractions(ztilde: np.ndarray) -> tuple[float, float]:
    """Mean solid (skeleton + actuator) and actuator ratios over edges."""
    ztilde = np.asarray(ztilde, dtype=np.float64)
    n = ztilde.shape[0]
    v = float(ztilde[:, [SKELETON, ACTUATOR]].sum() / n)
    v_act = float(ztilde[:, ACTUATOR].sum() / n)
    return v, v_act


def volume_fraction_grads(n_edges: int) -> tuple[np.ndarray, np.ndarray]:
    """Constant gradients of (V, V_act) w.r.t. ztilde."""
    dv = np.zeros((n_edges, 3))
    dv[:, SKELETON] = 1.0 / n_edges
    dv[:, ACTUATOR] = 1.0 / n_edges
    dva = np.zeros((n_edges, 3))
    dva[:, ACTUATOR] = 1.0 / n_edges
    return dv, dva


def binarization_penalties(
    ztilde: np.ndarray, delta: float = 1e-6
) -> tuple[float, np.ndarray]:
    """Global L2 binarization penalty and the three pairwise overlaps.

    g_bin   = mean over edges of 1 - |ztilde_row|_2  (0 iff one-hot)
    g_ortho = per state pair, mean of z_k z_l / (0.5 (z_k + z_l) + delta)
    """
    ztilde = np.asarray(ztilde, dtype=np.float64)
    if delta <= 0.0:
        raise ValueError(f"delta must be > 0, got {delta}")
    n = ztilde.shape[0]
    norms = np.linalg.norm(ztilde, axis=1)
    g_bin = float(np.mean(1.0 - norms))
    g_ortho = np.empty(3)
    for idx, (k, l) in enumerate(ORTHO_PAIRS):
        a = ztilde[:, k]
        b = ztilde[:, l]
        g_ortho[idx] = np.mean(a * b / (0.5 * (a + b) + delta))
    return g_bin, g_ortho


def binarization_penalty_grads(
    ztilde: np.ndarray, delta: float = 1e-6
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of g_bin and each g_ortho pair w.r.t. ztilde."""
    ztilde = np.asarray(ztilde, dtype=np.float64)
    n = ztilde.shape[0]
    norms = np.linalg.norm(ztilde, axis=1, keepdims=True)
    d_bin = -ztilde / (norms * n)
    d_ortho = np.zeros((3,) + ztilde.shape)
    for idx, (k, l) in enumerate(ORTHO_PAIRS):
        a = ztilde[:, k]
        b = ztilde[:, l]
        denom = 0.5 * (a + b) + delta
        # d/da [ab / (0.5(a+b)+delta)] = (b*denom - 0.5*ab) / denom^2
        d_ortho[idx][:, k] = (b * denom - 0.5 * a * b) / (denom * denom * n)
        d_ortho[idx][:, l] = (a * denom - 0.5 * a * b) / (denom * denom * n)
    return d_bin, d_ortho


def attraction_nudge(
    Z: np.ndarray, ztilde: np.ndarray, tau_conf: float, gamma_nudge: float
) -> np.ndarray:
    """Pull confident rows toward their dominant discrete state.

    Rows whose max projected ratio exceeds tau_conf gain gamma_nudge on
    the dominant raw entry and lose gamma_nudge/2 on the other two,
    clamped to the [0, 1] box.  Rows below the threshold are untouched.
    """
    if not (1.0 / 3.0 < tau_conf <= 1.0):
        raise ValueError(f"tau_conf must lie in (1/3, 1], got {tau_conf}")
    if gamma_nudge < 0.0:
        raise ValueError(f"gamma_nudge must be >= 0, got {gamma_nudge}")
    Z = np.array(Z, dtype=np.float64, copy=True)
    ztilde = np.asarray(ztilde, dtype=np.float64)
    confident = ztilde.max(axis=1) > tau_conf
    dominant = ztilde.argmax(axis=1)
    rows = np.nonzero(confident)[0]
    Z[rows] -= 0.5 * gamma_nudge
    Z[rows, dominant[rows]] += 1.5 * gamma_nudge
    np.clip(Z, 0.0, 1.0, out=Z)
    return Z


def hard_snap(Z: np.ndarray) -> np.ndarray:
    """Argmax one-hot per row; ties resolve to the lowest state index."""
    Z = np.asarray(Z, dtype=np.float64)
    out = np.zeros_like(Z)
    out[np.arange(Z.shape[0]), Z.argmax(axis=1)] = 1.0
    return out


def save_design(path, Z: np.ndarray) -> None:
    with open(path, "w") as fh:
        json.dump({"design": np.asarray(Z, dtype=np.float64).tolist()}, fh)


def load_design(path) -> np.ndarray:
    with open(path) as fh:
        doc = json.load(fh)
    Z = np.asarray(doc["design"], dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != 3:
        raise ValueError(f"design must be (N_e, 3), got {Z.shape}")
    return Z


def design_sha256(Z: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(Z, dtype=np.float64).tobytes()).hexdigest()
