"""CPG-clocked MLP control policy.

The controller maps a bank of phase-shifted sine clock signals, the goal
position, and the robot's centered node positions and velocities to one
command per edge in (-1, 1).  Commands are turned into target strains by
scaling with the edge's actuator ratio and the actuator's maximum strain,
so only (partially) actuated edges respond.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .design import ACTUATOR, MaterialLibrary


@dataclass(frozen=True)
class CPGConfig:
    n_cpg: int = 10
    omega: float = 10.0  # rad/s

    def __post_init__(self):
        if self.n_cpg < 1:
            raise ValueError(f"n_cpg must be >= 1, got {self.n_cpg}")
        if self.omega <= 0.0:
            raise ValueError(f"omega must be > 0, got {self.omega}")


@dataclass
class ControllerParams:
    """Single hidden layer MLP with tanh on both layers.

    w1: (input_dim, hidden), b1: (hidden,), w2: (hidden, n_edges),
    b2: (n_edges,).
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def output_dim(self) -> int:
        return self.w2.shape[1]

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.input_dim, self.hidden_dim, self.output_dim)


def controller_dims(
    n_nodes: int, n_edges: int, n_cpg: int = 10, hidden: int = 32
) -> tuple[int, int, int]:
    """Layer widths (n_cpg + 2 + 4*N_m, hidden, N_e)."""
    return (n_cpg + 2 + 4 * n_nodes, hidden, n_edges)


def xavier_init(seed: int, dims: tuple[int, int, int]) -> ControllerParams:
    """Uniform Xavier weights on +-sqrt(6/(fan_in+fan_out)), zero biases."""
    d_in, d_hid, d_out = dims
    if min(dims) < 1:
        raise ValueError(f"invalid layer widths {dims}")
    rng = np.random.default_rng(seed)
    a1 = np.sqrt(6.0 / (d_in + d_hid))
    a2 = np.sqrt(6.0 / (d_hid + d_out))
    return ControllerParams(
        w1=rng.uniform(-a1, a1, size=(d_in, d_hid)),
        b1=np.zeros(d_hid),
        w2=rng.uniform(-a2, a2, size=(d_hid, d_out)),
        b2=np.zeros(d_out),
    )


def cpg_signals(t: float, cfg: CPGConfig) -> np.ndarray:
    """C_j(t) = sin(omega t + 2 pi j / n_cpg) for j = 0..n_cpg-1."""
    if t < 0.0:
        raise ValueError(f"t must be >= 0, got {t}")
    j = np.arange(cfg.n_cpg)
    return np.sin(cfg.omega * t + 2.0 * np.pi * j / cfg.n_cpg)


def assemble_input(
    positions: np.ndarray,
    velocities: np.ndarray,
    goal: np.ndarray,
    cpg: np.ndarray,
) -> np.ndarray:
    """Concatenate [clock; goal; positions - centroid; velocities]."""
    positions = np.asarray(positions, dtype=np.float64)
    velocities = np.asarray(velocities, dtype=np.float64)
    if positions.shape != velocities.shape or positions.ndim != 2 or positions.shape[1] != 2:
        raise ValueError(
            f"positions {positions.shape} and velocities {velocities.shape} "
            "must both be (N_m, 2)"
        )
    offsets = positions - positions.mean(axis=0, keepdims=True)
    return np.concatenate(
        [np.asarray(cpg, dtype=np.float64), np.asarray(goal, dtype=np.float64).reshape(2),
         offsets.ravel(), velocities.ravel()]
    )


def forward(theta: ControllerParams, inp: np.ndarray) -> np.ndarray:
    """u = tanh(w2^T tanh(w1^T x + b1) + b2), entries strictly in (-1, 1)."""
    u, _ = forward_cached(theta, inp)
    return u


def forward_cached(theta: ControllerParams, inp: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward pass that also returns the hidden activation for the VJP."""
    inp = np.asarray(inp, dtype=np.float64)
    if inp.shape != (theta.input_dim,):
        raise ValueError(f"input has shape {inp.shape}, expected ({theta.input_dim},)")
    h = np.tanh(inp @ theta.w1 + theta.b1)
    u = np.tanh(h @ theta.w2 + theta.b2)
    return u, h


def forward_vjp(
    theta: ControllerParams,
    inp: np.ndarray,
    h: np.ndarray,
    u: np.ndarray,
    g_u: np.ndarray,
) -> tuple[np.ndarray, ControllerParams]:
    """Backward through the MLP: returns (g_input, gradient params)."""
    ga2 = (1.0 - u * u) * g_u
    g_w2 = np.outer(h, ga2)
    g_b2 = ga2
    gh = theta.w2 @ ga2
    ga1 = (1.0 - h * h) * gh
    g_w1 = np.outer(inp, ga1)
    g_b1 = ga1
    g_inp = theta.w1 @ ga1
    return g_inp, ControllerParams(w1=g_w1, b1=g_b1, w2=g_w2, b2=g_b2)


def target_strains(u: np.ndarray, ztilde: np.ndarray, lib: MaterialLibrary) -> np.ndarray:
    """Per-edge target strain: actuator ratio * max strain * command."""
    return np.asarray(ztilde)[:, ACTUATOR] * lib.max_strain * np.asarray(u)


def params_to_vector(theta: ControllerParams) -> np.ndarray:
    return np.concatenate(
        [theta.w1.ravel(), theta.b1.ravel(), theta.w2.ravel(), theta.b2.ravel()]
    )


def vector_to_params(vec: np.ndarray, dims: tuple[int, int, int]) -> ControllerParams:
    d_in, d_hid, d_out = dims
    n1 = d_in * d_hid
    n2 = n1 + d_hid
    n3 = n2 + d_hid * d_out
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (n3 + d_out,):
        raise ValueError(f"vector length {vec.shape} does not match dims {dims}")
    return ControllerParams(
        w1=vec[:n1].reshape(d_in, d_hid).copy(),
        b1=vec[n1:n2].copy(),
        w2=vec[n2:n3].reshape(d_hid, d_out).copy(),
        b2=vec[n3:].copy(),
    )


def save_params(path, theta: ControllerParams) -> None:
    """Binary checkpoint; float64 arrays round-trip bit-exactly."""
    np.savez(path, w1=theta.w1, b1=theta.b1, w2=theta.w2, b2=theta.b2)


def load_params(path) -> ControllerParams:
    with np.load(path) as data:
        return ControllerParams(
            w1=data["w1"].astype(np.float64, copy=True),
            b1=data["b1"].astype(np.float64, copy=True),
            w2=data["w2"].astype(np.float64, copy=True),
            b2=data["b2"].astype(np.float64, copy=True),
        )


def params_sha256(theta: ControllerParams) -> str:
    digest = hashlib.sha256()
    for arr in (theta.w1, theta.b1, theta.w2, theta.b2):
        digest.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return digest.hexdigest()
