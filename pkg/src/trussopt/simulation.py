"""Differentiable 2D mass-spring dynamics with ground contact.

Forward model for one step of size dt at time t with state (x, v):

  1. controller: clock signals + goal + centered positions + velocities
     feed the MLP; commands become target strains and target lengths
     l_target = l0 (1 + eps).
  2. spring forces F_e = k_e (l_e - l_target,e); each edge hands the
     impulse F dt uhat to node i and its negation to node j (uhat points
     i -> j).
  3. velocity update v* = exp(-gamma dt) v + J_sum / m + g dt.
  4. contact: nodes whose tentative position x + v* dt penetrates the
     ground are advanced to the linearly interpolated time of impact,
     the normal velocity is zeroed, the tangential velocity is zeroed
     (infinite friction) or reduced by mu |v_n| without crossing zero
     (Coulomb), and the remaining dt - tau is integrated with the new
     velocity.
  5. free nodes take x' = x + v* dt.

The reverse pass replays the stored states and differentiates the exact
branch taken at every step, including the time-of-impact split, and
accumulates gradients w.r.t. the controller weights and the per-edge
state ratios (through stiffness, actuation gain, and lumped mass).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .controller import (
    CPGConfig,
    ControllerParams,
    forward_vjp,
)
from .design import ACTUATOR, MaterialLibrary
from .errors import DegenerateGeometry, SimulationDiverged
from .lattice import LatticeSpec, MassParams, node_mass_vjp, node_masses

MIN_EDGE_LENGTH = 1e-6  # m, floor for the unit-vector division


def _finite_max_speed(v: np.ndarray) -> float:
    finite = np.abs(v[np.isfinite(v)])
    return float(finite.max()) if finite.size else float("inf")


@dataclass(frozen=True)
class GroundModel:
    """Flat ground or a flat run-up meeting an upward incline.

    For kind="incline" the surface is flat at y = pivot[1] left of
    pivot[0] and rises at angle_deg to the right of it; the segment a
    node interacts with is chosen by the node's x coordinate.
    """

    kind: str = "flat"
    height: float = 0.0
    angle_deg: float = 0.0
    pivot: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("flat", "incline"):
            raise ValueError(f"unknown ground kind {self.kind!r}")
        if not 0.0 <= self.angle_deg <= 45.0:
            raise ValueError(f"angle must lie in [0, 45] degrees, got {self.angle_deg}")

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        if self.kind == "flat":
            return points[:, 1] - self.height
        px, py = self.pivot
        a = np.deg2rad(self.angle_deg)
        flat_sd = points[:, 1] - py
        incline_sd = -np.sin(a) * (points[:, 0] - px) + np.cos(a) * (points[:, 1] - py)
        return np.where(points[:, 0] < px, flat_sd, incline_sd)

    def frames(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Unit (normal, tangent) of the segment under each point."""
        points = np.atleast_2d(points)
        n = np.zeros_like(points)
        t = np.zeros_like(points)
        if self.kind == "flat":
            n[:, 1] = 1.0
            t[:, 0] = 1.0
            return n, t
        a = np.deg2rad(self.angle_deg)
        on_incline = points[:, 0] >= self.pivot[0]
        n[:, 0] = np.where(on_incline, -np.sin(a), 0.0)
        n[:, 1] = np.where(on_incline, np.cos(a), 1.0)
        t[:, 0] = np.where(on_incline, np.cos(a), 1.0)
        t[:, 1] = np.where(on_incline, np.sin(a), 0.0)
        return n, t


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.002
    total_steps: int = 8192
    grad_steps: int | None = None  # None means full-horizon backward
    damping: float = 2.0  # 1/s exponential velocity decay
    gravity: tuple[float, float] = (0.0, -9.8)
    ground: GroundModel | None = GroundModel()
    friction: str = "infinite"  # "infinite" | "coulomb"
    mu: float = 0.0

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.grad_steps is not None and not (1 <= self.grad_steps <= self.total_steps):
            raise ValueError(
                f"grad_steps must lie in [1, total_steps], got {self.grad_steps}"
            )
        if self.damping < 0.0:
            raise ValueError(f"damping must be >= 0, got {self.damping}")
        if self.friction not in ("infinite", "coulomb"):
            raise ValueError(f"unknown friction model {self.friction!r}")
        if self.mu < 0.0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")


@dataclass
class SimState:
    x: np.ndarray  # (N_m, 2) positions
    v: np.ndarray  # (N_m, 2) velocities
    t: float = 0.0


@dataclass
class RolloutRecord:
    """Stored trajectory: enough to replay any step bit-exactly.

    xs/vs hold the state at the start of each step plus the final state;
    contact_counts and contact_digest summarize which contact branches
    fired (useful for determinism checks and grazing detection).
    """

    xs: np.ndarray  # (T+1, N_m, 2)
    vs: np.ndarray  # (T+1, N_m, 2)
    loss: float
    head_index: int
    dt: float
    contact_counts: np.ndarray
    contact_digest: str

    @property
    def n_steps(self) -> int:
        return self.xs.shape[0] - 1

    def state(self, step: int) -> SimState:
        return SimState(x=self.xs[step].copy(), v=self.vs[step].copy(), t=step * self.dt)


# ---------------------------------------------------------------------------
# forward pieces


@dataclass
class _Context:
    """Everything constant over a rollout, precomputed once."""

    ei: np.ndarray
    ej: np.ndarray
    l0: np.ndarray
    head: int
    n_nodes: int
    k_edge: np.ndarray      # effective stiffness per edge
    act_gain: np.ndarray    # actuator ratio * max strain per edge
    masses: np.ndarray
    inv_m: np.ndarray
    theta: ControllerParams
    goal: np.ndarray
    cpg_phase: np.ndarray   # 2 pi j / n_cpg
    omega: float
    n_cpg: int
    dt: float
    damp: float             # exp(-gamma dt)
    g_dt: np.ndarray        # gravity * dt
    ground: GroundModel | None
    friction_infinite: bool
    mu: float


def _make_context(
    lattice: LatticeSpec,
    ztilde: np.ndarray,
    lib: MaterialLibrary,
    theta: ControllerParams,
    goal,
    cfg: SimConfig,
    cpg: CPGConfig,
    mass_params: MassParams,
) -> _Context:
    ztilde = np.asarray(ztilde, dtype=np.float64)
    masses = node_masses(lattice, ztilde, lib, mass_params)
    expected = (cpg.n_cpg + 2 + 4 * lattice.n_nodes, theta.hidden_dim, lattice.n_edges)
    if theta.dims != expected:
        raise ValueError(f"controller dims {theta.dims} do not match lattice {expected}")
    return _Context(
        ei=lattice.edges[:, 0],
        ej=lattice.edges[:, 1],
        l0=lattice.rest_lengths,
        head=lattice.head_index,
        n_nodes=lattice.n_nodes,
        k_edge=ztilde @ lib.stiffness,
        act_gain=ztilde[:, ACTUATOR] * lib.max_strain,
        masses=masses,
        inv_m=1.0 / masses,
        theta=theta,
        goal=np.asarray(goal, dtype=np.float64).reshape(2),
        cpg_phase=2.0 * np.pi * np.arange(cpg.n_cpg) / cpg.n_cpg,
        omega=cpg.omega,
        n_cpg=cpg.n_cpg,
        dt=cfg.dt,
        damp=float(np.exp(-cfg.damping * cfg.dt)),
        g_dt=np.asarray(cfg.gravity, dtype=np.float64) * cfg.dt,
        ground=cfg.ground,
        friction_infinite=(cfg.friction == "infinite"),
        mu=cfg.mu,
    )


def _controller_step(ctx: _Context, x, v, t):
    cpg = np.sin(ctx.omega * t + ctx.cpg_phase)
    offsets = x - x.mean(axis=0, keepdims=True)
    inp = np.concatenate([cpg, ctx.goal, offsets.ravel(), v.ravel()])
    h = np.tanh(inp @ ctx.theta.w1 + ctx.theta.b1)
    u = np.tanh(h @ ctx.theta.w2 + ctx.theta.b2)
    eps = ctx.act_gain * u
    return inp, h, u, eps


def _spring_impulses(ctx: _Context, x, eps):
    """Per-edge Hooke forces scattered to nodal impulses.

    The edge length is floored at MIN_EDGE_LENGTH before the division so
    a collapsed (void) edge transmits a vanishing force instead of
    blowing up; fully coincident nodes exchange no force at all.
    """
    d = x[ctx.ej] - x[ctx.ei]
    l = np.maximum(np.sqrt((d * d).sum(axis=1)), MIN_EDGE_LENGTH)
    uhat = d / l[:, None]
    l_target = ctx.l0 * (1.0 + eps)
    F = ctx.k_edge * (l - l_target)
    imp = (F * ctx.dt)[:, None] * uhat
    j_sum = np.zeros((ctx.n_nodes, 2))
    np.add.at(j_sum, ctx.ei, imp)
    np.add.at(j_sum, ctx.ej, -imp)
    return d, l, uhat, l_target, F, j_sum


@dataclass
class _ContactResult:
    x_new: np.ndarray
    v_new: np.ndarray
    mask: np.ndarray
    tau: np.ndarray
    x_toi: np.ndarray
    v_post: np.ndarray


def _resolve_contacts(
    ground: GroundModel | None,
    friction_infinite: bool,
    mu: float,
    dt: float,
    x: np.ndarray,
    v_star: np.ndarray,
) -> _ContactResult:
    x_tent = x + v_star * dt
    n_nodes = x.shape[0]
    if ground is None:
        empty = np.zeros(n_nodes, dtype=bool)
        return _ContactResult(x_tent, v_star, empty, np.zeros(n_nodes), x_tent, v_star)

    d_prev = ground.signed_distance(x)
    d_tent = ground.signed_distance(x_tent)
    mask = (d_tent < 0.0) & (d_tent < d_prev)
    if not mask.any():
        return _ContactResult(x_tent, v_star, mask, np.zeros(n_nodes), x_tent, v_star)

    gap = np.where(mask, d_prev - d_tent, 1.0)
    tau = np.clip(np.where(mask, dt * d_prev / gap, 0.0), 0.0, dt)
    x_toi = x + v_star * tau[:, None]
    normal, tangent = ground.frames(x_toi)
    v_n = (v_star * normal).sum(axis=1)
    v_t = (v_star * tangent).sum(axis=1)
    if friction_infinite:
        v_t_post = np.zeros(n_nodes)
    else:
        v_t_post = np.sign(v_t) * np.maximum(0.0, np.abs(v_t) - mu * np.abs(v_n))
    v_post = v_t_post[:, None] * tangent
    x_contact = x_toi + v_post * (dt - tau)[:, None]

    m2 = mask[:, None]
    return _ContactResult(
        x_new=np.where(m2, x_contact, x_tent),
        v_new=np.where(m2, v_post, v_star),
        mask=mask,
        tau=tau,
        x_toi=x_toi,
        v_post=v_post,
    )


def _step(ctx: _Context, x, v, t):
    _, _, _, eps = _controller_step(ctx, x, v, t)
    *_, j_sum = _spring_impulses(ctx, x, eps)
    v_star = ctx.damp * v + j_sum * ctx.inv_m[:, None] + ctx.g_dt
    res = _resolve_contacts(
        ctx.ground, ctx.friction_infinite, ctx.mu, ctx.dt, x, v_star
    )
    return res.x_new, res.v_new, res.mask


# ---------------------------------------------------------------------------
# public single-step operations


def edge_forces(
    lattice: LatticeSpec,
    state: SimState,
    ztilde: np.ndarray,
    lib: MaterialLibrary,
    eps_target: np.ndarray,
    dt: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Hooke forces per edge and the aggregated per-node impulses.

    F_e = k_e (l_e - l0 (1 + eps_e)); node i of edge (i, j) receives the
    impulse F dt uhat (uhat pointing i -> j) and node j its negation.
    """
    ztilde = np.asarray(ztilde, dtype=np.float64)
    if ztilde.shape != (lattice.n_edges, 3):
        raise ValueError(
            f"ztilde has shape {ztilde.shape}, expected ({lattice.n_edges}, 3)"
        )
    eps_target = np.asarray(eps_target, dtype=np.float64)
    if eps_target.shape != (lattice.n_edges,):
        raise ValueError("eps_target must have one entry per edge")

    ei, ej = lattice.edges[:, 0], lattice.edges[:, 1]
    d = state.x[ej] - state.x[ei]
    l = np.linalg.norm(d, axis=1)
    if np.any(l < MIN_EDGE_LENGTH):
        e = int(np.argmin(l))
        raise DegenerateGeometry(int(round(state.t)), e, float(l[e]))
    uhat = d / l[:, None]
    k_edge = ztilde @ lib.stiffness
    F = k_edge * (l - lattice.rest_lengths * (1.0 + eps_target))
    imp = (F * dt)[:, None] * uhat
    impulses = np.zeros((lattice.n_nodes, 2))
    np.add.at(impulses, ei, imp)
    np.add.at(impulses, ej, -imp)
    return F, impulses


def integrate_step(
    state: SimState, impulses: np.ndarray, masses: np.ndarray, cfg: SimConfig
) -> SimState:
    """Damped symplectic Euler update with contact resolution."""
    if np.any(masses <= 0.0):
        raise ValueError("masses must be > 0")
    damp = float(np.exp(-cfg.damping * cfg.dt))
    g_dt = np.asarray(cfg.gravity, dtype=np.float64) * cfg.dt
    v_star = damp * state.v + impulses / masses[:, None] + g_dt
    res = _resolve_contacts(
        cfg.ground, cfg.friction == "infinite", cfg.mu, cfg.dt, state.x, v_star
    )
    step = int(round(state.t / cfg.dt))
    if not (np.all(np.isfinite(res.x_new)) and np.all(np.isfinite(res.v_new))):
        raise SimulationDiverged(step, _finite_max_speed(res.v_new))
    return SimState(x=res.x_new, v=res.v_new, t=state.t + cfg.dt)


def resolve_contact(
    x_prev: np.ndarray, v_pre: np.ndarray, cfg: SimConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Contact response for a single node over one step.

    Returns the position at the time of impact and the post-contact
    velocity; a node whose tentative trajectory does not cross the
    ground is returned unchanged.
    """
    x_prev = np.asarray(x_prev, dtype=np.float64).reshape(1, 2)
    v_pre = np.asarray(v_pre, dtype=np.float64).reshape(1, 2)
    res = _resolve_contacts(
        cfg.ground, cfg.friction == "infinite", cfg.mu, cfg.dt, x_prev, v_pre
    )
    if not res.mask[0]:
        return x_prev[0].copy(), v_pre[0].copy()
    return res.x_toi[0].copy(), res.v_post[0].copy()


# ---------------------------------------------------------------------------
# rollout


def _initial_state(lattice: LatticeSpec, x0, v0) -> tuple[np.ndarray, np.ndarray]:
    x = np.array(lattice.nodes if x0 is None else x0, dtype=np.float64, copy=True)
    v = (
        np.zeros((lattice.n_nodes, 2))
        if v0 is None
        else np.array(v0, dtype=np.float64, copy=True)
    )
    if x.shape != (lattice.n_nodes, 2) or v.shape != (lattice.n_nodes, 2):
        raise ValueError("x0/v0 must have shape (N_m, 2)")
    return x, v


def rollout(
    lattice: LatticeSpec,
    ztilde: np.ndarray,
    lib: MaterialLibrary,
    theta: ControllerParams,
    goal,
    cfg: SimConfig,
    *,
    cpg: CPGConfig | None = None,
    mass_params: MassParams | None = None,
    x0=None,
    v0=None,
) -> tuple[RolloutRecord, float]:
    """Simulate cfg.total_steps steps; loss is -x_head at the final step."""
    cpg = cpg or CPGConfig()
    mass_params = mass_params or MassParams()
    ctx = _make_context(lattice, ztilde, lib, theta, goal, cfg, cpg, mass_params)
    x, v = _initial_state(lattice, x0, v0)

    T = cfg.total_steps
    xs = np.empty((T + 1, ctx.n_nodes, 2))
    vs = np.empty((T + 1, ctx.n_nodes, 2))
    xs[0], vs[0] = x, v
    counts = np.zeros(T, dtype=np.int32)
    digest = hashlib.blake2b(digest_size=16)
    with np.errstate(over="ignore", invalid="ignore"):
        for s in range(T):
            x, v, mask = _step(ctx, x, v, s * ctx.dt)
            if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
                raise SimulationDiverged(s, _finite_max_speed(v))
            xs[s + 1], vs[s + 1] = x, v
            counts[s] = int(mask.sum())
            digest.update(np.packbits(mask).tobytes())

    loss = -float(xs[T, ctx.head, 0])
    record = RolloutRecord(
        xs=xs,
        vs=vs,
        loss=loss,
        head_index=ctx.head,
        dt=ctx.dt,
        contact_counts=counts,
        contact_digest=digest.hexdigest(),
    )
    return record, loss


def loss_displacement(record: RolloutRecord) -> float:
    """Negative final horizontal position of the head node."""
    return -float(record.xs[-1, record.head_index, 0])


# ---------------------------------------------------------------------------
# reverse pass


@dataclass
class _GradAccum:
    g_w1: np.ndarray
    g_b1: np.ndarray
    g_w2: np.ndarray
    g_b2: np.ndarray
    g_k: np.ndarray
    g_act: np.ndarray
    g_m: np.ndarray

    @classmethod
    def zeros(cls, ctx: _Context) -> "_GradAccum":
        th = ctx.theta
        return cls(
            g_w1=np.zeros_like(th.w1),
            g_b1=np.zeros_like(th.b1),
            g_w2=np.zeros_like(th.w2),
            g_b2=np.zeros_like(th.b2),
            g_k=np.zeros_like(ctx.k_edge),
            g_act=np.zeros_like(ctx.act_gain),
            g_m=np.zeros_like(ctx.masses),
        )


def _step_backward(ctx: _Context, x, v, t, gx_next, gv_next, acc: _GradAccum):
    """Adjoint of one step: maps gradients at (x', v') to (x, v)."""
    # replay the forward intermediates for this step
    inp, h, u, eps = _controller_step(ctx, x, v, t)
    d, l, uhat, l_target, F, j_sum = _spring_impulses(ctx, x, eps)
    v_star = ctx.damp * v + j_sum * ctx.inv_m[:, None] + ctx.g_dt
    res = _resolve_contacts(ctx.ground, ctx.friction_infinite, ctx.mu, ctx.dt, x, v_star)

    gx = np.zeros_like(x)
    gx_tent = np.where(res.mask[:, None], 0.0, gx_next)
    gv_star = np.where(res.mask[:, None], 0.0, gv_next)

    if res.mask.any():
        m = res.mask
        x_tent = x + v_star * ctx.dt
        d_prev = ctx.ground.signed_distance(x)
        d_tent = ctx.ground.signed_distance(x_tent)
        n_toi, t_toi = ctx.ground.frames(res.x_toi)
        n_prev, _ = ctx.ground.frames(x)
        n_tent, _ = ctx.ground.frames(x_tent)
        v_n = (v_star * n_toi).sum(axis=1)
        v_t = (v_star * t_toi).sum(axis=1)

        # x' = x + tau v* + (dt - tau) v_post ;  v' = v_post
        g_v_post = (ctx.dt - res.tau)[:, None] * gx_next + gv_next
        g_tau = ((v_star - res.v_post) * gx_next).sum(axis=1)
        gx_c = gx_next.copy()
        gv_star_c = res.tau[:, None] * gx_next

        # v_post = v_t_post t_hat; normal component is always zeroed
        g_vt_post = (g_v_post * t_toi).sum(axis=1)
        if not ctx.friction_infinite:
            slipping = np.abs(v_t) > ctx.mu * np.abs(v_n)
            g_vt = np.where(slipping, g_vt_post, 0.0)
            g_vn = np.where(
                slipping, -ctx.mu * np.sign(v_t) * np.sign(v_n) * g_vt_post, 0.0
            )
            gv_star_c += g_vt[:, None] * t_toi + g_vn[:, None] * n_toi

        # tau = dt d_prev / (d_prev - d_tent), zero gradient if clamped
        gap = np.where(m, d_prev - d_tent, 1.0)
        raw = ctx.dt * d_prev / gap
        interior = m & (raw >= 0.0) & (raw <= ctx.dt)
        g_dprev = np.where(interior, g_tau * ctx.dt * (-d_tent) / (gap * gap), 0.0)
        g_dtent = np.where(interior, g_tau * ctx.dt * d_prev / (gap * gap), 0.0)
        gx_c += g_dprev[:, None] * n_prev

        m2 = m[:, None]
        gx = np.where(m2, gx_c, 0.0)
        gx_tent += np.where(m2, g_dtent[:, None] * n_tent, 0.0)
        gv_star = np.where(m2, gv_star_c, gv_star)

    # x_tent = x + v* dt
    gx += gx_tent
    gv_star = gv_star + ctx.dt * gx_tent

    # v* = damp v + J/m + g dt
    gv = ctx.damp * gv_star
    g_jsum = gv_star * ctx.inv_m[:, None]
    acc.g_m += -(j_sum * gv_star).sum(axis=1) * ctx.inv_m * ctx.inv_m

    # impulse scatter and spring force
    g_imp = g_jsum[ctx.ei] - g_jsum[ctx.ej]
    g_F = ctx.dt * (uhat * g_imp).sum(axis=1)
    g_uhat = (F * ctx.dt)[:, None] * g_imp
    acc.g_k += (l - l_target) * g_F
    g_l = ctx.k_edge * g_F
    g_ltar = -ctx.k_edge * g_F
    # clamped (collapsed) edges: l is the floor constant, uhat = d / floor
    clamped = (l <= MIN_EDGE_LENGTH)[:, None]
    g_d_free = (
        g_l[:, None] * uhat
        + (g_uhat - uhat * (uhat * g_uhat).sum(axis=1, keepdims=True)) / l[:, None]
    )
    g_d = np.where(clamped, g_uhat / MIN_EDGE_LENGTH, g_d_free)
    np.add.at(gx, ctx.ej, g_d)
    np.add.at(gx, ctx.ei, -g_d)

    # target lengths and strains
    g_eps = ctx.l0 * g_ltar
    acc.g_act += u * g_eps
    g_u = ctx.act_gain * g_eps

    # controller
    g_inp, g_theta = forward_vjp(ctx.theta, inp, h, u, g_u)
    acc.g_w1 += g_theta.w1
    acc.g_b1 += g_theta.b1
    acc.g_w2 += g_theta.w2
    acc.g_b2 += g_theta.b2
    base = ctx.n_cpg + 2
    n2 = 2 * ctx.n_nodes
    g_off = g_inp[base : base + n2].reshape(ctx.n_nodes, 2)
    gx += g_off - g_off.mean(axis=0, keepdims=True)
    gv += g_inp[base + n2 :].reshape(ctx.n_nodes, 2)

    return gx, gv


class _StateTape:
    """Replayable state storage: full or checkpoint-and-recompute.

    Both modes return bit-identical states because the forward step is
    deterministic.
    """

    def __init__(self, ctx: _Context, x0, v0, T: int, checkpoint_every: int | None):
        self.ctx = ctx
        self.T = T
        self.every = checkpoint_every
        if checkpoint_every is None:
            self.xs = np.empty((T + 1, ctx.n_nodes, 2))
            self.vs = np.empty((T + 1, ctx.n_nodes, 2))
            self.xs[0], self.vs[0] = x0, v0
        else:
            if checkpoint_every < 1:
                raise ValueError("checkpoint_every must be >= 1")
            self.checkpoints: dict[int, tuple[np.ndarray, np.ndarray]] = {
                0: (x0.copy(), v0.copy())
            }
            self._seg_start = -1
            self._seg_x = None
            self._seg_v = None

    def run_forward(self) -> tuple[np.ndarray, np.ndarray]:
        ctx = self.ctx
        with np.errstate(over="ignore", invalid="ignore"):
            if self.every is None:
                x, v = self.xs[0].copy(), self.vs[0].copy()
                for s in range(self.T):
                    x, v, _ = _step(ctx, x, v, s * ctx.dt)
                    self._check(x, v, s)
                    self.xs[s + 1], self.vs[s + 1] = x, v
                return x, v
            x, v = self.checkpoints[0]
            x, v = x.copy(), v.copy()
            for s in range(self.T):
                x, v, _ = _step(ctx, x, v, s * ctx.dt)
                self._check(x, v, s)
                if (s + 1) % self.every == 0 or s + 1 == self.T:
                    self.checkpoints[s + 1] = (x.copy(), v.copy())
            return x, v

    @staticmethod
    def _check(x, v, step):
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise SimulationDiverged(step, _finite_max_speed(v))

    def state(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        if self.every is None:
            return self.xs[step], self.vs[step]
        if step in self.checkpoints:
            return self.checkpoints[step]
        start = (step // self.every) * self.every
        if self._seg_start != start:
            x, v = self.checkpoints[start]
            x, v = x.copy(), v.copy()
            seg_len = min(self.every, self.T - start)
            self._seg_x = np.empty((seg_len + 1,) + x.shape)
            self._seg_v = np.empty((seg_len + 1,) + v.shape)
            self._seg_x[0], self._seg_v[0] = x, v
            for k in range(seg_len):
                s = start + k
                x, v, _ = _step(self.ctx, x, v, s * self.ctx.dt)
                self._seg_x[k + 1], self._seg_v[k + 1] = x, v
            self._seg_start = start
        return self._seg_x[step - self._seg_start], self._seg_v[step - self._seg_start]


def rollout_grad(
    lattice: LatticeSpec,
    Z: np.ndarray,
    projection,
    lib: MaterialLibrary,
    theta: ControllerParams,
    goal,
    cfg: SimConfig,
    *,
    cpg: CPGConfig | None = None,
    mass_params: MassParams | None = None,
    x0=None,
    v0=None,
    checkpoint_every: int | None = None,
) -> tuple[float, np.ndarray, ControllerParams]:
    """Loss and its gradients w.r.t. the raw design matrix and controller.

    The forward pass covers all cfg.total_steps steps; the reverse sweep
    covers only the last cfg.grad_steps of them, treating the state at
    the window start as a constant initial condition.  Gradients flow
    through the active projection into the raw design matrix Z.
    """
    cpg = cpg or CPGConfig()
    mass_params = mass_params or MassParams()
    Z = np.asarray(Z, dtype=np.float64)
    ztilde = projection.apply(Z)
    ctx = _make_context(lattice, ztilde, lib, theta, goal, cfg, cpg, mass_params)
    x_init, v_init = _initial_state(lattice, x0, v0)

    T = cfg.total_steps
    t_grad = T if cfg.grad_steps is None else cfg.grad_steps
    tape = _StateTape(ctx, x_init, v_init, T, checkpoint_every)
    x_final, _ = tape.run_forward()
    loss = -float(x_final[ctx.head, 0])

    acc = _GradAccum.zeros(ctx)
    gx = np.zeros((ctx.n_nodes, 2))
    gv = np.zeros((ctx.n_nodes, 2))
    gx[ctx.head, 0] = -1.0
    for s in range(T - 1, T - t_grad - 1, -1):
        x_s, v_s = tape.state(s)
        gx, gv = _step_backward(ctx, x_s, v_s, s * ctx.dt, gx, gv, acc)

    lib_arr = lib
    g_ztilde = acc.g_k[:, None] * lib_arr.stiffness[None, :]
    g_ztilde[:, ACTUATOR] += acc.g_act * lib_arr.max_strain
    g_ztilde += node_mass_vjp(lattice, lib_arr, acc.g_m)
    dZ = projection.vjp(Z, g_ztilde)
    dtheta = ControllerParams(w1=acc.g_w1, b1=acc.g_b1, w2=acc.g_w2, b2=acc.g_b2)
    return loss, dZ, dtheta


# ---------------------------------------------------------------------------
# trajectory export


def write_trajectory_csv(path, record: RolloutRecord) -> None:
    """CSV with columns (step, time, node_id, x, y, vx, vy).

    Floats carry 17 significant digits so the file round-trips the exact
    binary trajectory.
    """
    n_nodes = record.xs.shape[1]
    with open(path, "w", newline="") as fh:
        fh.write("step,time,node_id,x,y,vx,vy\n")
        for s in range(record.xs.shape[0]):
            t = s * record.dt
            for i in range(n_nodes):
                fh.write(
                    f"{s},{t:.17g},{i},"
                    f"{record.xs[s, i, 0]:.17g},{record.xs[s, i, 1]:.17g},"
                    f"{record.vs[s, i, 0]:.17g},{record.vs[s, i, 1]:.17g}\n"
                )


def read_trajectory_csv(path) -> tuple[np.ndarray, np.ndarray, float]:
    """Inverse of write_trajectory_csv: returns (xs, vs, dt)."""
    data = np.genfromtxt(path, delimiter=",", names=True)
    steps = data["step"].astype(int)
    nodes = data["node_id"].astype(int)
    n_steps = steps.max() + 1
    n_nodes = nodes.max() + 1
    xs = np.empty((n_steps, n_nodes, 2))
    vs = np.empty((n_steps, n_nodes, 2))
    xs[steps, nodes, 0] = data["x"]
    xs[steps, nodes, 1] = data["y"]
    vs[steps, nodes, 0] = data["vx"]
    vs[steps, nodes, 1] = data["vy"]
    times = data["time"][nodes == 0]
    dt = float(times[1] - times[0]) if n_steps > 1 else 0.0
    return xs, vs, dt


def trajectory_summary(record: RolloutRecord, constraints: dict | None = None) -> dict:
    head = record.xs[-1, record.head_index]
    doc = {
        "loss": record.loss,
        "final_head_position": [float(head[0]), float(head[1])],
        "constraints": constraints or {},
    }
    return doc
