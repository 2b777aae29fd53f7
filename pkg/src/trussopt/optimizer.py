"""Constrained co-design driver.

The loop alternates three pass kinds over a fixed cycle (3 design-vector
passes, 2 controller passes): ordinary performance passes update the
design by MMA on the augmented-Lagrangian objective under volume
constraints, periodic stability passes probe a sharply projected proxy
design and blend their MMA update with the latest performance step, and
controller passes update the MLP weights with Adam.  Binarization
penalties enter through adaptive AL multipliers, volume bounds relax on
a schedule, the gradient window widens on a schedule, confident design
rows are nudged toward discrete states late in the run, and the layout
is snapped one-hot and frozen for the final controller fine-tune.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .controller import (
    ControllerParams,
    CPGConfig,
    params_sha256,
    params_to_vector,
    vector_to_params,
)
from .design import (
    PerformanceProjection,
    ProjectionConfig,
    StabilityProjection,
    attraction_nudge,
    binarization_penalties,
    binarization_penalty_grads,
    design_sha256,
    hard_snap,
    volume_fraction_grads,
    volume_fractions,
)
from .errors import CoDesignAborted, SimulationError
from .lattice import LatticeSpec, MassParams
from .mma import MMAInfo, MMAState, mma_step
from .simulation import SimConfig, rollout_grad


class PassKind(str, Enum):
    CONTROLLER = "controller"
    PERFORMANCE = "performance"
    STABILITY = "stability"


# ---------------------------------------------------------------------------
# augmented Lagrangian


@dataclass
class ALState:
    """Multipliers and adaptive penalty weights for the four binarization
    constraints (one global L2 term, three pairwise overlaps)."""

    lam: np.ndarray = field(default_factory=lambda: np.zeros(4))
    tau: np.ndarray = field(default_factory=lambda: np.full(4, 0.3))
    anneal: float = 1.01
    prev_violations: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __post_init__(self):
        if np.any(self.tau <= 0.0):
            raise ValueError("penalty weights must be > 0")
        if self.anneal <= 1.0:
            raise ValueError("anneal factor must be > 1")


def augmented_objective(
    l_disp: float, v: np.ndarray, al: ALState
) -> tuple[float, np.ndarray]:
    """AL objective and its derivative w.r.t. the violation vector.

    L = L_disp + sum_k (-lam_k v_k + tau_k v_k^2 / 2); the returned
    coefficient vector (-lam + tau v) chains onto dv/dZ.
    """
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < 0.0):
        raise ValueError("violations must be >= 0")
    total = float(l_disp + np.sum(-al.lam * v + 0.5 * al.tau * v * v))
    return total, -al.lam + al.tau * v


def update_al(al: ALState, v: np.ndarray) -> ALState:
    """Multiplier step lam -= tau v; tau grows by the anneal factor where
    the violation rose since the previous update and shrinks where it
    fell."""
    v = np.asarray(v, dtype=np.float64)
    lam = al.lam - al.tau * v
    tau = np.where(
        v > al.prev_violations,
        al.tau * al.anneal,
        np.where(v < al.prev_violations, al.tau / al.anneal, al.tau),
    )
    return ALState(lam=lam, tau=tau, anneal=al.anneal, prev_violations=v.copy())


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kwargs) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), **kwargs)


def adam_step(adam: AdamState, grad: np.ndarray, theta: np.ndarray) -> tuple[np.ndarray, AdamState]:
    """Standard bias-corrected Adam update on a flat parameter vector."""
    grad = np.asarray(grad, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if grad.shape != theta.shape or grad.shape != adam.m.shape:
        raise ValueError("gradient, parameters and moments must share a shape")
    step = adam.step + 1
    m = adam.beta1 * adam.m + (1.0 - adam.beta1) * grad
    v = adam.beta2 * adam.v + (1.0 - adam.beta2) * grad * grad
    m_hat = m / (1.0 - adam.beta1**step)
    v_hat = v / (1.0 - adam.beta2**step)
    theta_new = theta - adam.lr * m_hat / (np.sqrt(v_hat) + adam.eps)
    return theta_new, AdamState(
        m=m, v=v, step=step, lr=adam.lr, beta1=adam.beta1, beta2=adam.beta2, eps=adam.eps
    )


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class ScheduleConfig:
    """Phase boundaries, ramps, pass pattern, and volume budgets."""

    total_iters: int = 300
    attraction_start: int = 170
    snap_iter: int = 240
    grad_ramp: tuple[int, int, int, int] = (80, 150, 2048, 4096)
    vol_relax: tuple[int, int, float] = (110, 150, 0.03)
    z_passes: int = 3
    c_passes: int = 2
    stability_cadence: int = 3
    stability_blend: float = 0.5
    v_min: float = 0.50
    v_max: float = 0.50
    vact_min: float = 0.20
    vact_max: float = 0.22
    tau_conf_range: tuple[float, float] = (0.90, 0.55)
    gamma_nudge_range: tuple[float, float] = (0.01, 0.05)

    def __post_init__(self):
        if self.total_iters < 0:
            raise ValueError("total_iters must be >= 0")
        if self.total_iters > 0 and not (
            0 <= self.attraction_start < self.snap_iter <= self.total_iters
        ):
            raise ValueError(
                "phase boundaries must satisfy attraction_start < snap_iter <= total_iters"
            )
        if self.vol_relax[2] < 0.0:
            raise ValueError("volume tolerance must be >= 0")
        if self.z_passes < 1 or self.c_passes < 1:
            raise ValueError("pass pattern needs at least one pass of each kind")

    @classmethod
    def scaled(cls, total_iters: int, **overrides) -> "ScheduleConfig":
        """Default 300-iteration phase boundaries scaled proportionally.

        Rounding collisions on very small budgets are repaired so the
        attraction phase always precedes the snap.
        """
        s = total_iters / 300.0
        snap = min(max(round(240 * s), 1), total_iters) if total_iters > 0 else 0
        attraction = max(0, min(round(170 * s), snap - 1))
        base = dict(
            total_iters=total_iters,
            attraction_start=attraction,
            snap_iter=snap,
            grad_ramp=(round(80 * s), round(150 * s), 2048, 4096),
            vol_relax=(round(110 * s), round(150 * s), 0.03),
        )
        base.update(overrides)
        return cls(**base)


def schedule_pass(iteration: int, cfg: ScheduleConfig) -> PassKind:
    """Deterministic pass pattern: z_passes design updates then c_passes
    controller updates per cycle, with every stability_cadence-th design
    pass a stability pass; after the snap only the controller trains."""
    if iteration >= cfg.snap_iter:
        return PassKind.CONTROLLER
    cycle = cfg.z_passes + cfg.c_passes
    pos = iteration % cycle
    if pos >= cfg.z_passes:
        return PassKind.CONTROLLER
    z_index = (iteration // cycle) * cfg.z_passes + pos + 1
    if z_index % cfg.stability_cadence == 0:
        return PassKind.STABILITY
    return PassKind.PERFORMANCE


def _ramp(iteration: int, start: int, end: int, lo: float, hi: float) -> float:
    if iteration <= start:
        return lo
    if iteration >= end:
        return hi
    return lo + (hi - lo) * (iteration - start) / (end - start)


def volume_tolerance(iteration: int, cfg: ScheduleConfig) -> float:
    start, end, dv_max = cfg.vol_relax
    return _ramp(iteration, start, end, 0.0, dv_max)


def effective_bounds(iteration: int, cfg: ScheduleConfig) -> tuple[float, float, float, float]:
    """Volume bounds widened by the scheduled tolerance on each side."""
    dv = volume_tolerance(iteration, cfg)
    return (cfg.v_min - dv, cfg.v_max + dv, cfg.vact_min - dv, cfg.vact_max + dv)


def grad_window(iteration: int, cfg: ScheduleConfig) -> int:
    start, end, t_lo, t_hi = cfg.grad_ramp
    return int(round(_ramp(iteration, start, end, t_lo, t_hi)))


def attraction_params(iteration: int, cfg: ScheduleConfig) -> tuple[float, float]:
    """Linearly annealed confidence threshold and nudge strength over the
    attraction phase."""
    a, b = cfg.attraction_start, cfg.snap_iter
    tau = _ramp(iteration, a, b, *cfg.tau_conf_range)
    gamma = _ramp(iteration, a, b, *cfg.gamma_nudge_range)
    return tau, gamma


# ---------------------------------------------------------------------------
# driver


@dataclass
class CodesignState:
    """Everything required to resume the loop bit-exactly."""

    iteration: int
    Z: np.ndarray
    theta: ControllerParams
    al: ALState
    mma: MMAState
    adam: AdamState
    last_perf_step: np.ndarray | None = None
    diverge_streak: int = 0
    snap_done: bool = False
    best_theta: ControllerParams | None = None
    best_loss: float = float("inf")


def _new_state(Z0: np.ndarray, theta0: ControllerParams, adam_lr: float) -> CodesignState:
    n = Z0.size
    return CodesignState(
        iteration=0,
        Z=np.array(Z0, dtype=np.float64, copy=True),
        theta=ControllerParams(
            w1=theta0.w1.copy(), b1=theta0.b1.copy(), w2=theta0.w2.copy(), b2=theta0.b2.copy()
        ),
        al=ALState(),
        mma=MMAState(n=n),
        adam=AdamState.zeros(params_to_vector(theta0).size, lr=adam_lr),
    )


def run_codesign(
    lattice: LatticeSpec,
    Z0: np.ndarray,
    theta0: ControllerParams,
    lib,
    goal,
    sim_cfg: SimConfig,
    sched_cfg: ScheduleConfig,
    *,
    proj_cfg: ProjectionConfig | None = None,
    cpg: CPGConfig | None = None,
    mass_params: MassParams | None = None,
    x0=None,
    update_design: bool = True,
    update_controller: bool = True,
    design_shift: np.ndarray | None = None,
    ortho_delta: float = 1e-6,
    adam_lr: float = 1e-2,
    checkpoint_dir=None,
    checkpoint_every: int | None = None,
    resume_from=None,
    log=None,
) -> tuple[np.ndarray, ControllerParams, list[dict]]:
    """Run the multi-stage co-design loop; returns (Z, theta, history).

    update_design / update_controller freeze an entity entirely (with
    the design frozen, scheduled design passes train the controller
    instead, giving the plain sequential-design condition).
    design_shift, when given, is added to Z before every projection so a
    designated material identity can be held while topology evolves.

    The returned controller is the best-loss iterate observed while the
    layout was frozen (the post-snap fine-tune, or the whole run when the
    design never updates); long-horizon contact gradients make the last
    iterate noisy, so plain final-iterate selection would be a lottery.
    """
    proj_cfg = proj_cfg or ProjectionConfig()
    cpg = cpg or CPGConfig()
    mass_params = mass_params or MassParams()

    perf_proj = PerformanceProjection(proj_cfg.beta)
    stab_proj = StabilityProjection(proj_cfg.beta_stab, proj_cfg.beta_ste)
    if design_shift is not None:
        perf_proj = _ShiftedProjection(perf_proj, design_shift)
        stab_proj = _ShiftedProjection(stab_proj, design_shift)

    if resume_from is not None:
        state = load_codesign_checkpoint(resume_from)
    else:
        state = _new_state(Z0, theta0, adam_lr)

    history: list[dict] = []
    dv_const, dvact_const = volume_fraction_grads(lattice.n_edges)

    for it in range(state.iteration, sched_cfg.total_iters):
        if update_design and not state.snap_done and it >= sched_cfg.snap_iter:
            state.Z = hard_snap(state.Z)
            state.snap_done = True
            if checkpoint_dir is not None:
                save_codesign_checkpoint(
                    _ckpt_path(checkpoint_dir, it, tag="snap"), state
                )

        kind = schedule_pass(it, sched_cfg)
        if not update_design and kind is not PassKind.CONTROLLER:
            # the design is frozen outright: spend the pass on the controller
            kind = PassKind.CONTROLLER

        t_grad = min(grad_window(it, sched_cfg), sim_cfg.total_steps)
        cfg_it = replace(sim_cfg, grad_steps=t_grad)
        zt_perf = perf_proj.apply(state.Z)
        g_bin, g_ortho = binarization_penalties(zt_perf, ortho_delta)
        violations = np.concatenate([[g_bin], g_ortho])
        vol, vol_act = volume_fractions(zt_perf)
        bounds = effective_bounds(it, sched_cfg)
        # history carries the multipliers as used in this iteration
        lam_used = state.al.lam.tolist()
        tau_used = state.al.tau.tolist()

        loss = None
        diverged = False
        mma_feasible = None
        skipped = not update_controller and kind is PassKind.CONTROLLER

        if not skipped:
            try:
                if kind is PassKind.CONTROLLER:
                    loss = _controller_pass(
                        state, lattice, lib, goal, cfg_it, cpg, mass_params, x0,
                        perf_proj, design_frozen=state.snap_done or not update_design,
                    )
                else:
                    loss, mma_feasible = _design_pass(
                        kind,
                        state,
                        it,
                        lattice,
                        lib,
                        goal,
                        cfg_it,
                        cpg,
                        mass_params,
                        x0,
                        perf_proj,
                        stab_proj,
                        sched_cfg,
                        bounds,
                        violations,
                        zt_perf,
                        ortho_delta,
                        dv_const,
                        dvact_const,
                    )
                state.diverge_streak = 0
            except SimulationError as exc:
                diverged = True
                state.diverge_streak += 1
                state.mma.move_limit *= 0.5
                if log is not None:
                    log(f"iteration {it}: {exc}; move limit now {state.mma.move_limit}")
                if state.diverge_streak >= 3:
                    raise CoDesignAborted(it, history) from exc

        history.append(
            {
                "iter": it,
                "pass": kind.value,
                "loss": loss,
                "V": vol,
                "V_act": vol_act,
                "g_bin": g_bin,
                "g_ortho": g_ortho.tolist(),
                "lam": lam_used,
                "tau": tau_used,
                "T_grad": t_grad,
                "delta_V": volume_tolerance(it, sched_cfg),
                "z_sha256": design_sha256(state.Z),
                "theta_sha256": params_sha256(state.theta),
                "diverged": diverged,
                "mma_feasible": mma_feasible,
            }
        )

        state.iteration = it + 1
        if (
            checkpoint_dir is not None
            and checkpoint_every is not None
            and state.iteration % checkpoint_every == 0
        ):
            save_codesign_checkpoint(_ckpt_path(checkpoint_dir, state.iteration), state)

    theta_out = state.best_theta if state.best_theta is not None else state.theta
    return state.Z, theta_out, history


def _controller_pass(state, lattice, lib, goal, cfg, cpg, mass_params, x0, perf_proj,
                     design_frozen):
    loss, _, dtheta = rollout_grad(
        lattice, state.Z, perf_proj, lib, state.theta, goal, cfg,
        cpg=cpg, mass_params=mass_params, x0=x0,
    )
    # once the layout is frozen the loss is comparable across iterations:
    # keep the best-performing controller seen during the fine-tune
    if design_frozen and loss < state.best_loss:
        state.best_loss = loss
        th = state.theta
        state.best_theta = ControllerParams(
            w1=th.w1.copy(), b1=th.b1.copy(), w2=th.w2.copy(), b2=th.b2.copy()
        )
    vec, state.adam = adam_step(
        state.adam, params_to_vector(dtheta), params_to_vector(state.theta)
    )
    state.theta = vector_to_params(vec, state.theta.dims)
    return loss


def _design_pass(
    kind,
    state,
    it,
    lattice,
    lib,
    goal,
    cfg,
    cpg,
    mass_params,
    x0,
    perf_proj,
    stab_proj,
    sched_cfg,
    bounds,
    violations,
    zt_perf,
    ortho_delta,
    dv_const,
    dvact_const,
):
    proj = perf_proj if kind is PassKind.PERFORMANCE else stab_proj
    loss, dZ_loss, _ = rollout_grad(
        lattice, state.Z, proj, lib, state.theta, goal, cfg,
        cpg=cpg, mass_params=mass_params, x0=x0,
    )

    if kind is PassKind.PERFORMANCE:
        obj_val, coef = augmented_objective(loss, violations, state.al)
        d_bin, d_ortho = binarization_penalty_grads(zt_perf, ortho_delta)
        dv_dzt = coef[0] * d_bin + sum(coef[1 + j] * d_ortho[j] for j in range(3))
        dZ_obj = dZ_loss + perf_proj.vjp(state.Z, dv_dzt)
    else:
        obj_val, dZ_obj = loss, dZ_loss

    vol, vol_act = volume_fractions(zt_perf)
    v_min, v_max, va_min, va_max = bounds
    cons = np.array([vol - v_max, v_min - vol, vol_act - va_max, va_min - vol_act])
    dcons = np.stack(
        [
            perf_proj.vjp(state.Z, dv_const).ravel(),
            perf_proj.vjp(state.Z, -dv_const).ravel(),
            perf_proj.vjp(state.Z, dvact_const).ravel(),
            perf_proj.vjp(state.Z, -dvact_const).ravel(),
        ]
    )

    x_new, state.mma, info = mma_step(
        state.mma, state.Z.ravel(), obj_val, dZ_obj.ravel(), cons, dcons
    )
    Z_new = x_new.reshape(state.Z.shape)
    if kind is PassKind.STABILITY and state.last_perf_step is not None:
        blend = sched_cfg.stability_blend
        Z_new = np.clip(
            state.Z + blend * (Z_new - state.Z) + (1.0 - blend) * state.last_perf_step,
            0.0,
            1.0,
        )
    if kind is PassKind.PERFORMANCE:
        state.last_perf_step = Z_new - state.Z
    state.Z = Z_new

    state.al = update_al(state.al, violations)

    if it >= sched_cfg.attraction_start:
        tau_conf, gamma = attraction_params(it, sched_cfg)
        state.Z = attraction_nudge(state.Z, perf_proj.apply(state.Z), tau_conf, gamma)
    return loss, info.feasible


class _ShiftedProjection:
    """Projection of Z + constant shift; the Jacobian w.r.t. Z is untouched."""

    def __init__(self, base, shift: np.ndarray):
        self.base = base
        self.shift = np.asarray(shift, dtype=np.float64)

    def apply(self, Z):
        return self.base.apply(Z + self.shift)

    def vjp(self, Z, g):
        return self.base.vjp(Z + self.shift, g)


# ---------------------------------------------------------------------------
# persistence


def _ckpt_path(directory, iteration: int, tag: str = "iter"):
    import os

    return os.path.join(directory, f"checkpoint_{tag}_{iteration:05d}.npz")


def save_codesign_checkpoint(path, state: CodesignState) -> None:
    arrays = {
        "iteration": np.array(state.iteration),
        "Z": state.Z,
        "theta_w1": state.theta.w1,
        "theta_b1": state.theta.b1,
        "theta_w2": state.theta.w2,
        "theta_b2": state.theta.b2,
        "al_lam": state.al.lam,
        "al_tau": state.al.tau,
        "al_anneal": np.array(state.al.anneal),
        "al_prev": state.al.prev_violations,
        "mma_lower": state.mma.lower,
        "mma_upper": state.mma.upper,
        "mma_iteration": np.array(state.mma.iteration),
        "mma_move_limit": np.array(state.mma.move_limit),
        "adam_m": state.adam.m,
        "adam_v": state.adam.v,
        "adam_step": np.array(state.adam.step),
        "adam_lr": np.array(state.adam.lr),
        "diverge_streak": np.array(state.diverge_streak),
        "snap_done": np.array(state.snap_done),
        "has_perf_step": np.array(state.last_perf_step is not None),
        "has_x_prev1": np.array(state.mma.x_prev1 is not None),
        "has_x_prev2": np.array(state.mma.x_prev2 is not None),
        "has_best": np.array(state.best_theta is not None),
        "best_loss": np.array(state.best_loss),
    }
    if state.best_theta is not None:
        arrays["best_w1"] = state.best_theta.w1
        arrays["best_b1"] = state.best_theta.b1
        arrays["best_w2"] = state.best_theta.w2
        arrays["best_b2"] = state.best_theta.b2
    if state.last_perf_step is not None:
        arrays["last_perf_step"] = state.last_perf_step
    if state.mma.x_prev1 is not None:
        arrays["mma_x_prev1"] = state.mma.x_prev1
    if state.mma.x_prev2 is not None:
        arrays["mma_x_prev2"] = state.mma.x_prev2
    np.savez(path, **arrays)


def load_codesign_checkpoint(path) -> CodesignState:
    with np.load(path) as d:
        theta = ControllerParams(
            w1=d["theta_w1"].copy(), b1=d["theta_b1"].copy(),
            w2=d["theta_w2"].copy(), b2=d["theta_b2"].copy(),
        )
        mma = MMAState(
            n=int(d["Z"].size),
            lower=d["mma_lower"].copy(),
            upper=d["mma_upper"].copy(),
            x_prev1=d["mma_x_prev1"].copy() if bool(d["has_x_prev1"]) else None,
            x_prev2=d["mma_x_prev2"].copy() if bool(d["has_x_prev2"]) else None,
            iteration=int(d["mma_iteration"]),
            move_limit=float(d["mma_move_limit"]),
        )
        adam = AdamState(
            m=d["adam_m"].copy(),
            v=d["adam_v"].copy(),
            step=int(d["adam_step"]),
            lr=float(d["adam_lr"]),
        )
        al = ALState(
            lam=d["al_lam"].copy(),
            tau=d["al_tau"].copy(),
            anneal=float(d["al_anneal"]),
            prev_violations=d["al_prev"].copy(),
        )
        best = None
        if "has_best" in d and bool(d["has_best"]):
            best = ControllerParams(
                w1=d["best_w1"].copy(), b1=d["best_b1"].copy(),
                w2=d["best_w2"].copy(), b2=d["best_b2"].copy(),
            )
        return CodesignState(
            iteration=int(d["iteration"]),
            Z=d["Z"].copy(),
            theta=theta,
            al=al,
            mma=mma,
            adam=adam,
            last_perf_step=d["last_perf_step"].copy() if bool(d["has_perf_step"]) else None,
            diverge_streak=int(d["diverge_streak"]),
            snap_done=bool(d["snap_done"]),
            best_theta=best,
            best_loss=float(d["best_loss"]) if "best_loss" in d else float("inf"),
        )


def write_history_jsonl(path, history: list[dict]) -> None:
    with open(path, "w") as fh:
        for row in history:
            fh.write(json.dumps(row) + "\n")


def read_history_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
