"""Scenario layer: initialization heuristics, the fixed three-legged
baseline, the 8-trial ablation matrix, and end-to-end runs that write
metrics, trajectories, frames and checkpoints to disk.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .controller import (
    CPGConfig,
    controller_dims,
    load_params,
    params_sha256,
    save_params,
    xavier_init,
)
from .design import (
    ACTUATOR,
    SKELETON,
    VOID,
    MaterialLibrary,
    PerformanceProjection,
    ProjectionConfig,
    binarization_penalties,
    design_sha256,
    load_design,
    save_design,
    volume_fractions,
)
from .lattice import LatticeSpec, MassParams, build_grid, save_lattice
from .optimizer import ScheduleConfig, run_codesign, write_history_jsonl
from .render import render_frames
from .simulation import (
    GroundModel,
    SimConfig,
    rollout,
    trajectory_summary,
    write_trajectory_csv,
)

INIT_KINDS = ("uniform", "stability", "three_legged", "baseline_fixed")

#: trial letter -> (topology, material, control) enabled flags
ABLATION_TRIALS = {
    "a": (False, False, False),
    "b": (False, False, True),
    "c": (True, False, False),
    "d": (True, False, True),
    "e": (False, True, False),
    "f": (False, True, True),
    "g": (True, True, False),
    "h": (True, True, True),
}

WORKER_ENV_VAR = "TRUSSOPT_MAX_WORKERS"


@dataclass(frozen=True)
class AblationFlags:
    topology: bool = True
    material: bool = True
    control: bool = True


# ---------------------------------------------------------------------------
# edge classification helpers


def edge_kinds(lattice: LatticeSpec) -> np.ndarray:
    """0 = horizontal, 1 = vertical, 2 = diagonal, per edge."""
    rows_i = lattice.edges[:, 0] // lattice.cols
    cols_i = lattice.edges[:, 0] % lattice.cols
    rows_j = lattice.edges[:, 1] // lattice.cols
    cols_j = lattice.edges[:, 1] % lattice.cols
    kinds = np.full(lattice.n_edges, 2, dtype=np.int64)
    kinds[rows_i == rows_j] = 0
    kinds[cols_i == cols_j] = 1
    return kinds


def _edge_rows_cols(lattice: LatticeSpec):
    """Min node row / column per edge (the edge's cell anchor)."""
    r = np.minimum(
        lattice.edges[:, 0] // lattice.cols, lattice.edges[:, 1] // lattice.cols
    )
    c = np.minimum(
        lattice.edges[:, 0] % lattice.cols, lattice.edges[:, 1] % lattice.cols
    )
    return r, c


# ---------------------------------------------------------------------------
# initial designs


def uniform_design(n_edges: int) -> np.ndarray:
    return np.full((n_edges, 3), 1.0 / 3.0)


def init_heuristic(kind: str, lattice: LatticeSpec, rng_seed: int = 0) -> np.ndarray:
    """Initial raw design matrix for a named heuristic.

    uniform        every row [1/3, 1/3, 1/3]
    stability      void entry raised linearly with the edge midpoint's
                   normalized height, +0.12 at the very top
    three_legged   edges void in the fixed baseline get a +0.4 void bias
                   (renormalized), everything else uniform
    baseline_fixed the reconstructed three-legged one-hot layout itself
    """
    if kind not in INIT_KINDS:
        raise ValueError(f"unknown init heuristic {kind!r}; expected one of {INIT_KINDS}")
    n = lattice.n_edges
    if kind == "uniform":
        return uniform_design(n)
    if kind == "stability":
        mid_y = 0.5 * (
            lattice.nodes[lattice.edges[:, 0], 1] + lattice.nodes[lattice.edges[:, 1], 1]
        )
        y_lo, y_hi = lattice.nodes[:, 1].min(), lattice.nodes[:, 1].max()
        h = (mid_y - y_lo) / (y_hi - y_lo)
        Z = np.empty((n, 3))
        Z[:, VOID] = 1.0 / 3.0 + 0.12 * h
        Z[:, SKELETON] = 1.0 / 3.0 - 0.06 * h
        Z[:, ACTUATOR] = 1.0 / 3.0 - 0.06 * h
        return Z / Z.sum(axis=1, keepdims=True)
    if kind == "three_legged":
        base, _ = build_baseline(lattice)
        Z = uniform_design(n)
        void_edges = base[:, VOID] == 1.0
        biased = np.array([1.0 / 3.0 + 0.4, 1.0 / 3.0, 1.0 / 3.0])
        Z[void_edges] = biased / biased.sum()
        return Z
    Z, _ = build_baseline(lattice)
    return Z


def build_baseline(lattice: LatticeSpec) -> tuple[np.ndarray, dict]:
    """Deterministic three-legged walker reconstruction.

    Vertical leg trusses below the body are actuators (about 21% of all
    edges), the body's top band plus a few documented braces are
    skeleton, everything else is void, hitting a 50% solid fraction.
    Designed for square grids of at least 4 rows; the 6x6 version ships
    as a data file.
    """
    rows, cols = lattice.rows, lattice.cols
    if rows < 4 or cols < 4:
        raise ValueError(f"baseline needs at least a 4x4 grid, got {rows}x{cols}")
    n = lattice.n_edges
    kinds = edge_kinds(lattice)
    e_row, e_col = _edge_rows_cols(lattice)
    order = np.arange(n)

    # actuators: vertical edges, legs first (bottom-up), then body verticals
    act_target = int(round(0.21 * n))
    leg_pool = order[(kinds == 1) & (e_row <= rows - 3)]
    body_pool = order[(kinds == 1) & (e_row > rows - 3)]
    pool = np.concatenate([leg_pool, body_pool])
    actuators = pool[:act_target]

    # skeleton fills a priority list until the 50% solid budget is met
    solid_target = int(round(0.5 * n))
    # cross-bracing is deliberately prevalent through the legs: the fixed
    # walker resists gravity well but its limb strokes are restricted
    body_rows = (rows - 2, rows - 1)
    priority = [
        order[(kinds == 0) & np.isin(e_row, body_rows)],   # body horizontals
        order[(kinds == 2) & (e_row == rows - 2)],         # body cross braces
        order[(kinds == 2) & (e_row < rows - 2) & (e_col % 2 == 0)],  # leg braces
        order[(kinds == 0) & (e_row == 0)],                # foot horizontals
        order[(kinds == 1) & (e_row == rows - 2)],         # body verticals
        order[(kinds == 0) & (e_row > 0) & (e_row < rows - 2)],
        order[(kinds == 2) & (e_row < rows - 2) & (e_col % 2 == 1)],
    ]
    taken = set(int(e) for e in actuators)
    skeleton: list[int] = []
    for group in priority:
        for e in group:
            if len(taken) >= solid_target:
                break
            if int(e) not in taken:
                skeleton.append(int(e))
                taken.add(int(e))

    Z = np.zeros((n, 3))
    Z[:, VOID] = 1.0
    Z[actuators, VOID] = 0.0
    Z[actuators, ACTUATOR] = 1.0
    Z[skeleton, VOID] = 0.0
    Z[np.array(skeleton, dtype=int), SKELETON] = 1.0

    v, v_act = volume_fractions(Z)
    description = {
        "rows": rows,
        "cols": cols,
        "actuator_edges": sorted(int(e) for e in actuators),
        "skeleton_edges": sorted(skeleton),
        "V": v,
        "V_act": v_act,
    }
    return Z, description


def default_filled_design(lattice: LatticeSpec) -> np.ndarray:
    """Fully filled topology with all vertical edges actuated: the fixed
    design used when both topology and material design are disabled."""
    kinds = edge_kinds(lattice)
    Z = np.zeros((lattice.n_edges, 3))
    Z[:, SKELETON] = 1.0
    Z[kinds == 1, SKELETON] = 0.0
    Z[kinds == 1, ACTUATOR] = 1.0
    return Z


def material_identity_shift(lattice: LatticeSpec, amount: float = 0.05) -> np.ndarray:
    """Constant pre-projection shift that freezes material identity.

    The designated solid state per edge follows the default actuation
    layout (vertical edges are actuators, the rest skeleton); the other
    solid entry is lowered by `amount` before every projection, while
    void entries stay untouched so topology can still evolve.
    """
    kinds = edge_kinds(lattice)
    shift = np.zeros((lattice.n_edges, 3))
    shift[kinds == 1, SKELETON] = -amount
    shift[kinds != 1, ACTUATOR] = -amount
    return shift


@dataclass
class AblationPlan:
    """How a trial's flags translate into optimizer inputs."""

    Z0: np.ndarray
    sched_cfg: ScheduleConfig
    update_design: bool
    update_controller: bool
    design_shift: np.ndarray | None
    rollout_only: bool


def apply_ablation(
    flags: AblationFlags, Z: np.ndarray, sched_cfg: ScheduleConfig, lattice: LatticeSpec
) -> AblationPlan:
    """Translate enabled/disabled design entities into loop controls.

    topology off, material on   hold the layout ~filled via V_min = 0.90
    material off, topology on   freeze material identity via the
                                pre-projection shift
    both off                    the design is a fixed one-hot layout
    control off                 controller passes become no-ops
    """
    update_controller = flags.control
    if not flags.topology and not flags.material:
        Z0 = np.asarray(Z, dtype=np.float64)
        if not np.all(np.isin(Z0, (0.0, 1.0))):
            raise ValueError(
                "with topology and material design disabled the initial "
                "design must already be one-hot"
            )
        return AblationPlan(
            Z0=Z0,
            sched_cfg=sched_cfg,
            update_design=False,
            update_controller=update_controller,
            design_shift=None,
            rollout_only=not flags.control,
        )
    if not flags.topology:
        sched_cfg = replace(sched_cfg, v_min=0.90, v_max=1.0)
        return AblationPlan(
            Z0=np.asarray(Z, dtype=np.float64),
            sched_cfg=sched_cfg,
            update_design=True,
            update_controller=update_controller,
            design_shift=None,
            rollout_only=False,
        )
    if not flags.material:
        return AblationPlan(
            Z0=np.asarray(Z, dtype=np.float64),
            sched_cfg=sched_cfg,
            update_design=True,
            update_controller=update_controller,
            design_shift=material_identity_shift(lattice),
            rollout_only=False,
        )
    return AblationPlan(
        Z0=np.asarray(Z, dtype=np.float64),
        sched_cfg=sched_cfg,
        update_design=True,
        update_controller=update_controller,
        design_shift=None,
        rollout_only=False,
    )


# ---------------------------------------------------------------------------
# scenario configuration


@dataclass
class ScenarioConfig:
    """One experiment, serializable to/from a JSON document.

    Defaults give the flat-ground co-design study: 6x6 grid, stability
    heuristic, infinite friction, goal at (2, 0.1) m, head node offset
    by +0.1 m in x, 300 iterations over 8192-step rollouts.
    """

    name: str = "scenario"
    rows: int = 6
    cols: int = 6
    spacing: float = 0.1
    init: str = "stability"
    topology: bool = True
    material: bool = True
    control: bool = True
    ground: str = "flat"
    incline_deg: float = 15.0
    incline_pivot: tuple[float, float] = (0.6, 0.0)
    friction: str = "infinite"
    mu: float = 2.5
    goal: tuple[float, float] = (2.0, 0.1)
    # half a grid spacing: pre-tensions the head's edges for a nonzero
    # initial gradient without collapsing the edge to its neighbor
    head_offset: tuple[float, float] = (0.05, 0.0)
    iters: int = 300
    steps: int = 8192
    dt: float = 0.002
    seed: int = 0
    v_min: float = 0.50
    v_max: float = 0.50
    vact_min: float = 0.20
    vact_max: float = 0.22
    payload_mass: float = 0.05
    m_eps: float = 1e-6
    damping: float = 2.0
    adam_lr: float = 1e-2
    n_cpg: int = 10
    omega: float = 10.0
    hidden: int = 32
    frame_stride: int | None = None
    checkpoint_every: int | None = None

    def __post_init__(self):
        if self.init not in INIT_KINDS:
            raise ValueError(f"unknown init heuristic {self.init!r}")
        if self.init == "baseline_fixed" and (self.topology or self.material):
            raise ValueError(
                "baseline_fixed requires topology and material design disabled"
            )
        if self.ground not in ("flat", "incline"):
            raise ValueError(f"unknown ground kind {self.ground!r}")
        if self.friction not in ("infinite", "coulomb"):
            raise ValueError(f"unknown friction model {self.friction!r}")
        if self.rows < 2 or self.cols < 2 or self.spacing <= 0:
            raise ValueError("grid must be at least 2x2 with positive spacing")
        if self.iters < 0 or self.steps < 1 or self.dt <= 0:
            raise ValueError("iters/steps/dt out of range")

    def to_dict(self) -> dict:
        doc = asdict(self)
        for key in ("incline_pivot", "goal", "head_offset"):
            doc[key] = list(doc[key])
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        doc = dict(doc)
        for key in ("incline_pivot", "goal", "head_offset"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


@dataclass
class RunArtifacts:
    metrics: dict
    metrics_path: str
    trajectory_path: str
    frames_dir: str
    history_path: str
    design_path: str
    controller_path: str
    lattice_path: str
    checkpoint_paths: list[str]


def _sim_config(cfg: ScenarioConfig, grad_steps: int | None = None) -> SimConfig:
    if cfg.ground == "flat":
        ground = GroundModel(kind="flat", height=0.0)
    else:
        ground = GroundModel(
            kind="incline", angle_deg=cfg.incline_deg, pivot=cfg.incline_pivot
        )
    return SimConfig(
        dt=cfg.dt,
        total_steps=cfg.steps,
        grad_steps=grad_steps,
        damping=cfg.damping,
        ground=ground,
        friction=cfg.friction,
        mu=cfg.mu if cfg.friction == "coulomb" else 0.0,
    )


def _initial_design(cfg: ScenarioConfig, lattice: LatticeSpec) -> np.ndarray:
    if not cfg.topology and not cfg.material:
        if cfg.init == "baseline_fixed":
            return build_baseline(lattice)[0]
        return default_filled_design(lattice)
    if not cfg.topology:
        return uniform_design(lattice.n_edges)
    return init_heuristic(cfg.init, lattice, cfg.seed)


def export_metrics(
    history: list[dict],
    final_eval: dict,
    *,
    scenario: str,
    seed: int,
    wallclock_s: float,
    per_iteration_path: str,
) -> dict:
    """Run summary with a stable field order."""
    return {
        "scenario": scenario,
        "seed": seed,
        "final_displacement_m": -final_eval["loss"],
        "final_loss": final_eval["loss"],
        "V": final_eval["V"],
        "V_act": final_eval["V_act"],
        "g_bin": final_eval["g_bin"],
        "iterations": len(history),
        "wallclock_s": wallclock_s,
        "per_iteration": per_iteration_path,
        "final_head_elevation_m": final_eval["head_y"],
    }


def run_scenario(cfg: ScenarioConfig, out_dir) -> RunArtifacts:
    """Build, co-design (or just evaluate), then write every artifact."""
    started = time.time()
    os.makedirs(out_dir, exist_ok=True)
    frames_dir = os.path.join(out_dir, "frames")
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)

    lattice = build_grid(cfg.rows, cfg.cols, cfg.spacing)
    lib = MaterialLibrary.default()
    mass_params = MassParams(m_eps=cfg.m_eps, payload_mass=cfg.payload_mass)
    cpg = CPGConfig(n_cpg=cfg.n_cpg, omega=cfg.omega)
    dims = controller_dims(lattice.n_nodes, lattice.n_edges, cfg.n_cpg, cfg.hidden)
    theta0 = xavier_init(cfg.seed, dims)
    flags = AblationFlags(cfg.topology, cfg.material, cfg.control)
    sched = ScheduleConfig.scaled(
        cfg.iters,
        v_min=cfg.v_min,
        v_max=cfg.v_max,
        vact_min=cfg.vact_min,
        vact_max=cfg.vact_max,
    )
    plan = apply_ablation(flags, _initial_design(cfg, lattice), sched, lattice)

    x0 = lattice.nodes.copy()
    x0[lattice.head_index] += np.asarray(cfg.head_offset)
    sim_cfg = _sim_config(cfg)

    if plan.rollout_only or cfg.iters == 0:
        Z_final, theta_final, history = plan.Z0, theta0, []
    else:
        Z_final, theta_final, history = run_codesign(
            lattice,
            plan.Z0,
            theta0,
            lib,
            cfg.goal,
            sim_cfg,
            plan.sched_cfg,
            cpg=cpg,
            mass_params=mass_params,
            x0=x0,
            update_design=plan.update_design,
            update_controller=plan.update_controller,
            design_shift=plan.design_shift,
            adam_lr=cfg.adam_lr,
            checkpoint_dir=ckpt_dir,
            checkpoint_every=cfg.checkpoint_every,
        )

    # full-length evaluation of the final design
    proj = PerformanceProjection(ProjectionConfig().beta)
    if plan.design_shift is not None:
        ztilde = proj.apply(Z_final + plan.design_shift)
    else:
        ztilde = proj.apply(Z_final)
    record, loss = rollout(
        lattice, ztilde, lib, theta_final, cfg.goal, sim_cfg,
        cpg=cpg, mass_params=mass_params, x0=x0,
    )
    g_bin, g_ortho = binarization_penalties(ztilde)
    vol, vol_act = volume_fractions(ztilde)
    final_eval = {
        "loss": loss,
        "V": vol,
        "V_act": vol_act,
        "g_bin": g_bin,
        "g_ortho": g_ortho.tolist(),
        "head_y": float(record.xs[-1, lattice.head_index, 1]),
    }

    history_path = os.path.join(out_dir, "history.jsonl")
    write_history_jsonl(history_path, history)
    trajectory_path = os.path.join(out_dir, "trajectory.csv")
    write_trajectory_csv(trajectory_path, record)
    lattice_path = os.path.join(out_dir, "lattice.json")
    save_lattice(lattice_path, lattice)
    design_path = os.path.join(out_dir, "design.json")
    save_design(design_path, Z_final)
    controller_path = os.path.join(out_dir, "controller.npz")
    save_params(controller_path, theta_final)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(trajectory_summary(record, final_eval), fh, indent=1)

    stride = cfg.frame_stride or max(1, cfg.steps // 8)
    frame_paths = render_frames(
        record.xs, Z_final, lattice, frames_dir, stride,
        ground=sim_cfg.ground,
    )

    metrics = export_metrics(
        history,
        final_eval,
        scenario=cfg.name,
        seed=cfg.seed,
        wallclock_s=time.time() - started,
        per_iteration_path=history_path,
    )
    metrics_path = os.path.join(out_dir, "metrics.json")
    with open(metrics_path, "w") as fh:
        json.dump(metrics, fh, indent=1)

    checkpoints = sorted(
        os.path.join(ckpt_dir, p) for p in os.listdir(ckpt_dir) if p.endswith(".npz")
    )
    return RunArtifacts(
        metrics=metrics,
        metrics_path=metrics_path,
        trajectory_path=trajectory_path,
        frames_dir=frames_dir,
        history_path=history_path,
        design_path=design_path,
        controller_path=controller_path,
        lattice_path=lattice_path,
        checkpoint_paths=checkpoints,
    )


def trial_config(base: ScenarioConfig, trial: str) -> ScenarioConfig:
    """Specialize a base config for one ablation trial letter."""
    if trial not in ABLATION_TRIALS:
        raise ValueError(f"unknown trial {trial!r}; expected a..h")
    topology, material, control = ABLATION_TRIALS[trial]
    return replace(
        base,
        name=f"{base.name}_trial_{trial}",
        topology=topology,
        material=material,
        control=control,
    )


def max_workers(requested: int | None = None) -> int:
    cap = os.environ.get(WORKER_ENV_VAR)
    limit = int(cap) if cap else (os.cpu_count() or 1)
    if requested is not None:
        limit = min(limit, requested)
    return max(1, limit)


def run_ablation(
    base: ScenarioConfig, trials: str, out_dir, workers: int | None = None
) -> dict[str, RunArtifacts]:
    """Run the requested trial letters, in parallel processes when allowed."""
    letters = [t for t in trials if t in ABLATION_TRIALS]
    if not letters:
        raise ValueError(f"no valid trial letters in {trials!r}")
    os.makedirs(out_dir, exist_ok=True)
    jobs = {t: (trial_config(base, t), os.path.join(out_dir, f"trial_{t}")) for t in letters}
    n_workers = max_workers(workers if workers is not None else len(letters))
    results: dict[str, RunArtifacts] = {}
    if n_workers == 1 or len(letters) == 1:
        for t, (cfg, path) in jobs.items():
            results[t] = run_scenario(cfg, path)
        return results
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=min(n_workers, len(letters))) as pool:
        futures = {t: pool.submit(run_scenario, cfg, path) for t, (cfg, path) in jobs.items()}
        for t, fut in futures.items():
            results[t] = fut.result()
    return results
