"""Command line entry points.

    trussopt run <config.json> [--out DIR] [--seed N] [--iters N] [--steps N]
    trussopt ablation <base-config.json> --trials a..h [--out DIR]
    trussopt render <trajectory.csv> <design.json> --lattice lattice.json [--out DIR]
    trussopt gradcheck <config.json> [--steps N] [--coords N] [--tol X]

Exit codes: 0 success, 2 invalid config, 3 simulation divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

import numpy as np

EXIT_OK = 0
EXIT_BAD_CONFIG = 2
EXIT_DIVERGED = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trussopt")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario end to end")
    p_run.add_argument("config")
    p_run.add_argument("--out", default="out")
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--iters", type=int)
    p_run.add_argument("--steps", type=int)

    p_abl = sub.add_parser("ablation", help="run ablation trials from a base config")
    p_abl.add_argument("config")
    p_abl.add_argument("--trials", default="abcdefgh")
    p_abl.add_argument("--out", default="out_ablation")
    p_abl.add_argument("--workers", type=int)

    p_ren = sub.add_parser("render", help="render SVG frames from a trajectory")
    p_ren.add_argument("trajectory")
    p_ren.add_argument("design")
    p_ren.add_argument("--lattice", required=True)
    p_ren.add_argument("--out", default="frames")
    p_ren.add_argument("--stride", type=int, default=1024)

    p_grad = sub.add_parser("gradcheck", help="adjoint vs finite differences")
    p_grad.add_argument("config")
    p_grad.add_argument("--steps", type=int, default=128)
    p_grad.add_argument("--coords", type=int, default=10)
    p_grad.add_argument("--tol", type=float, default=1e-3)
    return parser


def _cmd_run(args) -> int:
    from .errors import SimulationError, CoDesignAborted
    from .experiments import ScenarioConfig, run_scenario

    try:
        cfg = ScenarioConfig.from_json(args.config)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.iters is not None:
            overrides["iters"] = args.iters
        if args.steps is not None:
            overrides["steps"] = args.steps
        if overrides:
            cfg = replace(cfg, **overrides)
    except (OSError, ValueError, TypeError, json.JSONDecodeError) as exc:
        _fail_config(args.config, exc)
        return EXIT_BAD_CONFIG
    try:
        artifacts = run_scenario(cfg, args.out)
    except (SimulationError, CoDesignAborted) as exc:
        _fail_diverged(args.out, exc)
        return EXIT_DIVERGED
    print(json.dumps(artifacts.metrics, indent=1))
    return EXIT_OK


def _cmd_ablation(args) -> int:
    from .errors import SimulationError, CoDesignAborted
    from .experiments import ScenarioConfig, run_ablation

    try:
        cfg = ScenarioConfig.from_json(args.config)
        trials = args.trials.replace("..", "").replace(",", "")
        if not trials or any(t not in "abcdefgh" for t in trials):
            raise ValueError(f"trials must be letters a..h, got {args.trials!r}")
    except (OSError, ValueError, TypeError, json.JSONDecodeError) as exc:
        _fail_config(args.config, exc)
        return EXIT_BAD_CONFIG
    try:
        results = run_ablation(cfg, trials, args.out, workers=args.workers)
    except (SimulationError, CoDesignAborted) as exc:
        _fail_diverged(args.out, exc)
        return EXIT_DIVERGED
    summary = {t: r.metrics["final_displacement_m"] for t, r in results.items()}
    print(json.dumps(summary, indent=1))
    return EXIT_OK


def _cmd_render(args) -> int:
    from .design import load_design
    from .lattice import load_lattice
    from .render import render_frames
    from .simulation import read_trajectory_csv

    try:
        lattice = load_lattice(args.lattice)
        design = load_design(args.design)
        xs, _, _ = read_trajectory_csv(args.trajectory)
        if design.shape[0] != lattice.n_edges:
            raise ValueError("design and lattice disagree on the edge count")
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        _fail_config(args.design, exc)
        return EXIT_BAD_CONFIG
    paths = render_frames(xs, design, lattice, args.out, args.stride)
    print(f"wrote {len(paths)} frames to {args.out}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .controller import controller_dims, params_to_vector, vector_to_params, xavier_init
    from .design import MaterialLibrary, PerformanceProjection
    from .errors import SimulationError
    from .experiments import ScenarioConfig, _initial_design, _sim_config
    from .lattice import MassParams, build_grid
    from .oracles import FDConfig, finite_diff_grad
    from .controller import CPGConfig
    from .simulation import rollout, rollout_grad

    try:
        cfg = ScenarioConfig.from_json(args.config)
    except (OSError, ValueError, TypeError, json.JSONDecodeError) as exc:
        _fail_config(args.config, exc)
        return EXIT_BAD_CONFIG

    lattice = build_grid(cfg.rows, cfg.cols, cfg.spacing)
    lib = MaterialLibrary.default()
    proj = PerformanceProjection()
    rng = np.random.default_rng(cfg.seed)
    Z = np.clip(
        _initial_design(cfg, lattice) + 0.05 * rng.standard_normal((lattice.n_edges, 3)),
        0.0,
        1.0,
    )
    dims = controller_dims(lattice.n_nodes, lattice.n_edges, cfg.n_cpg, cfg.hidden)
    theta = xavier_init(cfg.seed, dims)
    sim_cfg = replace(_sim_config(cfg), total_steps=args.steps, grad_steps=None)
    mass_params = MassParams(m_eps=cfg.m_eps, payload_mass=cfg.payload_mass)
    cpg = CPGConfig(n_cpg=cfg.n_cpg, omega=cfg.omega)
    x0 = lattice.nodes.copy()
    x0[lattice.head_index] += np.asarray(cfg.head_offset)

    kw = dict(cpg=cpg, mass_params=mass_params, x0=x0)
    try:
        _, dZ, dtheta = rollout_grad(lattice, Z, proj, lib, theta, cfg.goal, sim_cfg, **kw)

        tvec = params_to_vector(theta)
        n_theta = max(1, args.coords // 2)
        n_z = max(1, args.coords - n_theta)
        t_coords = rng.choice(tvec.size, size=n_theta, replace=False)
        z_coords = rng.choice(Z.size, size=n_z, replace=False)

        def f_theta(vec):
            th = vector_to_params(vec, dims)
            return rollout(lattice, proj.apply(Z), lib, th, cfg.goal, sim_cfg, **kw)[1]

        def f_z(zf):
            zt = proj.apply(zf.reshape(Z.shape))
            return rollout(lattice, zt, lib, theta, cfg.goal, sim_cfg, **kw)[1]

        fd_t = finite_diff_grad(f_theta, tvec, FDConfig(h=1e-5, coords=t_coords))
        fd_z = finite_diff_grad(f_z, Z.ravel(), FDConfig(h=1e-4, coords=z_coords))
    except SimulationError as exc:
        _fail_diverged(".", exc)
        return EXIT_DIVERGED

    worst = 0.0
    rows = []
    for c in t_coords:
        a, f = params_to_vector(dtheta)[c], fd_t.ravel()[c]
        rel = abs(a - f) / max(abs(f), 1e-12)
        worst = max(worst, rel)
        rows.append(("theta", int(c), a, f, rel))
    for c in z_coords:
        a, f = dZ.ravel()[c], fd_z.ravel()[c]
        rel = abs(a - f) / max(abs(f), 1e-12)
        worst = max(worst, rel)
        rows.append(("Z", int(c), a, f, rel))
    for kind, c, a, f, rel in rows:
        print(f"{kind}[{c}]: adjoint={a: .6e} fd={f: .6e} rel={rel:.3e}")
    print(f"worst relative error: {worst:.3e} (tolerance {args.tol:.1e})")
    return EXIT_OK if worst < args.tol else 1


def _fail_config(path, exc) -> None:
    print(json.dumps({"error": "invalid-config", "path": str(path), "detail": str(exc)}))


def _fail_diverged(out, exc) -> None:
    print(json.dumps({"error": "simulation-diverged", "out": str(out), "detail": str(exc)}))


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handler = {
        "run": _cmd_run,
        "ablation": _cmd_ablation,
        "render": _cmd_render,
        "gradcheck": _cmd_gradcheck,
    }[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
