import json

import numpy as np
import pytest

from trussopt.controller import controller_dims, params_sha256, params_to_vector, xavier_init
from trussopt.design import MaterialLibrary, hard_snap
from trussopt.lattice import MassParams, build_grid
from trussopt.optimizer import (
    ALState,
    AdamState,
    PassKind,
    ScheduleConfig,
    adam_step,
    attraction_params,
    augmented_objective,
    effective_bounds,
    grad_window,
    load_codesign_checkpoint,
    read_history_jsonl,
    run_codesign,
    save_codesign_checkpoint,
    schedule_pass,
    update_al,
    volume_tolerance,
    write_history_jsonl,
)
from trussopt.simulation import SimConfig

from conftest import random_relaxed_design


# ---------------------------------------------------------------------------
# augmented Lagrangian


def test_augmented_objective_no_violation():
    al = ALState()
    total, coef = augmented_objective(-1.0, np.zeros(4), al)
    assert total == -1.0
    np.testing.assert_array_equal(coef, -al.lam)


def test_augmented_objective_quadratic_term():
    al = ALState()  # lam = 0, tau = 0.3
    v = np.array([0.1, 0.0, 0.0, 0.0])
    total, coef = augmented_objective(2.0, v, al)
    assert total == pytest.approx(2.0 + 0.5 * 0.3 * 0.01, rel=1e-12)
    assert coef[0] == pytest.approx(0.3 * 0.1)


def test_augmented_objective_multiplier_term():
    al = ALState(lam=np.array([0.2, 0.0, 0.0, 0.0]))
    v = np.array([0.1, 0.0, 0.0, 0.0])
    total, _ = augmented_objective(2.0, v, al)
    assert total == pytest.approx(2.0 - 0.02 + 0.0015, rel=1e-12)


def test_augmented_objective_rejects_negative_violation():
    with pytest.raises(ValueError):
        augmented_objective(0.0, np.array([-0.1, 0, 0, 0]), ALState())


def test_update_al_multiplier_rule():
    al = ALState()
    new = update_al(al, np.array([0.1, 0.0, 0.0, 0.0]))
    assert new.lam[0] == pytest.approx(-0.03, rel=1e-12)
    np.testing.assert_array_equal(new.prev_violations, [0.1, 0, 0, 0])


def test_update_al_penalty_branches():
    al = ALState(prev_violations=np.array([0.1, 0.1, 0.1, 0.1]))
    new = update_al(al, np.array([0.2, 0.05, 0.1, 0.1]))
    assert new.tau[0] == pytest.approx(0.3 * 1.01)  # rose
    assert new.tau[1] == pytest.approx(0.3 / 1.01)  # fell
    assert new.tau[2] == pytest.approx(0.3)         # unchanged
    assert new.tau[3] == pytest.approx(0.3)


def test_al_closed_form_recursion(rng):
    al = ALState()
    lam0 = al.lam.copy()
    acc = np.zeros(4)
    for _ in range(50):
        v = rng.uniform(0.0, 0.3, 4)
        acc += al.tau * v
        al = update_al(al, v)
    np.testing.assert_allclose(al.lam, lam0 - acc, atol=1e-12)


def test_tau_stays_within_anneal_bounds(rng):
    al = ALState()
    n = 200
    for _ in range(n):
        al = update_al(al, rng.uniform(0.0, 0.5, 4))
    assert np.all(al.tau <= 0.3 * 1.01**n + 1e-12)
    assert np.all(al.tau >= 0.3 * 1.01 ** (-n) - 1e-12)


# ---------------------------------------------------------------------------
# Adam


def test_adam_first_step_magnitude(rng):
    theta = rng.standard_normal(20)
    grad = rng.standard_normal(20)
    adam = AdamState.zeros(20, lr=1e-2)
    new_theta, _ = adam_step(adam, grad, theta)
    step = np.abs(new_theta - theta)
    np.testing.assert_allclose(step, 1e-2, rtol=1e-6)


def test_adam_zero_gradient_fixed_point():
    theta = np.array([1.0, -2.0])
    adam = AdamState.zeros(2)
    for _ in range(5):
        theta_new, adam = adam_step(adam, np.zeros(2), theta)
        np.testing.assert_array_equal(theta_new, theta)
        theta = theta_new


def test_adam_two_steps_match_hand_recursion():
    lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
    g = np.array([0.5])
    theta = np.array([0.0])
    adam = AdamState.zeros(1, lr=lr)
    t1, adam = adam_step(adam, g, theta)
    t2, adam = adam_step(adam, g, t1)

    m = (1 - b1) * 0.5
    v = (1 - b2) * 0.25
    mh = m / (1 - b1)
    vh = v / (1 - b2)
    expect1 = 0.0 - lr * mh / (np.sqrt(vh) + eps)
    m = b1 * m + (1 - b1) * 0.5
    v = b2 * v + (1 - b2) * 0.25
    mh = m / (1 - b1**2)
    vh = v / (1 - b2**2)
    expect2 = expect1 - lr * mh / (np.sqrt(vh) + eps)
    assert t1[0] == pytest.approx(expect1, abs=1e-12)
    assert t2[0] == pytest.approx(expect2, abs=1e-12)


def test_adam_shape_check():
    with pytest.raises(ValueError):
        adam_step(AdamState.zeros(3), np.zeros(2), np.zeros(3))


# ---------------------------------------------------------------------------
# schedule


def test_pass_pattern_first_cycle():
    cfg = ScheduleConfig()
    kinds = [schedule_pass(i, cfg) for i in range(5)]
    assert kinds == [
        PassKind.PERFORMANCE,
        PassKind.PERFORMANCE,
        PassKind.STABILITY,
        PassKind.CONTROLLER,
        PassKind.CONTROLLER,
    ]


def test_pass_pattern_periodic_before_snap():
    cfg = ScheduleConfig()
    for i in range(0, 235):
        base = schedule_pass(i % 5 + 15, cfg)  # same position, early cycle
        assert (schedule_pass(i, cfg) is PassKind.CONTROLLER) == (i % 5 >= 3)


def test_stability_every_third_design_pass():
    cfg = ScheduleConfig()
    z_passes = [i for i in range(240) if schedule_pass(i, cfg) is not PassKind.CONTROLLER]
    kinds = [schedule_pass(i, cfg) for i in z_passes]
    for idx, kind in enumerate(kinds, start=1):
        expected = PassKind.STABILITY if idx % 3 == 0 else PassKind.PERFORMANCE
        assert kind is expected


def test_controller_only_after_snap():
    cfg = ScheduleConfig()
    for i in range(240, 300):
        assert schedule_pass(i, cfg) is PassKind.CONTROLLER


def test_grad_window_schedule():
    cfg = ScheduleConfig()
    assert grad_window(0, cfg) == 2048
    assert grad_window(80, cfg) == 2048
    assert grad_window(115, cfg) == 3072
    assert grad_window(150, cfg) == 4096
    assert grad_window(299, cfg) == 4096
    vals = [grad_window(i, cfg) for i in range(300)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_effective_bounds_schedule():
    cfg = ScheduleConfig()
    assert effective_bounds(0, cfg) == (0.50, 0.50, 0.20, 0.22)
    assert effective_bounds(110, cfg) == (0.50, 0.50, 0.20, 0.22)
    np.testing.assert_allclose(effective_bounds(130, cfg), (0.485, 0.515, 0.185, 0.235))
    np.testing.assert_allclose(effective_bounds(150, cfg), (0.47, 0.53, 0.17, 0.25))
    np.testing.assert_allclose(effective_bounds(299, cfg), (0.47, 0.53, 0.17, 0.25))
    tol = [volume_tolerance(i, cfg) for i in range(300)]
    assert all(b >= a for a, b in zip(tol, tol[1:]))


def test_attraction_annealing_endpoints():
    cfg = ScheduleConfig()
    tau0, gamma0 = attraction_params(170, cfg)
    assert (tau0, gamma0) == (0.90, 0.01)
    tau1, gamma1 = attraction_params(240, cfg)
    assert (tau1, gamma1) == (0.55, 0.05)
    tau_mid, gamma_mid = attraction_params(205, cfg)
    assert tau_mid == pytest.approx(0.725)
    assert gamma_mid == pytest.approx(0.03)


def test_schedule_validation():
    with pytest.raises(ValueError):
        ScheduleConfig(total_iters=100, attraction_start=90, snap_iter=80)
    cfg = ScheduleConfig.scaled(100)
    assert cfg.attraction_start == 57 and cfg.snap_iter == 80
    assert cfg.grad_ramp[:2] == (27, 50)


# ---------------------------------------------------------------------------
# run_codesign on small problems


def small_problem(rng, rows=3, cols=3, steps=96, iters=15):
    lat = build_grid(rows, cols, 0.1)
    lib = MaterialLibrary.default()
    Z0 = random_relaxed_design(lat.n_edges, rng, spread=0.05)
    theta0 = xavier_init(0, controller_dims(lat.n_nodes, lat.n_edges))
    sim_cfg = SimConfig(dt=0.002, total_steps=steps, grad_steps=None)
    sched = ScheduleConfig.scaled(iters, grad_ramp=(4, 10, 48, 96))
    x0 = lat.nodes.copy()
    x0[0, 0] += 0.05
    return lat, lib, Z0, theta0, sim_cfg, sched, x0


def test_zero_iterations_is_noop(rng):
    lat, lib, Z0, theta0, sim_cfg, _, x0 = small_problem(rng)
    sched = ScheduleConfig(total_iters=0)
    Z, theta, history = run_codesign(
        lat, Z0, theta0, lib, (2.0, 0.1), sim_cfg, sched, x0=x0
    )
    np.testing.assert_array_equal(Z, Z0)
    np.testing.assert_array_equal(params_to_vector(theta), params_to_vector(theta0))
    assert history == []


def test_codesign_snaps_and_freezes(rng):
    lat, lib, Z0, theta0, sim_cfg, sched, x0 = small_problem(rng, iters=15)
    Z, theta, history = run_codesign(
        lat, Z0, theta0, lib, (2.0, 0.1), sim_cfg, sched, x0=x0
    )
    assert len(history) == 15
    assert np.all(np.isin(Z, (0.0, 1.0)))
    assert np.all(Z.sum(axis=1) == 1.0)
    # Z hash constant from the snap iteration onward
    snap = sched.snap_iter
    hashes = [h["z_sha256"] for h in history]
    assert len(set(hashes[snap:])) == 1
    for h in history[snap:]:
        assert h["pass"] == "controller"


def test_codesign_history_schema(rng):
    lat, lib, Z0, theta0, sim_cfg, sched, x0 = small_problem(rng, iters=6)
    _, _, history = run_codesign(lat, Z0, theta0, lib, (2.0, 0.1), sim_cfg, sched, x0=x0)
    required = {
        "iter", "pass", "loss", "V", "V_act", "g_bin", "g_ortho",
        "lam", "tau", "T_grad", "delta_V",
    }
    for row in history:
        assert required <= set(row)
        assert len(row["g_ortho"]) == 3
        assert len(row["lam"]) == 4 and len(row["tau"]) == 4


def test_codesign_al_matches_recorded_history(rng):
    """History rows record pre-update multipliers; each design pass must
    advance them by exactly lam - tau * v (the closed-form recursion)."""
    lat, lib, Z0, theta0, sim_cfg, sched, x0 = small_problem(rng, iters=10)
    _, _, history = run_codesign(lat, Z0, theta0, lib, (2.0, 0.1), sim_cfg, sched, x0=x0)
    for prev, nxt in zip(history, history[1:]):
        lam_prev = np.array(prev["lam"])
        if prev["pass"] in ("performance", "stability") and not prev["diverged"]:
            v = np.array([prev["g_bin"], *prev["g_ortho"]])
            expected = lam_prev - np.array(prev["tau"]) * v
        else:
            expected = lam_prev
        np.testing.assert_allclose(np.array(nxt["lam"]), expected, atol=1e-12)


def test_codesign_frozen_design_passes_become_controller(rng):
    lat, lib, Z0, theta0, sim_cfg, sched, x0 = small_problem(rng, iters=8)
    Z0_onehot = hard_snap(Z0)
    Z, theta, history = run_codesign(
        lat, Z0_onehot, theta0, lib, (2.0, 0.1), sim_cfg, sched, x0=x0,
        update_design=False,
    )
    np.testing.assert_array_equal(Z, Z0_onehot)
    assert all(h["pass"] == "controller" for h in history)
    assert len({h["z_sha256"] for h in history}) == 1
    assert len({h["theta_sha256"] for h in history}) > 1


def test_codesign_frozen_controller_passes_are_noops(rng):
    lat, lib, Z0, theta0, sim_cfg, sched, x0 = small_problem(rng, iters=8)
    Z, theta, history = run_codesign(
        lat, Z0, theta0, lib, (2.0, 0.1), sim_cfg, sched, x0=x0,
        update_controller=False,
    )
    assert len({h["theta_sha256"] for h in history}) == 1
    controller_rows = [h for h in history if h["pass"] == "controller"]
    assert controller_rows and all(h["loss"] is None for h in controller_rows)
    assert len({h["z_sha256"] for h in history}) > 1


def test_codesign_deterministic(rng):
    lat, lib, Z0, theta0, sim_cfg, sched, x0 = small_problem(rng, iters=10)
    out1 = run_codesign(lat, Z0, theta0, lib, (2.0, 0.1), sim_cfg, sched, x0=x0)
    out2 = run_codesign(lat, Z0, theta0, lib, (2.0, 0.1), sim_cfg, sched, x0=x0)
    np.testing.assert_array_equal(out1[0], out2[0])
    np.testing.assert_array_equal(params_to_vector(out1[1]), params_to_vector(out2[1]))
    assert out1[2] == out2[2]


def test_checkpoint_resume_bit_exact(tmp_path, rng):
    lat, lib, Z0, theta0, sim_cfg, sched, x0 = small_problem(rng, iters=12)
    args = (lat, Z0, theta0, lib, (2.0, 0.1), sim_cfg, sched)
    kwargs = dict(x0=x0)
    Z_full, theta_full, hist_full = run_codesign(*args, **kwargs)

    Z_a, theta_a, hist_a = run_codesign(
        *args, **kwargs, checkpoint_dir=tmp_path, checkpoint_every=6
    )
    ckpt = tmp_path / "checkpoint_iter_00006.npz"
    assert ckpt.exists()
    Z_b, theta_b, hist_b = run_codesign(*args, **kwargs, resume_from=ckpt)
    np.testing.assert_array_equal(Z_b, Z_full)
    np.testing.assert_array_equal(params_to_vector(theta_b), params_to_vector(theta_full))
    assert hist_b == hist_full[6:]


def test_checkpoint_roundtrip_preserves_state(tmp_path, rng):
    from trussopt.optimizer import CodesignState, _new_state

    lat, lib, Z0, theta0, *_ = small_problem(rng)
    state = _new_state(Z0, theta0, adam_lr=1e-2)
    state.iteration = 7
    state.last_perf_step = rng.standard_normal(Z0.shape)
    state.mma.x_prev1 = rng.standard_normal(Z0.size)
    state.al.lam[:] = [0.1, -0.2, 0.0, 0.3]
    path = tmp_path / "ck.npz"
    save_codesign_checkpoint(path, state)
    loaded = load_codesign_checkpoint(path)
    assert loaded.iteration == 7
    np.testing.assert_array_equal(loaded.Z, state.Z)
    np.testing.assert_array_equal(loaded.last_perf_step, state.last_perf_step)
    np.testing.assert_array_equal(loaded.mma.x_prev1, state.mma.x_prev1)
    assert loaded.mma.x_prev2 is None
    np.testing.assert_array_equal(loaded.al.lam, state.al.lam)


def test_history_jsonl_roundtrip(tmp_path, rng):
    lat, lib, Z0, theta0, sim_cfg, sched, x0 = small_problem(rng, iters=6)
    _, _, history = run_codesign(lat, Z0, theta0, lib, (2.0, 0.1), sim_cfg, sched, x0=x0)
    path = tmp_path / "history.jsonl"
    write_history_jsonl(path, history)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 6
    assert read_history_jsonl(path) == history
    row0 = json.loads(lines[0])
    assert row0["iter"] == 0
