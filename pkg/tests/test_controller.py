import numpy as np
import pytest

from trussopt.controller import (
    CPGConfig,
    ControllerParams,
    assemble_input,
    controller_dims,
    cpg_signals,
    forward,
    forward_cached,
    forward_vjp,
    load_params,
    params_sha256,
    params_to_vector,
    save_params,
    target_strains,
    vector_to_params,
    xavier_init,
)
from trussopt.lattice import build_grid, grid_edge_count

from conftest import random_ratios, random_relaxed_design


def test_dims_for_6x6_grid():
    lat = build_grid(6, 6, 0.1)
    dims = controller_dims(lat.n_nodes, lat.n_edges)
    assert dims == (156, 32, 110)
    theta = xavier_init(0, dims)
    assert theta.w1.shape == (156, 32)
    assert theta.w2.shape == (32, 110)
    assert theta.b1.shape == (32,)
    assert theta.b2.shape == (110,)


@pytest.mark.parametrize("n", range(2, 9))
def test_input_length_formula_all_grids(n):
    lat = build_grid(n, n, 0.1)
    cpg = cpg_signals(0.3, CPGConfig())
    inp = assemble_input(lat.nodes, np.zeros_like(lat.nodes), (2.0, 0.1), cpg)
    assert inp.shape == (10 + 2 + 4 * n * n,)
    assert controller_dims(lat.n_nodes, lat.n_edges)[2] == grid_edge_count(n, n)


def test_xavier_deterministic():
    a = xavier_init(42, (156, 32, 110))
    b = xavier_init(42, (156, 32, 110))
    for x, y in zip(
        (a.w1, a.b1, a.w2, a.b2), (b.w1, b.b1, b.w2, b.b2)
    ):
        np.testing.assert_array_equal(x, y)
    c = xavier_init(43, (156, 32, 110))
    assert not np.array_equal(a.w1, c.w1)


def test_xavier_moments():
    # uniform on [-a, a] with a = sqrt(6/(fan_in+fan_out)) has std a/sqrt(3)
    theta = xavier_init(7, (156, 32, 110))
    a1 = np.sqrt(6.0 / (156 + 32))
    assert abs(theta.w1.std() - a1 / np.sqrt(3.0)) < 0.05 * (a1 / np.sqrt(3.0))
    assert np.abs(theta.w1).max() <= a1
    assert np.all(theta.b1 == 0.0) and np.all(theta.b2 == 0.0)


def test_cpg_values():
    cfg = CPGConfig(n_cpg=10, omega=10.0)
    c = cpg_signals(0.0, cfg)
    assert c[0] == pytest.approx(0.0, abs=1e-15)
    assert c[5] == pytest.approx(np.sin(np.pi), abs=1e-15)
    assert c[1] == pytest.approx(np.sin(2 * np.pi / 10), rel=1e-12)
    assert c[1] == pytest.approx(0.587785, abs=1e-6)
    assert np.all(np.abs(c) <= 1.0)


def test_cpg_periodicity():
    cfg = CPGConfig(n_cpg=10, omega=10.0)
    t = 1.234
    np.testing.assert_allclose(
        cpg_signals(t, cfg), cpg_signals(t + 2 * np.pi / cfg.omega, cfg), atol=1e-12
    )


def test_cpg_rejects_negative_time():
    with pytest.raises(ValueError):
        cpg_signals(-0.1, CPGConfig())


def test_assemble_input_layout():
    pos = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 1.0]])
    vel = np.array([[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]])
    cpg = np.array([0.5, -0.5])
    inp = assemble_input(pos, vel, (2.0, 0.1), cpg)
    assert inp.shape == (2 + 2 + 6 + 6,)
    np.testing.assert_array_equal(inp[:2], cpg)
    np.testing.assert_array_equal(inp[2:4], [2.0, 0.1])
    offsets = inp[4:10].reshape(3, 2)
    np.testing.assert_allclose(offsets.sum(axis=0), [0.0, 0.0], atol=1e-15)
    np.testing.assert_array_equal(inp[10:].reshape(3, 2), vel)


def test_assemble_input_coincident_nodes():
    pos = np.tile([0.3, 0.4], (4, 1))
    inp = assemble_input(pos, np.zeros_like(pos), (0.0, 0.0), np.zeros(3))
    np.testing.assert_array_equal(inp[5 : 5 + 8], np.zeros(8))


def test_assemble_input_size_mismatch():
    with pytest.raises(ValueError):
        assemble_input(np.zeros((3, 2)), np.zeros((4, 2)), (0, 0), np.zeros(2))


def test_forward_zero_weights():
    theta = ControllerParams(
        w1=np.zeros((8, 4)), b1=np.zeros(4), w2=np.zeros((4, 5)), b2=np.zeros(5)
    )
    u = forward(theta, np.ones(8))
    np.testing.assert_array_equal(u, np.zeros(5))


def test_forward_outputs_bounded(rng):
    theta = xavier_init(0, (12, 6, 7))
    for _ in range(1000):
        u = forward(theta, rng.standard_normal(12) * 3)
        assert np.all(np.abs(u) < 1.0)


def test_forward_dim_mismatch():
    theta = xavier_init(0, (12, 6, 7))
    with pytest.raises(ValueError):
        forward(theta, np.zeros(11))


def test_forward_vjp_matches_fd(rng):
    dims = (9, 5, 4)
    theta = xavier_init(3, dims)
    inp = rng.standard_normal(9)
    w = rng.standard_normal(4)
    u, h = forward_cached(theta, inp)
    g_inp, g_theta = forward_vjp(theta, inp, h, u, w)

    vec = params_to_vector(theta)
    g_vec = params_to_vector(g_theta)
    h_fd = 1e-6
    for i in rng.choice(vec.size, size=12, replace=False):
        vp = vec.copy(); vp[i] += h_fd
        vm = vec.copy(); vm[i] -= h_fd
        fd = (
            float(forward(vector_to_params(vp, dims), inp) @ w)
            - float(forward(vector_to_params(vm, dims), inp) @ w)
        ) / (2 * h_fd)
        assert abs(g_vec[i] - fd) < 1e-6 * max(1.0, abs(fd))
    for i in range(9):
        ip = inp.copy(); ip[i] += h_fd
        im = inp.copy(); im[i] -= h_fd
        fd = (float(forward(theta, ip) @ w) - float(forward(theta, im) @ w)) / (2 * h_fd)
        assert abs(g_inp[i] - fd) < 1e-6 * max(1.0, abs(fd))


def test_target_strains(lib):
    u = np.array([1.0, -1.0, 0.5])
    zt = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.5, 0.5]])
    eps = target_strains(u, zt, lib)
    assert eps[0] == 0.0  # pure skeleton never actuates
    assert eps[1] == pytest.approx(-0.35, rel=1e-12)
    assert eps[2] == pytest.approx(0.5 * 0.35 * 0.5, rel=1e-12)


def test_target_strain_bound(lib, rng):
    for _ in range(200):
        zt = random_ratios(30, rng)
        u = rng.uniform(-1, 1, 30)
        eps = target_strains(u, zt, lib)
        assert np.all(np.abs(eps) <= 0.35 + 1e-12)


def test_end_to_end_strain_gradient(lib, rng):
    """d eps_target / d theta through the MLP matches finite differences."""
    dims = (7, 4, 3)
    theta = xavier_init(11, dims)
    inp = rng.standard_normal(7)
    zt = random_ratios(3, rng)
    w = rng.standard_normal(3)

    u, h = forward_cached(theta, inp)
    gain = zt[:, 2] * lib.max_strain
    _, g_theta = forward_vjp(theta, inp, h, u, gain * w)
    g_vec = params_to_vector(g_theta)

    vec = params_to_vector(theta)
    h_fd = 1e-6
    for i in rng.choice(vec.size, size=10, replace=False):
        vp = vec.copy(); vp[i] += h_fd
        vm = vec.copy(); vm[i] -= h_fd
        fp = float(target_strains(forward(vector_to_params(vp, dims), inp), zt, lib) @ w)
        fm = float(target_strains(forward(vector_to_params(vm, dims), inp), zt, lib) @ w)
        fd = (fp - fm) / (2 * h_fd)
        assert abs(g_vec[i] - fd) < 1e-5 * max(1.0, abs(fd))


def test_params_vector_roundtrip(rng):
    theta = xavier_init(5, (6, 3, 4))
    vec = params_to_vector(theta)
    back = vector_to_params(vec, (6, 3, 4))
    for a, b in zip((theta.w1, theta.b1, theta.w2, theta.b2), (back.w1, back.b1, back.w2, back.b2)):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        vector_to_params(vec[:-1], (6, 3, 4))


def test_binary_checkpoint_bit_exact(tmp_path):
    theta = xavier_init(9, (156, 32, 110))
    path = tmp_path / "theta.npz"
    save_params(path, theta)
    loaded = load_params(path)
    for a, b in zip(
        (theta.w1, theta.b1, theta.w2, theta.b2),
        (loaded.w1, loaded.b1, loaded.w2, loaded.b2),
    ):
        assert a.dtype == b.dtype == np.float64
        np.testing.assert_array_equal(a, b)
    assert params_sha256(theta) == params_sha256(loaded)
