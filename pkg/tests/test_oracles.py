import math

import numpy as np
import pytest

from trussopt.oracles import (
    FDConfig,
    TwoNodeSpring,
    finite_diff_grad,
    measure_period,
    reference_integrate,
)


def test_fd_exact_on_quadratic():
    grad = finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]), FDConfig(h=1e-5))
    assert abs(grad[0] - 6.0) < 1e-9


def test_fd_exact_on_linear():
    x0 = np.array([0.3, -1.2, 4.0])
    grad = finite_diff_grad(lambda x: float(x.sum()), x0, FDConfig(h=1e-4))
    np.testing.assert_allclose(grad, 1.0, atol=1e-10)


def test_fd_error_scales_quadratically():
    # quartic: f'''(x) != 0, halving h shrinks the truncation error ~4x
    f = lambda x: float(x[0] ** 4)
    x0 = np.array([1.5])
    exact = 4 * 1.5**3
    e1 = abs(finite_diff_grad(f, x0, FDConfig(h=1e-3))[0] - exact)
    e2 = abs(finite_diff_grad(f, x0, FDConfig(h=5e-4))[0] - exact)
    assert e1 / e2 == pytest.approx(4.0, rel=0.05)


def test_fd_sampled_coordinates():
    f = lambda x: float((x**2).sum())
    x0 = np.arange(1.0, 6.0)
    grad = finite_diff_grad(f, x0, FDConfig(h=1e-5, coords=[1, 3]))
    assert np.isnan(grad[0]) and np.isnan(grad[2])
    assert grad[1] == pytest.approx(4.0, abs=1e-8)
    assert grad[3] == pytest.approx(8.0, abs=1e-8)


def test_fd_propagates_nonfinite():
    def f(x):
        return float("nan")

    with pytest.raises(FloatingPointError):
        finite_diff_grad(f, np.zeros(1), FDConfig(h=1e-5))


def test_fd_config_validation():
    with pytest.raises(ValueError):
        FDConfig(h=0.0)
    with pytest.raises(ValueError):
        FDConfig(scheme="forward")


def test_reference_equilibrium_is_stationary():
    sys = TwoNodeSpring(m1=1.0, m2=1.0, k=50.0, l0=0.1, x1=(0.0, 0.0), x2=(0.1, 0.0))
    out = reference_integrate(sys, dt_fine=1e-4, steps=1000)
    np.testing.assert_allclose(out["lengths"], 0.1, atol=1e-12)
    np.testing.assert_allclose(out["vs"], 0.0, atol=1e-12)


def test_reference_damped_envelope():
    # a free node (spring at rest) with damping decays exactly exponentially
    sys = TwoNodeSpring(
        m1=1.0, m2=1.0, k=50.0, l0=0.1,
        x1=(0.0, 0.0), x2=(0.1, 0.0),
        v1=(0.4, 0.0), v2=(0.4, 0.0),  # common-mode motion, no spring force
        damping=2.0,
    )
    dt = 1e-4
    steps = 5000
    out = reference_integrate(sys, dt_fine=dt, steps=steps, keep_every=steps)
    expected = 0.4 * math.exp(-2.0 * dt) ** steps
    np.testing.assert_allclose(out["vs"][-1][:, 0], expected, rtol=1e-12)


def test_reference_period_matches_analytic():
    sys = TwoNodeSpring(m1=2.0, m2=0.5, k=80.0, l0=0.2, x1=(0.0, 0.0), x2=(0.23, 0.0))
    ref = reference_integrate(sys, dt_fine=2e-5, steps=150_000, keep_every=5)
    period = measure_period(ref["lengths"], ref["dt"], sys.l0)
    analytic = 2 * math.pi / sys.angular_frequency()
    assert abs(period - analytic) / analytic < 0.01


def test_measure_period_needs_crossings():
    with pytest.raises(ValueError):
        measure_period(np.full(100, 0.2), 0.01, 0.1)
