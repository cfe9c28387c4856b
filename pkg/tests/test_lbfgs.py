import numpy as np
import pytest
from scipy.optimize import brentq, rosen, rosen_der
from scipy.optimize import minimize as scipy_minimize

from caseval import lbfgs


def _rosen(x):
    return rosen(x), rosen_der(x)


def test_rosenbrock_matches_scipy():
    x0 = np.array([-1.2, 1.0, -0.5, 0.8])
    ours = lbfgs.minimize(_rosen, x0, max_iter=2000, gtol=1e-8)
    ref = scipy_minimize(rosen, x0, jac=rosen_der, method="L-BFGS-B", options={"gtol": 1e-10, "ftol": 0})
    assert ours.converged
    np.testing.assert_allclose(ours.x, ref.x, atol=1e-6)
    np.testing.assert_allclose(ours.x, 1.0, atol=1e-6)


def test_quadratic_with_preconditioner_is_one_step():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(6, 6))
    H = A @ A.T + 6 * np.eye(6)
    b = rng.normal(size=6)

    def f(x):
        return 0.5 * x @ H @ x - b @ x, H @ x - b

    h0 = lbfgs.inverse_hessian_guess(f, np.zeros(6))
    res = lbfgs.minimize(f, np.zeros(6), h0=h0, gtol=1e-9)
    assert res.converged and res.iterations <= 2
    np.testing.assert_allclose(res.x, np.linalg.solve(H, b), atol=1e-8)


def test_trace_is_monotone():
    res = lbfgs.minimize(_rosen, np.array([-1.5, 2.0]), max_iter=500)
    assert np.all(np.diff(res.trace) <= 0)


def test_non_finite_start_is_reported():
    res = lbfgs.minimize(lambda x: (np.nan, np.zeros_like(x)), np.zeros(2))
    assert not res.converged and "non-finite" in res.message


def test_non_finite_trial_points_are_rejected():
    # objective is infinite beyond x = 1
    def f(x):
        if x[0] >= 1.0:
            return np.inf, np.array([np.inf])
        return (x[0] - 0.9) ** 2 - np.log(1.0 - x[0]) * 1e-3, np.array([2 * (x[0] - 0.9) + 1e-3 / (1.0 - x[0])])

    res = lbfgs.minimize(f, np.array([-5.0]), gtol=1e-9)
    assert res.converged and np.isfinite(res.fun)
    root = brentq(lambda x: 2 * (x - 0.9) + 1e-3 / (1.0 - x), 0.0, 1.0 - 1e-12)
    assert res.x[0] == pytest.approx(root, abs=1e-7)


def test_iteration_limit():
    res = lbfgs.minimize(_rosen, np.array([-1.2, 1.0]), max_iter=3)
    assert res.iterations == 3 and not res.converged
