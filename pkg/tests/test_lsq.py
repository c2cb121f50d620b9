import numpy as np
import pytest

from piezoq.lsq import LsqError, damped_least_squares, numerical_jacobian


def test_linear_problem_exact():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((20, 3))
    x_true = np.array([1.0, -2.0, 0.5])
    b = a @ x_true
    res = damped_least_squares(lambda x: a @ x - b, np.zeros(3))
    assert res.converged
    assert np.allclose(res.x, x_true, atol=1e-9)


def test_rosenbrock():
    fun = lambda x: np.array([10 * (x[1] - x[0] ** 2), 1 - x[0]])
    res = damped_least_squares(fun, np.array([-1.2, 1.0]), max_iter=500)
    assert np.allclose(res.x, [1.0, 1.0], atol=1e-6)


def test_exponential_fit_matches_normal_equations():
    t = np.linspace(0, 2, 30)
    y = 3.0 * np.exp(-1.3 * t) + 0.01 * np.sin(7 * t)
    res = damped_least_squares(lambda p: p[0] * np.exp(-p[1] * t) - y, np.array([1.0, 0.5]), central=True)
    # stationarity of the cost at the solution
    g = res.jac.T @ res.residuals
    assert np.max(np.abs(g)) < 1e-8
    assert res.x == pytest.approx([3.0, 1.3], rel=2e-2)


def test_history_non_increasing():
    t = np.linspace(0, 1, 40)
    y = np.tanh(4 * (t - 0.3))
    res = damped_least_squares(lambda p: np.tanh(p[0] * (t - p[1])) - y, np.array([0.5, 0.9]))
    h = np.array(res.history)
    assert np.all(np.diff(h) <= 0)
    assert h[-1] <= h[0]


def test_bounds_respected():
    res = damped_least_squares(lambda x: x - 5.0, np.array([0.0]), lower=[-1.0], upper=[2.0])
    assert res.x[0] == pytest.approx(2.0)


def test_bad_bounds():
    with pytest.raises(LsqError):
        damped_least_squares(lambda x: x, np.array([0.0]), lower=[1.0], upper=[0.0])


def test_nonfinite_start():
    with pytest.raises(LsqError):
        damped_least_squares(lambda x: np.array([np.nan]), np.array([0.0]))


def test_jacobian_forward_and_central():
    fun = lambda x: np.array([x[0] ** 2, x[0] * x[1], np.sin(x[1])])
    x = np.array([1.5, 0.3])
    exact = np.array([[3.0, 0.0], [0.3, 1.5], [0.0, np.cos(0.3)]])
    assert np.allclose(numerical_jacobian(fun, x), exact, atol=1e-6)
    assert np.allclose(numerical_jacobian(fun, x, central=True, rel_step=1e-5), exact, atol=1e-9)


def test_covariance_linear():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((50, 2))
    b = a @ [1.0, 2.0] + 0.1 * rng.standard_normal(50)
    res = damped_least_squares(lambda x: a @ x - b, np.zeros(2))
    s2 = np.sum(res.residuals ** 2) / 48
    assert np.allclose(res.covariance(), s2 * np.linalg.inv(a.T @ a), rtol=1e-6)


def test_covariance_flags_unidentified_direction():
    a = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    res = damped_least_squares(lambda x: a @ x - [1.0, 2.0, 3.1], np.zeros(2))
    cov = res.covariance()
    assert np.all(np.isinf(np.diag(cov)))
