import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rcpred.core import ConfigError, DimensionError, DomainError
from rcpred.regress import (KnnModel, RegressorSpec, _lasso_path, default_lambda_grid,
                            default_neighbors, fit_regressor, knn_fit, lambda_max, lasso_cv,
                            lasso_fit, predict)


def kkt_residuals(model, x, y):
    """(max violation over zero coefs, max violation over active coefs) on the standardised scale."""
    n = x.shape[0]
    mean = x.mean(axis=0)
    sd = np.sqrt(((x - mean) ** 2).mean(axis=0))
    xs = (x - mean) / sd
    r = y - model.predict(x)
    grad = xs.T @ r / n
    beta = model.coef * sd
    lam = model.chosen_lambda
    zero = beta == 0
    viol_zero = np.max(np.abs(grad[zero]) - lam, initial=-np.inf)
    viol_act = np.max(np.abs(grad[~zero] - lam * np.sign(beta[~zero])), initial=0.0)
    return viol_zero, viol_act


def random_problem(rng, n, d, sparsity=0.3):
    x = rng.normal(size=(n, d)) * rng.uniform(0.2, 5.0, size=d) + rng.normal(size=d)
    b = rng.normal(size=d) * (rng.random(d) < sparsity)
    y = x @ b + rng.normal(size=n) * rng.uniform(0.1, 3.0) + rng.normal()
    return x, y


def normal_equations_ols(x, y):
    xa = np.hstack([np.ones((x.shape[0], 1)), x])
    sol = np.linalg.solve(xa.T @ xa, xa.T @ y)
    return sol[0], sol[1:]


def test_kkt_holds_on_random_problems():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        n = int(rng.integers(10, 201))
        d = int(rng.integers(1, 51))
        x, y = random_problem(rng, n, d)
        lam = lambda_max(x, y) * float(rng.uniform(0.001, 1.1))
        m = lasso_fit(x, y, lam)
        vz, va = kkt_residuals(m, x, y)
        assert vz <= 1e-6 and va <= 1e-6


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(5, 80), d=st.integers(1, 30),
       frac=st.floats(0.0005, 1.5))
def test_kkt_property(seed, n, d, frac):
    rng = np.random.default_rng(seed)
    x, y = random_problem(rng, n, d)
    m = lasso_fit(x, y, lambda_max(x, y) * frac)
    vz, va = kkt_residuals(m, x, y)
    assert vz <= 1e-6 and va <= 1e-6


def test_lambda_zero_matches_normal_equations():
    rng = np.random.default_rng(1)
    x, y = random_problem(rng, 50, 3, sparsity=1.0)
    m = lasso_fit(x, y, 0.0)
    b0, b = normal_equations_ols(x, y)
    assert np.allclose(m.coef, b, rtol=1e-6, atol=0)
    assert m.intercept == pytest.approx(b0, rel=1e-6)


def test_lambda_zero_residuals_orthogonal():
    rng = np.random.default_rng(3)
    x, y = random_problem(rng, 60, 5, sparsity=1.0)
    m = lasso_fit(x, y, 0.0)
    r = y - predict(m, x)
    assert np.max(np.abs(x.T @ r)) < 1e-8 * np.abs(x).sum()
    assert abs(r.sum()) < 1e-8 * np.abs(y).sum()


def test_soft_threshold_single_feature():
    rng = np.random.default_rng(0)
    n = 400
    x = rng.normal(size=n)
    x = (x - x.mean()) / x.std()
    e = rng.normal(size=n)
    e -= e.mean()
    e -= (e @ x) / (x @ x) * x
    y = 0.8 * x + e + 3.0
    assert x @ (y - y.mean()) / n == pytest.approx(0.8)
    m = lasso_fit(x[:, None], y, 0.3)
    assert m.coef_std[0] == pytest.approx(0.5, abs=1e-10)


def test_full_shrinkage_gives_intercept_only():
    rng = np.random.default_rng(5)
    x, y = random_problem(rng, 40, 6)
    m = lasso_fit(x, y, lambda_max(x, y) * 1.0001)
    assert np.all(m.coef == 0)
    assert m.intercept == pytest.approx(y.mean())
    assert np.allclose(m.predict(x), y.mean())


def test_constant_column_gets_zero_coefficient():
    rng = np.random.default_rng(6)
    x = np.hstack([rng.normal(size=(30, 2)), np.full((30, 1), 4.0)])
    y = x[:, 0] + rng.normal(size=30)
    m = lasso_fit(x, y, 0.01)
    assert m.coef[2] == 0.0 and np.isfinite(m.coef).all()


def test_non_finite_input_rejected():
    x = np.ones((5, 2))
    x[0, 0] = np.nan
    with pytest.raises(DomainError):
        lasso_fit(x, np.arange(5.0), 0.1)


def test_monotone_shrinkage_over_grid():
    rng = np.random.default_rng(8)
    x, y = random_problem(rng, 80, 30)
    grid = default_lambda_grid(x, y)
    betas, *_ = _lasso_path(x, y, grid, True)
    l1 = np.abs(betas).sum(axis=1)
    assert np.all(np.diff(l1) >= -1e-9)


def test_default_grid_shape():
    rng = np.random.default_rng(9)
    x, y = random_problem(rng, 50, 10)
    grid = default_lambda_grid(x, y)
    assert grid.size == 100
    assert grid[0] == pytest.approx(lambda_max(x, y))
    assert grid[-1] == pytest.approx(1e-3 * grid[0])


def test_cv_noiseless_recovery():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(60, 4))
    b = np.array([1.5, -2.0, 0.0, 0.7])
    y = x @ b + 0.3
    spec = RegressorSpec(lambda_grid=(1.0, 0.1, 0.0))
    m = lasso_cv(x, y, spec, seed=0)
    assert m.cv_errors.min() < 1e-10
    assert m.chosen_lambda == 0.0
    assert np.allclose(m.coef, b, atol=1e-8)


def test_cv_single_value_grid_equals_fit():
    rng = np.random.default_rng(11)
    x, y = random_problem(rng, 50, 8)
    lam = 0.2 * lambda_max(x, y)
    spec = RegressorSpec(lambda_grid=(lam,))
    a, b = lasso_cv(x, y, spec, seed=3), lasso_fit(x, y, lam, spec)
    assert np.array_equal(a.coef, b.coef) and a.intercept == b.intercept


def test_cv_tie_prefers_larger_lambda():
    rng = np.random.default_rng(12)
    x, y = random_problem(rng, 40, 5)
    lmax = lambda_max(x, y)
    spec = RegressorSpec(lambda_grid=(3 * lmax, 2 * lmax, 0.01 * lmax))
    m = lasso_cv(x, y, spec, seed=0)
    assert m.cv_errors[0] == m.cv_errors[1]
    assert m.chosen_lambda in (3 * lmax, 0.01 * lmax)
    if m.cv_errors[2] >= m.cv_errors[0]:
        assert m.chosen_lambda == 3 * lmax


def test_cv_chosen_lambda_in_grid():
    rng = np.random.default_rng(13)
    x, y = random_problem(rng, 120, 20)
    m = lasso_cv(x, y, RegressorSpec(), seed=4)
    assert m.chosen_lambda in set(m.lambda_grid)
    assert m.cv_errors[list(m.lambda_grid).index(m.chosen_lambda)] == m.cv_errors.min()


def test_cv_needs_enough_rows():
    with pytest.raises(DimensionError):
        lasso_cv(np.ones((5, 2)), np.arange(5.0), RegressorSpec(cv_folds=10))


def test_spec_validation():
    with pytest.raises(ConfigError):
        RegressorSpec(family="forest")
    with pytest.raises(ConfigError):
        RegressorSpec(lambda_grid=(0.1, 0.5))
    with pytest.raises(ConfigError):
        RegressorSpec(lambda_grid=())
    with pytest.raises(ConfigError):
        RegressorSpec(family="knn", neighbors=0)


def test_feature_subset_restricts_columns():
    rng = np.random.default_rng(14)
    x = rng.normal(size=(100, 6))
    y = x[:, 0] + 5 * x[:, 5]
    m = lasso_fit(x, y, 0.0, RegressorSpec(feature_subset=(0, 1, 2)))
    assert m.coef.shape == (3,)
    x2 = x.copy()
    x2[:, 3:] = 0.0
    assert np.array_equal(m.predict(x), m.predict(x2))
    with pytest.raises(DimensionError):
        m.predict(x[:, :3])
    with pytest.raises(DimensionError):
        lasso_fit(x[:, :2], y, 0.0, RegressorSpec(feature_subset=(0, 4)))


def test_predict_dimension_mismatch():
    rng = np.random.default_rng(15)
    x, y = random_problem(rng, 30, 4)
    m = lasso_fit(x, y, 0.1)
    with pytest.raises(DimensionError):
        m.predict(x[:, :3])


@pytest.mark.parametrize("family", ["lasso", "knn"])
def test_shift_stability(family):
    rng = np.random.default_rng(16)
    x, y = random_problem(rng, 120, 10)
    spec = RegressorSpec(family=family)
    c = 7.25
    base = fit_regressor(spec, x, y, seed=1)
    shifted = fit_regressor(spec, x, y + c, seed=1)
    xq = rng.normal(size=(30, 10))
    assert np.allclose(shifted.predict(xq), base.predict(xq) + c, atol=1e-10, rtol=0)


def test_predict_is_pure():
    rng = np.random.default_rng(17)
    x, y = random_problem(rng, 60, 5)
    for spec in (RegressorSpec(), RegressorSpec(family="knn")):
        m = fit_regressor(spec, x, y, seed=0)
        assert np.array_equal(m.predict(x), m.predict(x))


def test_knn_all_neighbours_is_mean():
    rng = np.random.default_rng(18)
    x, y = rng.normal(size=(25, 3)), rng.normal(size=25)
    m = knn_fit(x, y, RegressorSpec(family="knn", neighbors=25))
    assert np.allclose(m.predict(rng.normal(size=(7, 3))), y.mean())


def test_knn_one_neighbour_recovers_training_row():
    rng = np.random.default_rng(19)
    x, y = rng.normal(size=(25, 3)), rng.normal(size=25)
    m = knn_fit(x, y, RegressorSpec(family="knn", neighbors=1))
    assert np.array_equal(m.predict(x), y)


def test_knn_tie_goes_to_lower_index():
    x = np.array([[0.0], [2.0], [-5.0]])
    y = np.array([10.0, 20.0, 30.0])
    m = knn_fit(x, y, RegressorSpec(family="knn", neighbors=1, standardize=False))
    assert m.predict(np.array([[1.0]]))[0] == 10.0
    x = np.array([[2.0], [0.0], [-5.0]])
    m = knn_fit(x, y, RegressorSpec(family="knn", neighbors=1, standardize=False))
    assert m.predict(np.array([[1.0]]))[0] == 10.0


def test_knn_too_many_neighbours():
    with pytest.raises(ConfigError):
        knn_fit(np.zeros((4, 1)), np.zeros(4), RegressorSpec(family="knn", neighbors=5))


def test_default_neighbours_rule():
    assert default_neighbors(1000) == int(np.ceil(1000 ** 0.7 / 5))
    assert default_neighbors(1) == 1
