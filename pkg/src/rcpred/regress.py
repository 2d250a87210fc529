"""First- and second-stage regressors: cross-validated LASSO and k-NN.

Both families are fit from scratch.  The LASSO minimises

    (1/2n) * ||y - b0 - X_std @ beta||^2 + lam * ||beta||_1

by cyclic coordinate descent on the standardised design with an unpenalised
intercept, working on the Gram matrix ``X_std.T @ X_std / n`` so that a whole
regularisation path costs O(d^2) per active coordinate update and never
touches the rows again.  Coefficients are reported in original units.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from numba import njit

from .core import ConfigError, DimensionError, DomainError, split_folds

CD_TOL = 1e-7
CD_MAX_CYCLES = 10_000
DEFAULT_N_LAMBDA = 100
DEFAULT_LAMBDA_MIN_RATIO = 1e-3


@dataclass(frozen=True)
class RegressorSpec:
    """Declarative choice of regression family and its hyperparameters.

    ``lambda_grid=None`` means the data-driven default: ``n_lambda`` values
    log-spaced from lambda_max down to ``lambda_min_ratio * lambda_max``.
    ``neighbors=None`` means ``ceil(n**0.7 / 5)``.
    """

    family: str = "lasso"
    lambda_grid: Optional[Tuple[float, ...]] = None
    cv_folds: int = 10
    neighbors: Optional[int] = None
    standardize: bool = True
    feature_subset: Optional[Tuple[int, ...]] = None
    n_lambda: int = DEFAULT_N_LAMBDA
    lambda_min_ratio: float = DEFAULT_LAMBDA_MIN_RATIO

    def __post_init__(self):
        if self.family not in ("lasso", "knn"):
            raise ConfigError(f"unknown regressor family {self.family!r}")
        if self.lambda_grid is not None:
            grid = tuple(float(g) for g in self.lambda_grid)
            if not grid:
                raise ConfigError("lambda_grid must be non-empty")
            if any(not math.isfinite(g) or g < 0 for g in grid):
                raise ConfigError("lambda_grid entries must be finite and non-negative")
            if any(a < b for a, b in zip(grid, grid[1:])):
                raise ConfigError("lambda_grid must be sorted in descending order")
            object.__setattr__(self, "lambda_grid", grid)
        if self.cv_folds < 2:
            raise ConfigError("cv_folds must be >= 2")
        if self.neighbors is not None and self.neighbors < 1:
            raise ConfigError("neighbors must be >= 1")
        if self.n_lambda < 1 or not (0 < self.lambda_min_ratio <= 1):
            raise ConfigError("need n_lambda >= 1 and 0 < lambda_min_ratio <= 1")
        if self.feature_subset is not None:
            subset = tuple(int(j) for j in self.feature_subset)
            if not subset or any(j < 0 for j in subset) or len(set(subset)) != len(subset):
                raise ConfigError("feature_subset must be distinct non-negative indices")
            object.__setattr__(self, "feature_subset", subset)


@dataclass(frozen=True)
class LassoModel:
    intercept: float
    coef: np.ndarray
    chosen_lambda: float
    center: np.ndarray
    scale: np.ndarray
    n_features_in: int
    feature_subset: Optional[Tuple[int, ...]] = None
    cv_errors: Optional[np.ndarray] = field(default=None, compare=False, repr=False)
    lambda_grid: Optional[np.ndarray] = field(default=None, compare=False, repr=False)
    family: str = field(default="lasso", init=False)

    @property
    def coef_std(self) -> np.ndarray:
        """Coefficients on the internal standardised scale."""
        return self.coef * self.scale

    def predict(self, x) -> np.ndarray:
        xs = _select(x, self.n_features_in, self.feature_subset)
        return self.intercept + xs @ self.coef


@dataclass(frozen=True)
class KnnModel:
    x_std: np.ndarray
    y: np.ndarray
    neighbors: int
    center: np.ndarray
    scale: np.ndarray
    n_features_in: int
    feature_subset: Optional[Tuple[int, ...]] = None
    family: str = field(default="knn", init=False)

    def predict(self, x) -> np.ndarray:
        xs = (_select(x, self.n_features_in, self.feature_subset) - self.center) / self.scale
        return _knn_predict(self.x_std, self.y, xs, self.neighbors)


class FunctionModel:
    """Wrap a fixed function of the design matrix so it can stand in for a fitted model.

    Used to inject oracle nuisances (true mu, pi, eta) into the learners.
    """

    family = "function"

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], n_features_in: Optional[int] = None):
        self.fn = fn
        self.n_features_in = n_features_in

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.n_features_in is not None and x.shape[1] != self.n_features_in:
            raise DimensionError(f"expected {self.n_features_in} columns, got {x.shape[1]}")
        return np.broadcast_to(np.asarray(self.fn(x), dtype=float), (x.shape[0],)).copy()

    @classmethod
    def constant(cls, value: float) -> "FunctionModel":
        return cls(lambda x: np.full(x.shape[0], float(value)))


FittedRegressor = Union[LassoModel, KnnModel, FunctionModel]


def predict(model, x) -> np.ndarray:
    return model.predict(x)


def _select(x, n_features_in: int, subset) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != n_features_in:
        raise DimensionError(f"expected a matrix with {n_features_in} columns, got shape {x.shape}")
    return x if subset is None else x[:, list(subset)]


def _prepare(x, y, spec: RegressorSpec) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if x.ndim != 2:
        raise DimensionError(f"x must be 2-d, got shape {x.shape}")
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"x has {x.shape[0]} rows but y has {y.shape[0]}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DomainError("regression inputs contain NaN or infinite values")
    if spec.feature_subset is not None:
        if max(spec.feature_subset) >= x.shape[1]:
            raise DimensionError(
                f"feature_subset index {max(spec.feature_subset)} out of range for {x.shape[1]} columns")
        x = x[:, list(spec.feature_subset)]
    return x, y


def _scale_from_var(var: np.ndarray, colmax: np.ndarray, standardize: bool):
    """Return (scale, constant_mask); constant columns get scale 1 and are frozen at 0."""
    const = var <= 1e-20 * (1.0 + colmax ** 2)
    if standardize:
        scale = np.where(const, 1.0, np.sqrt(np.where(const, 1.0, var)))
    else:
        scale = np.ones_like(var)
    return scale, const


# --------------------------------------------------------------------------
# coordinate descent kernel
# --------------------------------------------------------------------------

@njit(cache=True)
def _cd_sweep(G, grad, beta, lam, coords, ncoords):
    maxch = 0.0
    d = beta.shape[0]
    for t in range(ncoords):
        j = coords[t]
        gjj = G[j, j]
        if gjj <= 0.0:
            continue
        old = beta[j]
        rho = grad[j] + gjj * old
        if rho > lam:
            new = (rho - lam) / gjj
        elif rho < -lam:
            new = (rho + lam) / gjj
        else:
            new = 0.0
        delta = new - old
        if delta != 0.0:
            beta[j] = new
            for k in range(d):
                grad[k] -= delta * G[j, k]
            ad = abs(delta)
            if ad > maxch:
                maxch = ad
    return maxch


@njit(cache=True)
def _cd_solve(G, c, grad, beta, lam, tol, max_cycles, active):
    """Run coordinate descent at one lambda from the current beta/grad (in place)."""
    d = c.shape[0]
    allc = np.arange(d)
    n_cyc = 0
    while n_cyc < max_cycles:
        maxch = _cd_sweep(G, grad, beta, lam, allc, d)
        n_cyc += 1
        if maxch < tol:
            break
        na = 0
        for j in range(d):
            if beta[j] != 0.0:
                active[na] = j
                na += 1
        while n_cyc < max_cycles:
            maxch = _cd_sweep(G, grad, beta, lam, active, na)
            n_cyc += 1
            if maxch < tol:
                break
    return n_cyc


@njit(cache=True)
def _cd_path(G, c, lambdas, beta0, tol, max_cycles):
    """Warm-started coordinate descent along a descending lambda path.

    ``grad`` tracks c - G @ beta, i.e. x_j' r / n on the standardised scale.
    Each lambda alternates a full sweep with sweeps over the active set and
    stops once a full sweep moves no coefficient by tol or more.
    """
    d = c.shape[0]
    nl = lambdas.shape[0]
    out = np.zeros((nl, d))
    cycles = np.zeros(nl, dtype=np.int64)
    beta = beta0.copy()
    grad = c - G @ beta
    active = np.empty(d, dtype=np.int64)
    for li in range(nl):
        cycles[li] = _cd_solve(G, c, grad, beta, lambdas[li], tol, max_cycles, active)
        out[li] = beta
    return out, cycles


@njit(cache=True)
def _cd_finish(G, c, lambdas, B, n_exact, tol, max_cycles):
    """Certify each path point with the CD stopping rule.

    Rows ``< n_exact`` of B hold homotopy solutions and are refined in place
    (normally a single sweep); later rows are filled by warm-started CD.
    """
    d = c.shape[0]
    nl = lambdas.shape[0]
    cycles = np.zeros(nl, dtype=np.int64)
    active = np.empty(d, dtype=np.int64)
    beta = np.zeros(d)
    for li in range(nl):
        if li < n_exact:
            beta[:] = B[li]
        grad = c - G @ beta
        cycles[li] = _cd_solve(G, c, grad, beta, lambdas[li], tol, max_cycles, active)
        B[li] = beta
    return cycles


@njit(cache=True, fastmath=True)
def _chol_add(L, na, G, A, j):
    r = np.empty(na)
    for i in range(na):
        acc = G[A[i], j]
        for k in range(i):
            acc -= L[i, k] * r[k]
        r[i] = acc / L[i, i]
    diag = G[j, j]
    for i in range(na):
        diag -= r[i] * r[i]
    if diag <= 1e-10 * G[j, j]:
        return False
    for i in range(na):
        L[na, i] = r[i]
    L[na, na] = np.sqrt(diag)
    return True


@njit(cache=True, fastmath=True)
def _chol_remove(L, na, p):
    """Delete row/column p of the factor and re-triangularise with Givens rotations."""
    for i in range(p, na - 1):
        for k in range(i + 2):
            L[i, k] = L[i + 1, k]
    for k in range(p, na - 1):
        a = L[k, k]
        b = L[k, k + 1]
        r = np.hypot(a, b)
        cs = a / r
        sn = b / r
        for i in range(k, na - 1):
            x = L[i, k]
            y = L[i, k + 1]
            L[i, k] = cs * x + sn * y
            L[i, k + 1] = -sn * x + cs * y
        L[k, k + 1] = 0.0
    for k in range(na):
        L[na - 1, k] = 0.0


@njit(cache=True, fastmath=True)
def _homotopy_path(G, c, lambdas, max_active, max_events):
    """Exact LASSO path (LARS with the lasso modification) sampled at ``lambdas``.

    Returns (B, n_done): rows ``< n_done`` of B are solutions; the homotopy
    stops early if the active Gram block becomes singular or the event
    budget runs out, and the caller completes the remaining rows.
    """
    d = c.shape[0]
    nl = lambdas.shape[0]
    out = np.zeros((nl, d))
    usable = np.zeros(d, dtype=np.bool_)
    lam = 0.0
    jstar = -1
    for j in range(d):
        if G[j, j] > 0.0:
            usable[j] = True
            if abs(c[j]) > lam:
                lam = abs(c[j])
                jstar = j
    gi = 0
    while gi < nl and lambdas[gi] >= lam:
        gi += 1
    if gi == nl or jstar < 0:
        return out, nl
    m = min(d, max_active)
    L = np.zeros((m + 1, m + 1))
    A = np.empty(m + 1, dtype=np.int64)
    sgn = np.zeros(m + 1)
    in_a = np.zeros(d, dtype=np.bool_)
    beta = np.zeros(d)
    grad = c.copy()
    w = np.zeros(m + 1)
    y = np.zeros(m + 1)
    a = np.zeros(d)
    GA = np.zeros((m + 1, d))

    GA[0] = G[jstar]
    L[0, 0] = np.sqrt(G[jstar, jstar])
    A[0] = jstar
    sgn[0] = 1.0 if c[jstar] > 0 else -1.0
    in_a[jstar] = True
    na = 1
    last_added = jstar
    last_dropped = -1
    events = 0
    while gi < nl:
        # direction: G_AA w = sgn
        for i in range(na):
            acc = sgn[i]
            for k in range(i):
                acc -= L[i, k] * y[k]
            y[i] = acc / L[i, i]
        for i in range(na - 1, -1, -1):
            wi = y[i] / L[i, i]
            w[i] = wi
            for k in range(i):
                y[k] -= L[i, k] * wi
        a[:] = np.dot(w[:na], GA[:na])
        gamma = lam - lambdas[nl - 1]
        kind = 0
        who = -1
        for j in range(d):
            if in_a[j] or not usable[j] or j == last_dropped:
                continue
            g = grad[j]
            if 1.0 - a[j] > 1e-12:
                t = (lam - g) / (1.0 - a[j])
                if t < 0.0:
                    t = 0.0
                if t < gamma:
                    gamma = t
                    kind = 1
                    who = j
            if 1.0 + a[j] > 1e-12:
                t = (lam + g) / (1.0 + a[j])
                if t < 0.0:
                    t = 0.0
                if t < gamma:
                    gamma = t
                    kind = 1
                    who = j
        for i in range(na):
            if w[i] == 0.0:
                continue
            t = -beta[A[i]] / w[i]
            if t > 0.0 and t < gamma and not (A[i] == last_added and t <= 1e-14 * lam):
                gamma = t
                kind = 2
                who = i
        while gi < nl and lam - lambdas[gi] <= gamma:
            step = lam - lambdas[gi]
            out[gi] = beta
            for i in range(na):
                out[gi, A[i]] = beta[A[i]] + step * w[i]
            gi += 1
        if gi == nl or kind == 0:
            break
        for i in range(na):
            beta[A[i]] += gamma * w[i]
        lam -= gamma
        events += 1
        if events % 64 == 0:
            for i in range(na):
                y[i] = beta[A[i]]
            grad[:] = c - np.dot(y[:na], GA[:na])
        else:
            for k in range(d):
                grad[k] -= gamma * a[k]
        if kind == 1:
            if na >= m or not _chol_add(L, na, G, A, who):
                return out, gi
            A[na] = who
            GA[na] = G[who]
            sgn[na] = 1.0 if grad[who] > 0 else -1.0
            in_a[who] = True
            na += 1
            last_added = who
            last_dropped = -1
        else:
            j = A[who]
            beta[j] = 0.0
            in_a[j] = False
            _chol_remove(L, na, who)
            for i in range(who, na - 1):
                A[i] = A[i + 1]
                sgn[i] = sgn[i + 1]
                GA[i] = GA[i + 1]
            na -= 1
            last_dropped = j
            last_added = -1
            if na == 0:
                # every coefficient left the model; restart from the largest correlation
                best = -1.0
                for k in range(d):
                    if usable[k] and abs(grad[k]) > best:
                        best = abs(grad[k])
                        jstar = k
                L[0, 0] = np.sqrt(G[jstar, jstar])
                GA[0] = G[jstar]
                A[0] = jstar
                sgn[0] = 1.0 if grad[jstar] > 0 else -1.0
                in_a[jstar] = True
                na = 1
                last_added = jstar
        if events >= max_events:
            return out, gi
    return out, gi


def _standardized_problem(x, y, standardize):
    """Standardise x and return (G, c, center, scale, const, ybar)."""
    n = x.shape[0]
    center = x.mean(axis=0)
    xc = x - center
    var = (xc ** 2).mean(axis=0)
    scale, const = _scale_from_var(var, np.abs(x).max(axis=0, initial=0.0), standardize)
    xs = xc / scale
    xs[:, const] = 0.0
    ybar = float(y.mean())
    G = xs.T @ xs / n
    c = xs.T @ (y - ybar) / n
    return G, c, center, scale, const, ybar


def lambda_max(x, y, standardize: bool = True) -> float:
    """Smallest penalty at which every coefficient is zero."""
    x = np.asarray(x, dtype=float)
    if x.shape[1] == 0:
        return 0.0
    _, c, *_ = _standardized_problem(x, np.asarray(y, dtype=float).ravel(), standardize)
    return float(np.max(np.abs(c)))


def default_lambda_grid(x, y, spec: Optional[RegressorSpec] = None) -> np.ndarray:
    spec = spec or RegressorSpec()
    lmax = lambda_max(x, y, spec.standardize)
    if lmax <= 0.0:
        return np.zeros(1)
    return np.geomspace(lmax, spec.lambda_min_ratio * lmax, spec.n_lambda)


def _lasso_path(x, y, lambdas, standardize, tol=CD_TOL, max_cycles=CD_MAX_CYCLES):
    """Fit the whole (descending) path on prepared data; returns standardised betas and constants."""
    G, c, center, scale, const, ybar = _standardized_problem(x, y, standardize)
    betas = _solve_path(G, c, lambdas, x.shape[0], tol, max_cycles)
    betas[:, const] = 0.0
    return betas, center, scale, ybar


def _solve_path(G, c, lambdas, n_rows, tol=CD_TOL, max_cycles=CD_MAX_CYCLES):
    """LASSO solutions at each of ``lambdas`` (descending) for Gram problem (G, c).

    The homotopy supplies exact solutions while the active block stays well
    conditioned; every point is then certified by coordinate descent.
    """
    lambdas = np.ascontiguousarray(lambdas, dtype=float)
    G = np.ascontiguousarray(G)
    B, n_exact = _homotopy_path(G, c, lambdas, n_rows, 50 * max(G.shape[0], n_rows))
    _cd_finish(G, c, lambdas, B, n_exact, tol, max_cycles)
    return B


def _model_from_std(beta_std, lam, center, scale, ybar, n_features_in, subset, **extra) -> LassoModel:
    coef = beta_std / scale
    intercept = ybar - float(center @ coef)
    return LassoModel(intercept=intercept, coef=coef, chosen_lambda=float(lam), center=center,
                      scale=scale, n_features_in=n_features_in, feature_subset=subset, **extra)


def lasso_fit(x, y, lam: float, spec: Optional[RegressorSpec] = None) -> LassoModel:
    """LASSO at a single penalty ``lam`` (cold start)."""
    spec = spec or RegressorSpec()
    if not (math.isfinite(lam) and lam >= 0):
        raise DomainError(f"lambda must be finite and non-negative, got {lam}")
    n_in = np.asarray(x).shape[1] if np.ndim(x) == 2 else -1
    x, y = _prepare(x, y, spec)
    if x.shape[0] < 2:
        raise DimensionError("lasso needs at least 2 rows")
    betas, center, scale, ybar = _lasso_path(x, y, [lam], spec.standardize)
    return _model_from_std(betas[0], lam, center, scale, ybar, n_in, spec.feature_subset)


def lasso_cv(x, y, spec: Optional[RegressorSpec] = None, seed: int = 0) -> LassoModel:
    """Pick lambda by K-fold CV (pooled held-out squared error) and refit on all rows.

    Ties go to the larger lambda.  The refit walks the grid from its largest
    value down to the chosen one with warm starts.
    """
    spec = spec or RegressorSpec()
    n_in = np.asarray(x).shape[1] if np.ndim(x) == 2 else -1
    x, y = _prepare(x, y, spec)
    n, d = x.shape
    if n < spec.cv_folds:
        raise DimensionError(f"lasso_cv needs at least cv_folds={spec.cv_folds} rows, got {n}")
    grid = (np.asarray(spec.lambda_grid, dtype=float) if spec.lambda_grid is not None
            else default_lambda_grid(x, y, RegressorSpec(standardize=spec.standardize,
                                                         n_lambda=spec.n_lambda,
                                                         lambda_min_ratio=spec.lambda_min_ratio)))
    if len(grid) == 1:
        errors = np.full(1, np.nan)
        best = 0
    else:
        errors = _cv_errors(x, y, grid, spec, seed)
        best = int(np.argmin(errors))
    betas, center, scale, ybar = _lasso_path(x, y, grid[:best + 1], spec.standardize)
    return _model_from_std(betas[-1], grid[best], center, scale, ybar, n_in, spec.feature_subset,
                           cv_errors=errors, lambda_grid=grid)


def _cv_errors(x, y, grid, spec: RegressorSpec, seed: int) -> np.ndarray:
    """Pooled held-out squared error for each lambda in ``grid``.

    Per-fold Gram matrices are obtained by downdating the full cross-product
    matrix with the held-out block, so the O(n d^2) product is formed once.
    """
    n, d = x.shape
    folds = split_folds(n, spec.cv_folds, seed)
    gcenter = x.mean(axis=0)
    xc = x - gcenter
    colmax = np.abs(x).max(axis=0, initial=0.0)
    S = xc.T @ xc
    sx = xc.sum(axis=0)
    sxy = xc.T @ y
    sy = float(y.sum())
    sse = np.zeros(len(grid))
    for k in range(spec.cv_folds):
        idx = folds.indices(k)
        xk, yk = xc[idx], y[idx]
        nt = n - len(idx)
        mean_t = (sx - xk.sum(axis=0)) / nt
        cov = (S - xk.T @ xk) / nt - np.outer(mean_t, mean_t)
        var = np.diag(cov).copy()
        scale, const = _scale_from_var(var, colmax, spec.standardize)
        ybar_t = (sy - float(yk.sum())) / nt
        cxy = (sxy - xk.T @ yk) / nt - mean_t * ybar_t
        G = cov / np.outer(scale, scale)
        c = cxy / scale
        G[const, :] = 0.0
        G[:, const] = 0.0
        c[const] = 0.0
        betas = _solve_path(G, c, grid, nt)
        preds = ybar_t + (xk - mean_t) @ (betas / scale).T
        sse += ((preds - yk[:, None]) ** 2).sum(axis=0)
    return sse / n


# --------------------------------------------------------------------------
# k nearest neighbours
# --------------------------------------------------------------------------

def default_neighbors(n: int) -> int:
    return max(1, math.ceil(n ** 0.7 / 5))


def knn_fit(x, y, spec: Optional[RegressorSpec] = None) -> KnnModel:
    """Store standardised training rows; predictions average the k nearest responses."""
    spec = spec or RegressorSpec(family="knn")
    n_in = np.asarray(x).shape[1] if np.ndim(x) == 2 else -1
    x, y = _prepare(x, y, spec)
    n = x.shape[0]
    k = spec.neighbors if spec.neighbors is not None else default_neighbors(n)
    if n < 1 or k > n:
        raise ConfigError(f"neighbors={k} exceeds the {n} training rows")
    center = x.mean(axis=0)
    var = ((x - center) ** 2).mean(axis=0)
    scale, _ = _scale_from_var(var, np.abs(x).max(axis=0, initial=0.0), spec.standardize)
    if not spec.standardize:
        center = np.zeros_like(center)
    x_std = (x - center) / scale
    return KnnModel(x_std=x_std, y=y.copy(), neighbors=int(k), center=center, scale=scale,
                    n_features_in=n_in, feature_subset=spec.feature_subset)


def _knn_predict(x_train, y_train, xq, k, chunk_elems=4_000_000):
    n, d = x_train.shape
    out = np.empty(xq.shape[0])
    if k == n:
        out[:] = y_train.mean()
        return out
    rows = max(1, chunk_elems // max(1, n * max(d, 1)))
    for start in range(0, xq.shape[0], rows):
        q = xq[start:start + rows]
        dist = ((q[:, None, :] - x_train[None, :, :]) ** 2).sum(axis=2)
        # stable sort keeps the lowest row index first among equal distances
        nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
        out[start:start + rows] = y_train[nearest].mean(axis=1)
    return out


def fit_regressor(spec: RegressorSpec, x, y, seed: int = 0):
    """Fit ``spec`` to (x, y): LASSO goes through CV, k-NN is fit directly."""
    if spec.family == "lasso":
        return lasso_cv(x, y, spec, seed)
    return knn_fit(x, y, spec)
