"""Doubly-robust estimates of counterfactual prediction error, oracle scores and calibration bins."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import (ConfigError, DimensionError, InsufficientDataError, ObservationTable,
                   NumericalError, check_treatment, child_seed, split_folds)
from .regress import RegressorSpec, fit_regressor

Z95 = 1.96

# seed roles inside dr_mse
_ROLE_PI, _ROLE_ETA = 11, 12


@dataclass(frozen=True)
class MseEstimate:
    """Point estimate and 95% interval built from per-row influence values.

    ``point`` is the mean of ``influence_values`` and the half-width is
    1.96 * sqrt(var(phi) / n) with the n - 1 variance denominator.
    """

    point: float
    ci_lo: float
    ci_hi: float
    influence_values: np.ndarray = field(repr=False)
    n: int
    method: str = ""

    @classmethod
    def from_influence(cls, phi, method: str = "") -> "MseEstimate":
        phi = np.asarray(phi, dtype=float).ravel()
        if phi.size < 2:
            raise InsufficientDataError("need at least two influence values for an interval")
        if not np.all(np.isfinite(phi)):
            raise NumericalError(f"non-finite influence values for {method or 'model'}")
        point = float(phi.mean())
        half = Z95 * float(np.sqrt(phi.var(ddof=1) / phi.size))
        phi = phi.copy()
        phi.setflags(write=False)
        return cls(point, point - half, point + half, phi, int(phi.size), method)

    @property
    def half_width(self) -> float:
        return 0.5 * (self.ci_hi - self.ci_lo)

    def covers(self, value: float) -> bool:
        return self.ci_lo <= value <= self.ci_hi

    def csv_row(self) -> list:
        return [self.method, repr(self.point), repr(self.ci_lo), repr(self.ci_hi), str(self.n)]


MSE_HEADER = ["method", "point", "ci_lo", "ci_hi", "n"]


def estimates_to_csv(estimates: Sequence[MseEstimate]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MSE_HEADER)
    for e in estimates:
        w.writerow(e.csv_row())
    return buf.getvalue()


def influence_values(sq_err, treated, pi_val, eta_val) -> np.ndarray:
    """phi = 1{A=a} / pi * ((Y - nu_hat)^2 - eta) + eta, row-wise."""
    sq_err = np.asarray(sq_err, dtype=float)
    eta_val = np.asarray(eta_val, dtype=float)
    w = np.where(treated, 1.0 / np.asarray(pi_val, dtype=float), 0.0)
    return w * (sq_err - eta_val) + eta_val


def model_predict(model, table: ObservationTable) -> np.ndarray:
    """Predictions of ``model`` on ``table``; models flagged ``uses_z`` see (V, Z)."""
    if hasattr(model, "predict_table"):
        return model.predict_table(table)
    return np.asarray(model.predict(table.v), dtype=float)


def dr_mse(test: ObservationTable, model, a: int, spec_pi: Optional[RegressorSpec] = None,
           spec_eta: Optional[RegressorSpec] = None, clip_epsilon: float = 0.01, seed: int = 0,
           pi_model=None, eta_model=None, method: Optional[str] = None) -> MseEstimate:
    """Cross-fit doubly-robust MSE of ``model`` for predicting Y^a on ``test``.

    The test rows are split in two.  On each fold p a propensity and an error
    regression (squared error on (V, Z) among rows with A = a) are fit and
    the influence values are computed on the other fold; all values are
    pooled.  ``pi_model`` / ``eta_model`` replace the fitted nuisances by
    fixed functions of (V, Z) (used with oracle quantities); the injected
    propensity is still clipped.
    """
    return dr_mse_many(test, {method or getattr(model, "method", "") or "model": model}, a,
                       spec_pi, spec_eta, clip_epsilon, seed, pi_model, eta_model)[0]


def dr_mse_many(test: ObservationTable, models: dict, a: int,
                spec_pi: Optional[RegressorSpec] = None, spec_eta: Optional[RegressorSpec] = None,
                clip_epsilon: float = 0.01, seed: int = 0, pi_model=None, eta_model=None) -> list:
    """:func:`dr_mse` for several models sharing one split and one propensity fit per fold."""
    a = check_treatment(a)
    if not (0.0 < clip_epsilon < 0.5):
        raise ConfigError(f"clip_epsilon={clip_epsilon} must lie in (0, 0.5)")
    spec_pi = spec_pi or RegressorSpec()
    spec_eta = spec_eta or spec_pi
    if test.n < 4:
        raise InsufficientDataError(f"dr_mse needs at least 4 test rows, got {test.n}")
    folds = split_folds(test.n, 2, seed)
    vz = test.vz
    treated = test.treated(a)
    preds = {name: model_predict(m, test) for name, m in models.items()}
    phi = {name: np.empty(test.n) for name in models}
    for p, q in ((0, 1), (1, 0)):
        ip, iq = folds.indices(p), folds.indices(q)
        tp = ip[treated[ip]]
        if eta_model is None and tp.size < 2:
            raise InsufficientDataError(f"evaluation fold {p + 1} has {tp.size} rows with A={a}")
        if pi_model is None:
            pim = fit_regressor(spec_pi, vz[ip], treated[ip].astype(float),
                                child_seed(seed, _ROLE_PI, p))
        else:
            pim = pi_model
        pi_q = np.clip(pim.predict(vz[iq]), clip_epsilon, 1.0 - clip_epsilon)
        for name in models:
            sq = (test.y - preds[name]) ** 2
            if eta_model is None:
                etam = fit_regressor(spec_eta, vz[tp], sq[tp], child_seed(seed, _ROLE_ETA, p))
            else:
                etam = eta_model
            phi[name][iq] = influence_values(sq[iq], treated[iq], pi_q, etam.predict(vz[iq]))
    return [MseEstimate.from_influence(phi[name], name) for name in models]


def _check_lengths(pred, truth):
    pred = np.asarray(pred, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if pred.shape != truth.shape:
        raise DimensionError(f"{pred.size} predictions but {truth.size} reference values")
    return pred, truth


def oracle_mse(model, v, nu_true) -> float:
    """Mean of (nu(V_i) - nu_hat(V_i))^2 against the known target."""
    pred, truth = _check_lengths(model.predict(np.asarray(v, dtype=float)), nu_true)
    return float(np.mean((truth - pred) ** 2))


def oracle_prediction_error(model, v, y_a) -> float:
    """Mean of (Y^a_i - nu_hat(V_i))^2 against drawn potential outcomes."""
    return oracle_mse(model, v, y_a)


@dataclass(frozen=True)
class CalibrationReport:
    bin_edges: np.ndarray
    counts: np.ndarray
    mean_pred: np.ndarray
    mean_true: np.ndarray
    mean_sq_err: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin", "count", "mean_pred", "mean_true", "mean_sq_err"])
        for i in range(self.counts.size):
            w.writerow([i, int(self.counts[i]), repr(float(self.mean_pred[i])),
                        repr(float(self.mean_true[i])), repr(float(self.mean_sq_err[i]))])
        return buf.getvalue()


def calibration_bins(predictions, nu_true, bins: int = 10) -> CalibrationReport:
    """Equal-count bins over the predictions with per-bin means.

    Quantile edges that coincide (ties, constant predictors) are merged, so
    fewer than ``bins`` bins may come back; every row lands in exactly one.
    """
    pred, truth = _check_lengths(predictions, nu_true)
    if bins < 2:
        raise ConfigError("bins must be >= 2")
    if pred.size < bins:
        raise ConfigError(f"{pred.size} rows cannot fill {bins} bins")
    edges = np.unique(np.quantile(pred, np.linspace(0.0, 1.0, bins + 1)))
    if edges.size == 1:
        edges = np.array([edges[0], edges[0]])
    # interior edges only; right-closed last bin
    idx = np.searchsorted(edges[1:-1], pred, side="right")
    nb = edges.size - 1
    counts = np.bincount(idx, minlength=nb)
    keep = counts > 0
    sums = lambda w: np.bincount(idx, weights=w, minlength=nb)[keep] / counts[keep]
    sq = (pred - truth) ** 2
    kept_edges = np.concatenate([edges[:-1][keep], edges[-1:]])
    return CalibrationReport(kept_edges, counts[keep], sums(pred), sums(truth), sums(sq))
