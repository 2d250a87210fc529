"""Counterfactual learners: treatment-conditional (TCR), plug-in (PL) and doubly-robust (DR).

All learners predict nu(v) = E[Y^a | V = v] from training rows (V, Z, A, Y).
Nuisances are the outcome regression mu(v, z) = E[Y | V, Z, A = a] and the
propensity pi(v, z) = P(A = a | V, Z); the latter is fit by squared-error
regression of the indicator and clipped to [eps, 1 - eps].

Cross-fit variants split the data into 2, 3 or 4 seeded folds and average
the per-rotation second-stage models with equal weight.  Regressor CV seeds
depend on the role of a fit (mu, pi, second stage, ...) and not on which
rotation it belongs to, so relabelling the folds cyclically only reorders
the fold models.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .core import (ConfigError, DimensionError, DomainError, FoldAssignment,
                   InsufficientDataError, ObservationTable, check_treatment, child_seed,
                   split_folds)
from .eval import MseEstimate, influence_values
from .regress import FunctionModel, RegressorSpec, fit_regressor

DEFAULT_CLIP = 0.01
METHOD_TAGS = ("TCR", "PL", "DR", "DECISION")

_ROLE_MU, _ROLE_PI, _ROLE_SECOND, _ROLE_TCR, _ROLE_PL, _ROLE_ETA = 1, 2, 3, 4, 5, 6

PL_ROTATIONS = ((0, 1), (1, 0))
DR_ROTATIONS = ((0, 1, 2), (2, 0, 1), (1, 2, 0))
JOINT_ROTATIONS = ((0, 1, 2, 3), (3, 0, 1, 2), (2, 3, 0, 1), (1, 2, 3, 0))


@dataclass(frozen=True)
class LearnerSpecs:
    """Regressor choices per stage.

    ``second`` is used for every regression onto V (DR and PL second stages)
    and ``tcr`` defaults to it; ``eta`` (error regression) defaults to ``pi``.
    """

    mu: RegressorSpec = field(default_factory=RegressorSpec)
    pi: RegressorSpec = field(default_factory=RegressorSpec)
    second: RegressorSpec = field(default_factory=RegressorSpec)
    tcr: Optional[RegressorSpec] = None
    eta: Optional[RegressorSpec] = None

    @property
    def tcr_spec(self) -> RegressorSpec:
        return self.tcr or self.second

    @property
    def eta_spec(self) -> RegressorSpec:
        return self.eta or self.pi


@dataclass(frozen=True)
class NuisancePair:
    """Fitted outcome regression and propensity over the (V, Z) design."""

    mu_hat: object
    pi_hat: object
    clip_epsilon: float = DEFAULT_CLIP
    a: int = 1

    def __post_init__(self):
        _check_clip(self.clip_epsilon)
        check_treatment(self.a)

    def mu(self, vz) -> np.ndarray:
        return np.asarray(self.mu_hat.predict(vz), dtype=float)

    def pi(self, vz) -> np.ndarray:
        raw = np.asarray(self.pi_hat.predict(vz), dtype=float)
        return np.clip(raw, self.clip_epsilon, 1.0 - self.clip_epsilon)

    def pseudo_outcomes(self, table: ObservationTable) -> np.ndarray:
        vz = table.vz
        return dr_pseudo_outcome(table.y, table.a, self.a, self.mu(vz), self.pi(vz))


@dataclass(frozen=True)
class PredictionModel:
    """Equal-weight average of one or more fitted regressors.

    Fold models take the V matrix, except for the decision baseline
    (``uses_z=True``) whose models read (V, Z).
    """

    method: str
    fold_models: Tuple[object, ...]
    uses_z: bool = False

    def __post_init__(self):
        if self.method not in METHOD_TAGS:
            raise ConfigError(f"unknown method tag {self.method!r}")
        models = tuple(self.fold_models)
        if not models:
            raise ConfigError("a prediction model needs at least one fold model")
        widths = {getattr(m, "n_features_in", None) for m in models} - {None}
        if len(widths) > 1:
            raise DimensionError(f"fold models disagree on feature dimension: {sorted(widths)}")
        object.__setattr__(self, "fold_models", models)

    def fold_predictions(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.stack([np.asarray(m.predict(x), dtype=float) for m in self.fold_models])

    def predict(self, x) -> np.ndarray:
        return self.fold_predictions(x).mean(axis=0)

    def predict_table(self, table: ObservationTable) -> np.ndarray:
        return self.predict(table.vz if self.uses_z else table.v)


def _check_clip(eps: float) -> None:
    if not (0.0 < eps < 0.5):
        raise ConfigError(f"clip_epsilon={eps} must lie in (0, 0.5)")


def dr_pseudo_outcome(y, a_obs, a: int, mu_val, pi_val):
    """Bias-corrected regressand 1{A=a} / pi * (Y - mu) + mu.

    Scalars give a float, arrays are handled element-wise.  ``pi_val`` must
    already be clipped; values outside (0, 1] raise.
    """
    a = check_treatment(a)
    pi_arr = np.asarray(pi_val, dtype=float)
    if np.any(~(pi_arr > 0.0) | (pi_arr > 1.0)):
        raise DomainError("propensity values must lie in (0, 1]; clip before forming pseudo-outcomes")
    y = np.asarray(y, dtype=float)
    mu_arr = np.asarray(mu_val, dtype=float)
    hit = np.asarray(a_obs) == a
    out = np.where(hit, mu_arr + (y - mu_arr) / pi_arr, mu_arr)
    return float(out) if out.ndim == 0 else out


def _treated_rows(table: ObservationTable, a: int, where: str = "training data") -> np.ndarray:
    rows = np.flatnonzero(table.treated(a))
    if rows.size < 2:
        raise InsufficientDataError(f"{where} has {rows.size} rows with A={a}; need at least 2")
    return rows


def fit_nuisances(train: ObservationTable, a: int, spec_mu: RegressorSpec, spec_pi: RegressorSpec,
                  clip_epsilon: float = DEFAULT_CLIP, seed: int = 0,
                  where: str = "training data") -> NuisancePair:
    """Fit mu on rows with A = a and pi on all rows, both over (V, Z)."""
    a = check_treatment(a)
    _check_clip(clip_epsilon)
    rows = _treated_rows(train, a, where)
    vz = train.vz
    mu_hat = fit_regressor(spec_mu, vz[rows], train.y[rows], child_seed(seed, _ROLE_MU))
    pi_hat = fit_regressor(spec_pi, vz, train.treated(a).astype(float), child_seed(seed, _ROLE_PI))
    return NuisancePair(mu_hat, pi_hat, clip_epsilon, a)


def fit_tcr(train: ObservationTable, a: int, spec: RegressorSpec, seed: int = 0) -> PredictionModel:
    """Regress Y on V among rows with A = a."""
    a = check_treatment(a)
    rows = _treated_rows(train, a)
    model = fit_regressor(spec, train.v[rows], train.y[rows], child_seed(seed, _ROLE_TCR))
    return PredictionModel("TCR", (model,))


def fit_pl(train: ObservationTable, a: int, spec_mu: RegressorSpec, spec_second: RegressorSpec,
           seed: int = 0) -> PredictionModel:
    """Fit mu on treated rows, then regress mu_hat(V, Z) on V over all rows."""
    a = check_treatment(a)
    rows = _treated_rows(train, a)
    vz = train.vz
    mu_hat = fit_regressor(spec_mu, vz[rows], train.y[rows], child_seed(seed, _ROLE_MU))
    second = fit_regressor(spec_second, train.v, mu_hat.predict(vz), child_seed(seed, _ROLE_PL))
    return PredictionModel("PL", (second,))


def fit_dr(train: ObservationTable, a: int, specs: LearnerSpecs, clip_epsilon: float = DEFAULT_CLIP,
           seed: int = 0, nuisances: Optional[NuisancePair] = None) -> PredictionModel:
    """Fit both nuisances on all rows and regress the pseudo-outcomes on V.

    Passing ``nuisances`` skips the first stage (used to inject oracles).
    """
    a = check_treatment(a)
    if nuisances is None:
        nuisances = fit_nuisances(train, a, specs.mu, specs.pi, clip_epsilon, seed)
    pseudo = nuisances.pseudo_outcomes(train)
    second = fit_regressor(specs.second, train.v, pseudo, child_seed(seed, _ROLE_SECOND))
    return PredictionModel("DR", (second,))


def _resolve_folds(n: int, k: int, seed: int, folds: Optional[FoldAssignment], minimum: int):
    if n < minimum:
        raise InsufficientDataError(f"need at least {minimum} rows, got {n}")
    if folds is None:
        return split_folds(n, k, seed)
    if folds.k != k or folds.labels.shape[0] != n:
        raise ConfigError(f"expected a {k}-fold assignment over {n} rows")
    return folds


def _fold_table(train: ObservationTable, folds: FoldAssignment, *ids: int) -> ObservationTable:
    rows = np.sort(np.concatenate([folds.indices(i) for i in ids]))
    return train.subset(rows)


def _rotation_label(rot) -> str:
    return "(" + ",".join(str(i + 1) for i in rot) + ")"


def fit_pl_crossfit(train: ObservationTable, a: int, specs: LearnerSpecs, seed: int = 0,
                    folds: Optional[FoldAssignment] = None) -> PredictionModel:
    """Two folds: mu on fold p, second stage on fold q; average both rotations."""
    a = check_treatment(a)
    folds = _resolve_folds(train.n, 2, seed, folds, 4)
    parts = [_fold_table(train, folds, i) for i in range(2)]
    models = []
    for p, q in PL_ROTATIONS:
        where = f"fold {p + 1} (rotation {_rotation_label((p, q))})"
        rows = _treated_rows(parts[p], a, where)
        mu_hat = fit_regressor(specs.mu, parts[p].vz[rows], parts[p].y[rows],
                               child_seed(seed, _ROLE_MU))
        target = mu_hat.predict(parts[q].vz)
        models.append(fit_regressor(specs.second, parts[q].v, target, child_seed(seed, _ROLE_PL)))
    return PredictionModel("PL", tuple(models))


def _rotation_nuisances(parts, a, specs, clip_epsilon, seed, p, q, rot) -> NuisancePair:
    where = f"fold {p + 1} (rotation {_rotation_label(rot)})"
    rows = _treated_rows(parts[p], a, where)
    mu_hat = fit_regressor(specs.mu, parts[p].vz[rows], parts[p].y[rows], child_seed(seed, _ROLE_MU))
    ind = parts[q].treated(a).astype(float)
    pi_hat = fit_regressor(specs.pi, parts[q].vz, ind, child_seed(seed, _ROLE_PI))
    return NuisancePair(mu_hat, pi_hat, clip_epsilon, a)


def fit_dr_crossfit(train: ObservationTable, a: int, specs: LearnerSpecs,
                    clip_epsilon: float = DEFAULT_CLIP, seed: int = 0,
                    folds: Optional[FoldAssignment] = None) -> PredictionModel:
    """Three folds: mu on p, pi on q, pseudo-outcome regression on r; average 3 rotations."""
    a = check_treatment(a)
    _check_clip(clip_epsilon)
    folds = _resolve_folds(train.n, 3, seed, folds, 6)
    parts = [_fold_table(train, folds, i) for i in range(3)]
    models = []
    for rot in DR_ROTATIONS:
        p, q, r = rot
        nuis = _rotation_nuisances(parts, a, specs, clip_epsilon, seed, p, q, rot)
        pseudo = nuis.pseudo_outcomes(parts[r])
        models.append(fit_regressor(specs.second, parts[r].v, pseudo,
                                    child_seed(seed, _ROLE_SECOND)))
    return PredictionModel("DR", tuple(models))


def fit_and_evaluate_joint(data: ObservationTable, a: int, specs: LearnerSpecs,
                           clip_epsilon: float = DEFAULT_CLIP, seed: int = 0,
                           folds: Optional[FoldAssignment] = None
                           ) -> Tuple[Dict[str, PredictionModel], Dict[str, MseEstimate]]:
    """Learn TCR, PL and DR and estimate their MSE from one four-fold split.

    Rotation (p, q, r, s): mu on p, pi on q; DR second stage on r, PL on
    r + q, TCR on r + q + p; per-method error regressions on q and
    influence values on s.  Every row is scored exactly once.
    """
    a = check_treatment(a)
    _check_clip(clip_epsilon)
    folds = _resolve_folds(data.n, 4, seed, folds, 8)
    parts = [_fold_table(data, folds, i) for i in range(4)]
    fold_models = {m: [] for m in ("TCR", "PL", "DR")}
    phi = {m: [] for m in ("TCR", "PL", "DR")}
    for rot in JOINT_ROTATIONS:
        p, q, r, s = rot
        label = _rotation_label(rot)
        nuis = _rotation_nuisances(parts, a, specs, clip_epsilon, seed, p, q, rot)
        dr_model = fit_regressor(specs.second, parts[r].v, nuis.pseudo_outcomes(parts[r]),
                                 child_seed(seed, _ROLE_SECOND))
        rq = _fold_table(data, folds, r, q)
        pl_model = fit_regressor(specs.second, rq.v, nuis.mu(rq.vz), child_seed(seed, _ROLE_PL))
        rqp = _fold_table(data, folds, r, q, p)
        t_rows = _treated_rows(rqp, a, f"folds {r + 1},{q + 1},{p + 1} (rotation {label})")
        tcr_model = fit_regressor(specs.tcr_spec, rqp.v[t_rows], rqp.y[t_rows],
                                  child_seed(seed, _ROLE_TCR))
        fitted = {"TCR": tcr_model, "PL": pl_model, "DR": dr_model}

        wq, ws = parts[q], parts[s]
        q_rows = _treated_rows(wq, a, f"fold {q + 1} (rotation {label})")
        pi_s = nuis.pi(ws.vz)
        treated_s = ws.treated(a)
        for name, model in fitted.items():
            fold_models[name].append(model)
            sq_q = (wq.y - model.predict(wq.v)) ** 2
            eta = fit_regressor(specs.eta_spec, wq.vz[q_rows], sq_q[q_rows],
                                child_seed(seed, _ROLE_ETA, METHOD_TAGS.index(name)))
            sq_s = (ws.y - model.predict(ws.v)) ** 2
            phi[name].append(influence_values(sq_s, treated_s, pi_s, eta.predict(ws.vz)))
    models = {m: PredictionModel(m, tuple(fold_models[m])) for m in fold_models}
    estimates = {m: MseEstimate.from_influence(np.concatenate(phi[m]), m) for m in phi}
    return models, estimates


def fit_decision_model(train: ObservationTable, spec: RegressorSpec, seed: int = 0) -> PredictionModel:
    """Regress the historical decision A on (V, Z); a baseline scored against the outcome."""
    model = fit_regressor(spec, train.vz, train.a, child_seed(seed, _ROLE_SECOND))
    return PredictionModel("DECISION", (model,), uses_z=True)


def oracle_nuisances(mu_fn, pi_fn, clip_epsilon: float = DEFAULT_CLIP, a: int = 1) -> NuisancePair:
    """Nuisance pair from fixed functions of the (V, Z) design matrix."""
    return NuisancePair(FunctionModel(mu_fn), FunctionModel(pi_fn), clip_epsilon, a)
