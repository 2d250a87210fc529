"""Synthetic data-generating processes with known nuisance functions.

Base process (``misspecified=False``)::

    V_i ~ N(0, 1)                       i <= d_v
    Z_i ~ N(rho * V_i, 1 - rho^2)       i <= d_z  (independent N(0,1) beyond d_v)
    mu(V, Z) = c * (sum_{i<=k_v} V_i + sum_{i<=k_z} Z_i),   c = k_v / (k_v + rho * k_z)
    nu(V)    = c * (sum_{i<=k_v} V_i + rho * sum_{i<=k_z} V_i)
    pi(V, Z) = 1 - sigmoid((sum_{i<=k_v} V_i + sum_{i<=k_z} Z_i) / sqrt(k_v + k_z))
    A ~ Bernoulli(pi),   Y^a = mu + eps,   eps ~ N(0, mean(mu^2) / 2)

so ``pi`` is the probability of A = 1 and the signal-to-noise ratio is 2.

Second-stage misspecification (``misspecified=True``, rho = 0): the upper half
of V holds squares of the lower half and

    mu(V, Z) = sum_{i<=k_v/2} (V_i + s_i V_i^2) + sum_{i<=k_z} Z_i,   s_i = 2 (i mod 2) - 1
    nu(V)    = sum_{i<=k_v/2} (V_i + s_i V_i^2)

Rows with A != target get an outcome drawn from the same mu plus fresh noise
(no treatment effect); learners only ever read Y where A equals the target.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .core import ConfigError, DimensionError, ObservationTable, check_treatment, make_rng


@dataclass(frozen=True)
class DgpConfig:
    n: int = 2000
    d_v: int = 400
    d_z: int = 100
    k_v: int = 25
    k_z: int = 20
    rho: float = 0.0
    seed: int = 0
    misspecified: bool = False
    noise_scale: float = 1.0
    treatment: int = 1

    def __post_init__(self):
        if self.n < 1 or self.d_v < 0 or self.d_z < 0:
            raise ConfigError("need n >= 1 and non-negative dimensions")
        if not (0 <= self.k_v <= self.d_v):
            raise ConfigError(f"k_v={self.k_v} must lie in [0, d_v={self.d_v}]")
        if not (0 <= self.k_z <= self.d_z):
            raise ConfigError(f"k_z={self.k_z} must lie in [0, d_z={self.d_z}]")
        if not (-1.0 <= self.rho <= 1.0):
            raise ConfigError(f"rho={self.rho} outside [-1, 1]")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be non-negative")
        check_treatment(self.treatment)
        if self.misspecified:
            if self.rho != 0:
                raise ConfigError("the misspecified process requires rho = 0")
            if self.d_v % 2 or self.k_v % 2:
                raise ConfigError("the misspecified process requires even d_v and k_v")
            if self.k_v // 2 > self.d_v // 2:
                raise ConfigError("k_v/2 exceeds the number of base columns")
        elif self.k_v + self.rho * self.k_z == 0 and self.k_v + self.k_z > 0:
            raise ConfigError("k_v + rho * k_z must be non-zero")

    def replace(self, **changes) -> "DgpConfig":
        return dataclasses.replace(self, **changes)

    def describe(self) -> str:
        return " ".join(f"{f.name}={getattr(self, f.name)}" for f in dataclasses.fields(self))

    @property
    def coefficient(self) -> float:
        """The k_v / (k_v + rho k_z) scaling of the base process."""
        denom = self.k_v + self.rho * self.k_z
        return 1.0 if denom == 0 else self.k_v / denom

    @property
    def shared(self) -> int:
        """Number of leading Z columns that are correlated with V."""
        return min(self.d_v, self.d_z)


@dataclass(frozen=True)
class SyntheticDataset:
    table: ObservationTable
    nu_true: np.ndarray
    mu_true: np.ndarray
    pi_true: np.ndarray
    y_potential: np.ndarray
    noise_variance: float
    config: DgpConfig

    def sidecar_csv(self) -> str:
        lines = [f"# {self.config.describe()} noise_variance={self.noise_variance!r}",
                 "nu_true,mu_true,pi_true,y_potential"]
        for row in zip(self.nu_true, self.mu_true, self.pi_true, self.y_potential):
            lines.append(",".join(repr(float(x)) for x in row))
        return "\n".join(lines) + "\n"


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def oracle_mu(config: DgpConfig, v, z) -> np.ndarray:
    v = np.atleast_2d(np.asarray(v, dtype=float))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    zsum = z[:, :config.k_z].sum(axis=1)
    if config.misspecified:
        return _misspec_nu(config, v) + zsum
    return config.coefficient * (v[:, :config.k_v].sum(axis=1) + zsum)


def oracle_pi(config: DgpConfig, v, z) -> np.ndarray:
    """P(A = 1 | V, Z)."""
    v = np.atleast_2d(np.asarray(v, dtype=float))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    k = config.k_v + config.k_z
    if k == 0:
        return np.full(v.shape[0], 0.5)
    s = v[:, :config.k_v].sum(axis=1) + z[:, :config.k_z].sum(axis=1)
    return 1.0 - sigmoid(s / math.sqrt(k))


def propensity(config: DgpConfig, v, z, a: int) -> np.ndarray:
    """P(A = a | V, Z)."""
    p1 = oracle_pi(config, v, z)
    return p1 if check_treatment(a) == 1 else 1.0 - p1


def _misspec_nu(config: DgpConfig, v) -> np.ndarray:
    h = config.k_v // 2
    base = v[:, :h]
    signs = 2.0 * (np.arange(1, h + 1) % 2) - 1.0
    return (base + signs * base ** 2).sum(axis=1)


def oracle_nu(config: DgpConfig, v) -> np.ndarray:
    """Closed-form E[Y^a | V = v], vectorised over rows of ``v``."""
    v = np.atleast_2d(np.asarray(v, dtype=float))
    if v.shape[1] != config.d_v:
        raise DimensionError(f"v has {v.shape[1]} columns, config has d_v={config.d_v}")
    if config.misspecified:
        return _misspec_nu(config, v)
    kz_shared = min(config.k_z, config.d_v)
    return config.coefficient * (v[:, :config.k_v].sum(axis=1)
                                 + config.rho * v[:, :kz_shared].sum(axis=1))


def _draw_covariates(config: DgpConfig, rng: np.random.Generator):
    n = config.n
    if config.misspecified:
        half = rng.standard_normal((n, config.d_v // 2))
        v = np.hstack([half, half ** 2])
        z = rng.standard_normal((n, config.d_z))
        return v, z
    v = rng.standard_normal((n, config.d_v))
    noise = rng.standard_normal((n, config.d_z))
    z = noise.copy()
    m = config.shared
    z[:, :m] = config.rho * v[:, :m] + math.sqrt(max(0.0, 1.0 - config.rho ** 2)) * noise[:, :m]
    return v, z


def generate(config: DgpConfig) -> SyntheticDataset:
    """Draw one dataset of ``config.n`` rows along with its oracle quantities."""
    rng = make_rng(config.seed)
    v, z = _draw_covariates(config, rng)
    mu = oracle_mu(config, v, z)
    pi = oracle_pi(config, v, z)
    a_obs = (rng.random(config.n) < pi).astype(float)
    noise_var = config.noise_scale * 0.5 * float(np.mean(mu ** 2))
    sd = math.sqrt(noise_var)
    y_pot = mu + sd * rng.standard_normal(config.n)
    y_other = mu + sd * rng.standard_normal(config.n)
    y = np.where(a_obs == config.treatment, y_pot, y_other)
    return SyntheticDataset(
        table=ObservationTable(v, z, a_obs, y),
        nu_true=oracle_nu(config, v),
        mu_true=mu,
        pi_true=pi,
        y_potential=y_pot,
        noise_variance=noise_var,
        config=config,
    )


def generate_misspec(config: DgpConfig) -> SyntheticDataset:
    if not config.misspecified:
        raise ConfigError("generate_misspec needs a config with misspecified=True")
    return generate(config)


def sample_z_given_v(config: DgpConfig, v, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``size`` confounder vectors from p(z | V = v)."""
    v = np.asarray(v, dtype=float).ravel()
    z = rng.standard_normal((size, config.d_z))
    if not config.misspecified:
        m = config.shared
        z[:, :m] = config.rho * v[:m] + math.sqrt(max(0.0, 1.0 - config.rho ** 2)) * z[:, :m]
    return z


class OmegaEstimate(NamedTuple):
    omega: float
    bias: float
    omega_se: float
    bias_se: float


def mc_omega(config: DgpConfig, v, a: int, draws: int = 100_000, seed: int = 0) -> OmegaEstimate:
    """Monte Carlo E[Y | A = a, V = v] and the confounding bias omega(v) - nu(v).

    Uses the self-normalised importance form
    E[mu(v,Z) pi_a(v,Z)] / E[pi_a(v,Z)] with Z ~ p(z | V = v); the bias
    shares omega's delta-method standard error because nu(v) is exact.
    """
    if draws < 1000:
        raise ConfigError("mc_omega needs at least 1000 draws")
    v = np.asarray(v, dtype=float).ravel()
    if v.shape[0] != config.d_v:
        raise DimensionError(f"v has length {v.shape[0]}, config has d_v={config.d_v}")
    rng = make_rng(seed)
    z = sample_z_given_v(config, v, draws, rng)
    vv = np.broadcast_to(v, (draws, v.shape[0]))
    mu = oracle_mu(config, vv, z)
    w = propensity(config, vv, z, a)
    omega = float(np.sum(w * mu) / np.sum(w))
    se = float(np.sqrt(np.sum((w * (mu - omega)) ** 2)) / np.sum(w))
    nu = float(oracle_nu(config, v[None, :])[0])
    return OmegaEstimate(omega, omega - nu, se, se)


def rejection_omega(config: DgpConfig, v, a: int, draws: int, seed: int = 0):
    """Brute-force E[mu(v,Z) | V = v, A = a] by simulating A and keeping rows with A = a.

    Returns (mean, standard error, accepted count).
    """
    v = np.asarray(v, dtype=float).ravel()
    rng = make_rng(seed)
    z = sample_z_given_v(config, v, draws, rng)
    vv = np.broadcast_to(v, (draws, v.shape[0]))
    keep = rng.random(draws) < propensity(config, vv, z, a)
    mu = oracle_mu(config, vv[keep], z[keep])
    return float(mu.mean()), float(mu.std(ddof=1) / math.sqrt(mu.size)), int(mu.size)
