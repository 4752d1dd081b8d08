"""Gaussian mixture with shared covariance in the expectation space.

The statistic is s = (s1, s2) in R^(g + p g): s1 holds the per-component
masses and block l of s2 the mass-weighted first moments.  The per-example
statistic map sends example i to (rho_i, rho_{i,1} y_i, ..., rho_{i,g} y_i)
where rho_i is the posterior component distribution; updates never
materialize the sparse g(1+p) x g selection matrix behind that layout.

The shared second moment Sigma_star = n^{-1} sum_i y_i y_i' makes the
maximization map cheap:

    alpha_l = s1_l / sum(s1);  mu_l = s2_l / s1_l;
    Sigma   = Sigma_star - sum_l s1_l mu_l mu_l'

Admissibility is tracked through testable proxies of the statistic domain:
non-negative masses and total mass one.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .algorithms import MemoryTable, fiem_step, iem_step, online_em_step
from .errors import ConfigurationError, DomainError
from .model import FiniteSumModel, check_statistic
from .rng import STREAM_DATA, as_seed_tree

Array = np.ndarray

MASS_FLOOR = -1e-10          # proxy: component masses may not dip below this
MASS_TOTAL_TOL = 1e-8        # proxy: total mass stays at one
EMPTY_COMPONENT_FLOOR = 1e-12
COV_EIG_FLOOR = -1e-10       # rounding-level indefiniteness is tolerated


@dataclass(eq=False)
class GmmParams:
    """Mixture parameter: weights, component means, shared covariance."""

    weights: Array
    means: Array        # (g, p)
    cov: Array          # (p, p)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.asarray(self.means, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        g = self.weights.size
        if self.means.shape[0] != g or self.means.ndim != 2:
            raise ConfigurationError("means must be a g-by-p matrix")
        p = self.means.shape[1]
        if self.cov.shape != (p, p):
            raise ConfigurationError("covariance must be p-by-p")

    @property
    def g(self) -> int:
        return self.weights.size

    @property
    def p(self) -> int:
        return self.means.shape[1]

    def validate(self) -> None:
        if np.any(self.weights < 0.0):
            raise DomainError("mixture weights must be non-negative")
        if abs(self.weights.sum() - 1.0) > 1e-10:
            raise DomainError("mixture weights must sum to 1 within 1e-10")
        if np.min(np.linalg.eigvalsh(0.5 * (self.cov + self.cov.T))) <= 0.0:
            raise DomainError("covariance must be positive definite")

    @cached_property
    def _chol(self) -> Array:
        try:
            return np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError as exc:
            raise DomainError("covariance is not positive definite") from exc

    @cached_property
    def _precision(self) -> Array:
        ident = np.eye(self.p)
        l = self._chol
        return np.linalg.solve(l.T, np.linalg.solve(l, ident))

    @cached_property
    def _log_det(self) -> float:
        return 2.0 * float(np.log(np.diag(self._chol)).sum())

    def as_vector(self) -> Array:
        return np.concatenate([self.weights, self.means.ravel(), self.cov.ravel()])

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariance": self.cov.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GmmParams":
        return cls(
            np.asarray(doc["weights"], dtype=float),
            np.asarray(doc["means"], dtype=float),
            np.asarray(doc["covariance"], dtype=float),
        )


@dataclass(eq=False)
class GmmDataset:
    """Observations with their cached second moment."""

    observations: Array

    def __post_init__(self):
        y = np.asarray(self.observations, dtype=float)
        if y.ndim != 2:
            raise ConfigurationError("observations must be an n-by-p matrix")
        self.observations = y
        self.sigma_star = y.T @ y / y.shape[0]

    @property
    def n(self) -> int:
        return self.observations.shape[0]

    @property
    def p(self) -> int:
        return self.observations.shape[1]


def log_weighted_densities(params: GmmParams, y_rows: Array) -> Array:
    """log(alpha_l) + log N(mu_l, Sigma)[y] for each row and component,
    omitting the p log(2 pi)/2 constant; shape (b, g)."""
    b = y_rows.shape[0]
    out = np.empty((b, params.g))
    prec = params._precision
    base = -0.5 * params._log_det
    with np.errstate(divide="ignore"):
        logw = np.log(params.weights)
    for l in range(params.g):
        diff = y_rows - params.means[l]
        quad = np.einsum("bp,pq,bq->b", diff, prec, diff)
        out[:, l] = logw[l] + base - 0.5 * quad
    return out


def posterior_rows(params: GmmParams, y_rows: Array) -> Array:
    """Posterior component responsibilities for each row; log-domain softmax."""
    logd = log_weighted_densities(params, y_rows)
    shifted = logd - logd.max(axis=1, keepdims=True)
    w = np.exp(shifted)
    return w / w.sum(axis=1, keepdims=True)


def posterior(params: GmmParams, dataset: GmmDataset, i: int) -> Array:
    """Responsibility vector of example ``i``."""
    return posterior_rows(params, dataset.observations[i : i + 1])[0]


def gmm_loglik(params: GmmParams, dataset: GmmDataset) -> float:
    """Normalized log-likelihood n^{-1} sum_i log sum_l alpha_l N(mu_l, Sigma)[y_i],
    with the p log(2 pi)/2 constant omitted."""
    logd = log_weighted_densities(params, dataset.observations)
    m = logd.max(axis=1)
    return float(np.mean(m + np.log(np.exp(logd - m[:, None]).sum(axis=1))))


def gmm_tmap(s: Array, sigma_star: Array, g: int) -> GmmParams:
    """Maximization map; raises :class:`DomainError` on an empty component or
    a genuinely indefinite covariance (rounding-level indefiniteness is
    symmetrized and accepted, never clamped)."""
    p = sigma_star.shape[0]
    s1 = s[:g]
    if np.min(s1) < EMPTY_COMPONENT_FLOOR:
        l = int(np.argmin(s1))
        raise DomainError(f"empty component: mass[{l}] = {s1[l]:.3e} below 1e-12")
    weights = s1 / s1.sum()
    means = s[g:].reshape(g, p) / s1[:, None]
    cov = sigma_star - (means.T * s1) @ means
    cov = 0.5 * (cov + cov.T)
    min_eig = float(np.linalg.eigvalsh(cov)[0])
    if min_eig <= COV_EIG_FLOOR:
        raise DomainError(f"covariance update indefinite: min eigenvalue {min_eig:.3e}")
    return GmmParams(weights, means, cov)


class GmmModel(FiniteSumModel):
    """Finite-sum model wrapper binding a dataset and a component count."""

    def __init__(self, dataset: GmmDataset, g: int):
        if g < 1:
            raise ConfigurationError("need at least one component")
        self.dataset = dataset
        self.g = int(g)
        self.n = dataset.n
        self.p = dataset.p
        self.q = self.g + self.p * self.g
        self._tmap_cache = None

    def tmap(self, s: Array) -> GmmParams:
        cache = self._tmap_cache
        if cache is not None and cache[0] is s:
            return cache[1]
        params = gmm_tmap(s, self.dataset.sigma_star, self.g)
        self._tmap_cache = (s, params)
        return params

    def admissible(self, s: Array) -> None:
        check_statistic(self, s)
        s1 = s[: self.g]
        if np.min(s1) < MASS_FLOOR:
            l = int(np.argmin(s1))
            raise DomainError(f"component mass {l} is negative: {s1[l]:.3e} < -1e-10")
        total = float(s1.sum())
        if abs(total - 1.0) > MASS_TOTAL_TOL:
            raise DomainError(f"total component mass {total!r} deviates from 1 beyond 1e-8")

    def _assemble(self, rho: Array, y_rows: Array) -> Array:
        # statistic rows [rho_i, rho_i1 y_i, ..., rho_ig y_i] without forming
        # the selection matrix
        b = rho.shape[0]
        out = np.empty((b, self.q))
        out[:, : self.g] = rho
        out[:, self.g :] = (rho[:, :, None] * y_rows[:, None, :]).reshape(b, self.g * self.p)
        return out

    def sbar_i(self, theta: GmmParams, i: int) -> Array:
        return self.sbar_rows(theta, np.array([i]))[0]

    def sbar_rows(self, theta: GmmParams, indices) -> Array:
        idx = np.asarray(indices)
        y_rows = self.dataset.observations[idx]
        return self._assemble(posterior_rows(theta, y_rows), y_rows)

    def sbar(self, theta: GmmParams) -> Array:
        y = self.dataset.observations
        rho = posterior_rows(theta, y)
        out = np.empty(self.q)
        out[: self.g] = rho.mean(axis=0)
        out[self.g :] = (rho.T @ y).reshape(self.g * self.p) / self.n
        return out

    def objective(self, theta: GmmParams) -> float:
        return -gmm_loglik(theta, self.dataset)

    def initial_statistic(self, theta: GmmParams) -> Array:
        """S^0 = n^{-1} sum_i sbar_i(theta^0)."""
        return self.sbar(theta)


def dense_selection_matrix(y: Array, g: int) -> Array:
    """Reference (g + p g) x g matrix [I_g ; I_g kron y]; tests only."""
    p = y.size
    top = np.eye(g)
    bottom = np.kron(np.eye(g), y.reshape(p, 1))
    return np.vstack([top, bottom])


# -- mini-batch steps (thin wrappers enforcing the domain proxies) ---------


def gmm_em_epoch(model: GmmModel, s: Array) -> Array:
    """One full EM pass: s -> sbar(T(s))."""
    return model.stat_mean(s)


def gmm_iem_step(model: GmmModel, s: Array, memory: MemoryTable, batch, gamma: float):
    """Incremental step; the domain proxies provably hold and are asserted."""
    s_new, memory = iem_step(model, s, memory, batch, gamma)
    model.admissible(s_new)
    return s_new, memory


def gmm_onlineem_step(model: GmmModel, s: Array, batch, gamma: float):
    """Plain oracle step; returns (state, proxy violation count)."""
    s_new = online_em_step(model, s, batch, gamma)
    return s_new, _count_violation(model, s_new)


def gmm_fiem_step(model: GmmModel, s: Array, memory: MemoryTable, batch_i, batch_j, gamma: float):
    """Variance-reduced step; returns (state, memory, proxy violation count).

    Negative masses are possible here in principle (the control variate is
    signed); they are detected and counted, never clamped.
    """
    s_new, memory = fiem_step(model, s, memory, batch_i, batch_j, gamma)
    return s_new, memory, _count_violation(model, s_new)


def _count_violation(model: GmmModel, s: Array) -> int:
    try:
        model.admissible(s)
    except DomainError:
        return 1
    return 0


# -- data plumbing ---------------------------------------------------------


def preprocess(raw: Array, p_target: int) -> GmmDataset:
    """Drop constant features, center and standardize the rest, then project
    onto the top ``p_target`` principal components of the feature covariance."""
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2:
        raise ValueError("raw data must be an n-by-d matrix")
    std = raw.std(axis=0)
    keep = std > 0.0
    kept = raw[:, keep]
    if p_target > kept.shape[1]:
        raise ValueError(
            f"p_target={p_target} exceeds the {kept.shape[1]} non-constant features"
        )
    z = (kept - kept.mean(axis=0)) / kept.std(axis=0)
    cov = z.T @ z / z.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    components = eigvecs[:, ::-1][:, :p_target]
    # deterministic sign convention: largest-magnitude loading positive
    flips = np.sign(components[np.argmax(np.abs(components), axis=0), np.arange(p_target)])
    flips[flips == 0.0] = 1.0
    return GmmDataset(z @ (components * flips))


def load_csv_dataset(path) -> GmmDataset:
    """Header-free CSV, one observation per row, decimal floats."""
    return GmmDataset(np.loadtxt(path, delimiter=",", ndmin=2))


def save_csv_dataset(path, dataset: GmmDataset) -> None:
    np.savetxt(path, dataset.observations, delimiter=",")


def generate_gmm_synthetic(seed, n: int, g: int, p: int, separation: float):
    """Synthetic mixture: simplex weights bounded below by 0.5/g, means on a
    sphere of radius ``separation``, one shared random SPD covariance.
    Returns (dataset, ground-truth parameters)."""
    if g < 1 or p < 1:
        raise ValueError("need g >= 1 and p >= 1")
    if n < g:
        raise ValueError("need at least one observation per component")
    rng = as_seed_tree(seed).stream(STREAM_DATA)
    weights = 0.5 / g + 0.5 * rng.dirichlet(np.ones(g))
    dirs = rng.standard_normal((g, p))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = separation * dirs
    basis, _ = np.linalg.qr(rng.standard_normal((p, p)))
    eigs = rng.uniform(0.5, 1.5, size=p)
    cov = (basis * eigs) @ basis.T
    cov = 0.5 * (cov + cov.T)
    truth = GmmParams(weights, means, cov)
    labels = rng.choice(g, size=n, p=weights)
    noise = rng.standard_normal((n, p)) @ np.linalg.cholesky(cov).T
    return GmmDataset(means[labels] + noise), truth


def init_params(dataset: GmmDataset, g: int, seed) -> GmmParams:
    """Perturbed kmeans++-style seeding from data points plus the pooled
    covariance; substitutes for external randomized-initialization schemes."""
    rng = as_seed_tree(seed).stream("init")
    y = dataset.observations
    n = dataset.n
    centers = [y[int(rng.integers(n))]]
    for _ in range(1, g):
        d2 = np.min(
            [np.sum((y - c) ** 2, axis=1) for c in centers], axis=0
        )
        total = d2.sum()
        probs = d2 / total if total > 0 else np.full(n, 1.0 / n)
        centers.append(y[int(rng.choice(n, p=probs))])
    means = np.array(centers)
    pooled = np.cov(y, rowvar=False, ddof=0)
    pooled = 0.5 * (pooled + pooled.T) + 1e-6 * np.eye(dataset.p)
    scale = np.sqrt(np.mean(np.diag(pooled)))
    means = means + 0.05 * scale * rng.standard_normal(means.shape)
    return GmmParams(np.full(g, 1.0 / g), means, pooled)
