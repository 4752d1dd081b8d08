"""Gaussian linear latent toy model with closed forms for everything.

Observations Y_i in R^y are generated through a latent Gaussian regression:
Y_i | Z_i ~ N(A Z_i, I) with Z_i ~ N(X theta, I), penalized by
upsilon ||theta||^2 / 2.  Everything the algorithms and planners need is
affine or quadratic:

    T(s)            = (upsilon I + X'X)^{-1} s
    sbar_i(T(s))    = Pi1 Y_i + Pi2 s
    B(s)            = (upsilon I + X'X)^{-1}  (constant)
    grad V(s)       = -B h(s)

so the constants v_min, v_max, L, L_gradV come from eigenvalue problems and
the minimizer theta_star is a linear solve.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigurationError
from .model import FiniteSumModel, ModelConstants, check_statistic
from .rng import STREAM_DATA, as_seed_tree

Array = np.ndarray


def _ar1_matrix(rng: np.random.Generator, rows: int, cols: int, rho: float) -> Array:
    """Columns follow a stationary AR(1): first column sqrt(1-rho^2) N(0, I),
    then col_{j+1} = rho col_j + sqrt(1-rho^2) N(0, I)."""
    if not (-1.0 < rho < 1.0):
        raise ValueError("autoregression coefficient must lie in (-1, 1)")
    scale = np.sqrt(1.0 - rho * rho)
    out = np.empty((rows, cols))
    out[:, 0] = scale * rng.standard_normal(rows)
    for j in range(1, cols):
        out[:, j] = rho * out[:, j - 1] + scale * rng.standard_normal(rows)
    return out


class ToyModel(FiniteSumModel):
    """Fully specified linear-Gaussian model; immutable after construction."""

    def __init__(self, a_mat: Array, x_mat: Array, upsilon: float, observations: Array):
        a_mat = np.asarray(a_mat, dtype=float)
        x_mat = np.asarray(x_mat, dtype=float)
        y_obs = np.asarray(observations, dtype=float)
        y_dim, p_dim = a_mat.shape
        if x_mat.shape[0] != p_dim:
            raise ConfigurationError("A and X have incompatible inner dimensions")
        q_dim = x_mat.shape[1]
        if y_obs.ndim != 2 or y_obs.shape[1] != y_dim:
            raise ConfigurationError("observations must be an n-by-y matrix")
        if upsilon < 0.0:
            raise ConfigurationError("upsilon must be non-negative")
        if upsilon == 0.0:
            if np.linalg.matrix_rank(x_mat) != min(q_dim, y_dim):
                raise ConfigurationError("with upsilon=0, X must have rank q^y")
            if np.linalg.matrix_rank(a_mat @ x_mat) != min(p_dim, y_dim):
                raise ConfigurationError("with upsilon=0, AX must have rank p^y")

        self.a_mat = a_mat
        self.x_mat = x_mat
        self.upsilon = float(upsilon)
        self.y_obs = y_obs
        self.n = y_obs.shape[0]
        self.q = q_dim
        self.dims = (y_dim, p_dim, q_dim)

        # latent-space and observation-space Gram matrices, solved via
        # Cholesky factorizations of the two SPD systems
        ata = np.eye(p_dim) + a_mat.T @ a_mat          # I_p + A'A
        chol_p = np.linalg.cholesky(ata)
        solve_p = lambda m: np.linalg.solve(chol_p.T, np.linalg.solve(chol_p, m))
        self.pi1 = x_mat.T @ solve_p(a_mat.T)           # q x y
        self.gram = x_mat.T @ solve_p(x_mat)            # X'(I+A'A)^{-1}X, q x q symmetric

        xtx = x_mat.T @ x_mat
        reg = self.upsilon * np.eye(q_dim) + xtx
        chol_q = np.linalg.cholesky(reg)
        solve_q = lambda m: np.linalg.solve(chol_q.T, np.linalg.solve(chol_q, m))
        self.tmat = solve_q(np.eye(q_dim))              # (upsilon I + X'X)^{-1}
        self.pi2 = self.gram @ self.tmat                # q x q

        self.p1y = y_obs @ self.pi1.T                   # row i = Pi1 Y_i
        self.ybar = y_obs.mean(axis=0)
        self.p1ybar = self.pi1 @ self.ybar

        # objective F(theta) = 0.5 theta' M theta - b' theta + c
        aat = np.eye(y_dim) + a_mat @ a_mat.T
        chol_y = np.linalg.cholesky(aat)
        solve_y = lambda m: np.linalg.solve(chol_y.T, np.linalg.solve(chol_y, m))
        ax = a_mat @ x_mat
        self._obj_m = ax.T @ solve_y(ax) + self.upsilon * np.eye(q_dim)
        self._obj_b = ax.T @ solve_y(self.ybar)
        w = solve_y(y_obs.T)                            # (y, n)
        self._obj_c = 0.5 * float(np.einsum("in,in->", y_obs.T, w)) / self.n \
            + float(np.log(np.diag(chol_y)).sum()) + 0.5 * y_dim * np.log(2.0 * np.pi)

        self.theta_star = np.linalg.solve(self._obj_m, self._obj_b)

        xtx_eigs = np.linalg.eigvalsh(xtx)
        v_min = 1.0 / (self.upsilon + float(xtx_eigs[-1]))
        v_max = 1.0 / (self.upsilon + float(xtx_eigs[0]))
        lips = float(np.linalg.norm(self.pi2, 2))
        # Tmat (Pi2 - I) = Tmat Gram Tmat - Tmat is symmetric, so its spectral
        # radius is an eigvalsh call
        vdot_mat = self.tmat @ self.gram @ self.tmat - self.tmat
        l_gradv = float(np.max(np.abs(np.linalg.eigvalsh(vdot_mat))))
        self._constants = ModelConstants.uniform(v_min, v_max, lips, l_gradv, self.n)

        self._stat_cache = None

    # -- model interface --------------------------------------------------

    def tmap(self, s: Array) -> Array:
        return self.tmat @ s

    def admissible(self, s: Array) -> None:
        check_statistic(self, s)

    def sbar_i(self, theta: Array, i: int) -> Array:
        return self.p1y[i] + self.gram @ theta

    def sbar_rows(self, theta: Array, indices) -> Array:
        return self.p1y[np.asarray(indices)] + self.gram @ theta

    def sbar(self, theta: Array) -> Array:
        return self.p1ybar + self.gram @ theta

    def _pi2_s(self, s: Array) -> Array:
        # identity-keyed memo: the same state vector is mapped several times
        # per iteration (memory write, oracle rows, diagnostics)
        cache = self._stat_cache
        if cache is not None and cache[0] is s:
            return cache[1]
        val = self.pi2 @ s
        self._stat_cache = (s, val)
        return val

    def stat_rows(self, s: Array, indices) -> Array:
        return self.p1y[np.asarray(indices)] + self._pi2_s(s)

    def stat_mean(self, s: Array) -> Array:
        return self.p1ybar + self._pi2_s(s)

    def objective(self, theta: Array) -> float:
        return 0.5 * float(theta @ self._obj_m @ theta) - float(self._obj_b @ theta) + self._obj_c

    def bmat(self, s: Array) -> Array:
        return self.tmat

    def constants(self) -> ModelConstants:
        return self._constants

    # -- closed forms ------------------------------------------------------

    def em_fixed_point(self) -> Array:
        """s_star solving (I - Pi2) s_star = Pi1 Ybar."""
        return np.linalg.solve(np.eye(self.q) - self.pi2, self.p1ybar)

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        """JSON document with matrices row-major."""
        return {
            "a": self.a_mat.tolist(),
            "x": self.x_mat.tolist(),
            "upsilon": self.upsilon,
            "observations": self.y_obs.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ToyModel":
        return cls(
            np.asarray(doc["a"], dtype=float),
            np.asarray(doc["x"], dtype=float),
            float(doc["upsilon"]),
            np.asarray(doc["observations"], dtype=float),
        )

    def save_observations_csv(self, path) -> None:
        """Header-free CSV, one observation per row."""
        np.savetxt(path, self.y_obs, delimiter=",")


def generate_toy(
    seed,
    n: int,
    dims: tuple[int, int, int] = (15, 10, 20),
    rho: float = 0.8,
    rho_tilde: float = 0.9,
    sparsity: float = 0.4,
    value_range: tuple[float, float] = (-5.0, 5.0),
    upsilon: float = 0.1,
) -> ToyModel:
    """Sample the benchmark problem instance.

    A (y x p) and X (p x q) have stationary AR(1) columns with coefficients
    rho and rho_tilde; theta_true has floor(sparsity * q) zero entries, the
    rest uniform on ``value_range``; observations are drawn from the marginal
    N(A X theta_true, I + A A').  The defaults (dims (15, 10, 20), rho=0.8,
    rho_tilde=0.9, sparsity=0.4, range (-5, 5), upsilon=0.1) are the
    benchmark configuration used throughout the experiments.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    if not (0.0 <= sparsity <= 1.0):
        raise ValueError("sparsity must lie in [0, 1]")
    y_dim, p_dim, q_dim = dims
    rng = as_seed_tree(seed).stream(STREAM_DATA)
    a_mat = _ar1_matrix(rng, y_dim, p_dim, rho)
    x_mat = _ar1_matrix(rng, p_dim, q_dim, rho_tilde)

    theta_true = rng.uniform(value_range[0], value_range[1], size=q_dim)
    n_zero = int(np.floor(sparsity * q_dim))
    zero_idx = rng.permutation(q_dim)[:n_zero]
    theta_true[zero_idx] = 0.0

    z = x_mat @ theta_true + rng.standard_normal((n, p_dim))  # (n, p)
    y = z @ a_mat.T + rng.standard_normal((n, y_dim))

    model = ToyModel(a_mat, x_mat, upsilon, y)
    model.theta_true = theta_true
    return model


def toy_algorithm_step(
    model: ToyModel,
    s: Array,
    memory_rows: Array,
    stilde: Array,
    idx_i: int,
    idx_j: int,
    gamma: float,
    lam: float,
):
    """Specialized one-iteration update of the SA family on the toy model.

    Stores the old memory row, refreshes row ``idx_i`` at the current state,
    updates the running mean, then applies the lambda-weighted update
    (lambda 0 = plain oracle, 1 = unit control variate).  Returns
    (new state, memory_rows, stilde); cross-checked bitwise against the
    generic engines in the tests.
    """
    new_row = model.stat_rows(s, np.array([idx_i]))[0]
    stilde = stilde + (new_row - memory_rows[idx_i]) / model.n
    memory_rows[idx_i] = new_row
    rows_j = model.stat_rows(s, np.array([idx_j]))
    direction = rows_j.mean(axis=0) - s
    if lam != 0.0:
        mem_j = memory_rows[np.array([idx_j])].mean(axis=0)
        direction = direction + lam * (stilde - mem_j)
    return s + gamma * direction, memory_rows, stilde
