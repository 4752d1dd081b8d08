"""Step-size planners and bound calculators for the variance-reduced runs.

Three constant-step strategies plus a non-uniform-termination plan:

* ``case1``   -- n^(2/3)-complexity: constant step from the scalar equation
  sqrt(C) f_n(C, lambda) = 2 mu v_min L / L_gradV, bound O(n^(2/3)/K_max).
* ``case2``   -- sqrt(n)-complexity: same with f~_n, bound O(n^(1/3)/K_max^(2/3)).
* ``karimi``  -- literature baseline constant step and bound.
* ``nonuniform`` -- per-iteration steps matched to arbitrary positive
  termination weights through the inverse of a quadratic profile.

All scalar equations are monotone on a known bracket, so every solve is a
bisection; solved values are verified against their defining equation to
1e-12 relative before being returned.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .algorithms import StepSchedule, TerminationRule
from .errors import InfeasiblePlanError
from .model import ModelConstants

Array = np.ndarray


@dataclass(frozen=True)
class PlannerInputs:
    """Problem description consumed by every planner."""

    n: int
    k_max: int
    v_min: float
    l_rms: float
    l_gradv: float
    mu: float = 0.25
    lam: float = 0.5

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("need n >= 2")
        if self.k_max < 1:
            raise ValueError("need k_max >= 1")
        for name in ("v_min", "l_rms", "l_gradv"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if not (0.0 < self.mu < 1.0):
            raise ValueError("mu must lie in (0, 1)")
        if not (0.0 < self.lam < 1.0):
            raise ValueError("lambda must lie in (0, 1)")

    @classmethod
    def from_constants(cls, constants: ModelConstants, n, k_max, mu=0.25, lam=0.5):
        return cls(
            n=int(n),
            k_max=int(k_max),
            v_min=constants.v_min,
            l_rms=constants.lipschitz_rms,
            l_gradv=constants.lipschitz_gradv,
            mu=mu,
            lam=lam,
        )


@dataclass
class StepSizePlan:
    """A solved plan: schedule, termination rule, and its bound."""

    strategy: str
    n: int
    k_max: int
    mu: Optional[float]
    lam: Optional[float]
    c: Optional[float]
    schedule: StepSchedule
    termination: TerminationRule
    bound_constant: float
    bound_value: float
    feasible: bool = True
    violated_condition: Optional[str] = None

    @property
    def gamma(self) -> float:
        """Constant step size; raises for genuinely non-constant schedules."""
        g = self.schedule.gammas
        if not np.all(g == g[0]):
            raise ValueError("schedule is not constant")
        return float(g[0])

    def to_dict(self) -> dict:
        g = self.schedule.gammas
        gamma = float(g[0]) if np.all(g == g[0]) else [float(x) for x in g]
        doc = {
            "strategy": self.strategy,
            "n": self.n,
            "k_max": self.k_max,
            "mu": self.mu,
            "lambda": self.lam,
            "C": self.c,
            "gamma": gamma,
            "bound_constant": self.bound_constant,
            "bound_value": self.bound_value,
            "feasible": self.feasible,
        }
        if self.violated_condition is not None:
            doc["violated_condition"] = self.violated_condition
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _bisect_increasing(fn, lo, hi, iters: int = 200):
    """Root of an increasing function with fn(lo) <= 0 <= fn(hi).

    Plain bisection: unconditional convergence on a monotone bracket; runs to
    interval collapse so solutions are accurate in the argument, not only in
    the residual.
    """
    flo, fhi = fn(lo), fn(hi)
    if flo > 0.0 or fhi < 0.0:
        raise InfeasiblePlanError("root bracket does not enclose a sign change")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if fn(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def f_n(c: float, lam: float, n: int) -> float:
    """n^(-2/3) + C / (lambda - C n^(-1/3)) * (1/n + 1/(1-lambda))."""
    if c <= 0.0:
        raise ValueError("C must be positive")
    if not (0.0 < lam < 1.0):
        raise ValueError("lambda must lie in (0, 1)")
    if n ** (-1.0 / 3.0) >= lam / c:
        raise InfeasiblePlanError("requires n^(-1/3) < lambda / C")
    return n ** (-2.0 / 3.0) + c / (lam - c * n ** (-1.0 / 3.0)) * (1.0 / n + 1.0 / (1.0 - lam))


def f_n_tilde(c: float, lam: float, n: int, k_max: int) -> float:
    """(n K_max)^(-1/3) + C (1/n + 1/(1-lambda))."""
    if c <= 0.0:
        raise ValueError("C must be positive")
    if not (0.0 < lam < 1.0):
        raise ValueError("lambda must lie in (0, 1)")
    return (n * k_max) ** (-1.0 / 3.0) + c * (1.0 / n + 1.0 / (1.0 - lam))


def _solve_scaled_equation(fn_of_c, hi_limit: float, target: float) -> float:
    # Solve sqrt(C) * fn_of_c(C) = target for C on (0, hi_limit); the left
    # side is continuous, increasing, 0+ at 0 and unbounded near hi_limit.
    if target <= 0.0:
        raise InfeasiblePlanError("target of the step-size equation must be positive")

    def g(c):
        return math.sqrt(c) * fn_of_c(c) - target

    lo = hi_limit * 1e-300
    hi = hi_limit * (1.0 - 1e-3)
    shrink = 0
    while g(hi) < 0.0:
        hi = hi_limit * (1.0 - (1.0 - hi / hi_limit) * 1e-3)
        shrink += 1
        if shrink > 5:
            raise InfeasiblePlanError("no root below the feasibility boundary")
    c = _bisect_increasing(g, lo, hi)
    if abs(g(c)) > 1e-12 * target:
        raise InfeasiblePlanError("bisection failed to meet the 1e-12 relative residual")
    return c


def solve_c_case1(inputs: PlannerInputs, target_scale: float = 2.0) -> float:
    """Unique C in (0, lambda n^(1/3)) with sqrt(C) f_n(C, lambda) equal to
    ``target_scale`` * mu * v_min * L / L_gradV (default factor 2)."""
    target = target_scale * inputs.mu * inputs.v_min * inputs.l_rms / inputs.l_gradv
    hi_limit = inputs.lam * inputs.n ** (1.0 / 3.0)
    return _solve_scaled_equation(lambda c: f_n(c, inputs.lam, inputs.n), hi_limit, target)


def c_plus_closed_form(mu: float, v_min: float, l_rms: float, l_gradv: float) -> float:
    """Closed-form upper bound on the lambda = C solution of the case1 equation."""
    a = 2.0 * mu * v_min * l_rms / l_gradv
    return (math.sqrt(1.0 + 4.0 * a * a) - 1.0) / (2.0 * a)


def solve_c_lambda_eq_c(n: int, mu: float, v_min: float, l_rms: float, l_gradv: float) -> float:
    """Unique C in (0, 1) solving sqrt(C) f_n(C, C) = 2 mu v_min L / L_gradV;
    always below :func:`c_plus_closed_form`."""
    target = 2.0 * mu * v_min * l_rms / l_gradv

    def g(c):
        return math.sqrt(c) * f_n(c, c, n) - target

    c = _bisect_increasing(g, 1e-300, 1.0 - 1e-16)
    if abs(g(c)) > 1e-12 * target:
        raise InfeasiblePlanError("bisection failed to meet the 1e-12 relative residual")
    return c


def gamma_case1(inputs: PlannerInputs, c: float) -> float:
    """Constant step sqrt(C) / (n^(2/3) L)."""
    if c <= 0.0:
        raise ValueError("C must be positive")
    return math.sqrt(c) / (inputs.n ** (2.0 / 3.0) * inputs.l_rms)


def case1_identity_gap(inputs: PlannerInputs, c: float) -> float:
    """Relative gap between the two expressions of the case1 step size,
    sqrt(C)/(n^(2/3) L) and 2 mu v_min / (f_n n^(2/3) L_gradV); zero exactly
    when C solves the defining equation."""
    gamma = gamma_case1(inputs, c)
    dual = (
        2.0 * inputs.mu * inputs.v_min
        / (f_n(c, inputs.lam, inputs.n) * inputs.n ** (2.0 / 3.0) * inputs.l_gradv)
    )
    return abs(gamma - dual) / gamma


def c_star_asymptotic(v_min: float, l_rms: float, l_gradv: float) -> float:
    """Large-n choice C = 0.25 (v_min L / L_gradV)^(2/3) (with lambda = 1/2)."""
    return 0.25 * (v_min * l_rms / l_gradv) ** (2.0 / 3.0)


def bound_case1(inputs: PlannerInputs, c: float, delta_v: float = 1.0):
    """Bound constant B = L_gradV f_n / (2 mu (1-mu) v_min^2) and the full
    bound (n^(2/3)/K_max) * B * delta_v."""
    fn = f_n(c, inputs.lam, inputs.n)
    bconst = inputs.l_gradv * fn / (2.0 * inputs.mu * (1.0 - inputs.mu) * inputs.v_min**2)
    return bconst, inputs.n ** (2.0 / 3.0) / inputs.k_max * bconst * delta_v


def plan_case1(inputs: PlannerInputs, delta_v: float = 1.0) -> StepSizePlan:
    c = solve_c_case1(inputs)
    if case1_identity_gap(inputs, c) > 1e-10:
        raise InfeasiblePlanError("solved C fails the dual step-size identity")
    gamma = gamma_case1(inputs, c)
    bconst, bval = bound_case1(inputs, c, delta_v)
    feasible = inputs.n > (c / inputs.lam) ** 3
    return StepSizePlan(
        strategy="case1",
        n=inputs.n,
        k_max=inputs.k_max,
        mu=inputs.mu,
        lam=inputs.lam,
        c=c,
        schedule=StepSchedule.constant(gamma, inputs.k_max),
        termination=TerminationRule.uniform(inputs.k_max),
        bound_constant=bconst,
        bound_value=bval,
        feasible=feasible,
        violated_condition=None if feasible else "n > (C/lambda)^3",
    )


def solve_case2(inputs: PlannerInputs, delta_v: float = 1.0) -> StepSizePlan:
    """sqrt(n)-complexity plan from sqrt(C) f~_n(C, lambda) = 2 mu v_min L / L_gradV."""
    target = 2.0 * inputs.mu * inputs.v_min * inputs.l_rms / inputs.l_gradv

    def g(c):
        return math.sqrt(c) * f_n_tilde(c, inputs.lam, inputs.n, inputs.k_max) - target

    hi = 1.0
    while g(hi) < 0.0:
        hi *= 2.0
        if hi > 1e12:
            raise InfeasiblePlanError("case2 equation has no reachable root")
    c = _bisect_increasing(g, 1e-300, hi)
    if abs(g(c)) > 1e-12 * target:
        raise InfeasiblePlanError("bisection failed to meet the 1e-12 relative residual")

    gamma = math.sqrt(c) / (inputs.n ** (1.0 / 3.0) * inputs.k_max ** (1.0 / 3.0) * inputs.l_rms)
    fn = f_n_tilde(c, inputs.lam, inputs.n, inputs.k_max)
    bconst = inputs.l_gradv * fn / (2.0 * inputs.mu * (1.0 - inputs.mu) * inputs.v_min**2)
    bval = inputs.n ** (1.0 / 3.0) / inputs.k_max ** (2.0 / 3.0) * bconst * delta_v
    feasible = inputs.n ** (1.0 / 3.0) * inputs.k_max ** (-2.0 / 3.0) <= inputs.lam / c
    return StepSizePlan(
        strategy="case2",
        n=inputs.n,
        k_max=inputs.k_max,
        mu=inputs.mu,
        lam=inputs.lam,
        c=c,
        schedule=StepSchedule.constant(gamma, inputs.k_max),
        termination=TerminationRule.uniform(inputs.k_max),
        bound_constant=bconst,
        bound_value=bval,
        feasible=feasible,
        violated_condition=None if feasible else "n^(1/3) K_max^(-2/3) <= lambda/C",
    )


def lambda_star_case2(v_min: float, l_rms: float, l_gradv: float, tau: float) -> float:
    """Unique lambda in (0,1) with (v_min L)^2 tau^3 (1-lambda)^2 = (2 L_gradV)^2 lambda^3."""
    lhs_scale = (v_min * l_rms) ** 2 * tau**3
    rhs_scale = (2.0 * l_gradv) ** 2

    def g(lam):
        return rhs_scale * lam**3 - lhs_scale * (1.0 - lam) ** 2

    return _bisect_increasing(g, 1e-300, 1.0 - 1e-16)


def karimi_plan(inputs: PlannerInputs, per_example_l, delta_v: float = 1.0) -> StepSizePlan:
    """Baseline constant step v_min n^(-2/3) / (max(6, 1+4 v_min) max(L_gradV, L_1..L_n))
    and its bound."""
    li = np.asarray(per_example_l, dtype=float)
    if li.size == 0:
        raise ValueError("per-example Lipschitz list must be non-empty")
    big_l = max(inputs.l_gradv, float(li.max()))
    kappa = max(6.0, 1.0 + 4.0 * inputs.v_min)
    gamma = inputs.v_min * inputs.n ** (-2.0 / 3.0) / (kappa * big_l)
    bconst = kappa**2 * big_l / inputs.v_min**2
    bval = inputs.n ** (2.0 / 3.0) / inputs.k_max * bconst * delta_v
    return StepSizePlan(
        strategy="karimi",
        n=inputs.n,
        k_max=inputs.k_max,
        mu=None,
        lam=None,
        c=None,
        schedule=StepSchedule.constant(gamma, inputs.k_max),
        termination=TerminationRule.uniform(inputs.k_max),
        bound_constant=bconst,
        bound_value=bval,
    )


def _quadratic_profile(inputs: PlannerInputs, fn: float):
    # F(x) = L_gradV / (2 L^2 n^(2/3)) * x * (2 v_min L / L_gradV - x f_n),
    # increasing on (0, x_star] with x_star = v_min L / (L_gradV f_n).
    a = inputs.l_gradv / (2.0 * inputs.l_rms**2 * inputs.n ** (2.0 / 3.0))

    def profile(x):
        return a * x * (2.0 * inputs.v_min * inputs.l_rms / inputs.l_gradv - x * fn)

    x_star = inputs.v_min * inputs.l_rms / (inputs.l_gradv * fn)
    return profile, x_star


def profile_inverse(inputs: PlannerInputs, fn: float, y: float) -> float:
    """Inverse of the quadratic profile on its increasing branch, by bisection
    run to interval collapse."""
    profile, x_star = _quadratic_profile(inputs, fn)
    if y <= 0.0:
        raise ValueError("profile inverse needs a positive argument")
    if y > profile(x_star) * (1.0 + 1e-12):
        raise ValueError("argument exceeds the profile maximum")
    lo, hi = 0.0, x_star
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if profile(mid) < y:
            lo = mid
        else:
            hi = mid
    return hi


def nonuniform_plan(inputs: PlannerInputs, weights, delta_v: float = 1.0) -> StepSizePlan:
    """Plan for an arbitrary positive termination distribution.

    C solves sqrt(C) f_n(C, lambda) = v_min L / L_gradV (no factor 2 mu); the
    per-iteration steps are the profile inverse of the rescaled weights, and
    the bound is n^(2/3) * max_k p_k * 2 L_gradV f_n / v_min^2 * delta_v.
    """
    p = np.asarray(weights, dtype=float)
    if p.ndim != 1 or p.size != inputs.k_max:
        raise ValueError("weights must have length k_max")
    if np.any(p <= 0.0):
        raise ValueError("all termination weights must be positive")
    if abs(p.sum() - 1.0) > 1e-12:
        raise ValueError("weights must sum to 1 within 1e-12")

    target = inputs.v_min * inputs.l_rms / inputs.l_gradv
    hi_limit = inputs.lam * inputs.n ** (1.0 / 3.0)
    c_max = _solve_scaled_equation(lambda c: f_n(c, inputs.lam, inputs.n), hi_limit, target)
    fn = f_n(c_max, inputs.lam, inputs.n)

    pmax = float(p.max())
    scale = inputs.v_min**2 / (2.0 * inputs.l_gradv * fn * inputs.n ** (2.0 / 3.0))
    _, x_star = _quadratic_profile(inputs, fn)
    gammas = np.empty(inputs.k_max)
    inv_cache: dict[float, float] = {}
    for k in range(inputs.k_max):
        ratio = float(p[k]) / pmax
        if ratio not in inv_cache:
            # the maximal weight maps to the profile vertex sqrt(C) exactly
            inv_cache[ratio] = x_star if ratio == 1.0 else profile_inverse(inputs, fn, ratio * scale)
        gammas[k] = inv_cache[ratio] / (inputs.n ** (2.0 / 3.0) * inputs.l_rms)

    bconst = 2.0 * inputs.l_gradv * fn / inputs.v_min**2
    bval = inputs.n ** (2.0 / 3.0) * pmax * bconst * delta_v
    feasible = inputs.n > (c_max / inputs.lam) ** 3
    return StepSizePlan(
        strategy="nonuniform",
        n=inputs.n,
        k_max=inputs.k_max,
        mu=None,
        lam=inputs.lam,
        c=c_max,
        schedule=StepSchedule(gammas),
        termination=TerminationRule(p),
        bound_constant=bconst,
        bound_value=bval,
        feasible=feasible,
        violated_condition=None if feasible else "n > (C/lambda)^3",
    )


def recommend(epsilon: float, n: int) -> str:
    """Strategy selector: with epsilon = n^(-e), the sqrt(n) strategy wins for
    e < 1/3 and the n^(2/3) strategy otherwise."""
    if not (0.0 < epsilon < 1.0):
        raise ValueError("epsilon must lie in (0, 1)")
    if n < 2:
        raise ValueError("need n >= 2")
    e = -math.log(epsilon) / math.log(n)
    return "case2" if e < 1.0 / 3.0 else "case1"


@dataclass(frozen=True)
class Theorem1Coefficients:
    """Per-iteration weights of the master inequality."""

    alphas: Array
    deltas: Array
    lambdas_big: Array
    betas: Array


def theorem1_coeffs(
    schedule: StepSchedule,
    n: int,
    l_rms: float,
    v_min: float,
    l_gradv: float,
    betas=None,
    lam: float = 0.5,
) -> Theorem1Coefficients:
    """Exact evaluation of the master-inequality coefficients.

    alpha_k = gamma_{k+1} v_min - gamma_{k+1}^2 (1 + Lambda_k L^2) L_gradV / 2
    delta_k = gamma_{k+1}^2 (1 + Lambda_k beta_{k+1} L^2 / (1 + beta_{k+1})) L_gradV / 2
    Lambda_k = (1 + 1/beta_{k+1}) sum_{j=k+1}^{K-1} gamma_{j+1}^2
               prod_{l=k+2}^{j} (1 - 1/n + beta_l + gamma_l^2 L^2)
    with Lambda_{K-1} = 0 by convention.  Computed in O(K_max) by a backward
    recursion of the inner sums; the default beta sequence is (1-lambda)/n.
    """
    gammas = schedule.gammas
    k_max = gammas.size
    if betas is None:
        betas = np.full(k_max, (1.0 - lam) / n)
    else:
        betas = np.asarray(betas, dtype=float)
        if betas.shape != (k_max,):
            raise ValueError("betas must have length K_max")
        if np.any(betas <= 0.0):
            raise ValueError("betas must be positive")

    l_sq = l_rms**2
    # weight w_l = 1 - 1/n + beta_l + gamma_l^2 L^2 for l = 1..K_max
    # (index l matches gamma_l = gammas[l-1], beta_l = betas[l-1])
    w = 1.0 - 1.0 / n + betas + gammas**2 * l_sq

    # S_k = sum_{j=k+1}^{K-1} gamma_{j+1}^2 prod_{l=k+2}^{j} w_l,
    # built backwards via S_k = gamma_{k+2}^2 + w_{k+2} S_{k+1}.
    s = np.zeros(k_max)
    for k in range(k_max - 2, -1, -1):
        s[k] = gammas[k + 1] ** 2 + w[k + 1] * s[k + 1]

    lambdas_big = np.zeros(k_max)
    if k_max >= 2:
        lambdas_big[: k_max - 1] = (1.0 + 1.0 / betas[: k_max - 1]) * s[: k_max - 1]

    alphas = gammas * v_min - gammas**2 * (1.0 + lambdas_big * l_sq) * l_gradv / 2.0
    deltas = gammas**2 * (1.0 + lambdas_big * betas * l_sq / (1.0 + betas)) * l_gradv / 2.0
    return Theorem1Coefficients(alphas=alphas, deltas=deltas, lambdas_big=lambdas_big, betas=betas)


def build_plan(strategy: str, inputs: PlannerInputs, weights=None, per_example_l=None,
               delta_v: float = 1.0, epsilon: float | None = None) -> StepSizePlan:
    """Dispatch helper used by the CLI."""
    if strategy == "auto":
        if epsilon is None:
            raise ValueError("auto strategy requires epsilon")
        strategy = recommend(epsilon, inputs.n)
    if strategy == "case1":
        return plan_case1(inputs, delta_v)
    if strategy == "case2":
        return solve_case2(inputs, delta_v)
    if strategy == "karimi":
        if per_example_l is None:
            per_example_l = [inputs.l_rms]
        return karimi_plan(inputs, per_example_l, delta_v)
    if strategy == "nonuniform":
        if weights is None:
            raise ValueError("nonuniform strategy requires termination weights")
        return nonuniform_plan(inputs, weights, delta_v)
    raise ValueError(f"unknown strategy {strategy!r}")
