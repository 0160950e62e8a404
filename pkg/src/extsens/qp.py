"""Worst-case deviate over the feasible set of maximal assignment probabilities.

For a pair oriented so that ``q_i1 >= q_i2`` with gap ``d_i``, the
contribution ``T_i`` of the pair to ``Z^T q`` has mean ``q_i2 + d_i p_i`` and
variance ``d_i^2 p_i (1 - p_i)`` when the first unit is treated with
probability ``p_i``. A test at level ``a`` rejects for every admissible
``p`` when

    zeta(p) = (t - sum_i(q_i2 + d_i p_i))^2 - crit * sum_i d_i^2 p_i (1 - p_i)

is nonnegative over

    1/2 <= p_i <= Gamma/(1+Gamma),    sum_i p_i <= budget_rhs.

``zeta`` is a convex quadratic (Hessian ``2 d d^T + 2 crit diag(d^2)``), so
the check is one convex program. It is solved here through the budget
multiplier: for a fixed multiplier the stationarity conditions reduce to a
single scalar equation in the residual ``r = t - E[T]`` which is piecewise
linear and increasing, and is solved exactly from its breakpoints. The
total probability mass is nonincreasing and piecewise linear in the
multiplier, which is then located by regula falsi with the Illinois
safeguard.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import chi2

from .errors import BaselineWarning, ConvergenceError, HajekWarning, ValidationError
from .paired_data import PairedSample, orient_for_alternative
from .uncertainty_sets import (
    SensitivityBudget,
    UncertaintySetSpec,
    as_spec,
    maximize_mean_bound,
)

KKT_TOL = 1e-8
MAX_ITER = 10_000
PVALUE_TOL = 1e-6
HAJEK_THRESHOLD = 20.0
_BIG = 1e300


def critical_value(level: float, side: str) -> float:
    """chi-square(1) quantile used for a squared deviate at ``level``."""
    if side == "two_sided":
        p = 1.0 - level
    else:
        p = 1.0 - 2.0 * level
    if not 0 < p < 1:
        raise ValidationError(f"test level {level} out of range for a {side} alternative")
    return float(chi2.ppf(p, 1))


@dataclass(frozen=True)
class QpProblem:
    d: np.ndarray
    s: np.ndarray
    t_obs: float
    crit: float
    lower: float
    upper: float
    budget_rhs: float

    def __post_init__(self):
        if np.any(self.d < 0):
            raise ValidationError("pair gaps must be nonnegative (orient the sample first)")
        if self.crit < 0:
            raise ValidationError("critical value must be nonnegative")
        n = len(self.d)
        if self.budget_rhs < n * 0.5 - 1e-9 * n:
            raise ValidationError("budget below the no-bias point")

    @property
    def I(self) -> int:  # noqa: E743
        return len(self.d)

    @property
    def q2(self) -> np.ndarray:
        return 0.5 * (self.s - self.d)

    def expectation(self, pi: np.ndarray) -> float:
        return float(np.sum(self.q2 + self.d * pi))

    def variance(self, pi: np.ndarray) -> float:
        return float(np.sum(self.d ** 2 * pi * (1 - pi)))

    def zeta(self, pi: np.ndarray) -> float:
        return (self.t_obs - self.expectation(pi)) ** 2 - self.crit * self.variance(pi)

    def hessian(self) -> np.ndarray:
        return 2.0 * np.outer(self.d, self.d) + 2.0 * self.crit * np.diag(self.d ** 2)


@dataclass(frozen=True)
class QpSolution:
    pi_star: np.ndarray
    objective: float
    deviate_sq: float
    kkt_residual: float
    active_set: dict
    multiplier: float
    expectation: float
    variance: float


def assemble(
    sample: PairedSample,
    budget: SensitivityBudget,
    spec: UncertaintySetSpec | str,
    level: float | None = None,
) -> QpProblem:
    """Build the worst-case program for an oriented sample.

    ``level`` is the nominal test level ``a``; the program uses ``a - beta``.
    It defaults to ``budget.alpha``.
    """
    spec = as_spec(spec, sample.I)
    spec.check_frame(budget)
    d = sample.gaps
    if np.any(d < 0):
        raise ValidationError("sample is not oriented: some q_i1 < q_i2")
    level = budget.alpha if level is None else level
    if level <= budget.beta:
        raise ValidationError("test level must exceed beta")
    crit = critical_value(level - budget.beta, budget.side)
    _, bound = maximize_mean_bound(spec, budget)
    return QpProblem(
        d=d.copy(),
        s=sample.sums.copy(),
        t_obs=sample.t_obs,
        crit=crit,
        lower=0.5,
        upper=budget.upper,
        budget_rhs=sample.I * bound,
    )


# ----------------------------------------------------------------------
# batched core
# ----------------------------------------------------------------------

def _residual_for_multiplier(D, pos, lam, kappa, c, hw):
    """Solve ``r + R(r)/c = kappa`` row-wise, ``R`` the sum of clipped ramps.

    Pair ``i`` is at its lower bound for ``r <= lo_i = lam/(2 d_i)`` and at
    its upper bound for ``r >= lo_i + c d_i hw``; in between
    ``d_i p_i = d_i/2 + (r - lo_i)/c``.
    """
    Dsafe = np.where(pos, D, 1.0)
    lo = np.where(pos, lam[:, None] / (2.0 * Dsafe), _BIG)
    hi = np.where(pos, lo + c * D * hw, _BIG)
    knots = np.concatenate([lo, hi], axis=1)
    inc = np.concatenate([pos, pos], axis=1).astype(np.int64)
    inc[:, D.shape[1]:] *= -1
    order = np.argsort(knots, axis=1, kind="stable")
    k = np.take_along_axis(knots, order, axis=1)
    slope = np.cumsum(np.take_along_axis(inc, order, axis=1), axis=1)
    gaps = np.diff(k, axis=1)
    ramp = np.zeros_like(k)
    np.cumsum(slope[:, :-1] * gaps, axis=1, out=ramp[:, 1:])
    lhs = k + ramp / c
    j = np.sum(lhs < kappa[:, None], axis=1)
    rows = np.arange(len(kappa))
    jm = np.maximum(j - 1, 0)
    r_in = k[rows, jm] + (kappa - lhs[rows, jm]) / (1.0 + slope[rows, jm] / c)
    r = np.where(j == 0, kappa, r_in)
    return r, lo


def _probs(D, pos, r, lo, c, upper):
    Dsafe = np.where(pos, D, 1.0)
    p = 0.5 + (r[:, None] - lo) / (c * Dsafe)
    return np.where(pos, np.clip(p, 0.5, upper), 0.5)


def solve_batch(D, kappa, crit, upper, budget, rtol=1e-14, max_iter=MAX_ITER):
    """Minimise ``zeta`` for a batch of problems sharing ``crit`` and ``upper``.

    Parameters
    ----------
    D : (m, n) array
        Nonnegative gaps; zero entries are pairs fixed at 1/2.
    kappa : (m,) array
        ``t - sum(q2) - sum(d)/2``, the residual at ``p = 1/2``.
    budget : (m,) array
        Right-hand side of ``sum p <= budget`` over the positive-gap pairs only.

    Returns
    -------
    P : (m, n) array of minimisers, lam : (m,) budget multipliers
    """
    D = np.atleast_2d(np.asarray(D, dtype=float))
    kappa = np.atleast_1d(np.asarray(kappa, dtype=float))
    budget = np.broadcast_to(np.asarray(budget, dtype=float), kappa.shape)
    m, n = D.shape
    pos = D > 0
    hw = upper - 0.5
    if hw <= 0 or crit <= 0:
        if crit <= 0 and hw > 0:
            raise ValidationError("critical value must be positive")
        return np.full((m, n), 0.5), np.zeros(m)

    lam = np.zeros(m)
    r, lo = _residual_for_multiplier(D, pos, lam, kappa, crit, hw)
    P = _probs(D, pos, r, lo, crit, upper)
    slack_tol = 1e-12 * np.maximum(1.0, budget)
    need = P.sum(axis=1) > budget + slack_tol
    if not np.any(need):
        return P, lam

    idx = np.flatnonzero(need)
    Dn, posn, kn, bn = D[idx], pos[idx], kappa[idx], budget[idx]
    dmax = Dn.max(axis=1)
    # at lam_hi every pair sits at 1/2, which always satisfies the budget
    lo_l = np.zeros(len(idx))
    hi_l = 2.0 * np.maximum(kn, 0.0) * dmax * (1.0 + 1e-12) + 1e-300
    f_lo = P[idx].sum(axis=1) - bn
    f_hi = 0.5 * posn.sum(axis=1) - bn
    # the mass is piecewise linear in the multiplier, so regula falsi with the
    # Illinois modification lands on the exact kink-free piece in a few steps
    g_lo, g_hi = f_lo.copy(), f_hi.copy()
    side = np.zeros(len(idx), dtype=np.int8)
    tol = slack_tol[idx]
    live = np.ones(len(idx), dtype=bool)
    for it in range(max_iter):
        live &= (f_hi < -tol) & (hi_l - lo_l > rtol * hi_l)
        act = np.flatnonzero(live)
        if len(act) == 0:
            break
        a, b = lo_l[act], hi_l[act]
        ga, gb = g_lo[act], g_hi[act]
        x = b - gb * (b - a) / (gb - ga)
        bad = ~((x > a) & (x < b)) | (it % 8 == 7)
        x = np.where(bad, 0.5 * (a + b), x)
        rm, lom = _residual_for_multiplier(Dn[act], posn[act], x, kn[act], crit, hw)
        fx = _probs(Dn[act], posn[act], rm, lom, crit, upper).sum(axis=1) - bn[act]
        over = fx > 0
        lo_l[act] = np.where(over, x, a)
        hi_l[act] = np.where(over, b, x)
        f_lo[act] = np.where(over, fx, f_lo[act])
        f_hi[act] = np.where(over, f_hi[act], fx)
        prev = side[act]
        g_lo[act] = np.where(over, fx, np.where(prev == -1, 0.5 * ga, ga))
        g_hi[act] = np.where(over, np.where(prev == 1, 0.5 * gb, gb), fx)
        side[act] = np.where(over, 1, -1)
    else:
        raise ConvergenceError(
            "budget multiplier search hit the iteration cap", last_iterate=hi_l,
            residual=float(np.max((hi_l - lo_l) / hi_l)),
        )
    rh, loh = _residual_for_multiplier(Dn, posn, hi_l, kn, crit, hw)
    P[idx] = _probs(Dn, posn, rh, loh, crit, upper)
    lam[idx] = hi_l
    return P, lam


def _kkt_residual(p: QpProblem, pi: np.ndarray, lam: float, budget_eff: float, pos: np.ndarray) -> float:
    d = p.d[pos]
    x = pi[pos]
    if len(d) == 0:
        return 0.0
    resid = p.t_obs - p.expectation(pi)
    grad = -2.0 * d * resid + p.crit * d ** 2 * (2.0 * x - 1.0) + lam
    curv = 2.0 * p.crit * d ** 2 + 2.0 * d ** 2
    proj = np.clip(x - grad / curv, p.lower, p.upper)
    stat = float(np.max(np.abs(x - proj)))
    excess = max(0.0, float(x.sum()) - budget_eff) / len(d)
    scale = float(np.max(curv))
    comp = lam / scale * abs(budget_eff - float(x.sum())) / len(d)
    return max(stat, excess, comp)


def _attainable_tol(p: QpProblem, lam: float, pos: np.ndarray) -> float:
    """KKT tolerance, widened when the critical value is tiny.

    Interior probabilities are recovered as ``1/2 + (r - lam/(2 d))/(crit d)``,
    so rounding in ``r`` is amplified by ``1/(crit d)``. This only matters
    for critical values far below any practical level, which the p-value
    bisection visits near its upper end.
    """
    if not pos.any():
        return KKT_TOL
    d = p.d[pos]
    scale = max(abs(p.t_obs), float(np.sum(np.abs(p.q2))) + float(d.sum()), lam / (2.0 * float(d.min())))
    return max(KKT_TOL, 1e3 * np.finfo(float).eps * scale / (p.crit * float(d.min())))


def minimize_zeta(p: QpProblem) -> QpSolution:
    """Global minimiser of ``zeta`` over the box and the budget row."""
    pos = p.d > 0
    n_zero = int(np.sum(~pos))
    budget_eff = p.budget_rhs - 0.5 * n_zero
    pi = np.full(p.I, 0.5)
    lam = 0.0
    if pos.any():
        d = p.d[pos]
        kappa = p.t_obs - float(np.sum(p.q2)) - 0.5 * float(d.sum())
        P, lam_arr = solve_batch(d[None, :], np.array([kappa]), p.crit, p.upper, np.array([budget_eff]))
        pi[pos] = P[0]
        lam = float(lam_arr[0])
    kkt = _kkt_residual(p, pi, lam, budget_eff, pos)
    if kkt > _attainable_tol(p, lam, pos):
        raise ConvergenceError(f"KKT residual {kkt:.3g} above tolerance", last_iterate=pi, residual=kkt)
    ex = p.expectation(pi)
    var = p.variance(pi)
    obj = p.zeta(pi)
    dev2 = (p.t_obs - ex) ** 2 / var if var > 0 else math.inf
    eps = 1e-12
    active = {
        "lower": np.flatnonzero(pos & (pi <= p.lower + eps)),
        "upper": np.flatnonzero(pos & (pi >= p.upper - eps)),
        "fixed": np.flatnonzero(~pos),
        "budget": bool(lam > 0),
    }
    return QpSolution(pi, obj, dev2, kkt, active, lam, ex, var)


# ----------------------------------------------------------------------
# decisions and p-values
# ----------------------------------------------------------------------

@dataclass
class AnalysisResult:
    """Outcome of one worst-case analysis at ``(Gamma, Gammabar)``."""

    reject: bool
    p_value: float | None
    pi_star: np.ndarray
    deviate: float
    deviate_sq: float
    objective: float | None
    expectation: float
    variance: float
    t_obs: float
    conventional: bool
    hajek_ratio: float
    baseline_rejected: bool
    budget: SensitivityBudget
    spec_kind: str
    kkt_residual: float = 0.0
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "reject": bool(self.reject),
            "p_value": self.p_value,
            "deviate": _finite_or_none(self.deviate),
            "deviate_sq": _finite_or_none(self.deviate_sq),
            "objective": self.objective,
            "expectation": self.expectation,
            "variance": self.variance,
            "t_obs": self.t_obs,
            "conventional": self.conventional,
            "hajek_ratio": _finite_or_none(self.hajek_ratio),
            "baseline_rejected": self.baseline_rejected,
            "kkt_residual": self.kkt_residual,
            "gamma": _finite_or_none(self.budget.gamma),
            "gammabar": _finite_or_none(self.budget.gammabar),
            "alpha": self.budget.alpha,
            "beta": self.budget.beta,
            "side": self.budget.side,
            "frame": self.budget.frame,
            "uncertainty_set": self.spec_kind,
            "warnings": list(self.warnings),
        }


def _finite_or_none(x):
    return float(x) if x is not None and math.isfinite(x) else None


def _one_sided_tail(dev: float) -> float:
    return float(ndtr(-dev))


def conventional_pvalue(sample: PairedSample, gamma: float, side: str = "greater") -> tuple[float, float, float, float]:
    """Closed-form worst case with every pair at ``Gamma/(1+Gamma)``.

    ``sample`` must be oriented. Returns ``(p, deviate, expectation, variance)``;
    two-sided p-values double the one-sided tail.
    """
    from .uncertainty_sets import gamma_to_prob

    u = gamma_to_prob(gamma)
    d = sample.gaps
    q2 = sample.q[:, 1]
    ex = float(np.sum(q2 + d * u))
    var = float(np.sum(d ** 2) * u * (1 - u))
    diff = sample.t_obs - ex
    if var > 0:
        dev = diff / math.sqrt(var)
    else:
        dev = math.inf if diff > 0 else (-math.inf if diff < 0 else 0.0)
    p = _one_sided_tail(dev)
    if side == "two_sided":
        p = min(1.0, 2.0 * p)
    return p, dev, ex, var


def is_saturated(budget: SensitivityBudget, spec: UncertaintySetSpec) -> bool:
    """True when the typical-bias bound adds nothing beyond ``Gamma``.

    Then the feasible set is the conventional one and the conventional
    analysis, which needs no ``beta`` inflation, dominates. The test depends
    only on the design, not on the outcomes.
    """
    if budget.conventional:
        return True
    _, bound = maximize_mean_bound(spec, budget)
    return bound >= budget.upper


def _baseline_rejects(oriented: PairedSample, budget: SensitivityBudget) -> bool:
    p, *_ = conventional_pvalue(oriented, 1.0, budget.side)
    return p <= budget.alpha


def _prepare(sample: PairedSample, budget: SensitivityBudget, spec):
    spec = as_spec(spec, sample.I)
    spec.check_frame(budget)
    oriented = orient_for_alternative(sample, budget.side)
    return oriented, spec


def _decide_qp(oriented: PairedSample, budget: SensitivityBudget, spec, level: float):
    prob = assemble(oriented, budget, spec, level=level)
    sol = minimize_zeta(prob)
    ok = sol.objective >= 0 and oriented.t_obs - sol.expectation > 0
    return ok, prob, sol


def reject(sample: PairedSample, budget: SensitivityBudget, spec, pvalue: bool = False) -> AnalysisResult:
    """Worst-case test of the null at ``(Gamma, Gammabar)``.

    The null is rejected when ``zeta >= 0`` over the whole feasible set and
    the observed statistic exceeds the worst-case expectation. At
    ``Gammabar = Gamma`` (or whenever the typical-bias bound cannot bind)
    the closed-form conventional analysis is used with no ``beta`` added.
    """
    oriented, spec = _prepare(sample, budget, spec)
    notes = []
    ratio = oriented.hajek_ratio
    if ratio < HAJEK_THRESHOLD:
        msg = f"max single-pair share of variance is large (ratio {ratio:.3g} < {HAJEK_THRESHOLD:g})"
        warnings.warn(msg, HajekWarning, stacklevel=2)
        notes.append("hajek: " + msg)
    baseline = _baseline_rejects(oriented, budget)
    if not baseline:
        msg = "null not rejected at Gamma = Gammabar = 1; sensitivity analysis reported anyway"
        warnings.warn(msg, BaselineWarning, stacklevel=2)
        notes.append("baseline: " + msg)

    if is_saturated(budget, spec):
        p, dev, ex, var = conventional_pvalue(oriented, budget.gamma, budget.side)
        u = budget.upper
        pi = np.where(oriented.gaps > 0, u, 0.5)
        return AnalysisResult(
            reject=p <= budget.alpha,
            p_value=p if pvalue else None,
            pi_star=pi,
            deviate=dev,
            deviate_sq=dev * dev,
            objective=None,
            expectation=ex,
            variance=var,
            t_obs=oriented.t_obs,
            conventional=True,
            hajek_ratio=ratio,
            baseline_rejected=baseline,
            budget=budget,
            spec_kind=spec.kind,
            warnings=notes,
        )

    ok, prob, sol = _decide_qp(oriented, budget, spec, budget.alpha)
    dev = math.copysign(math.sqrt(sol.deviate_sq), oriented.t_obs - sol.expectation) \
        if math.isfinite(sol.deviate_sq) else math.copysign(math.inf, oriented.t_obs - sol.expectation)
    res = AnalysisResult(
        reject=bool(ok),
        p_value=None,
        pi_star=sol.pi_star,
        deviate=dev,
        deviate_sq=sol.deviate_sq,
        objective=sol.objective,
        expectation=sol.expectation,
        variance=sol.variance,
        t_obs=oriented.t_obs,
        conventional=False,
        hajek_ratio=ratio,
        baseline_rejected=baseline,
        budget=budget,
        spec_kind=spec.kind,
        kkt_residual=sol.kkt_residual,
        warnings=notes,
    )
    if pvalue:
        res.p_value = _extended_pvalue(oriented, budget, spec)
    return res


def decide(sample: PairedSample, budget: SensitivityBudget, spec) -> bool:
    """Bare rejection decision, with no diagnostics or warnings.

    Used by the search routines, which evaluate many candidate settings.
    """
    oriented, spec = _prepare(sample, budget, spec)
    if is_saturated(budget, spec):
        p, *_ = conventional_pvalue(oriented, budget.gamma, budget.side)
        return p <= budget.alpha
    ok, *_ = _decide_qp(oriented, budget, spec, budget.alpha)
    return bool(ok)


def extended_pvalue(p_sup: float, budget: SensitivityBudget) -> float:
    """Compose a worst-case tail with the ``beta`` allowance."""
    if budget.conventional or budget.frame == "study_population":
        return min(1.0, p_sup)
    return min(1.0, p_sup + budget.beta)


def _extended_pvalue(oriented: PairedSample, budget: SensitivityBudget, spec) -> float:
    beta = budget.beta
    span = 1.0 if budget.side == "two_sided" else 0.5
    lo, hi = beta, beta + span * (1.0 - 1e-9)
    ok, *_ = _decide_qp(oriented, budget, spec, hi)
    if not ok:
        return 1.0
    while hi - lo > PVALUE_TOL:
        mid = 0.5 * (lo + hi)
        ok, *_ = _decide_qp(oriented, budget, spec, mid)
        if ok:
            hi = mid
        else:
            lo = mid
    return min(1.0, hi)


def worst_case_pvalue(sample: PairedSample, budget: SensitivityBudget, spec) -> float:
    """Smallest level at which the worst-case test rejects.

    With the typical-bias bound active this is the bisection boundary in
    ``a`` of the decision ``min zeta(., a - beta) >= 0`` (tolerance 1e-6),
    which already carries the ``beta`` allowance. At ``Gammabar = Gamma`` it
    is the conventional normal tail with nothing added.
    """
    oriented, spec = _prepare(sample, budget, spec)
    if is_saturated(budget, spec):
        p, *_ = conventional_pvalue(oriented, budget.gamma, budget.side)
        return p
    return _extended_pvalue(oriented, budget, spec)


def analyze(sample: PairedSample, budget: SensitivityBudget, spec) -> AnalysisResult:
    """Decision, worst-case p-value and diagnostics in one call."""
    return reject(sample, budget, spec, pvalue=True)
