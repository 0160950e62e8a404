"""Exact worst-case analysis for McNemar's statistic.

With binary outcomes only the outcome-discordant pairs move McNemar's
statistic. Under the typical-bias constraint the worst case puts every
concordant pair at 1/2 and spreads the remaining budget evenly over the
discordant pairs, so the worst-case null distribution is binomial and the
tail probability can be computed exactly.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import OptimalityFallbackWarning, ValidationError
from .paired_data import PairRecord, PairedSample
from .uncertainty_sets import (
    SensitivityBudget,
    UncertaintySetSpec,
    as_spec,
    gamma_to_prob,
    maximize_mean_bound,
)

EXACT_KINDS = ("hoeffding", "bennett", "sample")
CROSSOVER_TOL = 1e-8


@dataclass(frozen=True)
class McNemarSummary:
    """Counts behind McNemar's statistic.

    ``t_obs`` counts discordant pairs in which the treated unit has the
    positive outcome.
    """

    I_d: int
    I_c: int
    t_obs: int

    def __post_init__(self):
        for name in ("I_d", "I_c", "t_obs"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValidationError(f"{name} must be a nonnegative integer, got {v}")
            object.__setattr__(self, name, int(v))
        if self.t_obs > self.I_d:
            raise ValidationError("t_obs cannot exceed the number of discordant pairs")
        if self.I == 0:
            raise ValidationError("no pairs")

    @property
    def I(self) -> int:  # noqa: E743
        return self.I_d + self.I_c


def mcnemar_summary(data: Sequence[PairRecord] | PairedSample) -> McNemarSummary:
    """Tally discordant pairs and treated-positive discordant pairs."""
    if isinstance(data, PairedSample):
        if data.statistic != "mcnemar":
            raise ValidationError("sample was not built with McNemar scores")
        q, z = data.q, data.z
        disc = q.sum(axis=1) > 0
        t = int(round(float(np.sum(q * z))))
        return McNemarSummary(int(disc.sum()), int((~disc).sum()), t)
    r = np.array([p.r for p in data], dtype=float)
    z = np.array([p.z for p in data], dtype=int)
    if not np.all((r == 0) | (r == 1)):
        raise ValidationError("McNemar's statistic needs binary (0/1) responses")
    disc = r[:, 0] != r[:, 1]
    treated = np.sum(r * z, axis=1)
    return McNemarSummary(int(disc.sum()), int((~disc).sum()), int(np.sum(disc & (treated == 1))))


def binom_tail(n: int, p: float, k: int) -> float:
    """``P(Binomial(n, p) >= k)``, summed in log space."""
    if k <= 0:
        return 1.0
    if k > n:
        return 0.0
    if p <= 0:
        return 0.0
    if p >= 1:
        return 1.0
    j = np.arange(k, n + 1)
    logpmf = (gammaln(n + 1) - gammaln(j + 1) - gammaln(n - j + 1)
              + j * math.log(p) + (n - j) * math.log1p(-p))
    return float(min(1.0, math.exp(logsumexp(logpmf))))


def discordant_bound(summary: McNemarSummary, budget: SensitivityBudget,
                     spec: UncertaintySetSpec | str) -> tuple[float, float, float]:
    """Return ``(mu*, pi_m, pi_d)``: the mean maximiser, its bound, and the
    per-discordant-pair probability after concordant pairs take 1/2 each."""
    spec = as_spec(spec, summary.I)
    mu, pi_m = maximize_mean_bound(spec, budget)
    if summary.I_d == 0:
        return mu, pi_m, 0.5
    pi_d = (summary.I * pi_m - summary.I_c / 2.0) / summary.I_d
    return mu, pi_m, min(max(pi_d, 0.5), budget.upper)


@dataclass
class McNemarResult:
    p_value: float
    pi_d: float
    pi_m: float
    exact: bool
    conventional: bool
    fallback: bool = False
    notes: list = field(default_factory=list)


def mcnemar_analysis(summary: McNemarSummary, budget: SensitivityBudget,
                     spec: UncertaintySetSpec | str = "bennett") -> McNemarResult:
    """Worst-case p-value for McNemar's statistic with the supporting numbers.

    The binomial bound needs ``t_obs >= I_d * pi_d``; when that fails the
    normal-approximation program is used instead and a warning is issued.
    """
    if budget.side != "greater":
        raise ValidationError("the exact McNemar path covers the 'greater' alternative only")
    spec = as_spec(spec, summary.I)
    spec.check_frame(budget)
    notes = []
    if spec.kind not in EXACT_KINDS:
        notes.append("clt uncertainty set: the bound is valid only in large samples")
    u = budget.upper
    if summary.I_d == 0:
        return McNemarResult(1.0, 0.5, 0.5, True, budget.conventional, notes=notes)
    if budget.conventional:
        p = binom_tail(summary.I_d, u, summary.t_obs)
        return McNemarResult(p, u, u, True, True, notes=notes)

    _, pi_m, pi_d = discordant_bound(summary, budget, spec)
    if pi_d >= u:
        # the typical-bias bound cannot bind: the conventional bound is valid
        # with no beta allowance and dominates
        p = binom_tail(summary.I_d, u, summary.t_obs)
        notes.append("typical-bias bound saturated; conventional bound reported")
        return McNemarResult(p, u, pi_m, True, True, notes=notes)

    if summary.t_obs < summary.I_d * pi_d:
        msg = (f"t_obs = {summary.t_obs} is below I_d * pi_d = {summary.I_d * pi_d:.4g}; "
               "the binomial worst case is not guaranteed, using the quadratic program")
        warnings.warn(msg, OptimalityFallbackWarning, stacklevel=2)
        from .qp import worst_case_pvalue

        sample = summary_to_sample(summary)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            p = worst_case_pvalue(sample, budget, spec)
        notes.append("fallback: " + msg)
        return McNemarResult(p, pi_d, pi_m, False, False, fallback=True, notes=notes)

    tail = binom_tail(summary.I_d, pi_d, summary.t_obs)
    return McNemarResult(min(1.0, tail + budget.beta), pi_d, pi_m, True, False, notes=notes)


def mcnemar_pvalue(summary: McNemarSummary, budget: SensitivityBudget,
                   spec: UncertaintySetSpec | str = "bennett") -> float:
    """Exact worst-case p-value for McNemar's statistic."""
    return mcnemar_analysis(summary, budget, spec).p_value


def summary_to_sample(summary: McNemarSummary) -> PairedSample:
    """An oriented McNemar score array reproducing ``summary``.

    The outcome-positive unit of each discordant pair comes first; it is
    the treated unit in the first ``t_obs`` pairs only.
    """
    q = np.zeros((summary.I, 2))
    z = np.zeros((summary.I, 2), dtype=int)
    z[:, 0] = 1
    q[: summary.I_d, 0] = 1.0
    z[summary.t_obs: summary.I_d] = (0, 1)
    return PairedSample(q=q, z=z, statistic="mcnemar", oriented="greater")


def crossover_gammabar(I_d: int, I_c: int, gamma: float, spec: str = "bennett",
                       beta: float = 0.005, frame: str = "superpopulation",
                       alpha: float | None = None) -> float:
    """Smallest ``Gammabar`` at which the discordant-pair probability reaches
    ``Gamma/(1+Gamma)``.

    Beyond this point the extended analysis has nothing to gain over the
    conventional one, which also avoids the ``beta`` allowance.
    """
    if I_d < 1:
        raise ValidationError("need at least one discordant pair")
    if gamma == 1:
        return 1.0
    alpha = alpha if alpha is not None else min(0.99, max(0.05, 2 * beta))
    summary = McNemarSummary(I_d, I_c, 0)
    kind = spec.kind if isinstance(spec, UncertaintySetSpec) else spec
    u = gamma_to_prob(gamma)

    def saturated(gb: float) -> bool:
        b = SensitivityBudget(gamma, gb, alpha=alpha, beta=beta, frame=frame)
        _, pi_m, _ = discordant_bound(summary, b, kind)
        return (summary.I * pi_m - I_c / 2.0) / I_d >= u

    if saturated(1.0):
        return 1.0
    if math.isinf(gamma):
        # search on the probability scale, then map back to odds
        lo, hi = 0.5, 1.0
        while hi - lo > 1e-15:
            m = 0.5 * (lo + hi)
            gb = m / (1 - m)
            if saturated(gb):
                hi = m
            else:
                lo = m
        return math.inf if hi >= 1.0 else hi / (1 - hi)
    lo, hi = 1.0, float(gamma)
    while hi - lo > CROSSOVER_TOL:
        m = 0.5 * (lo + hi)
        if saturated(m):
            hi = m
        else:
            lo = m
    return hi
