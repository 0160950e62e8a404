"""Upper confidence bounds for the average maximal assignment probability.

The typical-bias parameter ``gammabar`` bounds the *expected* maximal
assignment probability ``mu``. The realised average over the study's pairs
can exceed ``mu``, so the worst-case search allows the average to reach an
upper bound that holds with probability ``1 - beta``. Four choices are
offered:

``clt``
    normal approximation with the Bhatia-Davis variance bound,
``hoeffding``
    Hoeffding's inequality for variables in ``[1/2, Gamma/(1+Gamma)]``,
``bennett``
    Bennett's inequality with the Bhatia-Davis variance bound,
``sample``
    no slack at all (the bound applies to the study pairs themselves).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtri

from .errors import ValidationError

KINDS = ("clt", "hoeffding", "bennett", "sample")
SIDES = ("greater", "less", "two_sided")
FRAMES = ("superpopulation", "study_population")

_SIDE_ALIASES = {"greater": "greater", "less": "less", "two": "two_sided",
                 "two_sided": "two_sided", "two-sided": "two_sided"}
_FRAME_ALIASES = {"super": "superpopulation", "superpopulation": "superpopulation",
                  "sample": "study_population", "study_population": "study_population",
                  "study-population": "study_population"}

MU_TOL = 1e-10
BENNETT_ATOL = 1e-15


def gamma_to_prob(gamma: float) -> float:
    """Largest within-pair assignment probability allowed by ``gamma``."""
    if math.isnan(gamma) or gamma < 1:
        raise ValidationError(f"Gamma must be >= 1, got {gamma}")
    if math.isinf(gamma):
        return 1.0
    return gamma / (1.0 + gamma)


def prob_to_gamma(p: float) -> float:
    """Inverse of :func:`gamma_to_prob` (the odds ``p / (1 - p)``)."""
    if p >= 1:
        return math.inf
    return p / (1.0 - p)


@dataclass(frozen=True)
class SensitivityBudget:
    """Sensitivity parameters and test settings for one analysis.

    ``beta`` defaults to ``alpha / 10``. In the study-population frame the
    bound on typical bias applies to the pairs at hand, so ``beta`` is
    forced to zero.
    """

    gamma: float
    gammabar: float
    alpha: float = 0.05
    beta: float | None = None
    side: str = "greater"
    frame: str = "superpopulation"

    def __post_init__(self):
        gamma, gammabar = float(self.gamma), float(self.gammabar)
        if not gamma >= 1:
            raise ValidationError(f"Gamma must be >= 1, got {gamma}")
        if not 1 <= gammabar <= gamma:
            raise ValidationError(f"need 1 <= Gammabar <= Gamma, got Gammabar={gammabar}, Gamma={gamma}")
        side = _SIDE_ALIASES.get(self.side)
        frame = _FRAME_ALIASES.get(self.frame)
        if side is None:
            raise ValidationError(f"unknown side {self.side!r}")
        if frame is None:
            raise ValidationError(f"unknown frame {self.frame!r}")
        alpha = float(self.alpha)
        if frame == "study_population":
            beta = 0.0
        else:
            beta = alpha / 10 if self.beta is None else float(self.beta)
            if not 0 < beta <= 0.5:
                raise ValidationError(f"beta must lie in (0, 0.5], got {beta}")
        if not beta < alpha < 1:
            raise ValidationError(f"need beta < alpha < 1, got alpha={alpha}, beta={beta}")
        for name, val in (("gamma", gamma), ("gammabar", gammabar), ("alpha", alpha),
                          ("beta", beta), ("side", side), ("frame", frame)):
            object.__setattr__(self, name, val)

    @property
    def upper(self) -> float:
        return gamma_to_prob(self.gamma)

    @property
    def mean_cap(self) -> float:
        return gamma_to_prob(self.gammabar)

    @property
    def conventional(self) -> bool:
        return self.gammabar == self.gamma


@dataclass(frozen=True)
class UncertaintySetSpec:
    kind: str
    I: int  # noqa: E741

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown uncertainty set {self.kind!r}; expected one of {KINDS}")
        if int(self.I) < 1:
            raise ValidationError("number of pairs must be positive")
        object.__setattr__(self, "I", int(self.I))

    def check_frame(self, budget: SensitivityBudget) -> None:
        if budget.frame == "study_population" and self.kind != "sample":
            raise ValidationError("the study-population frame only admits the 'sample' set")


def as_spec(spec: UncertaintySetSpec | str, I: int) -> UncertaintySetSpec:  # noqa: E741
    if isinstance(spec, UncertaintySetSpec):
        if spec.I != I:
            raise ValidationError(f"uncertainty set built for I={spec.I}, sample has I={I}")
        return spec
    return UncertaintySetSpec(spec, I)


def variance_bound(gamma: float, mu: float) -> float:
    """Bhatia-Davis bound on the variance of a variable in ``[1/2, Gamma/(1+Gamma)]``."""
    top = gamma_to_prob(gamma)
    if mu < 0.5 - MU_TOL or mu > top + MU_TOL:
        raise ValidationError(f"mean {mu} outside [1/2, {top}]")
    return max(0.0, (top - mu) * (mu - 0.5))


def _h(x: float) -> float:
    return (1.0 + x) * math.log1p(x) - x


def bennett_slack(nu2: float, width: float, n: int, beta: float) -> float:
    """Deviation ``a`` with ``exp(-n nu2/width^2 h(a width/nu2)) = beta``."""
    if nu2 <= 0 or width <= 0:
        return 0.0
    target = math.log(1.0 / beta) * width * width / (n * nu2)
    # h is increasing on [0, inf); bracket the root by doubling
    hi = 1.0
    while _h(hi) < target:
        hi *= 2.0
    x = brentq(lambda s: _h(s) - target, 0.0, hi, xtol=BENNETT_ATOL, rtol=1e-15, maxiter=500)
    return x * nu2 / width


def _bennett_slope(nu2: float, width: float, n: int, beta: float) -> float:
    """d(slack)/d(nu2), by implicit differentiation of the Bennett equation."""
    if nu2 <= 0:
        return math.inf
    a = bennett_slack(nu2, width, n, beta)
    x = a * width / nu2
    if x <= 0:
        return 0.0
    lx = math.log1p(x)
    return (x - lx) / (width * lx)


def mean_upper_bound(spec: UncertaintySetSpec, budget: SensitivityBudget, mu: float) -> float:
    """Upper end of the ``1 - beta`` set for the average of ``Pi*`` given its mean ``mu``."""
    top = budget.upper
    if mu < 0.5 - MU_TOL or mu > budget.mean_cap + MU_TOL:
        raise ValidationError(f"mean {mu} outside [1/2, {budget.mean_cap}]")
    mu = min(max(mu, 0.5), budget.mean_cap)
    width = top - 0.5
    n = spec.I
    if spec.kind == "sample" or width == 0:
        return mu
    beta = budget.beta
    if spec.kind == "clt":
        slack = ndtri(1.0 - beta) * math.sqrt(variance_bound(budget.gamma, mu) / n)
    elif spec.kind == "hoeffding":
        slack = width * math.sqrt(math.log(1.0 / beta) / (2.0 * n))
    else:
        slack = bennett_slack(variance_bound(budget.gamma, mu), width, n, beta)
    return min(top, mu + slack)


def _bound_slope(spec: UncertaintySetSpec, budget: SensitivityBudget, mu: float) -> float:
    """Derivative of the unclipped bound with respect to ``mu``."""
    top = budget.upper
    dnu2 = top + 0.5 - 2.0 * mu
    nu2 = variance_bound(budget.gamma, mu)
    if spec.kind == "clt":
        if nu2 <= 0:
            return -math.inf if dnu2 < 0 else math.inf
        k = ndtri(1.0 - budget.beta) / math.sqrt(spec.I)
        return 1.0 + k * dnu2 / (2.0 * math.sqrt(nu2))
    slope = _bennett_slope(nu2, top - 0.5, spec.I, budget.beta)
    if math.isinf(slope):
        return -math.inf if dnu2 < 0 else math.inf
    return 1.0 + slope * dnu2


def maximize_mean_bound(spec: UncertaintySetSpec, budget: SensitivityBudget) -> tuple[float, float]:
    """Mean ``mu* <= Gammabar/(1+Gammabar)`` maximising :func:`mean_upper_bound`.

    Returns ``(mu*, bound at mu*)``. Below the midpoint of
    ``[1/2, Gamma/(1+Gamma)]`` the bound increases with ``mu``; above it the
    clt and bennett bounds can turn down, and the maximiser is located by
    bisection on the sign of the derivative.
    """
    spec.check_frame(budget)
    top = budget.upper
    cap = budget.mean_cap
    mid = (top + 0.5) / 2.0
    if spec.kind in ("sample", "hoeffding") or top == 0.5 or cap < mid:
        return cap, mean_upper_bound(spec, budget, cap)
    if _bound_slope(spec, budget, cap) >= 0:
        mu = cap
    else:
        lo, hi = mid, cap
        while hi - lo > MU_TOL:
            m = 0.5 * (lo + hi)
            if _bound_slope(spec, budget, m) > 0:
                lo = m
            else:
                hi = m
        mu = 0.5 * (lo + hi)
    val = mean_upper_bound(spec, budget, mu)
    end = mean_upper_bound(spec, budget, cap)
    # on a tie (both clipped at the top) the interior stationary point is kept
    if end > val:
        return cap, end
    return mu, val


def normal_quantile(p):
    """Standard normal quantile (vectorised)."""
    return ndtri(np.asarray(p, dtype=float)) if np.ndim(p) else float(ndtri(p))
