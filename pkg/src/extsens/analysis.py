"""Sensitivity values, sensitivity curves and sensitivity intervals.

* The sensitivity value is the largest ``Gamma`` at which the conventional
  analysis (``Gammabar = Gamma``) still rejects.
* The sensitivity curve traces, for each ``Gamma``, the largest
  ``Gammabar`` at which the extended analysis still rejects.
* The sensitivity interval is the smallest interval containing every
  effect size that a two-sided extended analysis fails to reject.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import BaselineWarning, BracketError, MonotonicityWarning, ValidationError
from .paired_data import HypothesisModel, PairRecord, PairedSample, adjust_scores, build_scores, orient_for_alternative
from .qp import conventional_pvalue, decide
from .uncertainty_sets import SensitivityBudget

VALUE_TOL = 1e-4
CURVE_TOL = 1e-4
INTERVAL_TOL = 1e-6
GAMMA_MAX = 1e8
SCAN_POINTS = 400


def default_gamma_grid() -> np.ndarray:
    """40 log-spaced values from 1.01 to 50, followed by infinity."""
    return np.append(np.geomspace(1.01, 50.0, 40), math.inf)


def _conventional_rejects(oriented: PairedSample, gamma: float, alpha: float, side: str) -> bool:
    p, *_ = conventional_pvalue(oriented, gamma, side)
    return p <= alpha


def sensitivity_value(sample: PairedSample, alpha: float = 0.05, beta: float | None = None,
                      spec=None, side: str = "greater", tol: float = VALUE_TOL) -> float:
    """Largest ``Gamma`` at which the conventional analysis rejects.

    ``beta`` and ``spec`` are accepted for a uniform signature; the
    conventional analysis uses neither. When the null is not rejected even
    at ``Gamma = 1`` a :class:`BaselineWarning` is issued and 1 is returned.
    """
    oriented = orient_for_alternative(sample, side)
    if not _conventional_rejects(oriented, 1.0, alpha, side):
        warnings.warn("null not rejected at Gamma = 1; sensitivity value undefined", BaselineWarning, stacklevel=2)
        return 1.0
    lo, hi = 1.0, 2.0
    while _conventional_rejects(oriented, hi, alpha, side):
        lo, hi = hi, 2.0 * hi
        if hi > GAMMA_MAX:
            return math.inf
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _conventional_rejects(oriented, mid, alpha, side):
            lo = mid
        else:
            hi = mid
    return lo


@dataclass
class SensitivityCurve:
    """Rejection frontier in ``(Gamma, Gammabar)``.

    ``points`` holds ``(Gamma, Gammabar*)`` pairs: the extended analysis
    rejects for ``Gammabar <= Gammabar*`` (up to the search tolerance) and
    retains above it. ``Gammabar*`` is NaN where nothing is rejected even at
    ``Gammabar = 1``.
    """

    points: list
    gamma_star: float
    gammabar_limit: float
    alpha: float
    beta: float
    side: str
    frame: str
    spec_kind: str
    warnings: list = field(default_factory=list)

    def as_array(self) -> np.ndarray:
        return np.array(self.points, dtype=float).reshape(-1, 2)


def _frontier(oriented: PairedSample, gamma: float, alpha, beta, side, frame, spec, tol):
    def rejects(gb):
        b = SensitivityBudget(gamma, gb, alpha=alpha, beta=beta, side=side, frame=frame)
        return decide(oriented, b, spec)

    if math.isinf(gamma):
        lo, hi = 1.0, 2.0
        if not rejects(lo):
            return math.nan, None
        while rejects(hi):
            lo, hi = hi, 2.0 * hi
            if hi > GAMMA_MAX:
                return math.inf, None
    else:
        lo, hi = 1.0, float(gamma)
        r_lo, r_hi = rejects(lo), rejects(hi)
        if r_hi:
            return hi, None
        if not r_lo:
            return math.nan, None
    # verify that the decision is monotone at a few interior points before bisecting
    probes = np.linspace(lo, hi, 6)[1:-1]
    states = [rejects(g) for g in probes]
    if any(b and not a for a, b in zip(states, states[1:])):
        return _scan(rejects, lo, hi), f"non-monotone decision in Gammabar at Gamma={gamma:g}; grid scan used"
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if rejects(mid):
            lo = mid
        else:
            hi = mid
    return lo, None


def _scan(rejects, lo, hi):
    grid = np.linspace(lo, hi, SCAN_POINTS)
    last = math.nan
    for g in grid:
        if rejects(g):
            last = float(g)
        else:
            break
    return last


def sensitivity_curve(sample: PairedSample, alpha: float = 0.05, beta: float | None = None,
                      spec="clt", gamma_grid: Sequence[float] | None = None, side: str = "greater",
                      frame: str = "superpopulation", tol: float = CURVE_TOL) -> SensitivityCurve:
    """Frontier ``Gammabar*(Gamma)`` over ``gamma_grid``.

    For ``Gamma`` at or below the sensitivity value the conventional
    analysis rejects, and so does every ``Gammabar <= Gamma``; the frontier
    is then ``Gamma`` itself. Otherwise ``Gammabar*`` is found by bisection
    after checking that the decision is monotone along the bracket; if it is
    not, a grid scan is used and a :class:`MonotonicityWarning` is issued.
    """
    grid = default_gamma_grid() if gamma_grid is None else np.asarray(gamma_grid, dtype=float)
    probe = SensitivityBudget(1.0, 1.0, alpha=alpha, beta=beta, side=side, frame=frame)
    beta = probe.beta
    oriented = orient_for_alternative(sample, side)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BaselineWarning)
        gstar = sensitivity_value(sample, alpha, side=side)
    notes = []
    if gstar <= 1.0 and not _conventional_rejects(oriented, 1.0, alpha, side):
        msg = "null not rejected at Gamma = Gammabar = 1; curve reported anyway"
        warnings.warn(msg, BaselineWarning, stacklevel=2)
        notes.append(msg)
    points = []
    for g in grid:
        if g <= gstar:
            points.append((float(g), float(g)))
            continue
        gb, note = _frontier(oriented, float(g), alpha, beta, side, frame, spec, tol)
        if note:
            warnings.warn(note, MonotonicityWarning, stacklevel=2)
            notes.append(note)
        points.append((float(g), gb))
    limit = points[-1][1] if len(grid) and math.isinf(grid[-1]) else \
        _frontier(oriented, math.inf, alpha, beta, side, frame, spec, tol)[0]
    kind = spec.kind if hasattr(spec, "kind") else str(spec)
    return SensitivityCurve(points, gstar, limit, alpha, beta, side, frame, kind, notes)


@dataclass
class SensitivityInterval:
    """Smallest interval containing the effects not rejected at ``budget``.

    For multiplicative effects the endpoints are on the log scale.
    """

    lo: float
    hi: float
    budget: SensitivityBudget
    effect: str
    estimate: float

    def contains(self, other: "SensitivityInterval", tol: float = 0.0) -> bool:
        return self.lo <= other.lo + tol and other.hi <= self.hi + tol


def _hypothesis(effect: str, value: float) -> HypothesisModel:
    if effect == "additive":
        return HypothesisModel.additive(value)
    if effect == "multiplicative":
        return HypothesisModel.multiplicative_log(value)
    raise ValidationError(f"unknown effect model {effect!r}")


def sensitivity_interval(
    data: Sequence[PairRecord],
    statistic: str = "difference_in_means",
    budget: SensitivityBudget | None = None,
    spec="clt",
    tau_bracket: tuple[float, float] | None = None,
    effect: str = "additive",
    x_s: np.ndarray | None = None,
    tol: float = INTERVAL_TOL,
    max_expand: int = 60,
) -> SensitivityInterval:
    """Invert a two-sided extended analysis over the effect size.

    Each candidate ``tau`` (``log tau`` for multiplicative effects) rebuilds
    the scores under the corresponding hypothesis, optionally adjusts them
    for ``x_s``, and is tested two-sided at ``budget.alpha``. The search
    starts at the effect where the statistic equals its fair-coin mean,
    steps outwards until both sides reject (doubling the step each time),
    and bisects each endpoint to ``tol``.
    """
    budget = budget or SensitivityBudget(1.0, 1.0)
    if budget.side != "two_sided":
        budget = SensitivityBudget(budget.gamma, budget.gammabar, budget.alpha,
                                   None if budget.frame == "study_population" else budget.beta,
                                   "two_sided", budget.frame)

    def scores(v):
        s = build_scores(data, _hypothesis(effect, v), statistic)
        return adjust_scores(s, x_s) if x_s is not None else s

    def centred(v):
        s = scores(v)
        return s.t_obs - s.null_mean

    def rejects(v):
        return decide(scores(v), budget, spec)

    scale = _natural_scale(data, effect)
    if tau_bracket is not None:
        a, b = map(float, tau_bracket)
        if effect == "multiplicative":
            if a <= 0 or b <= 0:
                raise ValidationError("multiplicative bracket must be positive")
            a, b = math.log(a), math.log(b)
    else:
        a, b = -scale, scale
    centre = _find_centre(centred, a, b, scale, max_expand)

    def endpoint(direction):
        step = scale
        inner = centre
        if rejects(centre):
            raise BracketError("the central effect is itself rejected; acceptance set is empty")
        for _ in range(max_expand):
            outer = centre + direction * step
            if rejects(outer):
                break
            inner = outer
            step *= 2.0
        else:
            raise BracketError("could not find a rejected effect on one side; widen the bracket")
        while abs(outer - inner) > tol:
            mid = 0.5 * (inner + outer)
            if rejects(mid):
                outer = mid
            else:
                inner = mid
        return 0.5 * (inner + outer)

    return SensitivityInterval(endpoint(-1.0), endpoint(1.0), budget, effect, centre)


def _natural_scale(data, effect) -> float:
    r = np.array([p.r for p in data], dtype=float)
    z = np.array([p.z for p in data], dtype=int)
    if effect == "multiplicative":
        if np.any(r <= 0):
            raise ValidationError("multiplicative effects need positive responses")
        r = np.log(r)
    diff = np.sum(r * z, axis=1) - np.sum(r * (1 - z), axis=1)
    s = float(np.std(diff)) if len(diff) > 1 else 0.0
    return max(s, float(np.max(np.abs(diff))) * 0.1, 1e-3)


def _find_centre(centred, a, b, scale, max_expand):
    """Effect at which the statistic crosses its fair-coin mean.

    The centred statistic is nonincreasing in the effect, so the bracket is
    widened until it changes sign and the crossing is then located.
    """
    fa, fb = centred(a), centred(b)
    for _ in range(max_expand):
        if fa >= 0 >= fb:
            break
        w = b - a
        if fa < 0:
            a -= w
            fa = centred(a)
        if fb > 0:
            b += w
            fb = centred(b)
    else:
        raise BracketError("statistic does not cross its null mean inside the search range")
    if fa == 0:
        return a
    if fb == 0:
        return b
    # the rank statistic is a step function; bisect on the sign directly
    while b - a > INTERVAL_TOL * max(1.0, scale):
        m = 0.5 * (a + b)
        if centred(m) > 0:
            a = m
        else:
            b = m
    return 0.5 * (a + b)
