"""Brute-force references for the optimised code paths.

Two references are provided. :func:`exact_tail` sums the tail of ``Z^T q``
over every one of the ``2^I`` treatment assignments. :func:`grid_search_min_deviate`
evaluates the worst-case objective on every point of a regular grid over
the feasible box that satisfies the budget row. Both are slow by design and
are meant for small instances only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EnumerationLimitError, ValidationError
from .paired_data import PairedSample, orient_for_alternative
from .qp import QpProblem, assemble
from .uncertainty_sets import SensitivityBudget

GRID_POINT_CAP = 5e8
_CHUNK = 4_000_000


@dataclass(frozen=True)
class EnumerationLimit:
    max_pairs: int = 16

    def check(self, I: int, what: str = "enumeration") -> None:  # noqa: E741
        if I > self.max_pairs:
            raise EnumerationLimitError(
                f"{what} over {I} pairs refused (limit {self.max_pairs}); raise max_pairs explicitly"
            )


def _half_support(q: np.ndarray, pi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values and probabilities of ``Z^T q`` over all assignments of a block."""
    vals = np.zeros(1)
    probs = np.ones(1)
    for (q1, q2), p in zip(q, pi):
        vals = np.concatenate([vals + q1, vals + q2])
        probs = np.concatenate([probs * p, probs * (1.0 - p)])
    return vals, probs


def exact_tail(sample: PairedSample, pi, a, limit: EnumerationLimit = EnumerationLimit(),
               atol: float | None = None):
    """``P(Z^T q >= a)`` when unit 1 of pair ``i`` is treated with probability ``pi[i]``.

    Every one of the ``2^I`` assignments contributes one term. The pairs are
    split into two blocks whose assignments are enumerated separately; each
    first-block assignment is then crossed with the probability that the
    second block reaches the remaining distance, read off sorted suffix
    sums. Memory stays at ``O(2^(I/2))`` and the sums are compensated, so
    the rounding error is far below ``1e-12``.

    Parameters
    ----------
    a : float or array
        Threshold(s). An array returns one tail per threshold.
    atol : float, optional
        Values within ``atol`` below a threshold count as reaching it,
        absorbing rounding in the sums. Defaults to ``1e-12`` times the
        largest attainable ``|Z^T q|``.
    """
    limit.check(sample.I)
    q = np.asarray(sample.q, dtype=float)
    pi = np.broadcast_to(np.asarray(pi, dtype=float), (sample.I,))
    if np.any(pi < 0) or np.any(pi > 1):
        raise ValidationError("probabilities must lie in [0, 1]")
    scalar = np.ndim(a) == 0
    thr = np.atleast_1d(np.asarray(a, dtype=float))
    if atol is None:
        atol = 1e-12 * max(1.0, float(np.abs(q).max(axis=1).sum()))
    order = np.argsort(thr)
    ts = thr[order] - atol

    h = sample.I // 2
    v1, p1 = _half_support(q[:h], pi[:h])
    v2, p2 = _half_support(q[h:], pi[h:])
    # P(block-2 sum >= x) for every x through sorted suffix sums, then one
    # compensated sum over the block-1 assignments per threshold
    idx = np.argsort(v2, kind="stable")
    v2s = v2[idx]
    suffix = _suffix_sums(p2[idx])
    tails = np.empty(len(ts))
    for j, t in enumerate(ts):
        k = np.searchsorted(v2s, t - v1, side="left")
        tails[j] = math.fsum(p1 * suffix[k])
    out = np.empty_like(tails)
    out[order] = tails
    return float(out[0]) if scalar else out


def _suffix_sums(w: np.ndarray) -> np.ndarray:
    """``out[k] = sum(w[k:])`` with compensated accumulation; ``out[len(w)] = 0``."""
    out = np.zeros(len(w) + 1)
    total = comp = 0.0
    for k in range(len(w) - 1, -1, -1):
        x = float(w[k])
        t = total + x
        comp += (total - t) + x if abs(total) >= abs(x) else (x - t) + total
        total = t
        out[k] = total + comp
    return out


def discretization_bound(problem: QpProblem, step: float) -> float:
    """Largest possible gap between the grid minimum and the true minimum.

    Rounding the true minimiser down to the grid keeps it feasible and moves
    each coordinate by at most ``step``, so the gap is at most ``step`` times
    the largest l1-norm of the gradient over the box.
    """
    d = problem.d
    q2 = problem.q2
    e_lo = float(np.sum(q2 + d * problem.lower))
    e_hi = float(np.sum(q2 + d * problem.upper))
    r_max = max(abs(problem.t_obs - e_lo), abs(problem.t_obs - e_hi))
    g = 2.0 * d * r_max + problem.crit * d ** 2 * (2.0 * problem.upper - 1.0)
    return float(step * g.sum())


def _block_stats(d, grid):
    """Sum of ``d p``, ``d^2 p (1 - p)`` and ``p`` over all grid points of a block."""
    a = np.zeros(1)
    v = np.zeros(1)
    s = np.zeros(1)
    for di in d:
        a = (a[:, None] + di * grid[None, :]).ravel()
        v = (v[:, None] + di * di * grid * (1 - grid)).ravel()
        s = (s[:, None] + grid[None, :]).ravel()
    return a, v, s


def _grid(lower: float, upper: float, step: float) -> np.ndarray:
    n = int(math.floor((upper - lower) / step + 1e-9))
    g = lower + step * np.arange(n + 1)
    if upper - g[-1] > 1e-12:
        g = np.append(g, upper)
    return g


def grid_search_min_deviate(
    sample: PairedSample,
    budget: SensitivityBudget,
    spec,
    step: float = 0.01,
    max_points: float = GRID_POINT_CAP,
) -> tuple[np.ndarray, float]:
    """Minimise the worst-case objective over a grid in the feasible set.

    The grid is ``{1/2, 1/2 + step, ..., Gamma/(1+Gamma)}`` in every
    coordinate (the upper end is always included). Pairs with zero gap do
    not enter the objective and sit at 1/2, which leaves the most budget for
    the others. Returns ``(pi, objective)`` for the best admissible point,
    with ``pi`` in the oriented unit order.
    """
    if not 0 < step <= 0.05:
        raise ValidationError("step must lie in (0, 0.05]")
    if sample.I > 10:
        raise EnumerationLimitError("grid search is limited to 10 pairs")
    oriented = orient_for_alternative(sample, budget.side)
    prob = assemble(oriented, budget, spec)
    grid = _grid(prob.lower, prob.upper, step)
    free = np.flatnonzero(prob.d > 0)
    n_pts = float(len(grid)) ** len(free)
    if n_pts > max_points:
        raise EnumerationLimitError(f"grid has {n_pts:.3g} points (cap {max_points:.3g})")

    pi = np.full(prob.I, 0.5)
    budget_free = prob.budget_rhs - 0.5 * (prob.I - len(free))
    kappa = prob.t_obs - float(np.sum(prob.q2))
    if len(free) == 0:
        return pi, prob.zeta(pi)

    h = len(free) // 2
    d1, d2 = prob.d[free[:h]], prob.d[free[h:]]
    a1, v1, s1 = _block_stats(d1, grid)
    a2, v2, s2 = _block_stats(d2, grid)
    tol = 1e-12 * max(1.0, abs(budget_free))
    best, arg = math.inf, None
    rows = max(1, _CHUNK // len(a2))
    for s in range(0, len(a1), rows):
        z = (kappa - a1[s:s + rows, None] - a2[None, :]) ** 2 - prob.crit * (v1[s:s + rows, None] + v2[None, :])
        z[s1[s:s + rows, None] + s2[None, :] > budget_free + tol] = math.inf
        k = int(np.argmin(z))
        if z.flat[k] < best:
            best = float(z.flat[k])
            arg = (s + k // len(a2), k % len(a2))
    if arg is None:
        raise ValidationError("no grid point satisfies the budget")
    i1 = np.unravel_index(arg[0], (len(grid),) * len(d1)) if len(d1) else ()
    i2 = np.unravel_index(arg[1], (len(grid),) * len(d2))
    pi[free[:h]] = grid[list(i1)] if len(d1) else []
    pi[free[h:]] = grid[list(i2)]
    return pi, prob.zeta(pi)
