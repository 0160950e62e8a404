"""Monte Carlo level and power studies for the extended analysis.

Each replicate draws ``I`` pairs. The maximal assignment probability of a
pair is 1/2 with probability ``p_mix`` and ``Gamma/(1+Gamma)`` otherwise,
with ``p_mix`` chosen so that its expectation is ``Gammabar/(1+Gammabar)``.
Which unit carries the larger probability is a fair coin. Outcomes follow
one of two models:

``unbiased``
    the treated-minus-control difference is ``tau + eps``;
``biased``
    the control outcomes differ by ``|eps|`` in favour of the unit more
    likely to be treated, so the treated-minus-control difference is
    ``tau + |eps|`` when that unit is treated and ``tau - |eps|`` otherwise.

Every replicate owns a counter-based random stream keyed by
``(seed, replicate)``. Tables are therefore identical for any number of
workers.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import ValidationError
from .paired_data import PairedSample, pairs_from_differences, build_scores
from .qp import critical_value, solve_batch
from .uncertainty_sets import SensitivityBudget, UncertaintySetSpec, gamma_to_prob, maximize_mean_bound

MODELS = ("unbiased", "biased")
GRID_GAMMAS = (1.0, 1.1, 1.25, 1.5, 2.0)
GRID_GAMMABARS = (1.0, 1.05, 1.1, 1.15, 1.2, 1.25, 1.3, 1.35, 1.4, 1.45, 1.5, 1.6, 1.7, 1.8, 1.9, 2.0)
_EPS_SHIFT = 2.0 ** -54


def reference_grid() -> list[tuple[float, float]]:
    """All ``(Gamma, Gammabar)`` cells with ``Gammabar <= Gamma`` on the reference grid."""
    return [(g, gb) for gb in GRID_GAMMABARS for g in GRID_GAMMAS if gb <= g + 1e-12]


def _table(rows: dict) -> dict:
    out = {}
    for gb, vals in rows.items():
        cols = [g for g in GRID_GAMMAS if gb <= g + 1e-12]
        for g, v in zip(cols, vals):
            out[(g, gb)] = v
    return out


# Reference rejection rates, keyed by (Gamma, Gammabar).
REFERENCE_TABLES = {
    "type1_biased": _table({
        1.0: (.047, .047, .045, .046, .044), 1.05: (.022, .011, .007, .005), 1.1: (.032, .010, .004, .003),
        1.15: (.012, .002, .002), 1.2: (.017, .004, .001), 1.25: (.025, .004, .001),
        1.3: (.006, .000), 1.35: (.009, .001), 1.4: (.011, .001), 1.45: (.014, .001), 1.5: (.025, .001),
        1.6: (.003,), 1.7: (.004,), 1.8: (.006,), 1.9: (.011,), 2.0: (.021,),
    }),
    "type1_unbiased": _table({
        1.0: (.049, .044, .042, .050, .045), 1.05: (.018, .010, .008, .004), 1.1: (.016, .007, .002, .001),
        1.15: (.005, .000, .000), 1.2: (.003, .000, .000), 1.25: (.004, .001, .000),
        1.3: (.000, .000), 1.35: (.000, .000), 1.4: (.001, .000), 1.45: (.000, .000), 1.5: (.000, .000),
        1.6: (.000,), 1.7: (.000,), 1.8: (.000,), 1.9: (.000,), 2.0: (.000,),
    }),
    "power_0.5": _table({
        1.0: (.998, .999, .998, .999, .999), 1.05: (.994, .990, .984, .978), 1.1: (.996, .984, .965, .941),
        1.15: (.977, .947, .896), 1.2: (.978, .928, .833), 1.25: (.979, .907, .759),
        1.3: (.890, .719), 1.35: (.884, .664), 1.4: (.879, .626), 1.45: (.874, .578), 1.5: (.882, .541),
        1.6: (.505,), 1.7: (.478,), 1.8: (.463,), 1.9: (.472,), 2.0: (.486,),
    }),
    "power_0.25": _table({
        1.0: (.694, .677, .677, .694, .683), 1.05: (.544, .462, .391, .338), 1.1: (.528, .363, .282, .188),
        1.15: (.340, .202, .123), 1.2: (.322, .160, .072), 1.25: (.333, .132, .046),
        1.3: (.121, .031), 1.35: (.111, .024), 1.4: (.110, .019), 1.45: (.107, .017), 1.5: (.119, .015),
        1.6: (.012,), 1.7: (.006,), 1.8: (.009,), 1.9: (.008,), 2.0: (.010,),
    }),
}
# outcome model and effect behind each reference table
REFERENCE_DESIGNS = {
    "type1_biased": ("biased", 0.0),
    "type1_unbiased": ("unbiased", 0.0),
    "power_0.5": ("unbiased", 0.5),
    "power_0.25": ("unbiased", 0.25),
}


def p_mix(gamma: float, gammabar: float) -> float:
    """Probability of a bias-free pair making ``E[Pi*] = Gammabar/(1+Gammabar)``."""
    if not 1 <= gammabar <= gamma:
        raise ValidationError("need 1 <= Gammabar <= Gamma")
    if gamma == 1:
        return 0.0
    if math.isinf(gamma):
        raise ValidationError("the two-point mixture needs a finite Gamma")
    return 2.0 * (gamma - gammabar) / ((gamma - 1.0) * (gammabar + 1.0))


@dataclass(frozen=True)
class SimDesign:
    I: int = 100  # noqa: E741
    n_sim: int = 5000
    tau: float = 0.0
    gamma: float = 1.0
    gammabar: float = 1.0
    outcome_model: str = "unbiased"
    alpha: float = 0.05
    beta: float | None = None
    seed: int = 0
    side: str = "two_sided"

    def __post_init__(self):
        if self.outcome_model not in MODELS:
            raise ValidationError(f"outcome model must be one of {MODELS}")
        if self.I < 1 or self.n_sim < 1:
            raise ValidationError("I and n_sim must be positive")
        p_mix(self.gamma, self.gammabar)
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValidationError("seed must be a 64-bit unsigned integer")

    @property
    def p_mix(self) -> float:
        return p_mix(self.gamma, self.gammabar)

    def budget(self) -> SensitivityBudget:
        return SensitivityBudget(self.gamma, self.gammabar, self.alpha, self.beta, self.side)


def replicate_stream(seed: int, rep: int) -> np.random.Generator:
    """Independent counter-based stream for replicate ``rep``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(rep)])))


def _uniforms(seed: int, n_sim: int, I: int) -> np.ndarray:  # noqa: E741
    out = np.empty((n_sim, 4, I))
    for rep in range(n_sim):
        out[rep] = replicate_stream(seed, rep).random((4, I))
    return out


def _differences(U: np.ndarray, design: SimDesign) -> tuple[np.ndarray, np.ndarray]:
    """Treated-minus-control differences and first-unit probabilities from uniforms.

    ``U`` has shape ``(..., 4, I)``: rows are the mixture draw, the
    orientation coin, the treatment draw and the noise.
    """
    u_top = gamma_to_prob(design.gamma)
    pistar = np.where(U[..., 0, :] < design.p_mix, 0.5, u_top)
    pi = np.where(U[..., 1, :] < 0.5, pistar, 1.0 - pistar)
    z1 = U[..., 2, :] < pi
    eps = ndtri(U[..., 3, :] + _EPS_SHIFT)
    if design.outcome_model == "unbiased":
        delta = eps
    else:
        delta = np.where(pi > 1.0 - pi, 1.0, -1.0) * np.abs(eps)
    sign = np.where(z1, 1.0, -1.0)
    return design.tau + sign * delta, pi


def draw_replicate(design: SimDesign, stream: np.random.Generator) -> PairedSample:
    """One simulated study as a difference-in-means score array."""
    U = stream.random((4, design.I))
    y, _ = _differences(U, design)
    return build_scores(pairs_from_differences(y), statistic="difference_in_means")


def batch_decisions(Y: np.ndarray, budget: SensitivityBudget, spec: str = "clt") -> np.ndarray:
    """Extended-analysis decisions for many difference-in-means samples at once.

    ``Y`` has one row of treated-minus-control differences per replicate.
    Scores are scaled by ``I``, which changes no decision. Once oriented,
    pair ``i`` has gap ``2|y_i|`` and lower score ``-|y_i|``, so the
    residual at ``pi = 1/2`` is the (signed) sum of the differences. The
    alternative is taken from ``budget.side``; a two-sided test looks in
    the direction of the observed sum.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    m, I = Y.shape  # noqa: E741
    sp = UncertaintySetSpec(spec, I)
    absY = np.abs(Y)
    t = Y.sum(axis=1)
    if budget.side == "less":
        t = -t
    elif budget.side == "two_sided":
        t = np.abs(t)
    u = budget.upper
    _, bound = maximize_mean_bound(sp, budget)
    if budget.conventional or bound >= u:
        ex = (2.0 * u - 1.0) * absY.sum(axis=1)
        var = 4.0 * u * (1.0 - u) * (Y ** 2).sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            dev = np.where(var > 0, (t - ex) / np.sqrt(np.where(var > 0, var, 1.0)),
                           np.where(t > ex, np.inf, -np.inf))
        p = ndtr(-dev)
        if budget.side == "two_sided":
            p = np.minimum(1.0, 2.0 * p)
        return p <= budget.alpha

    crit = critical_value(budget.alpha - budget.beta, budget.side)
    out = np.zeros(m, dtype=bool)
    live = np.flatnonzero(t > 0)  # otherwise the orientation guard fails everywhere
    if len(live) == 0:
        return out
    D = 2.0 * absY[live]
    kappa = t[live]
    n_zero = (D == 0).sum(axis=1)
    P, _ = solve_batch(D, kappa, crit, u, I * bound - 0.5 * n_zero)
    resid = kappa - np.sum(D * (P - 0.5), axis=1)
    zeta = resid ** 2 - crit * np.sum(D ** 2 * P * (1.0 - P), axis=1)
    out[live] = (zeta >= 0) & (resid > 0)
    return out


@dataclass
class SimTable:
    """Rejection rates keyed by ``(Gamma, Gammabar)``."""

    rates: dict
    n_sim: int
    I: int  # noqa: E741
    tau: float
    outcome_model: str
    alpha: float
    beta: float
    seed: int
    spec: str = "clt"
    side: str = "two_sided"
    meta: dict = field(default_factory=dict)

    def mc_se(self, p: float | None = None) -> float:
        p = self.alpha if p is None else p
        return math.sqrt(p * (1 - p) / self.n_sim)


def run_cell(design: SimDesign, spec: str = "clt", uniforms: np.ndarray | None = None,
             chunk: int = 1000) -> float:
    """Rejection rate of the extended analysis for one design."""
    U = _uniforms(design.seed, design.n_sim, design.I) if uniforms is None else uniforms
    budget = design.budget()
    hits = 0
    for s in range(0, design.n_sim, chunk):
        Y, _ = _differences(U[s:s + chunk], design)
        hits += int(batch_decisions(Y, budget, spec).sum())
    return hits / design.n_sim


def run_table(grid=None, I: int = 100, n_sim: int = 5000, tau: float = 0.0,  # noqa: E741
              outcome_model: str = "unbiased", alpha: float = 0.05, beta: float | None = None,
              seed: int = 0, spec: str = "clt", threads: int = 1,
              side: str = "two_sided") -> SimTable:
    """Rejection rates over a grid of ``(Gamma, Gammabar)`` cells.

    The data in each cell are generated at, and analysed with, that cell's
    ``(Gamma, Gammabar)``. All cells share the replicate streams, and each
    cell is computed independently, so the result does not depend on
    ``threads``.

    The default two-sided alternative is the one under which the reference
    level and power tables are reproduced; ``side="greater"`` gives the
    one-sided analysis.
    """
    grid = reference_grid() if grid is None else [(float(g), float(gb)) for g, gb in grid]
    base = SimDesign(I=I, n_sim=n_sim, tau=tau, outcome_model=outcome_model,
                     alpha=alpha, beta=beta, seed=seed, side=side)
    U = _uniforms(seed, n_sim, I)

    def cell(gg):
        return run_cell(replace(base, gamma=gg[0], gammabar=gg[1]), spec, U)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            vals = list(ex.map(cell, grid))
    else:
        vals = [cell(gg) for gg in grid]
    return SimTable(dict(zip(grid, vals)), n_sim, I, tau, outcome_model, alpha,
                    base.budget().beta, seed, spec, side)


def mixture_coverage(gamma: float, gammabar: float, spec: str, I: int = 100, n_rep: int = 10_000,  # noqa: E741
                     beta: float = 0.005, seed: int = 0) -> float:
    """Fraction of replicates whose average ``Pi*`` exceeds the uncertainty bound.

    ``Pi*`` follows the two-point mixture with mean ``Gammabar/(1+Gammabar)``.
    """
    budget = SensitivityBudget(gamma, gammabar, alpha=min(0.99, 10 * beta), beta=beta)
    from .uncertainty_sets import mean_upper_bound

    bound = mean_upper_bound(UncertaintySetSpec(spec, I), budget, budget.mean_cap)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0xC0FE])))
    top = gamma_to_prob(gamma)
    pm = p_mix(gamma, gammabar)
    draws = np.where(rng.random((n_rep, I)) < pm, 0.5, top)
    return float(np.mean(draws.mean(axis=1) > bound))


# ----------------------------------------------------------------------
# CSV in the reference layout: rows Gammabar, columns Gamma
# ----------------------------------------------------------------------

def write_table_csv(path: str | Path, table: SimTable) -> None:
    gammas = sorted({g for g, _ in table.rates})
    gbs = sorted({gb for _, gb in table.rates})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["gammabar"] + [f"{g:g}" for g in gammas])
        for gb in gbs:
            row = [f"{gb:g}"]
            for g in gammas:
                v = table.rates.get((g, gb))
                row.append("" if v is None else repr(float(v)))
            w.writerow(row)


def read_table_csv(path: str | Path) -> dict:
    """Inverse of :func:`write_table_csv`; returns ``{(Gamma, Gammabar): rate}``."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "gammabar":
        raise ValidationError("not a simulation table")
    gammas = [float(g) for g in rows[0][1:]]
    for row in rows[1:]:
        gb = float(row[0])
        for g, v in zip(gammas, row[1:]):
            if v != "":
                out[(g, gb)] = float(v)
    return out
