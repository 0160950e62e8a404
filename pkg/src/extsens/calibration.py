"""Calibrating ``(Gamma, Gammabar)`` against a study that measured the confounder.

A treatment model (conditional logit with pair effects) and an outcome
model (linear with pair effects) are fitted on a calibration study in
which the putative confounder ``u`` was recorded. Combining the two gives,
for each pair, the probability that the treated unit is also the one with
the larger outcome. Its maximum and its mean, mapped to the odds scale,
estimate ``Gamma`` and ``Gammabar``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy.special import expit

from .errors import CalibrationWarning, RankDeficiencyError, SeparationError, ValidationError

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 200
RANK_RTOL = 1e-10


@dataclass(frozen=True)
class CalibrationRecord:
    """One pair of the calibration study.

    ``adj`` has one row per unit and one column per adjuster; it may have
    zero columns.
    """

    pair_id: object
    z: tuple
    y: tuple
    u: tuple
    adj: np.ndarray = field(default_factory=lambda: np.zeros((2, 0)))

    def __post_init__(self):
        z = tuple(int(v) for v in self.z)
        y = tuple(float(v) for v in self.y)
        u = tuple(float(v) for v in self.u)
        adj = np.asarray(self.adj, dtype=float).reshape(2, -1)
        if len(z) != 2 or sorted(z) != [0, 1]:
            raise ValidationError(f"pair {self.pair_id}: treatment must be discordant within the pair")
        if len(y) != 2 or not all(math.isfinite(v) for v in y):
            raise ValidationError(f"pair {self.pair_id}: outcomes must be two finite numbers")
        if len(u) != 2 or not all(math.isfinite(v) for v in u):
            raise ValidationError(f"pair {self.pair_id}: confounder must be two finite numbers")
        if not np.all(np.isfinite(adj)):
            raise ValidationError(f"pair {self.pair_id}: adjusters must be finite")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "adj", adj)

    @property
    def treated(self) -> int:
        return 0 if self.z[0] == 1 else 1

    @property
    def delta_u(self) -> float:
        """Confounder of the treated unit minus that of the control."""
        t = self.treated
        return self.u[t] - self.u[1 - t]


def _adj_columns(header: Sequence[str]) -> list[str]:
    cols = [h for h in header if h.startswith("adj_")]
    return sorted(cols, key=lambda c: int(c.split("_", 1)[1]))


def read_calibration_csv(path: str | Path) -> list[CalibrationRecord]:
    """Read the long format ``pair_id,unit,z,y,u,adj_1,...,adj_k``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in ("pair_id", "unit", "z", "y", "u"):
            if col not in header:
                raise ValidationError(f"calibration file lacks column {col!r}")
        adj_cols = _adj_columns(header)
        units: dict = {}
        order = []
        for row in reader:
            pid = row["pair_id"]
            if pid not in units:
                units[pid] = {}
                order.append(pid)
            unit = int(row["unit"])
            if unit not in (1, 2) or unit in units[pid]:
                raise ValidationError(f"pair {pid}: units must be 1 and 2, each once")
            try:
                units[pid][unit] = (
                    int(row["z"]), float(row["y"]), float(row["u"]),
                    [float(row[c]) for c in adj_cols],
                )
            except ValueError as exc:
                raise ValidationError(f"pair {pid}: {exc}") from exc
    out = []
    for pid in order:
        if set(units[pid]) != {1, 2}:
            raise ValidationError(f"pair {pid} does not have exactly two units")
        a, b = units[pid][1], units[pid][2]
        out.append(CalibrationRecord(pid, (a[0], b[0]), (a[1], b[1]), (a[2], b[2]),
                                     np.array([a[3], b[3]]).reshape(2, -1)))
    if not out:
        raise ValidationError("calibration file has no pairs")
    return out


def write_calibration_csv(path: str | Path, records: Sequence[CalibrationRecord]) -> None:
    k = records[0].adj.shape[1] if records else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["pair_id", "unit", "z", "y", "u"] + [f"adj_{j + 1}" for j in range(k)])
        for r in records:
            for unit in (0, 1):
                w.writerow([r.pair_id, unit + 1, r.z[unit], repr(r.y[unit]), repr(r.u[unit])]
                           + [repr(float(v)) for v in r.adj[unit]])


def fit_treatment_model(records: Sequence[CalibrationRecord]) -> float:
    """Conditional-likelihood estimate of the confounder's treatment coefficient.

    Within a treatment-discordant pair the pair intercept cancels and the
    treated unit is the first with probability ``expit(beta * delta_u)``.
    The log-likelihood is concave, so damped Newton steps converge to the
    maximiser whenever it is finite.
    """
    if len(records) == 0:
        raise ValidationError("no pairs")
    du = np.array([r.delta_u for r in records])
    nz = du[du != 0]
    if nz.size == 0:
        warnings.warn("no within-pair variation in the confounder; coefficient set to 0",
                      CalibrationWarning, stacklevel=2)
        return 0.0
    if np.all(nz > 0) or np.all(nz < 0):
        direction = 1 if nz[0] > 0 else -1
        raise SeparationError(
            "the treated unit always has the larger confounder value" if direction > 0
            else "the treated unit always has the smaller confounder value",
            direction,
        )

    def loglik(b):
        return float(np.sum(-np.logaddexp(0.0, -b * nz)))

    beta = 0.0
    ll = loglik(beta)
    for _ in range(NEWTON_MAX_ITER):
        p = expit(beta * nz)
        grad = float(np.sum(nz * (1.0 - p)))
        if abs(grad) <= NEWTON_TOL:
            return beta
        info = float(np.sum(nz * nz * p * (1.0 - p)))
        step = grad / info
        t = 1.0
        while True:
            cand = beta + t * step
            lc = loglik(cand)
            if lc >= ll - 1e-14 * abs(ll) or t < 1e-8:
                break
            t *= 0.5
        if cand == beta:
            return beta
        beta, ll = cand, lc
    return beta


@dataclass(frozen=True)
class OutcomeFit:
    coef: np.ndarray
    names: tuple
    sigma2: float
    rss: float
    dof: int

    @property
    def beta_u(self) -> float:
        return float(self.coef[-1])


def _differenced(records: Sequence[CalibrationRecord]):
    y = np.array([r.y for r in records])
    u = np.array([r.u for r in records])
    adj = np.stack([r.adj for r in records]) if records else np.zeros((0, 2, 0))
    X = np.concatenate([adj, u[:, :, None]], axis=2)
    return y[:, 0] - y[:, 1], X[:, 0, :] - X[:, 1, :]


def fit_outcome_model(records: Sequence[CalibrationRecord]) -> OutcomeFit:
    """Least squares on within-pair differences (pair effects drop out).

    The slope coefficients are returned in the order ``adj_1, ..., adj_k, u``.
    Unit-level errors have variance ``sigma^2`` and their within-pair
    differences ``2 sigma^2``, so ``sigma^2 = RSS / (2 (I - k))``.
    """
    dy, dX = _differenced(records)
    n, k = dX.shape
    if n <= k:
        raise ValidationError(f"need more pairs ({n}) than slope coefficients ({k})")
    Q, R, piv = scipy.linalg.qr(dX, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > RANK_RTOL * diag[0])) if diag.size and diag[0] > 0 else 0
    if rank < k:
        bad = sorted(int(c) for c in piv[rank:])
        raise RankDeficiencyError(f"differenced design columns {bad} are linearly dependent", bad)
    sol = scipy.linalg.solve_triangular(R, Q.T @ dy)
    coef = np.empty(k)
    coef[piv] = sol
    resid = dy - dX @ coef
    rss = float(resid @ resid)
    # a residual at rounding level of the response is an exact fit
    if rss <= (n * np.finfo(float).eps) ** 2 * float(dy @ dy):
        rss = 0.0
    sigma2 = rss / (2.0 * (n - k))
    if sigma2 <= 0:
        warnings.warn("outcome model fits exactly; sigma^2 = 0 is degenerate", CalibrationWarning, stacklevel=2)
    names = tuple(f"adj_{j + 1}" for j in range(k - 1)) + ("u",)
    return OutcomeFit(coef, names, sigma2, rss, n - k)


def _pi_from(beta_z: float, beta_yu: float, sigma2: float, du: np.ndarray, spread: np.ndarray) -> np.ndarray:
    a = beta_z * du
    b = (beta_yu / sigma2) * spread * du
    return expit(a) * expit(b) + expit(-a) * expit(-b)


def pairwise_bias(fit, records: Sequence[CalibrationRecord]) -> np.ndarray:
    """Per-pair maximal assignment probability implied by the fitted models.

    ``fit`` needs ``beta_z``, ``beta_yu`` and ``sigma2`` attributes. With
    ``A = beta_z du`` and ``B = (beta_yu / sigma^2)(Y_(2) - Y_(1)) du`` the
    probability is ``expit(A) expit(B) + expit(-A) expit(-B)``; it is
    reported as is when the two coefficients share a sign and as its
    complement otherwise, so that it is never below 1/2.
    """
    if not fit.sigma2 > 0:
        raise ValidationError("sigma^2 must be positive")
    du = np.array([r.delta_u for r in records])
    spread = np.array([abs(r.y[0] - r.y[1]) for r in records])
    pi = _pi_from(fit.beta_z, fit.beta_yu, fit.sigma2, du, spread)
    return pi if fit.beta_z * fit.beta_yu >= 0 else 1.0 - pi


def _check_pistar(pistar) -> np.ndarray:
    p = np.asarray(pistar, dtype=float)
    if p.size == 0 or np.any(p < 0.5 - 1e-12) or np.any(p > 1):
        raise ValidationError("maximal probabilities must lie in [1/2, 1]")
    return np.clip(p, 0.5, 1.0)


def estimate_gammas(pistar) -> tuple[float, float]:
    """Odds of the largest and of the mean maximal probability."""
    p = _check_pistar(pistar)
    top = float(p.max())
    mean = float(p.mean())
    if top >= 1.0:
        warnings.warn("a pair has maximal probability 1; Gamma estimate is infinite",
                      CalibrationWarning, stacklevel=2)
    g = math.inf if top >= 1 else top / (1 - top)
    gb = math.inf if mean >= 1 else mean / (1 - mean)
    return g, gb


def bias_odds_ratios(pistar) -> np.ndarray:
    """Odds of each maximal probability relative to the no-bias odds of 1."""
    p = _check_pistar(pistar)
    with np.errstate(divide="ignore"):
        return np.where(p < 1, p / (1 - p), np.inf)


@dataclass
class CalibrationFit:
    beta_z: float
    beta_y: np.ndarray
    beta_names: tuple
    sigma2: float
    pistar: np.ndarray
    gamma_hat: float
    gammabar_hat: float
    pair_ids: tuple = ()

    @property
    def beta_yu(self) -> float:
        return float(self.beta_y[-1])

    @property
    def odds_ratios(self) -> np.ndarray:
        return bias_odds_ratios(self.pistar)

    def to_dict(self) -> dict:
        return {
            "beta_z": self.beta_z,
            "beta_y": {n: float(v) for n, v in zip(self.beta_names, self.beta_y)},
            "sigma2": self.sigma2,
            "gamma_hat": self.gamma_hat if math.isfinite(self.gamma_hat) else None,
            "gammabar_hat": self.gammabar_hat if math.isfinite(self.gammabar_hat) else None,
        }


def calibrate(records: Sequence[CalibrationRecord]) -> CalibrationFit:
    """Fit both models and summarise the implied bias."""
    beta_z = fit_treatment_model(records)
    out = fit_outcome_model(records)
    fit = CalibrationFit(beta_z, out.coef, out.names, out.sigma2, np.array([]), math.nan, math.nan,
                         tuple(r.pair_id for r in records))
    fit.pistar = pairwise_bias(fit, records)
    fit.gamma_hat, fit.gammabar_hat = estimate_gammas(fit.pistar)
    return fit


def write_pair_bias_csv(path: str | Path, fit: CalibrationFit) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["pair_id", "pi_star", "odds_ratio"])
        for pid, p, o in zip(fit.pair_ids, fit.pistar, fit.odds_ratios):
            w.writerow([pid, repr(float(p)), repr(float(o))])


def read_pair_bias_csv(path: str | Path) -> tuple[list, np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return ([r["pair_id"] for r in rows], np.array([float(r["pi_star"]) for r in rows]),
            np.array([float(r["odds_ratio"]) for r in rows]))
