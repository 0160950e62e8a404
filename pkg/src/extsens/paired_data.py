"""Paired study data and score vectors for sum statistics.

A paired study is held as ``I`` pairs of units with one treated unit per
pair. Under a sharp null every unit's adjusted response is known, so a sum
statistic ``Z^T q`` is fixed by a per-unit score array ``q`` of shape
``(I, 2)``. :func:`build_scores` produces ``q`` for the difference in
means, the Wilcoxon signed rank statistic and McNemar's statistic, and
:func:`orient_for_alternative` reorders each pair so the larger score comes
first, which is the form the worst-case optimisation works with.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg
from scipy.stats import rankdata

from .errors import RankDeficiencyError, ValidationError

STATISTICS = ("difference_in_means", "wilcoxon_signed_rank", "mcnemar")
_STAT_ALIASES = {
    "dim": "difference_in_means",
    "wsr": "wilcoxon_signed_rank",
    "difference_in_means": "difference_in_means",
    "wilcoxon_signed_rank": "wilcoxon_signed_rank",
    "mcnemar": "mcnemar",
}

RANK_RTOL = 1e-10


def resolve_statistic(name: str) -> str:
    try:
        return _STAT_ALIASES[name]
    except KeyError:
        raise ValidationError(
            f"unknown statistic {name!r}; expected one of {sorted(_STAT_ALIASES)}"
        ) from None


@dataclass(frozen=True)
class PairRecord:
    """Observed responses and treatment indicators for one pair.

    ``x`` optionally holds subject-level covariates with shape ``(2, k)``,
    one row per unit.
    """

    pair_id: object
    r: tuple[float, float]
    z: tuple[int, int]
    x: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        r = tuple(float(v) for v in self.r)
        z = tuple(int(v) for v in self.z)
        if len(r) != 2 or len(z) != 2:
            raise ValidationError(f"pair {self.pair_id!r}: need two responses and two indicators")
        if sorted(z) != [0, 1]:
            raise ValidationError(f"pair {self.pair_id!r}: exactly one unit must be treated, got z={z}")
        if not all(math.isfinite(v) for v in r):
            raise ValidationError(f"pair {self.pair_id!r}: responses must be finite, got {r}")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "z", z)
        if self.x is not None:
            x = np.asarray(self.x, dtype=float)
            if x.ndim == 1:
                x = x.reshape(2, -1)
            if x.shape[0] != 2 or not np.all(np.isfinite(x)):
                raise ValidationError(f"pair {self.pair_id!r}: covariates must be finite with 2 rows")
            object.__setattr__(self, "x", x)

    @property
    def treated_minus_control(self) -> float:
        return (self.z[0] - self.z[1]) * (self.r[0] - self.r[1])


@dataclass(frozen=True)
class HypothesisModel:
    """Null hypothesis about the treatment effect.

    ``fisher_sharp`` is no effect at all, ``additive`` is ``R_T = R_C + tau``
    and ``multiplicative`` is ``R_T = tau * R_C`` (tested on the log scale).
    """

    kind: str = "fisher_sharp"
    tau: float = 0.0

    def __post_init__(self):
        if self.kind not in ("fisher_sharp", "additive", "multiplicative"):
            raise ValidationError(f"unknown hypothesis kind {self.kind!r}")
        if self.kind == "multiplicative" and not self.tau > 0:
            raise ValidationError("multiplicative effect requires tau > 0")
        if self.kind == "fisher_sharp":
            object.__setattr__(self, "tau", 0.0)

    @classmethod
    def fisher_sharp(cls) -> "HypothesisModel":
        return cls("fisher_sharp")

    @classmethod
    def additive(cls, tau: float) -> "HypothesisModel":
        return cls("additive", float(tau))

    @classmethod
    def multiplicative(cls, tau: float) -> "HypothesisModel":
        return cls("multiplicative", float(tau))

    @classmethod
    def multiplicative_log(cls, log_tau: float) -> "HypothesisModel":
        return cls("multiplicative", math.exp(log_tau))

    @property
    def log_tau(self) -> float:
        if self.kind != "multiplicative":
            raise AttributeError("log_tau only defined for multiplicative hypotheses")
        return math.log(self.tau)

    def adjusted(self, r: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Responses with the hypothesised effect removed from treated units."""
        if self.kind == "fisher_sharp":
            return r.copy()
        if self.kind == "additive":
            return r - self.tau * z
        if np.any(r <= 0):
            raise ValidationError("multiplicative hypothesis needs strictly positive responses")
        return np.log(r) - math.log(self.tau) * z


@dataclass(frozen=True)
class PairedSample:
    """Score array ``q`` (I x 2) and treatment indicators ``z`` (I x 2).

    The observed statistic is ``t_obs = sum(q * z)``; it is derived rather
    than stored so that reordering units within pairs cannot break it.
    """

    q: np.ndarray
    z: np.ndarray
    pair_ids: tuple = ()
    statistic: str = "difference_in_means"
    oriented: str | None = None

    def __post_init__(self):
        q = np.array(self.q, dtype=float)
        z = np.array(self.z, dtype=int)
        if q.ndim != 2 or q.shape[1] != 2 or q.shape[0] < 1:
            raise ValidationError("q must have shape (I, 2) with I >= 1")
        if z.shape != q.shape or not np.all(z.sum(axis=1) == 1):
            raise ValidationError("z must match q and have one treated unit per pair")
        if not np.all(np.isfinite(q)):
            raise ValidationError("scores must be finite")
        q.setflags(write=False)
        z.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "z", z)
        if not self.pair_ids:
            object.__setattr__(self, "pair_ids", tuple(range(len(q))))

    @property
    def I(self) -> int:  # noqa: E743
        return self.q.shape[0]

    @property
    def t_obs(self) -> float:
        return float(np.sum(self.q * self.z))

    @property
    def gaps(self) -> np.ndarray:
        """Per-pair ``q_i1 - q_i2`` (nonnegative once oriented)."""
        return self.q[:, 0] - self.q[:, 1]

    @property
    def sums(self) -> np.ndarray:
        return self.q[:, 0] + self.q[:, 1]

    @property
    def null_mean(self) -> float:
        """Expectation of ``Z^T q`` with every pair a fair coin."""
        return float(self.sums.sum() / 2)

    @property
    def hajek_ratio(self) -> float:
        d2 = self.gaps ** 2
        top = d2.max()
        return float(d2.sum() / top) if top > 0 else math.inf


def _as_arrays(data: Sequence[PairRecord]) -> tuple[np.ndarray, np.ndarray]:
    r = np.array([p.r for p in data], dtype=float)
    z = np.array([p.z for p in data], dtype=int)
    return r, z


def build_scores(
    data: Sequence[PairRecord],
    h: HypothesisModel | None = None,
    statistic: str = "difference_in_means",
) -> PairedSample:
    """Score array for a sum statistic under hypothesis ``h``.

    Parameters
    ----------
    data : sequence of PairRecord
    h : HypothesisModel, optional
        Defaults to Fisher's sharp null.
    statistic : {"difference_in_means", "wilcoxon_signed_rank", "mcnemar"}
        Short aliases ``dim`` and ``wsr`` are accepted.

    Returns
    -------
    PairedSample
        Scores in the units' original order. For the difference in means
        ``q_ij = (f_ij - f_ij') / I`` with ``f`` the effect-adjusted
        responses, so ``t_obs`` is the mean treated-minus-control
        difference.
    """
    if len(data) == 0:
        raise ValidationError("no pairs supplied")
    h = h or HypothesisModel.fisher_sharp()
    statistic = resolve_statistic(statistic)
    r, z = _as_arrays(data)
    n = len(r)

    if statistic == "mcnemar":
        if h.kind != "fisher_sharp":
            raise ValidationError("McNemar's statistic is only defined under Fisher's sharp null")
        if not np.all((r == 0) | (r == 1)):
            raise ValidationError("McNemar's statistic needs binary (0/1) responses")
        # unit scores 1 only when the unit is positive and its partner is not
        q = r * (1 - r[:, ::-1])
    else:
        f = h.adjusted(r, z)
        delta = f[:, 0] - f[:, 1]
        if statistic == "difference_in_means":
            q = np.column_stack([delta, -delta]) / n
        else:
            ranks = rankdata(np.abs(delta))
            q = np.zeros((n, 2))
            q[delta > 0, 0] = ranks[delta > 0]
            q[delta < 0, 1] = ranks[delta < 0]

    ids = tuple(p.pair_id for p in data)
    return PairedSample(q=q, z=z, pair_ids=ids, statistic=statistic)


def covariate_matrix(data: Sequence[PairRecord]) -> np.ndarray:
    """Stack per-unit covariates into a ``(2I, k)`` matrix (unit 1 then unit 2)."""
    xs = [p.x for p in data]
    if any(x is None for x in xs):
        raise ValidationError("every pair needs covariates for adjustment")
    k = {x.shape[1] for x in xs}
    if len(k) != 1:
        raise ValidationError("pairs carry different numbers of covariates")
    return np.vstack(xs)


def adjust_scores(sample: PairedSample, x_s: np.ndarray) -> PairedSample:
    """Replace ``q`` by its residual after projection onto the columns of ``x_s``.

    ``x_s`` has one row per unit, ordered pair by pair (unit 1, unit 2), in
    the sample's current unit order. No intercept column is added.
    """
    x_s = np.asarray(x_s, dtype=float)
    if x_s.ndim == 1:
        x_s = x_s[:, None]
    if x_s.shape[0] != 2 * sample.I:
        raise ValidationError(f"covariate matrix needs {2 * sample.I} rows, got {x_s.shape[0]}")
    if x_s.shape[1] == 0:
        return sample
    if not np.all(np.isfinite(x_s)):
        raise ValidationError("covariates must be finite")

    Q, R, piv = scipy.linalg.qr(x_s, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > RANK_RTOL * diag[0])) if diag.size and diag[0] > 0 else 0
    if rank < x_s.shape[1]:
        bad = sorted(int(c) for c in piv[rank:])
        raise RankDeficiencyError(f"covariate columns {bad} are linearly dependent on the others", bad)

    flat = sample.q.reshape(-1)
    resid = flat - Q @ (Q.T @ flat)
    return replace(sample, q=resid.reshape(-1, 2))


def orient_for_alternative(sample: PairedSample, side: str = "greater") -> PairedSample:
    """Sort each pair so ``q_i1 >= q_i2``.

    For ``side="less"`` the scores are negated first, turning a test for
    small values into a test for large values of ``-Z^T q``. For
    ``"two_sided"`` the direction is whichever side of its fair-coin mean
    the observed statistic falls on. Treatment indicators move with their
    units, so the (possibly negated) ``t_obs`` is preserved.
    """
    if side in ("two", "two_sided", "two-sided"):
        side = "greater" if sample.t_obs >= sample.null_mean else "less"
    if side not in ("greater", "less"):
        raise ValidationError(f"unknown alternative {side!r}")
    q = np.array(sample.q)
    z = np.array(sample.z)
    if side == "less":
        q = -q
    swap = q[:, 1] > q[:, 0]
    q[swap] = q[swap, ::-1]
    z[swap] = z[swap, ::-1]
    return replace(sample, q=q, z=z, oriented=side)


# ----------------------------------------------------------------------
# CSV ingestion (wide format)
# ----------------------------------------------------------------------

_COV_RE = re.compile(r"^x_s(\d+)_([12])$")


def read_pairs_csv(path: str | Path) -> list[PairRecord]:
    """Read ``pair_id,r1,r2,z1[,x_s<k>_<unit>...]`` rows into PairRecords."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        for need in ("pair_id", "r1", "r2", "z1"):
            if need not in cols:
                raise ValidationError(f"{path}: missing column {need!r}")
        cov = sorted(
            {int(m.group(1)) for c in cols if (m := _COV_RE.match(c))}
        )
        for k in cov:
            for j in (1, 2):
                if f"x_s{k}_{j}" not in cols:
                    raise ValidationError(f"{path}: covariate x_s{k} missing unit {j}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            try:
                r = (float(row["r1"]), float(row["r2"]))
                z1 = int(float(row["z1"]))
                x = None
                if cov:
                    x = np.array(
                        [[float(row[f"x_s{k}_{j}"]) for k in cov] for j in (1, 2)]
                    )
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            if z1 not in (0, 1):
                raise ValidationError(f"{path}:{lineno}: z1 must be 0 or 1")
            out.append(PairRecord(row["pair_id"], r, (z1, 1 - z1), x))
    if not out:
        raise ValidationError(f"{path}: no data rows")
    return out


def write_pairs_csv(path: str | Path, data: Iterable[PairRecord]) -> None:
    data = list(data)
    k = 0 if data[0].x is None else data[0].x.shape[1]
    header = ["pair_id", "r1", "r2", "z1"] + [f"x_s{c + 1}_{j}" for c in range(k) for j in (1, 2)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for p in data:
            row = [p.pair_id, repr(p.r[0]), repr(p.r[1]), p.z[0]]
            if k:
                row += [repr(float(p.x[j, c])) for c in range(k) for j in (0, 1)]
            w.writerow(row)


def pairs_from_differences(y: Sequence[float], ids: Sequence | None = None) -> list[PairRecord]:
    """Pairs whose treated-minus-control differences are ``y`` (control response 0)."""
    ids = ids if ids is not None else range(len(y))
    return [PairRecord(i, (float(v), 0.0), (1, 0)) for i, v in zip(ids, y)]
