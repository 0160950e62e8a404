"""Command-line front end.

Subcommands: ``analyze``, ``curve``, ``interval``, ``simulate`` and
``calibrate``. JSON summaries carry a ``schema_version`` field; CSV side
files can be read back with the readers in this package. Exit status is 0
on success, 2 on invalid input and 3 on numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import default_gamma_grid, sensitivity_curve, sensitivity_interval, sensitivity_value
from .calibration import calibrate, read_calibration_csv, write_pair_bias_csv
from .errors import ExtSensError, NumericalError, ValidationError
from .exact_binary import McNemarSummary, mcnemar_analysis, mcnemar_summary, summary_to_sample
from .paired_data import (
    HypothesisModel,
    adjust_scores,
    build_scores,
    covariate_matrix,
    orient_for_alternative,
    read_pairs_csv,
    resolve_statistic,
)
from .qp import analyze
from .simulation import MODELS, reference_grid, run_table, write_table_csv
from .uncertainty_sets import SensitivityBudget

SCHEMA_VERSION = "1.0"
COMMANDS = ("analyze", "curve", "interval", "simulate", "calibrate")
EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


@dataclass
class RunConfig:
    """Validated settings for one CLI invocation."""

    command: str
    input: Path | None = None
    output: Path | None = None
    gamma: float = 1.0
    gammabar: float | None = None
    alpha: float = 0.05
    beta: float | None = None
    side: str = "greater"
    frame: str = "superpopulation"
    set: str | None = None
    stat: str = "difference_in_means"
    tau: float | None = None
    effect: str = "additive"
    adjust: bool = False
    seed: int = 0
    threads: int = 1
    oracle: bool = False
    extra: dict = field(default_factory=dict)

    def budget(self, side: str | None = None) -> SensitivityBudget:
        gb = self.gamma if self.gammabar is None else self.gammabar
        return SensitivityBudget(self.gamma, gb, self.alpha, self.beta, side or self.side, self.frame)

    @property
    def spec_kind(self) -> str:
        if self.set:
            return self.set
        if self.frame == "study_population":
            return "sample"
        return "bennett" if self.stat == "mcnemar" else "clt"


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: Path | None, payload: dict) -> None:
    text = json.dumps(_json_safe({"schema_version": SCHEMA_VERSION, **payload}), indent=2, ensure_ascii=False)
    if path is None:
        sys.stdout.write(text + "\n")
    else:
        Path(path).write_text(text + "\n", encoding="utf-8")


def read_json(path: str | Path) -> dict:
    """Read a summary written by this CLI, checking its schema version."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError(f"unsupported schema version {data.get('schema_version')!r}")
    return data


def write_curve_csv(path: str | Path, points) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["gamma", "gammabar_star"])
        for g, gb in points:
            w.writerow([repr(float(g)), repr(float(gb))])


def read_curve_csv(path: str | Path) -> list[tuple[float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [(float(r["gamma"]), float(r["gammabar_star"])) for r in csv.DictReader(fh)]


def write_pistar_csv(path: str | Path, pair_ids, pistar) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["pair_id", "pi_star"])
        for pid, p in zip(pair_ids, pistar):
            w.writerow([pid, repr(float(p))])


def read_pistar_csv(path: str | Path) -> tuple[list, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [r["pair_id"] for r in rows], np.array([float(r["pi_star"]) for r in rows])


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------

def _hypothesis(cfg: RunConfig) -> HypothesisModel:
    if cfg.tau is None:
        return HypothesisModel.fisher_sharp()
    if cfg.effect == "multiplicative":
        return HypothesisModel.multiplicative(cfg.tau)
    return HypothesisModel.additive(cfg.tau)


def _sample(cfg: RunConfig, data):
    s = build_scores(data, _hypothesis(cfg), cfg.stat)
    if cfg.adjust:
        s = adjust_scores(s, covariate_matrix(data))
    return s


def _caught(fn, *args, **kwargs):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out = fn(*args, **kwargs)
    return out, [f"{w.category.__name__}: {w.message}" for w in caught]


def cmd_analyze(cfg: RunConfig) -> dict:
    data = read_pairs_csv(cfg.input)
    budget = cfg.budget()
    if cfg.stat == "mcnemar":
        summary = mcnemar_summary(data)
        res, notes = _caught(mcnemar_analysis, summary, budget, cfg.spec_kind)
        out = {
            "command": "analyze",
            "statistic": "mcnemar",
            "uncertainty_set": cfg.spec_kind,
            "budget": _budget_dict(budget),
            "p_value": res.p_value,
            "reject": res.p_value <= budget.alpha,
            "pi_d": res.pi_d,
            "pi_m": res.pi_m,
            "exact": res.exact,
            "conventional": res.conventional,
            "fallback": res.fallback,
            "summary": {"I_d": summary.I_d, "I_c": summary.I_c, "t_obs": summary.t_obs},
            "warnings": notes + res.notes,
        }
        if cfg.oracle:
            from .oracle import EnumerationLimit, exact_tail

            # concordant pairs contribute nothing random, so only discordant pairs are enumerated
            s = summary_to_sample(McNemarSummary(max(summary.I_d, 1), 0, summary.t_obs))
            pi = np.full(s.I, res.pi_d)
            out["oracle_tail"] = exact_tail(s, pi, summary.t_obs, EnumerationLimit(cfg.extra.get("max_pairs", 16)))
        return out

    sample = _sample(cfg, data)
    res, notes = _caught(analyze, sample, budget, cfg.spec_kind)
    out = {"command": "analyze", "statistic": sample.statistic, **res.to_dict()}
    out["warnings"] += [n for n in notes if not any(n.split(": ", 1)[-1] in w for w in out["warnings"])]
    pistar_path = cfg.extra.get("pistar_csv")
    if pistar_path:
        oriented = orient_for_alternative(sample, budget.side)
        write_pistar_csv(pistar_path, oriented.pair_ids, res.pi_star)
        out["pistar_csv"] = str(pistar_path)
    if cfg.oracle:
        from .oracle import grid_search_min_deviate

        pi, obj = grid_search_min_deviate(sample, budget, cfg.spec_kind, step=cfg.extra.get("step", 0.01))
        out["oracle"] = {"grid_objective": obj, "grid_pi": pi}
    return out


def _budget_dict(b: SensitivityBudget) -> dict:
    return {"gamma": b.gamma, "gammabar": b.gammabar, "alpha": b.alpha, "beta": b.beta,
            "side": b.side, "frame": b.frame}


def cmd_curve(cfg: RunConfig) -> dict:
    data = read_pairs_csv(cfg.input)
    sample = _sample(cfg, data)
    grid = cfg.extra.get("gamma_grid")
    grid = default_gamma_grid() if grid is None else np.asarray(grid, dtype=float)
    curve, notes = _caught(sensitivity_curve, sample, cfg.alpha, cfg.beta, cfg.spec_kind, grid,
                           cfg.side, cfg.frame)
    csv_path = cfg.extra.get("curve_csv")
    if csv_path:
        write_curve_csv(csv_path, curve.points)
    return {
        "command": "curve",
        "gamma_star": curve.gamma_star,
        "gammabar_limit": curve.gammabar_limit,
        "points": [{"gamma": g if math.isfinite(g) else "inf", "gammabar_star": gb} for g, gb in curve.points],
        "alpha": curve.alpha, "beta": curve.beta, "side": curve.side, "frame": curve.frame,
        "uncertainty_set": curve.spec_kind,
        "curve_csv": str(csv_path) if csv_path else None,
        "warnings": sorted(set(notes) | set(curve.warnings)),
    }


def cmd_interval(cfg: RunConfig) -> dict:
    data = read_pairs_csv(cfg.input)
    budget = cfg.budget(side="two_sided")
    x_s = covariate_matrix(data) if cfg.adjust else None
    iv, notes = _caught(sensitivity_interval, data, cfg.stat, budget, cfg.spec_kind,
                        cfg.extra.get("tau_bracket"), cfg.effect, x_s)
    return {
        "command": "interval",
        "effect": iv.effect,
        "scale": "log" if iv.effect == "multiplicative" else "identity",
        "lo": iv.lo, "hi": iv.hi, "estimate": iv.estimate,
        "budget": _budget_dict(iv.budget),
        "uncertainty_set": cfg.spec_kind,
        "warnings": notes,
    }


def cmd_simulate(cfg: RunConfig) -> dict:
    model = cfg.extra["model"]
    grid = reference_grid()
    if cfg.gammabar is not None or cfg.extra.get("cell"):
        grid = [(cfg.gamma, cfg.gamma if cfg.gammabar is None else cfg.gammabar)]
    table = run_table(grid, I=cfg.extra["I"], n_sim=cfg.extra["nsim"], tau=cfg.tau or 0.0,
                      outcome_model=model, alpha=cfg.alpha, beta=cfg.beta, seed=cfg.seed,
                      spec=cfg.spec_kind, threads=cfg.threads, side=cfg.extra["sim_side"])
    csv_path = cfg.extra.get("table_csv") or (cfg.output.with_suffix(".csv") if cfg.output else None)
    if csv_path:
        write_table_csv(csv_path, table)
    return {
        "command": "simulate",
        "model": model, "I": table.I, "n_sim": table.n_sim, "tau": table.tau, "seed": table.seed,
        "alpha": table.alpha, "beta": table.beta, "side": table.side, "uncertainty_set": table.spec,
        "mc_se_at_alpha": table.mc_se(),
        "cells": [{"gamma": g, "gammabar": gb, "rate": r} for (g, gb), r in table.rates.items()],
        "table_csv": str(csv_path) if csv_path else None,
    }


def cmd_calibrate(cfg: RunConfig) -> dict:
    records = read_calibration_csv(cfg.input)
    fit, notes = _caught(calibrate, records)
    pairs_path = cfg.extra.get("pairs_csv")
    if pairs_path:
        write_pair_bias_csv(pairs_path, fit)
    return {"command": "calibrate", **fit.to_dict(), "n_pairs": len(records),
            "pairs_csv": str(pairs_path) if pairs_path else None, "warnings": notes}


HANDLERS = {"analyze": cmd_analyze, "curve": cmd_curve, "interval": cmd_interval,
            "simulate": cmd_simulate, "calibrate": cmd_calibrate}


def run(cfg: RunConfig) -> int:
    """Execute one command; returns the exit status."""
    try:
        payload = HANDLERS[cfg.command](cfg)
        write_json(cfg.output, payload)
        return EXIT_OK
    except NumericalError as exc:
        _report(exc)
        return EXIT_NUMERICAL
    except (ExtSensError, ValueError, OSError) as exc:
        _report(exc)
        return EXIT_INVALID


def _report(exc: Exception) -> None:
    code = getattr(exc, "code", "invalid_input")
    sys.stderr.write(json.dumps({"schema_version": SCHEMA_VERSION, "error": code, "message": str(exc)}) + "\n")


# ----------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------

_SIDES = {"greater": "greater", "less": "less", "two": "two_sided", "two_sided": "two_sided"}
_FRAMES = {"super": "superpopulation", "superpopulation": "superpopulation",
           "sample": "study_population", "study-population": "study_population"}


def _gamma(text: str) -> float:
    if text.lower() in ("inf", "infinity"):
        return math.inf
    return float(text)


def _common(p: argparse.ArgumentParser, data: bool = True) -> None:
    if data:
        p.add_argument("--input", "-i", type=Path, required=True, help="input CSV")
    p.add_argument("--output", "-o", type=Path, help="JSON summary path (stdout if omitted)")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--beta", type=float, default=None, help="defaults to alpha/10")
    p.add_argument("--frame", choices=sorted(_FRAMES), default="super")
    p.add_argument("--set", choices=("clt", "hoeffding", "bennett", "sample"), default=None)
    p.add_argument("--threads", type=int, default=1)


def _data_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--stat", default="dim", help="dim, wsr or mcnemar")
    p.add_argument("--tau", type=float, default=None, help="effect under the null (default: Fisher's sharp null)")
    p.add_argument("--effect", choices=("additive", "multiplicative"), default="additive")
    p.add_argument("--adjust", action="store_true", help="project scores off the x_s covariates")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="extsens", description="Extended sensitivity analysis for paired studies")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="test at one (Gamma, Gammabar)")
    _common(a)
    _data_opts(a)
    a.add_argument("--gamma", type=_gamma, default=1.0)
    a.add_argument("--gammabar", type=_gamma, default=None, help="defaults to Gamma")
    a.add_argument("--side", choices=sorted(_SIDES), default="greater")
    a.add_argument("--pistar-csv", type=Path, help="write the worst-case probabilities here")
    a.add_argument("--oracle", action="store_true", help="cross-check against brute force (small inputs)")
    a.add_argument("--oracle-step", type=float, default=0.01)
    a.add_argument("--max-pairs", type=int, default=16)

    c = sub.add_parser("curve", help="sensitivity value and curve")
    _common(c)
    _data_opts(c)
    c.add_argument("--side", choices=sorted(_SIDES), default="greater")
    c.add_argument("--gamma-grid", type=_gamma, nargs="+", help="Gamma values (default: 40 log-spaced plus inf)")
    c.add_argument("--curve-csv", type=Path)

    iv = sub.add_parser("interval", help="sensitivity interval for the effect")
    _common(iv)
    _data_opts(iv)
    iv.add_argument("--gamma", type=_gamma, default=1.0)
    iv.add_argument("--gammabar", type=_gamma, default=None)
    iv.add_argument("--bracket", type=float, nargs=2, metavar=("LO", "HI"))

    s = sub.add_parser("simulate", help="Monte Carlo level/power table")
    _common(s, data=False)
    s.add_argument("--model", choices=MODELS, required=True)
    s.add_argument("--I", type=int, default=100, dest="I")
    s.add_argument("--nsim", type=int, default=5000)
    s.add_argument("--tau", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--side", choices=sorted(_SIDES), default="two")
    s.add_argument("--gamma", type=_gamma, default=None, help="run one cell instead of the reference grid")
    s.add_argument("--gammabar", type=_gamma, default=None)
    s.add_argument("--table-csv", type=Path)

    k = sub.add_parser("calibrate", help="estimate (Gamma, Gammabar) from a calibration study")
    _common(k)
    k.add_argument("--pairs-csv", type=Path, help="per-pair pi* and odds ratios")
    return parser


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    """Turn parsed arguments into a validated :class:`RunConfig`."""
    cmd = ns.command
    frame = _FRAMES[ns.frame]
    cfg = RunConfig(command=cmd, input=getattr(ns, "input", None), output=ns.output,
                    alpha=ns.alpha, beta=ns.beta, frame=frame, set=ns.set, threads=max(1, ns.threads))
    if frame == "study_population" and cfg.set not in (None, "sample"):
        raise ValidationError("--frame sample requires --set sample")
    if cmd in ("analyze", "curve", "interval"):
        cfg.stat = resolve_statistic(ns.stat)
        cfg.tau = ns.tau
        cfg.effect = ns.effect
        cfg.adjust = ns.adjust
    if cmd in ("analyze", "interval"):
        cfg.gamma = ns.gamma
        cfg.gammabar = ns.gammabar
    if cmd in ("analyze", "curve"):
        cfg.side = _SIDES[ns.side]
    if cmd == "analyze":
        cfg.oracle = ns.oracle
        cfg.extra.update(pistar_csv=ns.pistar_csv, step=ns.oracle_step, max_pairs=ns.max_pairs)
    elif cmd == "curve":
        cfg.extra.update(gamma_grid=ns.gamma_grid, curve_csv=ns.curve_csv)
    elif cmd == "interval":
        cfg.extra.update(tau_bracket=tuple(ns.bracket) if ns.bracket else None)
        if cfg.stat == "mcnemar":
            raise ValidationError("intervals need an additive or multiplicative effect model, not McNemar")
    elif cmd == "simulate":
        if ns.I < 1 or ns.nsim < 1:
            raise ValidationError("--I and --nsim must be positive")
        cfg.tau = ns.tau
        cfg.seed = ns.seed
        cfg.gamma = 1.0 if ns.gamma is None else ns.gamma
        cfg.gammabar = ns.gammabar
        cfg.extra.update(model=ns.model, I=ns.I, nsim=ns.nsim, sim_side=_SIDES[ns.side],
                         table_csv=ns.table_csv, cell=ns.gamma is not None)
    elif cmd == "calibrate":
        cfg.extra.update(pairs_csv=ns.pairs_csv)
    if cmd != "simulate" and cmd != "calibrate" and cmd != "curve":
        cfg.budget()  # validates the sensitivity parameters before any computation
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = config_from_args(ns)
    except (ExtSensError, ValueError) as exc:
        _report(exc)
        return EXIT_INVALID
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
