import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import expit

from extsens import (
    CalibrationRecord,
    bias_odds_ratios,
    calibrate,
    estimate_gammas,
    fit_outcome_model,
    fit_treatment_model,
    pairwise_bias,
    read_calibration_csv,
    write_calibration_csv,
)
from extsens.calibration import _pi_from, read_pair_bias_csv, write_pair_bias_csv
from extsens.errors import CalibrationWarning, RankDeficiencyError, SeparationError, ValidationError


def simulate(n, beta_z, beta_u, sigma=1.0, k=1, seed=0):
    """Calibration pairs with a logistic treatment model and a linear outcome."""
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(n):
        u = rng.normal(0, 1, 2)
        adj = rng.normal(0, 1, (2, k))
        first = rng.random() < expit(beta_z * (u[0] - u[1]))
        z = (1, 0) if first else (0, 1)
        y = 0.7 * i / n + adj @ np.linspace(0.5, 1, k) + beta_u * u + rng.normal(0, sigma, 2)
        recs.append(CalibrationRecord(i, z, tuple(y), tuple(u), adj))
    return recs


def test_record_validation():
    with pytest.raises(ValidationError):
        CalibrationRecord(0, (1, 1), (0, 1), (0, 1))
    with pytest.raises(ValidationError):
        CalibrationRecord(0, (1, 0), (0, math.nan), (0, 1))


def test_delta_u_is_treated_minus_control():
    assert CalibrationRecord(0, (0, 1), (0, 1), (2.0, 5.0)).delta_u == 3.0


def test_no_confounder_variation_gives_zero_with_warning():
    recs = [CalibrationRecord(i, (1, 0) if i % 2 else (0, 1), (0, 1), (1.0, 1.0)) for i in range(6)]
    with pytest.warns(CalibrationWarning):
        assert fit_treatment_model(recs) == 0.0


@pytest.mark.parametrize("direction", [1, -1])
def test_separation_is_reported(direction):
    recs = [CalibrationRecord(i, (1, 0), (0, 1), (direction * (i + 1.0), 0.0)) for i in range(5)]
    with pytest.raises(SeparationError) as info:
        fit_treatment_model(recs)
    assert info.value.direction == direction


def test_treatment_coefficient_is_consistent():
    recs = simulate(10_000, 0.1, 0.0, seed=1)
    b = fit_treatment_model(recs)
    du = np.array([r.delta_u for r in recs])
    se = 1 / math.sqrt(np.sum(du ** 2 * expit(b * du) * expit(-b * du)))
    assert abs(b - 0.1) <= 3 * se


@pytest.mark.parametrize("seed", range(4))
def test_treatment_score_vanishes_at_estimate(seed):
    recs = simulate(300, 0.8, 0.5, seed=seed)
    b = fit_treatment_model(recs)
    du = np.array([r.delta_u for r in recs])
    assert abs(np.sum(du * (1 - expit(b * du)))) <= 1e-10


@pytest.mark.parametrize("seed", range(3))
def test_pure_noise_coefficients_are_small(seed):
    recs = simulate(2000, 0.0, 0.0, seed=10 + seed)
    b = fit_treatment_model(recs)
    du = np.array([r.delta_u for r in recs])
    assert abs(b) <= 3 / math.sqrt(np.sum(du ** 2) / 4)
    fit = fit_outcome_model(recs)
    dy = np.array([r.y[0] - r.y[1] for r in recs])
    dX = np.array([np.append(r.adj[0] - r.adj[1], r.u[0] - r.u[1]) for r in recs])
    cov = 2 * fit.sigma2 * np.linalg.inv(dX.T @ dX)
    assert abs(fit.beta_u) <= 3 * math.sqrt(cov[-1, -1])
    assert fit.rss == pytest.approx(np.sum((dy - dX @ fit.coef) ** 2))


def test_within_pair_fit_equals_fixed_effects_regression():
    recs = simulate(40, 0.5, 0.8, k=2, seed=3)
    n = len(recs)
    rows, ys = [], []
    for i, r in enumerate(recs):
        for unit in (0, 1):
            dummies = np.zeros(n)
            dummies[i] = 1
            rows.append(np.concatenate([r.adj[unit], [r.u[unit]], dummies]))
            ys.append(r.y[unit])
    full, *_ = np.linalg.lstsq(np.array(rows), np.array(ys), rcond=None)
    fit = fit_outcome_model(recs)
    np.testing.assert_allclose(fit.coef, full[:3], atol=1e-8)
    resid = np.array(ys) - np.array(rows) @ full
    assert fit.sigma2 == pytest.approx(resid @ resid / (n - 3), rel=1e-8)


def test_pair_constant_shift_changes_nothing():
    recs = simulate(50, 0.5, 0.8, seed=4)
    shifted = [CalibrationRecord(r.pair_id, r.z, tuple(np.add(r.y, 10 * i)), tuple(np.add(r.u, -3 * i)), r.adj + i)
               for i, r in enumerate(recs)]
    a, b = calibrate(recs), calibrate(shifted)
    assert a.beta_z == pytest.approx(b.beta_z, abs=1e-10)
    np.testing.assert_allclose(a.beta_y, b.beta_y, atol=1e-8)
    np.testing.assert_allclose(a.pistar, b.pistar, atol=1e-8)


def test_exact_outcome_fit_warns():
    recs = [CalibrationRecord(i, (1, 0) if i % 2 else (0, 1), (2.0 * i, 0.0), (float(i), 0.0)) for i in range(1, 6)]
    with pytest.warns(CalibrationWarning):
        assert fit_outcome_model(recs).sigma2 == 0.0


def test_collinear_adjuster_is_rejected():
    recs = [CalibrationRecord(i, (1, 0), (i, 0), (i, 0), np.array([[2.0 * i], [0.0]])) for i in range(1, 6)]
    with pytest.raises(RankDeficiencyError):
        fit_outcome_model(recs)


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 4), st.floats(-3, 3), st.floats(0, 3))
def test_probability_has_the_stated_symmetries(bz, byu, s2, du, spread):
    du_, sp = np.array([du]), np.array([spread])
    p = _pi_from(bz, byu, s2, du_, sp)[0]
    assert 0 <= p <= 1
    # the confounder difference enters through both logits, so its sign is irrelevant
    assert _pi_from(bz, byu, s2, -du_, sp)[0] == pytest.approx(p, abs=1e-12)
    # flipping one coefficient swaps agreement for disagreement
    assert _pi_from(-bz, byu, s2, du_, sp)[0] == pytest.approx(1 - p, abs=1e-12)
    if bz * byu >= 0:
        assert p >= 0.5 - 1e-12


@given(st.floats(-3, 3), st.floats(0.1, 4), st.floats(-3, 3), st.floats(0, 3))
def test_no_treatment_effect_gives_one_half(byu, s2, du, spread):
    assert _pi_from(0.0, byu, s2, np.array([du]), np.array([spread]))[0] == pytest.approx(0.5, abs=1e-15)
    assert _pi_from(byu, 0.0, s2, np.array([du]), np.array([spread]))[0] == pytest.approx(0.5, abs=1e-15)


def test_gamma_estimates_hand_values():
    g, gb = estimate_gammas([0.5, 0.9])
    assert g == pytest.approx(9.0, abs=1e-12)
    assert gb == pytest.approx(7 / 3, abs=1e-12)


def test_odds_ratio_hand_value():
    assert bias_odds_ratios([2 / 3])[0] == pytest.approx(2.0, abs=1e-12)


@pytest.mark.parametrize("bad", [[0.4], [], [1.2]])
def test_pistar_validation(bad):
    with pytest.raises(ValidationError):
        estimate_gammas(bad)


@pytest.mark.parametrize("signs", [(1, 1), (1, -1), (-1, 1), (-1, -1)])
def test_calibration_summary_orders_estimates(signs):
    recs = simulate(400, signs[0] * 0.9, signs[1] * 0.7, seed=6)
    fit = calibrate(recs)
    assert np.all(fit.pistar >= 0.5 - 1e-12)
    assert 1 <= fit.gammabar_hat <= fit.gamma_hat
    assert fit.to_dict()["gamma_hat"] == fit.gamma_hat


def test_pairwise_bias_requires_positive_variance():
    class Degenerate:
        beta_z, beta_yu, sigma2 = 1.0, 1.0, 0.0

    with pytest.raises(ValidationError):
        pairwise_bias(Degenerate(), simulate(5, 1, 1))


def test_calibration_csv_round_trip(tmp_path):
    recs = simulate(12, 0.5, 0.5, k=2, seed=7)
    write_calibration_csv(tmp_path / "c.csv", recs)
    back = read_calibration_csv(tmp_path / "c.csv")
    assert [r.pair_id for r in back] == [str(r.pair_id) for r in recs]
    for a, b in zip(recs, back):
        assert (a.z, a.y, a.u) == (b.z, b.y, b.u)
        np.testing.assert_array_equal(a.adj, b.adj)


def test_calibration_csv_requires_two_units(tmp_path):
    (tmp_path / "c.csv").write_text("pair_id,unit,z,y,u\n1,1,1,0.5,0.1\n")
    with pytest.raises(ValidationError):
        read_calibration_csv(tmp_path / "c.csv")


def test_pair_bias_csv_round_trip(tmp_path):
    fit = calibrate(simulate(30, 0.6, 0.4, seed=8))
    write_pair_bias_csv(tmp_path / "p.csv", fit)
    ids, pi, odds = read_pair_bias_csv(tmp_path / "p.csv")
    assert ids == [str(i) for i in fit.pair_ids]
    np.testing.assert_array_equal(pi, fit.pistar)
    np.testing.assert_array_equal(odds, fit.odds_ratios)
