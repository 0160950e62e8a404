import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import sample_from_q
from extsens import (
    HypothesisModel,
    PairedSample,
    PairRecord,
    adjust_scores,
    build_scores,
    orient_for_alternative,
    pairs_from_differences,
    read_pairs_csv,
    write_pairs_csv,
)
from extsens.errors import RankDeficiencyError, ValidationError
from extsens.paired_data import covariate_matrix, resolve_statistic

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_single_pair_difference_in_means():
    s = build_scores([PairRecord(0, (3, 1), (1, 0))])
    np.testing.assert_allclose(s.q, [[2, -2]])
    assert s.t_obs == 2


def test_multiplicative_unit_effect_is_log_difference():
    s = build_scores([PairRecord(0, (math.e, 1), (1, 0))], HypothesisModel.multiplicative(1.0))
    assert s.q[0, 0] == pytest.approx(1.0, abs=1e-15)


def test_three_pair_statistic():
    data = [PairRecord(i, r, (1, 0)) for i, r in enumerate([(5, 2), (4, 4), (1, 3)])]
    assert build_scores(data).t_obs == pytest.approx(1 / 3, abs=1e-15)


def test_additive_hypothesis_shifts_treated_units():
    data = pairs_from_differences([1.0, 2.0, 3.0])
    s = build_scores(data, HypothesisModel.additive(2.0))
    assert s.t_obs == pytest.approx(0.0, abs=1e-15)


def test_signed_rank_scores():
    data = pairs_from_differences([1.0, -3.0, 2.0])
    s = build_scores(data, statistic="wsr")
    np.testing.assert_allclose(s.q, [[1, 0], [0, 3], [2, 0]])
    assert s.t_obs == 3


def test_mcnemar_scores_mark_positive_discordant_units():
    data = [PairRecord(0, (1, 0), (1, 0)), PairRecord(1, (1, 0), (0, 1)), PairRecord(2, (1, 1), (1, 0))]
    s = build_scores(data, statistic="mcnemar")
    np.testing.assert_allclose(s.q, [[1, 0], [1, 0], [0, 0]])
    assert s.t_obs == 1


@pytest.mark.parametrize("bad", [
    lambda: PairRecord(0, (1, 2), (1, 1)),
    lambda: PairRecord(0, (1, math.nan), (1, 0)),
    lambda: build_scores([]),
    lambda: build_scores([PairRecord(0, (2, 0), (1, 0))], statistic="mcnemar"),
    lambda: build_scores([PairRecord(0, (-1, 2), (1, 0))], HypothesisModel.multiplicative(2.0)),
    lambda: HypothesisModel.multiplicative(0.0),
    lambda: resolve_statistic("median"),
])
def test_invalid_inputs_raise(bad):
    with pytest.raises(ValidationError):
        bad()


def test_adjust_with_no_columns_is_identity():
    s = sample_from_q([[1, -1], [2, -2]])
    assert adjust_scores(s, np.zeros((4, 0))) is s


def test_adjust_removes_scores_in_span():
    s = sample_from_q([[1, -1], [2, -2]])
    out = adjust_scores(s, s.q.reshape(-1, 1))
    np.testing.assert_allclose(out.q, 0, atol=1e-15)
    assert out.t_obs == pytest.approx(0, abs=1e-15)


def test_adjust_by_constant_column_leaves_mean_zero_scores():
    s = sample_from_q([[1, -1], [2, -2]])
    out = adjust_scores(s, np.ones((4, 1)))
    np.testing.assert_allclose(out.q, [[1, -1], [2, -2]], atol=1e-15)


def test_adjust_rejects_collinear_columns():
    s = sample_from_q([[1, -1], [2, -2]])
    x = np.column_stack([np.arange(4.0), 2 * np.arange(4.0)])
    with pytest.raises(RankDeficiencyError):
        adjust_scores(s, x)


@given(arrays(float, (6, 2), elements=finite), arrays(float, (12, 2), elements=finite))
def test_adjust_is_idempotent(q, x):
    s = sample_from_q(q)
    try:
        once = adjust_scores(s, x)
    except RankDeficiencyError:
        return
    twice = adjust_scores(once, x)
    np.testing.assert_allclose(twice.q, once.q, atol=1e-12 * max(1.0, np.abs(q).max()))


def test_orient_greater_sorts_pair():
    o = orient_for_alternative(sample_from_q([[-1, 3]]), "greater")
    np.testing.assert_allclose(o.q, [[3, -1]])
    assert o.gaps[0] == 4


def test_orient_tie_has_zero_gap():
    assert orient_for_alternative(sample_from_q([[2, 2]])).gaps[0] == 0


def test_orient_less_negates_then_sorts():
    o = orient_for_alternative(sample_from_q([[1, -1], [-2, 5]]), "less")
    np.testing.assert_allclose(o.q, [[1, -1], [2, -5]])
    np.testing.assert_allclose(o.gaps, [2, 7])


@pytest.mark.parametrize("y,expected", [([1.0, 2.0], "greater"), ([-1.0, -2.0], "less")])
def test_two_sided_orients_towards_observed_side(y, expected):
    s = build_scores(pairs_from_differences(y))
    assert orient_for_alternative(s, "two_sided").oriented == expected


@given(arrays(float, (5, 2), elements=finite), st.lists(st.booleans(), min_size=5, max_size=5),
       st.sampled_from(["greater", "less"]))
def test_orientation_preserves_pair_sums_and_gaps(q, first, side):
    z = np.array([[1, 0] if f else [0, 1] for f in first])
    s = PairedSample(q=q, z=z)
    o = orient_for_alternative(s, side)
    sign = 1 if side == "greater" else -1
    np.testing.assert_allclose(o.sums, sign * s.sums, atol=1e-12)
    np.testing.assert_allclose(np.abs(o.gaps), np.abs(s.gaps), atol=1e-12)
    assert np.all(o.gaps >= 0)
    assert o.t_obs == pytest.approx(sign * s.t_obs, abs=1e-9)


@given(arrays(float, (4, 2), elements=finite))
def test_statistic_invariant_to_relabelling_units(q):
    s = sample_from_q(q)
    flipped = PairedSample(q=q[:, ::-1], z=s.z[:, ::-1])
    assert flipped.t_obs == pytest.approx(s.t_obs, abs=1e-12)


@given(st.lists(finite, min_size=1, max_size=30), st.lists(st.booleans(), min_size=30, max_size=30))
def test_difference_in_means_equals_mean_difference(r1, first):
    data = [PairRecord(i, (a, 0.5 * a - 1), (1, 0) if f else (0, 1))
            for i, (a, f) in enumerate(zip(r1, first))]
    diffs = [p.treated_minus_control for p in data]
    assert build_scores(data).t_obs == pytest.approx(np.mean(diffs), abs=1e-12)


def test_hajek_ratio():
    s = sample_from_q([[1, -1], [2, -2]])
    assert s.hajek_ratio == pytest.approx((4 + 16) / 16)


def test_csv_round_trip_with_covariates(tmp_path):
    data = [PairRecord(f"p{i}", (1.5 * i, -0.25), (i % 2, 1 - i % 2), np.array([[i, 2.0], [i + 0.5, 3.0]]))
            for i in range(4)]
    path = tmp_path / "pairs.csv"
    write_pairs_csv(path, data)
    back = read_pairs_csv(path)
    assert [p.pair_id for p in back] == [p.pair_id for p in data]
    assert [p.r for p in back] == [p.r for p in data]
    assert [p.z for p in back] == [p.z for p in data]
    np.testing.assert_array_equal(covariate_matrix(back), covariate_matrix(data))


@pytest.mark.parametrize("text", [
    "pair_id,r1,r2\n1,2,3\n",
    "pair_id,r1,r2,z1\n1,2,3,2\n",
    "pair_id,r1,r2,z1\n1,abc,3,1\n",
    "pair_id,r1,r2,z1,x_s1_1\n1,2,3,1,4\n",
    "pair_id,r1,r2,z1\n",
])
def test_csv_reader_rejects_malformed_files(tmp_path, text):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(ValidationError):
        read_pairs_csv(path)
