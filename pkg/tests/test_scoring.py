import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mamc_vad.errors import FormatError, UndefinedMetricError
from mamc_vad.net import ArchConfig
from mamc_vad.scoring import (
    STD_FLOOR,
    AnomalyRecord,
    FrameScores,
    ScoreStats,
    effective_weights,
    export_curve,
    feature_inconsistency,
    fit_stats,
    frame_aggregate,
    fuse,
    prediction_error,
    read_curve,
    roc_auc,
)


def auc_pair_oracle(scores, labels):
    """Count every (anomalous, normal) pair: win 1, tie 1/2."""
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def random_instance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 201))
    labels = rng.random(n) < rng.uniform(0.1, 0.9)
    labels[0], labels[1] = True, False
    # coarse grid so ties actually occur
    scores = np.round(rng.normal(size=n) + labels * rng.uniform(0, 2), int(rng.integers(0, 3)))
    return scores, labels


def test_auc_worked_example():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_separated_and_ties():
    assert roc_auc([0.0, 0.1, 0.9, 1.0], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.5, 0.5, 0.5], [0, 1, 1]) == 0.5


def test_auc_matches_pair_oracle_exactly():
    for seed in range(200):
        s, l = random_instance(seed)
        assert roc_auc(s, l) == auc_pair_oracle(s, l), seed


def test_auc_label_complement():
    for seed in range(20):
        s, l = random_instance(seed)
        assert roc_auc(s, ~l) == pytest.approx(1.0 - roc_auc(s, l), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_auc_invariant_under_monotone_transform(seed):
    s, l = random_instance(seed)
    a = roc_auc(s, l)
    assert roc_auc(np.exp(s), l) == a
    assert roc_auc(3.0 * s - 7.0, l) == a
    assert roc_auc(np.arctan(s), l) == pytest.approx(a, abs=1e-12)


def test_auc_single_class_is_undefined():
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [0, 0])
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [1, 1])


def test_prediction_error_and_inconsistency():
    img = torch.rand(3, 1, 8, 8, dtype=torch.float64)
    assert torch.all(prediction_error(img, img) == 0)
    torch.testing.assert_close(prediction_error(img + 0.1, img), torch.full((3,), 0.01, dtype=torch.float64))
    a = torch.tensor([[1.0, 1.0], [1.0, 0.0], [2.0, 3.0]], dtype=torch.float64)
    b = torch.tensor([[1.0, 0.0], [0.0, 1.0], [2.0, 3.0]], dtype=torch.float64)
    np.testing.assert_allclose(feature_inconsistency(a, b).numpy(), [1 - 2 ** -0.5, 1.0, 0.0], atol=1e-12)


def test_fit_stats_population():
    u_p, d_p, u_f, d_f = fit_stats([0.0, 2.0], [0.0, 2.0])
    assert (u_p, d_p, u_f, d_f) == (1.0, 1.0, 1.0, 1.0)


def test_fit_stats_constant_floor():
    u_p, d_p, u_f, d_f = fit_stats([0.3] * 5, [0.1] * 5)
    assert d_p == STD_FLOOR and d_f == STD_FLOOR
    stats = ScoreStats(u_p, d_p, u_f, d_f)
    np.testing.assert_array_equal(fuse([0.3] * 5, [0.1] * 5, stats), 0.0)


def test_fuse_examples():
    stats = ScoreStats(u_p=0.5, d_p=0.25, u_f=0.2, d_f=0.1)
    assert fuse(0.5, 0.2, stats) == 0.0
    assert fuse(0.75, 0.0, stats, w_p=1.0, w_f=0.0) == pytest.approx(1.0)
    assert fuse(1.0, 0.4, stats) == pytest.approx(0.2 * 2 + 0.8 * 2)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_fuse_is_affine(a, b, c):
    stats = ScoreStats(0.1, 0.3, -0.2, 2.0)
    lhs = fuse(a + c, b, stats) - fuse(a, b, stats)
    assert lhs == pytest.approx(0.2 * c / 0.3, abs=1e-9)


def test_effective_weights():
    assert effective_weights(ArchConfig(), 0.2, 0.8) == (0.2, 0.8)
    no_align = ArchConfig(align_enabled=False)
    assert effective_weights(no_align, 0.2, 0.8) == (1.0, 0.0)
    app_only = ArchConfig(streams="appearance", ffrp_enabled=False, align_enabled=False)
    assert effective_weights(app_only, 0.2, 0.8) == (1.0, 0.0)


def rec(frame, score, obj=0):
    return AnomalyRecord(0, frame, obj, 0.0, 0.0, score)


def test_frame_aggregate_cases():
    fs = frame_aggregate([rec(0, 0.7), rec(2, -1.0, 0), rec(2, 2.0, 1)], 4, floor=-9.0,
                         labels=[0, 0, 1, 0])
    np.testing.assert_array_equal(fs.scores, [0.7, -9.0, 2.0, -9.0])
    np.testing.assert_array_equal(fs.labels, [False, False, True, False])
    # a negative object score is kept even though it is below an untouched default
    only_negative = frame_aggregate([rec(0, -3.0), rec(0, -5.0)], 1, floor=-10.0)
    assert only_negative.scores[0] == -3.0


def test_frame_max_is_shift_invariant():
    recs = [rec(k % 5, float(v)) for k, v in enumerate(np.random.default_rng(0).normal(size=15))]
    a = frame_aggregate(recs, 5, -100.0).scores
    shifted = [AnomalyRecord(r.sequence_index, r.frame_index, r.object_id, 0, 0, r.s + 3.0) for r in recs]
    b = frame_aggregate(shifted, 5, -97.0).scores
    np.testing.assert_allclose(b, a + 3.0)
    assert np.argmax(a) == np.argmax(b)


def test_curve_round_trip(tmp_path):
    fs = FrameScores(np.array([0.1, -2.5, 1e-17, 3.0000000000000004]), np.array([0, 1, 1, 0], bool))
    path = tmp_path / "curve.csv"
    export_curve(fs, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "frame_index,score,label"
    assert len(lines) == 5
    back = read_curve(path)
    np.testing.assert_array_equal(back.scores, fs.scores)
    np.testing.assert_array_equal(back.labels, fs.labels)


def test_curve_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c\n0,1.0,0\n")
    with pytest.raises(FormatError):
        read_curve(path)
