import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cadunet.metrics import (
    ConfusionCounts, SeverityLabel, component_diameters_mm, confusion, connected_components,
    format_mean_std, metrics, midranks, score_row, severity, wilcoxon_rank_sum, write_metrics_csv,
)

from oracles import confusion_loop, flood_fill_count, metric_formulas, ranksum_enumerate


# ---------------------------------------------------------------- confusion and scores


def test_identical_masks():
    gt = np.zeros((5, 5), dtype=bool)
    gt[1:3, 1:4] = True
    assert confusion(gt, gt) == ConfusionCounts(6, 19, 0, 0)
    c = confusion(~gt, gt)
    assert c.tp == 0 and c.tn == 0


def test_confusion_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        pred, gt = rng.random((2, 16, 16)) < rng.uniform(0.05, 0.95)
        c = confusion(pred, gt)
        assert (c.tp, c.tn, c.fp, c.fn) == confusion_loop(pred, gt)
        assert c.total == 256


def test_confusion_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        confusion(np.zeros((3, 3)), np.zeros((3, 4)))


def test_worked_example():
    s = metrics(ConfusionCounts(tp=2, tn=0, fp=1, fn=1))
    assert round(s.f1, 2) == 66.67 and round(s.recall, 2) == 66.67 and round(s.prec, 2) == 66.67
    assert s.iou == 50.0


def test_perfect_prediction_scores_100():
    s = metrics(ConfusionCounts(tp=7, tn=9, fp=0, fn=0))
    assert s.as_dict() == {"f1": 100.0, "iou": 100.0, "recall": 100.0, "spec": 100.0, "prec": 100.0}
    assert s.vacuous == ()


def test_vacuous_precision_is_flagged():
    s = metrics(ConfusionCounts(tp=0, tn=10, fp=0, fn=5))
    assert s.f1 == 0.0 and s.recall == 0.0
    assert s.prec == 100.0 and s.vacuous == ("prec",)


def test_scores_match_formula_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        pred, gt = rng.random((2, 12, 12)) < rng.uniform(0.0, 1.0, size=2)[:, None, None]
        got = metrics(confusion(pred, gt)).as_dict()
        want = metric_formulas(*confusion_loop(pred, gt))
        for k in want:
            assert abs(got[k] - want[k]) <= 1e-9


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 1000), st.integers(0, 1000), st.integers(0, 1000), st.integers(0, 1000))
def test_f1_is_at_least_iou(tp, tn, fp, fn):
    s = metrics(ConfusionCounts(tp, tn, fp, fn))
    assert all(0 <= v <= 100 for v in s.as_dict().values())
    if tp + fp + fn > 0:
        assert s.f1 >= s.iou - 1e-12
        assert s.f1 == pytest.approx(200 * s.iou / (100 + s.iou), abs=1e-9)


def test_scores_ignore_pixel_order():
    rng = np.random.default_rng(2)
    pred, gt = rng.random((2, 10, 10)) < 0.4
    perm = rng.permutation(100)
    assert metrics(confusion(pred, gt)) == metrics(confusion(pred.ravel()[perm], gt.ravel()[perm]))


def test_format_mean_std():
    assert format_mean_std([79.82, 79.82, 79.82]) == "79.82±0.00"
    assert format_mean_std([1.0, 2.0, 3.0, 4.0, 5.0]) == f"3.00±{math.sqrt(2.5):.2f}"
    assert format_mean_std([42.0]) == "42.00±0.00"


def test_metrics_csv(tmp_path):
    path = tmp_path / "m.csv"
    write_metrics_csv(path, [score_row("r1", "synth", "infection", metrics(ConfusionCounts(0, 3, 0, 2)))])
    lines = path.read_text().splitlines()
    assert lines[0] == "run,dataset,class,f1,iou,recall,spec,prec,vacuous_f1,vacuous_iou,vacuous_recall," \
                       "vacuous_spec,vacuous_prec"
    assert lines[1].endswith(",0,0,0,0,1")


# ---------------------------------------------------------------- rank-sum


def test_midranks():
    np.testing.assert_array_equal(midranks([3.0, 1.0, 3.0, 2.0]), [3.5, 1.0, 3.5, 2.0])


def test_complete_separation():
    p = wilcoxon_rank_sum([1, 2, 3, 4, 5], [6, 7, 8, 9, 10])
    assert abs(p - 2 / 252) <= 1e-12


def test_interleaved_samples():
    # rank sum 25 vs null mean 27.5; 174 of 252 splits are at least that far out
    p = wilcoxon_rank_sum([1, 3, 5, 7, 9], [2, 4, 6, 8, 10])
    assert p == pytest.approx(174 / 252, abs=1e-12)
    assert Fraction(p).limit_denominator(252) == ranksum_enumerate([1, 3, 5, 7, 9], [2, 4, 6, 8, 10])


def test_rank_sum_at_null_mean_gives_one():
    assert wilcoxon_rank_sum([2], [1, 3]) == 1.0


def test_single_observations():
    assert wilcoxon_rank_sum([1], [2]) == 1.0


def test_one_sided_twelve_of_252():
    a, b = [1, 2, 3, 4, 9], [5, 6, 7, 8, 10]
    assert wilcoxon_rank_sum(a, b, alternative="less") == pytest.approx(12 / 252, abs=1e-12)
    assert wilcoxon_rank_sum(b, a, alternative="greater") == pytest.approx(12 / 252, abs=1e-12)


def test_two_sided_twelve_of_252_with_ties():
    a, b = [70.0] * 5, [70.0, 80.0, 81.0, 82.0, 83.0]
    p = wilcoxon_rank_sum(a, b)
    assert p == pytest.approx(12 / 252, abs=1e-12)
    assert Fraction(p).limit_denominator(252) == ranksum_enumerate(a, b)


def test_matches_enumeration_with_and_without_ties():
    rng = np.random.default_rng(3)
    for _ in range(60):
        n, m = rng.integers(1, 7, size=2)
        pool = rng.integers(0, 6, n + m) if rng.random() < 0.5 else rng.permutation(n + m)
        a, b = list(pool[:n]), list(pool[n:])
        for alt in ("two-sided", "less", "greater"):
            assert wilcoxon_rank_sum(a, b, alt) == pytest.approx(float(ranksum_enumerate(a, b, alt)), abs=1e-12)


def test_symmetry_and_lattice():
    rng = np.random.default_rng(4)
    for _ in range(100):
        a, b = rng.normal(size=5), rng.normal(size=5)
        p = wilcoxon_rank_sum(a, b)
        assert p == wilcoxon_rank_sum(b, a)
        assert 0 <= p <= 1
        assert abs(p * 252 - round(p * 252)) < 1e-9


def test_sample_size_limits():
    with pytest.raises(ValueError, match="normal approximation"):
        wilcoxon_rank_sum(range(13), [1, 2])
    with pytest.raises(ValueError):
        wilcoxon_rank_sum([], [1, 2])
    with pytest.raises(ValueError, match="alternative"):
        wilcoxon_rank_sum([1], [2], alternative="sideways")


# ---------------------------------------------------------------- components and severity


def test_two_squares_and_diagonal_touch():
    mask = np.zeros((8, 8), dtype=bool)
    mask[0:2, 0:2] = True
    mask[5:7, 4:7] = True
    _, sizes = connected_components(mask)
    assert sizes == [4, 6]
    diag = np.eye(4, dtype=bool)
    assert len(connected_components(diag)[1]) == 1


def test_labels_follow_row_major_first_pixel():
    mask = np.zeros((5, 5), dtype=bool)
    mask[0, 4] = mask[2, 0] = mask[4, 2] = True
    labels, _ = connected_components(mask)
    assert labels[0, 4] == 1 and labels[2, 0] == 2 and labels[4, 2] == 3


def test_component_count_matches_flood_fill():
    rng = np.random.default_rng(5)
    for _ in range(40):
        mask = rng.random((20, 20)) < rng.uniform(0.1, 0.6)
        assert len(connected_components(mask)[1]) == flood_fill_count(mask)


def _slice(frac_pixels, lung_pixels=100):
    lung = np.zeros((20, 20), dtype=bool)
    lung.ravel()[:lung_pixels] = True
    inf = np.zeros((20, 20), dtype=np.uint8)
    inf.ravel()[:frac_pixels] = 1
    return inf, lung


@pytest.mark.parametrize("pixels,label", [
    (60, SeverityLabel.SEVERE),
    (51, SeverityLabel.SEVERE),
    (50, SeverityLabel.INTERMEDIATE),
    (30, SeverityLabel.INTERMEDIATE),
    (25, SeverityLabel.MILD),
    (0, SeverityLabel.NON_INFECTED),
])
def test_severity_fractions(pixels, label):
    inf, lung = _slice(pixels)
    assert severity(inf, lung, pixel_spacing_mm=1.0) == label


def test_severity_lesion_count_and_size():
    lung = np.ones((64, 64), dtype=bool)
    inf = np.zeros((64, 64), dtype=np.uint8)
    inf[2:4, 2:4] = inf[10:12, 10:12] = 1
    assert severity(inf, lung, 1.0) == SeverityLabel.MILD
    inf[20:22, 20:22] = 1
    assert severity(inf, lung, 1.0) == SeverityLabel.UNCLASSIFIED
    inf[20:22, 20:22] = 2  # consolidation does not count toward the GGO lesion number
    assert severity(inf, lung, 1.0) == SeverityLabel.MILD
    big = np.zeros((64, 64), dtype=np.uint8)
    big[5, 5:40] = 1
    assert severity(big, lung, 1.0) == SeverityLabel.UNCLASSIFIED
    assert severity(big, lung, 0.5) == SeverityLabel.MILD


def test_severity_without_spacing_warns():
    inf, lung = _slice(10)
    with pytest.warns(UserWarning, match="spacing"):
        assert severity(inf, lung) == SeverityLabel.MILD


def test_diameter_of_a_straight_bar():
    labels = np.zeros((3, 12), dtype=int)
    labels[1, 1:11] = 1
    assert component_diameters_mm(labels, 1, 0.7) == [pytest.approx(7.0)]
