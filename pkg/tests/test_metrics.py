import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ivgdcl.datamodel import BoundaryIndices, TimeInterval
from ivgdcl.metrics import (EvalReport, evaluate_predictions, iou, mean_iou, recall_at_n,
                            report_table_csv)

D = 100.0


def iv(a, b):
    return TimeInterval(a, b, D)


# pred, gold, IoU worked out by hand
FIXTURE = [
    ((0, 10), (5, 15), 1 / 3),
    ((2, 8), (2, 8), 1.0),
    ((0, 4), (6, 10), 0.0),
    ((0, 10), (0, 5), 0.5),
    ((0, 10), (2, 8), 0.6),
    ((1, 9), (0, 10), 0.8),
    ((0, 2), (1, 3), 1 / 3),
    ((0, 4), (0, 5), 0.8),
    ((3, 7), (0, 10), 0.4),
    ((0, 10), (9, 20), 0.05),
]
PREDS = [iv(*p) for p, _, _ in FIXTURE]
GOLDS = [iv(*g) for _, g, _ in FIXTURE]


def test_iou_basics():
    assert iou(iv(0, 10), iv(0, 10)) == 1.0
    assert iou(iv(0, 4), iv(6, 10)) == 0.0
    assert iou(iv(0, 10), iv(5, 15)) == pytest.approx(1 / 3, abs=1e-12)


def test_iou_index_space_is_inclusive():
    t = 10
    assert iou(BoundaryIndices(2, 2, t), BoundaryIndices(2, 2, t)) == 1.0
    assert iou(BoundaryIndices(0, 1, t), BoundaryIndices(1, 2, t)) == pytest.approx(1 / 3)


def test_iou_kind_mismatch():
    with pytest.raises(TypeError):
        iou(iv(0, 1), BoundaryIndices(0, 1, 4))


def test_fixture_ious():
    for pred, gold, (_, _, expected) in zip(PREDS, GOLDS, FIXTURE):
        assert iou(pred, gold) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("mu, expected", [(0.1, 80.0), (0.3, 80.0), (0.5, 40.0), (0.7, 30.0)])
def test_recall_fixture(mu, expected):
    # strict ">": the 0.5 example is a miss at mu = 0.5
    assert recall_at_n([[p] for p in PREDS], GOLDS, 1, mu) == pytest.approx(expected)


def test_mean_iou_fixture():
    assert mean_iou(PREDS, GOLDS) == pytest.approx(100 * 4.81666666666 / 10, abs=1e-6)


def test_two_example_case():
    preds = [iv(0, 10), iv(2, 8)]
    golds = [iv(5, 15), iv(2, 8)]
    assert recall_at_n([[p] for p in preds], golds, 1, 0.5) == 50.0
    assert mean_iou(preds, golds) == pytest.approx(66.6667, abs=1e-3)


def test_recall_extremes():
    preds = [[iv(0, 10)], [iv(3, 9)]]
    golds = [iv(5, 15), iv(2, 8)]
    assert recall_at_n(preds, golds, 1, 0.0) == 100.0
    assert recall_at_n(preds, golds, 1, 1.0) == 0.0


def test_recall_top_n():
    preds = [[iv(0, 4), iv(5, 15)], [iv(0, 1), iv(50, 60)]]
    golds = [iv(5, 15), iv(2, 8)]
    assert recall_at_n(preds, golds, 1, 0.5) == 0.0
    assert recall_at_n(preds, golds, 2, 0.5) == 50.0


def test_errors():
    with pytest.raises(ValueError):
        recall_at_n([], [], 1, 0.5)
    with pytest.raises(ValueError):
        mean_iou([iv(0, 1)], [])
    with pytest.raises(ValueError):
        mean_iou([iv(0, 1)], [iv(0, 1), iv(1, 2)])


def test_all_perfect_and_all_disjoint():
    assert mean_iou(GOLDS, GOLDS) == 100.0
    assert mean_iou([iv(90, 95)] * 3, [iv(0, 5), iv(10, 20), iv(30, 40)]) == 0.0


def _grid_iou(a, b):
    # a, b: integer endpoints on the grid, cells [k, k + 1)
    n = max(a[1], b[1]) + 1
    ma = np.zeros(n, bool)
    mb = np.zeros(n, bool)
    ma[a[0]:a[1]] = True
    mb[b[0]:b[1]] = True
    union = (ma | mb).sum()
    return (ma & mb).sum() / union if union else float(a == b)


def test_iou_matches_grid_enumeration():
    rng = np.random.default_rng(2021)
    span = 10_000  # grid resolution 1e-4 of the span
    for _ in range(200):
        a = tuple(sorted(rng.integers(0, span + 1, 2)))
        b = tuple(sorted(rng.integers(0, span + 1, 2)))
        closed = iou(TimeInterval(a[0] / span, a[1] / span, 1.0),
                     TimeInterval(b[0] / span, b[1] / span, 1.0))
        assert abs(closed - _grid_iou(a, b)) <= 1e-6


spans = st.tuples(st.floats(0, 100), st.floats(0, 100)).map(lambda x: iv(min(x), max(x)))


@given(spans, spans)
def test_iou_symmetric_and_bounded(a, b):
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0


@given(st.lists(st.tuples(st.lists(spans, min_size=1, max_size=4), spans), min_size=1,
                max_size=20),
       st.floats(0, 1), st.floats(0, 1), st.integers(1, 4), st.integers(1, 4))
def test_recall_monotone(cases, mu1, mu2, n1, n2):
    preds = [p for p, _ in cases]
    golds = [g for _, g in cases]
    lo_mu, hi_mu = sorted((mu1, mu2))
    lo_n, hi_n = sorted((n1, n2))
    assert recall_at_n(preds, golds, lo_n, hi_mu) <= recall_at_n(preds, golds, lo_n, lo_mu)
    assert recall_at_n(preds, golds, lo_n, lo_mu) <= recall_at_n(preds, golds, hi_n, lo_mu)


def test_report_and_csv():
    rep = evaluate_predictions(PREDS, GOLDS)
    assert rep.r1_iou == pytest.approx({0.1: 80.0, 0.3: 80.0, 0.5: 40.0, 0.7: 30.0})
    assert rep.n_examples == 10
    assert EvalReport.from_dict(rep.to_dict()) == rep
    csv_text = report_table_csv({"full": rep})
    header, row = csv_text.strip().splitlines()
    assert header == "model,IoU=0.1,IoU=0.3,IoU=0.5,IoU=0.7,mIoU"
    assert row == "full,80.00,80.00,40.00,30.00,48.17"
