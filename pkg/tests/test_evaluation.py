import json
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from evs.evaluation import (
    METRICS_SCHEMA,
    ConfusionMatrix,
    EmptyEvaluationError,
    HopEvaluator,
    TimingReport,
    accumulate,
    evaluate,
    inconsistency_statistics,
    iou_per_class,
    metrics_document,
    timed_probe,
    write_json,
)
from evs.exceptions import DimensionMismatchError, ValidationError
from evs.imagery import InconsistencyMask, LabelMap


def lm(a, c=2):
    return LabelMap(np.asarray(a, np.uint8), c)


def two_class_case():
    gt = np.zeros((4, 4), np.uint8)
    gt[0, :4] = 1                  # 4 px of class 1
    pred = np.zeros((4, 4), np.uint8)
    pred[0, :2] = 1                # covers 2 of them
    pred[1, :2] = 1                # plus 2 class-0 px
    return lm(pred), lm(gt)


def brute_iou(pred, gt, c):
    out = []
    for k in range(c):
        p, g = pred == k, gt == k
        out.append((p & g).sum() / (p | g).sum())
    return out


class TestIoU:
    def test_hand_counted_case(self):
        pred, gt = two_class_case()
        res = iou_per_class(ConfusionMatrix(2).accumulate(pred, gt))
        assert res.per_class[1] == pytest.approx(2 / 6)
        assert res.per_class[0] == pytest.approx(10 / 14)
        assert res.miou == pytest.approx((10 / 14 + 1 / 3) / 2)
        assert res.per_class.tolist() == pytest.approx(brute_iou(pred.labels, gt.labels, 2))

    def test_perfect_and_inverted(self):
        a = lm([[0, 1], [1, 0]])
        assert evaluate([a], [a], 2).miou == 1.0
        inv = lm(1 - a.labels)
        assert evaluate([inv], [a], 2).per_class.tolist() == [0.0, 0.0]

    def test_absent_class_excluded(self):
        a = lm([[0, 1]], 3)
        res = evaluate([a], [a], 3)
        assert not res.present[2] and np.isnan(res.per_class[2]) and res.miou == 1.0
        assert res.to_dict()["per_class"]["2"] is None

    def test_empty(self):
        with pytest.raises(EmptyEvaluationError):
            iou_per_class(ConfusionMatrix(2))
        ignore = LabelMap(np.full((2, 2), 255, np.uint8), 2)
        with pytest.raises(EmptyEvaluationError):
            evaluate([lm(np.zeros((2, 2)))], [ignore], 2)

    def test_errors(self):
        with pytest.raises(DimensionMismatchError):
            ConfusionMatrix(2).accumulate(lm([[0, 1]]), lm([[0], [1]]))
        with pytest.raises(ValidationError):
            ConfusionMatrix(2).accumulate(LabelMap(np.array([[255]], np.uint8), 2), lm([[0]]))
        with pytest.raises(ValidationError):
            ConfusionMatrix(2).merge(ConfusionMatrix(3))
        with pytest.raises(ValidationError):
            ConfusionMatrix(0)

    def test_pure_accumulate(self):
        pred, gt = two_class_case()
        cm = ConfusionMatrix(2)
        out = accumulate(cm, pred, gt)
        assert cm.total == 0 and out.total == 16

    @given(st.integers(0, 2 ** 31), st.integers(2, 6))
    def test_merge_matches_single_pass(self, seed, c):
        r = np.random.default_rng(seed)
        frames = [(lm(r.integers(0, c, (5, 7)), c), lm(r.integers(0, c, (5, 7)), c)) for _ in range(3)]
        one = ConfusionMatrix(c)
        for p, g in frames:
            one.accumulate(p, g)
        parts = [ConfusionMatrix(c).accumulate(p, g) for p, g in frames]
        assert np.array_equal(((parts[0] + parts[1]) + parts[2]).counts, one.counts)
        assert np.array_equal((parts[0] + (parts[1] + parts[2])).counts, one.counts)

    @given(st.integers(0, 2 ** 31))
    def test_ignore_pixels_do_not_matter(self, seed):
        r = np.random.default_rng(seed)
        pred = r.integers(0, 3, (6, 6)).astype(np.uint8)
        gt = r.integers(0, 3, (6, 6)).astype(np.uint8)
        gt[0, 0] = 0
        pred[0, 0] = 0
        base = evaluate([lm(pred, 3)], [lm(gt, 3)], 3)
        gt2 = np.concatenate([gt, np.full((2, 6), 255, np.uint8)])
        pred2 = np.concatenate([pred, r.integers(0, 3, (2, 6)).astype(np.uint8)])
        other = evaluate([lm(pred2, 3)], [lm(gt2, 3)], 3)
        np.testing.assert_array_equal(base.per_class, other.per_class)

    def test_hop_evaluator(self):
        pred, gt = two_class_case()
        ev = HopEvaluator(2)
        ev.add(0, gt, gt)
        ev.add(1, pred, gt)
        hops = ev.miou_by_hop()
        assert hops[0] == 1.0 and hops[1] == pytest.approx((10 / 14 + 1 / 3) / 2)
        assert 0 < ev.overall().miou < 1


class TestInconsistency:
    def test_grouping_and_histogram(self):
        def res(h, frac):
            w = np.zeros((10, 100))
            w.flat[: int(frac * 1000)] = 1
            return SimpleNamespace(hops=h, raw_mask=InconsistencyMask(w))

        stats = inconsistency_statistics([res(1, 0.001), res(1, 0.003), res(2, 0.012),
                                          SimpleNamespace(hops=0, raw_mask=None)])
        assert stats.mean_by_hop() == pytest.approx({1: 0.002, 2: 0.012})
        edges, counts = stats.histogram()
        assert edges[1] == pytest.approx(0.005) and counts[0] == 2 and counts[2] == 1
        d = stats.to_dict()
        assert d["per_hop"]["1"]["frames"] == 2 and d["per_hop"]["2"]["histogram"] == {"0.0100": 1}

    def test_bad_bucket(self):
        with pytest.raises(ValidationError):
            inconsistency_statistics([], bucket_width=0)


class TestTiming:
    def test_fake_clock_retains_after_warmup(self):
        ticks = iter(range(0, 10 ** 9, 1_000_000))
        rep = timed_probe(lambda: None, samples=300, warmup=50, clock=lambda: next(ticks))
        assert rep.count == 250 and rep.warmup_discarded == 50
        assert rep.mean == rep.median == 1.0 and rep.stddev == 0.0 and not rep.flagged

    def test_statistics_by_hand(self):
        rep = TimingReport("x", [1.0, 2.0, 3.0, 10.0])
        assert rep.mean == 4.0 and rep.median == 2.5
        assert rep.stddev == pytest.approx(np.sqrt(((9 + 4 + 1 + 36) / 4)))
        assert TimingReport("y", [5.0]).stddev == 0.0

    @pytest.mark.parametrize("samples,warmup", [(0, 0), (10, 10), (10, -1)])
    def test_bad_arguments(self, samples, warmup):
        with pytest.raises(ValidationError):
            timed_probe(lambda: None, samples=samples, warmup=warmup)

    def test_metrics_document(self, tmp_path):
        pred, gt = two_class_case()
        doc = metrics_document(evaluate([pred], [gt], 2), {1: 0.5},
                               timings=[TimingReport("flow", [1.0, 2.0])], class_names=["a", "b"])
        write_json(tmp_path / "m.json", doc)
        back = json.loads((tmp_path / "m.json").read_text())
        assert back["schema"] == METRICS_SCHEMA and back["schema_version"] == 1
        assert back["per_class"]["b"] == pytest.approx(1 / 3)
        assert back["miou_by_hop"] == {"1": 0.5}
        assert back["timings"][0]["count"] == 2 and "samples_ms" not in back["timings"][0]
