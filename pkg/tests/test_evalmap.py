import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddx import evalmap as ev
from ddx.detector import ScoredBox
from ddx.distortions import DISTORTIONS, DistortionClass as C, DistortionSpec
from ddx.imgcore import Rect
from ddx.regiongen import RegionAnnotation

PARAMS = {C.GWN: 0.05, C.GaussianBlur: 6.0, C.SaltPepper: 0.05, C.Quantization: 4, C.Jpeg: 5,
          C.LowPass: 0.03, C.Denoise: 0.08, C.FNoise: 2.5}


def gt(x, y, w, h, cls=C.GWN):
    return RegionAnnotation(Rect(x, y, w, h), DistortionSpec(cls, PARAMS[cls]))


def box(x, y, w, h, score=0.9, cls=C.GWN):
    return ScoredBox(Rect(x, y, w, h), cls, score)


def pixel_iou(a, b):
    """Count pixels on a grid large enough for both rects."""
    n = max(a.x + a.w, b.x + b.w, a.y + a.h, b.y + b.h)
    ma = np.zeros((n, n), bool)
    mb = np.zeros((n, n), bool)
    ma[a.y:a.y + a.h, a.x:a.x + a.w] = True
    mb[b.y:b.y + b.h, b.x:b.x + b.w] = True
    return (ma & mb).sum() / (ma | mb).sum()


def brute_ap(flags_in_rank_order, n_gt):
    """Integrate the precision envelope segment by segment over recall."""
    points = []
    tp = 0
    for k, f in enumerate(flags_in_rank_order, start=1):
        tp += f
        points.append((tp / n_gt, tp / k))
    area = 0.0
    prev = 0.0
    for r in sorted({r for r, _ in points}):
        if r <= prev:
            continue
        env = max(p for rr, p in points if rr >= r)
        area += (r - prev) * env
        prev = r
    return area


def brute_map(gts, preds, thresholds):
    """Slow reference evaluator written without the library's helpers."""
    out = {}
    classes = sorted({g.spec.cls for v in gts.values() for g in v})
    for t in thresholds:
        aps = []
        for c in classes:
            n_gt = sum(1 for v in gts.values() for g in v if g.spec.cls == c)
            cand = [(img, i, b) for img, bs in preds.items() for i, b in enumerate(bs) if b.cls == c]
            # stable by image insertion order, then index, then score
            cand.sort(key=lambda e: -e[2].score)
            used = set()
            flags = []
            for img, _, b in cand:
                best, best_key = -1.0, None
                for j, g in enumerate(gts.get(img, [])):
                    if g.spec.cls != c or (img, j) in used:
                        continue
                    v = pixel_iou(b.rect, g.rect)
                    if v > best:
                        best, best_key = v, (img, j)
                if best_key is not None and best >= t:
                    used.add(best_key)
                    flags.append(True)
                else:
                    flags.append(False)
            aps.append(brute_ap(flags, n_gt))
        out[t] = sum(aps) / len(aps)
    return out


def random_instance(rng, n_images, max_boxes, size=64, classes=(C.GWN, C.Jpeg, C.LowPass)):
    def rect():
        w, h = rng.integers(4, 30, size=2)
        x, y = rng.integers(0, size - w), rng.integers(0, size - h)
        return int(x), int(y), int(w), int(h)

    gts, preds = {}, {}
    for i in range(n_images):
        name = f"img{i:02d}"
        gts[name] = [gt(*rect(), cls=classes[rng.integers(len(classes))])
                     for _ in range(rng.integers(0, max_boxes + 1))]
        boxes = []
        for g in gts[name]:
            if rng.random() < 0.7:
                dx, dy = rng.integers(-3, 4, size=2)
                r = g.rect
                boxes.append(box(max(0, r.x + int(dx)), max(0, r.y + int(dy)), r.w, r.h,
                                 round(float(rng.random()), 2), g.spec.cls))
        for _ in range(rng.integers(0, 3)):
            boxes.append(box(*rect(), round(float(rng.random()), 2), classes[rng.integers(len(classes))]))
        preds[name] = boxes[:max_boxes]
    if not any(gts.values()):
        gts["img00"] = [gt(0, 0, 10, 10)]
    return gts, preds


class TestIoU:
    def test_identity_and_disjoint(self):
        a = Rect(3, 4, 20, 10)
        assert ev.iou(a, a) == 1.0
        assert ev.iou(a, Rect(23, 4, 5, 5)) == 0.0

    def test_third(self):
        a, b = Rect(0, 0, 100, 100), Rect(50, 0, 100, 100)
        assert ev.iou(a, b) == pytest.approx(1 / 3, abs=1e-15)
        assert pixel_iou(a, b) == pytest.approx(1 / 3, abs=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(st.tuples(*[st.integers(0, 30)] * 2, *[st.integers(1, 30)] * 2),
           st.tuples(*[st.integers(0, 30)] * 2, *[st.integers(1, 30)] * 2))
    def test_properties(self, ta, tb):
        a, b = Rect(*ta), Rect(*tb)
        v = ev.iou(a, b)
        assert v == ev.iou(b, a)
        assert 0.0 <= v <= 1.0
        assert (v == 1.0) == (a == b)
        assert v == pytest.approx(pixel_iou(a, b), abs=1e-12)


def optimal_matches(preds, gts, t):
    feasible = [[ev.iou(p.rect, g.rect) >= t for g in gts] for p in preds]
    best = 0
    k = len(gts)
    for perm in itertools.permutations(range(max(len(preds), k)), len(preds)):
        best = max(best, sum(1 for i, j in enumerate(perm) if j < k and feasible[i][j]))
    return best, sum(map(sum, feasible))


class TestMatching:
    def test_exact(self):
        for t in ev.DEFAULT_THRESHOLDS:
            tp, matched = ev.match_detections([box(5, 5, 40, 40)], [gt(5, 5, 40, 40)], t)
            assert tp == [True] and matched == [True]

    def test_double_prediction(self):
        preds = [box(0, 0, 40, 40, 0.4), box(0, 0, 40, 40, 0.8)]
        tp, _ = ev.match_detections(preds, [gt(0, 0, 40, 40)], 0.5)
        assert tp == [False, True]

    def test_score_tie_uses_input_order(self):
        preds = [box(0, 0, 40, 40, 0.5), box(1, 0, 40, 40, 0.5)]
        tp, _ = ev.match_detections(preds, [gt(0, 0, 40, 40)], 0.5)
        assert tp == [True, False]

    def test_against_exhaustive_oracle(self):
        rng = np.random.default_rng(0)
        equal_cases = 0
        for _ in range(300):
            gts = [gt(*map(int, rng.integers(0, 20, 2)), *map(int, rng.integers(5, 15, 2)))
                   for _ in range(rng.integers(0, 5))]
            preds = [box(*map(int, rng.integers(0, 20, 2)), *map(int, rng.integers(5, 15, 2)),
                         float(rng.random())) for _ in range(rng.integers(0, 5))]
            t = float(rng.choice(ev.DEFAULT_THRESHOLDS[:2]))
            tp, matched = ev.match_detections(preds, gts, t)
            assert sum(tp) == sum(matched)
            opt, n_feasible = optimal_matches(preds, gts, t)
            assert sum(tp) <= opt
            if opt == n_feasible:
                equal_cases += 1
                assert sum(tp) == opt
        assert equal_cases > 50

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_tp_at_high_threshold_implies_low(self, seed):
        rng = np.random.default_rng(seed)
        gts, preds = random_instance(rng, 1, 4)
        g, p = gts["img00"], preds.get("img00", [])
        for c in DISTORTIONS:
            cp = [b for b in p if b.cls == c]
            cg = [x for x in g if x.spec.cls == c]
            hi, _ = ev.match_detections(cp, cg, 0.9)
            for t in (0.5, 0.75):
                lo, _ = ev.match_detections(cp, cg, t)
                assert all(l for h, l in zip(hi, lo) if h)


class TestAveragePrecision:
    def test_hand_case(self):
        gts = {"a": [gt(0, 0, 50, 50), gt(100, 100, 50, 50)]}
        preds = [("a", box(0, 0, 50, 50, 0.9)), ("a", box(200, 200, 20, 20, 0.8)),
                 ("a", box(100, 100, 50, 50, 0.7))]
        assert ev.average_precision(preds, gts, 0.5) == pytest.approx(5 / 6, abs=1e-12)
        assert brute_ap([True, False, True], 2) == pytest.approx(5 / 6, abs=1e-12)

    def test_perfect_and_empty(self):
        gts = {"a": [gt(0, 0, 50, 50)], "b": [gt(10, 10, 30, 30)]}
        preds = [("a", box(0, 0, 50, 50, 0.1)), ("b", box(10, 10, 30, 30, 0.2))]
        assert ev.average_precision(preds, gts, 0.9) == 1.0
        assert ev.average_precision([], gts, 0.5) == 0.0

    def test_undefined(self):
        with pytest.raises(ValueError):
            ev.average_precision([], {"a": []}, 0.5)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.booleans(), max_size=30), st.integers(1, 30))
    def test_envelope_matches_brute(self, flags, extra):
        n_gt = sum(flags) + extra - 1 if sum(flags) + extra - 1 > 0 else 1
        v = ev.precision_envelope_area(flags, n_gt)
        assert v == pytest.approx(brute_ap(flags, n_gt), abs=1e-12)
        assert 0.0 <= v <= 1.0


class TestMeanAP:
    def _perfect(self):
        gts = {"a": [gt(0, 0, 100, 100), gt(150, 150, 100, 100, C.Jpeg)],
               "b": [gt(20, 30, 90, 90, C.SaltPepper)]}
        preds = {k: [box(g.rect.x, g.rect.y, g.rect.w, g.rect.h, 0.5, g.spec.cls) for g in v]
                 for k, v in gts.items()}
        return gts, preds

    def test_perfect(self):
        res = ev.mean_ap(*self._perfect())
        assert res.row() == [1.0, 1.0, 1.0]
        assert set(res.ap[0.5]) == {C.GWN, C.Jpeg, C.SaltPepper}
        assert set(res.excluded) == set(DISTORTIONS) - {C.GWN, C.Jpeg, C.SaltPepper}

    def test_jitter(self):
        gts, _ = self._perfect()
        preds = {k: [box(g.rect.x + 11, g.rect.y, g.rect.w, g.rect.h, 0.5, g.spec.cls) for g in v]
                 for k, v in gts.items()}
        for k, v in gts.items():
            for g, p in zip(v, preds[k]):
                assert 0.78 < ev.iou(g.rect, p.rect) < 0.82
        assert ev.mean_ap(gts, preds).row() == [1.0, 1.0, 0.0]

    def test_empty_gt(self):
        with pytest.raises(ValueError):
            ev.mean_ap({"a": []}, {"a": [box(0, 0, 5, 5)]})

    def test_predictions_on_unknown_image_are_false_positives(self):
        gts, preds = self._perfect()
        preds["ghost"] = [box(0, 0, 100, 100, 0.99)]
        res = ev.mean_ap(gts, preds)
        assert res.ap[0.5][C.GWN] == pytest.approx(0.5)

    def test_fixed_random_fixture(self):
        gts, preds = random_instance(np.random.default_rng(42), 20, 5)
        res = ev.mean_ap(gts, preds)
        ref = brute_map(gts, preds, ev.DEFAULT_THRESHOLDS)
        for t in ev.DEFAULT_THRESHOLDS:
            assert abs(res.mean_ap[t] - ref[t]) <= 1e-9

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 20), st.integers(1, 5))
    def test_equivalence_property(self, seed, n_images, max_boxes):
        gts, preds = random_instance(np.random.default_rng(seed), n_images, max_boxes)
        res = ev.mean_ap(gts, preds)
        ref = brute_map(gts, preds, ev.DEFAULT_THRESHOLDS)
        for t in ev.DEFAULT_THRESHOLDS:
            assert abs(res.mean_ap[t] - ref[t]) <= 1e-9
            assert 0.0 <= res.mean_ap[t] <= 1.0


class TestClassification:
    def test_all_correct(self):
        truth = [C.GWN, C.Jpeg, C.Pristine, C.Jpeg]
        acc, cm = ev.classification_accuracy(truth, truth)
        assert acc == 1.0
        assert np.array_equal(cm, np.diag(np.diag(cm))) and cm.sum() == 4

    def test_degenerate(self):
        truth = [C.GWN] * 3 + [C.LowPass] * 5 + [C.Pristine] * 2
        acc, cm = ev.classification_accuracy(truth, [C.GWN] * 10)
        assert acc == 0.3
        assert list(cm[:, int(C.GWN)]) == list(cm.sum(axis=1))

    def test_hand_fixture(self):
        pairs = [("gwn", "gwn"), ("sp", "gwn"), ("jpeg", "jpeg"), ("blur", "lowpass"), ("lowpass", "lowpass"),
                 ("pristine", "pristine"), ("quant", "quant"), ("fnoise", "gwn"), ("denoise", "denoise"), ("sp", "sp")]
        acc, cm = ev.classification_accuracy([a for a, _ in pairs], [b for _, b in pairs])
        assert acc == 0.7
        assert cm[int(C.SaltPepper), int(C.GWN)] == 1
        assert list(cm.sum(axis=1)) == [1, 1, 2, 1, 1, 1, 1, 1, 1]

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ev.classification_accuracy([C.GWN], [])


class TestSizeBuckets:
    def test_perfect(self):
        gts = {"a": [gt(0, 0, 40, 40), gt(100, 100, 150, 150, C.Jpeg)]}
        preds = {"a": [box(0, 0, 40, 40), box(100, 100, 150, 150, cls=C.Jpeg)]}
        buckets = ev.size_bucketed_recall(gts, preds, {"a": 300})
        assert [b.recall for b in buckets] == [1.0, None, None, None, 1.0, None]

    def test_only_large_predicted(self):
        gts = {"a": [gt(0, 0, 30, 30), gt(40, 40, 60, 60), gt(110, 0, 120, 120, C.Jpeg)],
               "b": [gt(0, 0, 200, 200, C.LowPass)]}
        preds = {"a": [box(110, 0, 120, 120, cls=C.Jpeg)], "b": [box(0, 0, 200, 200, cls=C.LowPass)]}
        buckets = ev.size_bucketed_recall(gts, preds, {"a": 300, "b": 300})
        rec = {b.lo: b.recall for b in buckets if b.recall is not None}
        assert rec == {0.1: 0.0, 0.2: 0.0, 0.4: 1.0, 0.6: 1.0}

    def test_mixed_hand_tally(self):
        # ratios 0.1, 0.15, 0.25, 0.35, 0.35, 0.5, 0.7(closed last edge), 0.05(clamped down)
        gts = {"a": [gt(0, 0, 30, 30), gt(40, 0, 45, 45), gt(0, 50, 75, 75, C.Jpeg),
                     gt(100, 100, 105, 105, C.SaltPepper)],
               "b": [gt(0, 0, 105, 105), gt(110, 0, 150, 150, C.Jpeg), gt(0, 160, 15, 15)],
               "c": [gt(0, 0, 210, 210, C.LowPass)]}
        preds = {"a": [box(0, 0, 30, 30), box(45, 0, 45, 45), box(0, 50, 75, 75, cls=C.Jpeg)],
                 "b": [box(0, 0, 105, 105, 0.3), box(110, 0, 150, 150, cls=C.GWN), box(0, 160, 15, 15)],
                 "c": [box(0, 0, 210, 210, cls=C.LowPass)]}
        buckets = ev.size_bucketed_recall(gts, preds, {k: 300 for k in gts})
        tally = [(b.n_gt, b.n_matched) for b in buckets]
        assert tally == [(3, 2), (1, 1), (2, 1), (0, 0), (1, 0), (1, 1)]
        assert buckets[3].recall is None
        csv_text = ev.size_recall_csv(buckets)
        lines = csv_text.strip().split("\n")
        assert lines[0] == "bucket_lo,bucket_hi,n_gt,n_matched,recall"
        assert lines[4] == "0.4,0.5,0,0,"
        assert lines[1] == "0.1,0.2,3,2,0.666667"

    def test_bad_edges(self):
        with pytest.raises(ValueError):
            ev.size_bucketed_recall({}, {}, {}, edges=[0.3, 0.2])


class TestTransfer:
    def _sets(self):
        basic = {"b0": [gt(0, 0, 150, 150)], "b1": [gt(50, 50, 100, 120, C.Jpeg)]}
        difficult = {"d0": [gt(0, 0, 40, 40), gt(100, 100, 50, 60, C.LowPass)]}
        return {"basic": (basic, list(basic)), "difficult": (difficult, list(difficult))}

    def test_perfect_oracle(self):
        sets = self._sets()
        lookup = {k: v for s in sets.values() for k, v in s[0].items()}

        def oracle(img):
            return [box(g.rect.x, g.rect.y, g.rect.w, g.rect.h, 1.0, g.spec.cls) for g in lookup[img]]

        table = ev.transfer_matrix({"basic": oracle, "difficult": oracle}, sets)
        assert table.shape == (2, 2, 3)
        assert np.all(table == 1.0)
        text = ev.transfer_table(table, ev.DEFAULT_THRESHOLDS)
        body = text.splitlines()[2:]
        assert [r.split("  ")[0].strip() for r in body] == [
            "basic -> basic", "difficult -> basic", "basic -> difficult", "difficult -> difficult"]

    def test_same_model_diagonal(self):
        sets = self._sets()

        def fixed(img):
            return [box(0, 0, 100, 100, 0.7), box(40, 40, 100, 100, 0.6, C.Jpeg)]

        table = ev.transfer_matrix({"basic": fixed, "difficult": fixed}, sets)
        assert np.array_equal(table[0, 0], table[1, 0]) and np.array_equal(table[0, 1], table[1, 1])

    def test_missing(self):
        with pytest.raises(KeyError):
            ev.transfer_matrix({"basic": lambda i: []}, self._sets())


class TestInterchange:
    def test_detection_roundtrip(self, tmp_path):
        preds = {"x.png": [box(1, 2, 3, 4, 0.25, C.FNoise)], "y.png": []}
        ev.write_detection_predictions(preds, tmp_path / "p.jsonl")
        assert ev.read_detection_predictions(tmp_path / "p.jsonl") == preds

    def test_class_roundtrip(self, tmp_path):
        preds = {"x.png": (C.Denoise, 0.5)}
        ev.write_class_predictions(preds, tmp_path / "c.jsonl")
        assert ev.read_class_predictions(tmp_path / "c.jsonl") == preds

    def test_malformed(self, tmp_path):
        p = tmp_path / "p.jsonl"
        p.write_text('{"image": "a", "boxes": []}\n{"image": "b"}\n')
        with pytest.raises(ValueError, match="line 2"):
            ev.read_detection_predictions(p)
