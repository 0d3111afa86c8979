"""Metric correctness against closed-form and brute-force oracles."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from defectgen.metrics import (FeatureExtractor, diversity, fid, image_confusion,
                               memorization, metric_report, miou,
                               perceptual_distance, write_report)


class StubExtractor:
    """Identity extractor: 'images' are (d,) vectors passed straight through."""

    name = "stub"
    dim = None

    def features(self, images):
        return np.asarray(images, dtype=np.float64)

    def layer_features(self, images):
        return [np.asarray(images, dtype=np.float64)]


def gaussian_cloud(rng, mu, cov_sqrt, n):
    return mu + rng.standard_normal((n, len(mu))) @ cov_sqrt.T


def frechet_oracle(mu_a, cov_a, mu_b, cov_b):
    """Closed form for simultaneously diagonalizable (here: diagonal) covs."""
    d = mu_a - mu_b
    return float(d @ d + np.sum(cov_a + cov_b - 2 * np.sqrt(cov_a * cov_b)))


class TestFid:
    def test_identical_sets_near_zero(self):
        rng = np.random.default_rng(0)
        cloud = rng.standard_normal((40, 3)).tolist()
        assert fid(cloud, cloud, StubExtractor()) <= 1e-6

    def test_diagonal_gaussian_oracle(self):
        # with diagonal sample covariances the matrix sqrt has a closed form;
        # construct exact sample moments by affinely correcting a raw cloud
        rng = np.random.default_rng(1)
        d = 2
        reg = 1e-6

        def exact_cloud(mu, var, n):
            x = rng.standard_normal((n, d))
            x = (x - x.mean(0)) / x.std(0, ddof=1)
            # decorrelate exactly, then rescale
            c = np.cov(x, rowvar=False)
            l = np.linalg.cholesky(c)
            x = x @ np.linalg.inv(l).T
            return mu + x * np.sqrt(var)

        mu_a, var_a = np.array([0.0, 1.0]), np.array([1.0, 4.0])
        mu_b, var_b = np.array([2.0, -1.0]), np.array([0.25, 9.0])
        a = exact_cloud(mu_a, var_a, 50)
        b = exact_cloud(mu_b, var_b, 50)
        got = fid(a.tolist(), b.tolist(), StubExtractor(), reg=reg)
        want = frechet_oracle(mu_a, var_a + reg, mu_b, var_b + reg)
        assert abs(got - want) < 1e-8

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((30, 4)).tolist()
        b = (rng.standard_normal((25, 4)) + 1.0).tolist()
        f = StubExtractor()
        assert abs(fid(a, b, f) - fid(b, a, f)) < 1e-9

    def test_mean_shift_increases_fid(self):
        rng = np.random.default_rng(3)
        base = rng.standard_normal((40, 3))
        f = StubExtractor()
        d_small = fid(base.tolist(), (base + 0.1).tolist(), f)
        d_big = fid(base.tolist(), (base + 2.0).tolist(), f)
        assert d_big > d_small

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError):
            fid([], [[0.0, 0.0]], StubExtractor())

    def test_singleton_sets_use_zero_cov(self):
        # n=1 -> zero covariance + reg; distance collapses to squared mean gap
        f = StubExtractor()
        got = fid([[0.0, 0.0]], [[3.0, 4.0]], f, reg=0.0)
        assert abs(got - 25.0) < 1e-12

    def test_real_extractor_on_images(self):
        rng = np.random.default_rng(4)
        ims_a = [rng.uniform(0, 255, (32, 32, 3)) for _ in range(8)]
        ims_b = [rng.uniform(0, 255, (32, 32, 3)) for _ in range(8)]
        f = FeatureExtractor(seed=0)
        v = fid(ims_a, ims_b, f)
        assert np.isfinite(v) and v >= 0.0


class TestDiversity:
    def test_pair_enumeration_oracle(self):
        rng = np.random.default_rng(5)
        vecs = rng.standard_normal((6, 4))
        f = StubExtractor()
        got = diversity(vecs.tolist(), f)
        unit = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
        want = np.mean([np.linalg.norm(unit[i] - unit[j])
                        for i, j in itertools.combinations(range(6), 2)])
        assert abs(got - want) < 1e-12

    def test_permutation_invariant(self):
        rng = np.random.default_rng(6)
        ims = [rng.uniform(0, 1, (16, 16, 3)) for _ in range(5)]
        f = FeatureExtractor(seed=1)
        assert abs(diversity(ims, f) - diversity(ims[::-1], f)) < 1e-12

    def test_identical_images_zero(self):
        im = np.random.default_rng(7).uniform(0, 1, (16, 16, 3))
        assert diversity([im, im.copy(), im.copy()], FeatureExtractor(seed=0)) < 1e-9

    def test_needs_two_images(self):
        with pytest.raises(ValueError):
            diversity([np.zeros((8, 8, 3))], FeatureExtractor(seed=0))


class TestMemorization:
    def test_brute_force_oracle(self):
        rng = np.random.default_rng(8)
        gen = rng.standard_normal((20, 5))
        train = rng.standard_normal((20, 5))
        f = StubExtractor()
        got = memorization(gen.tolist(), train.tolist(), f)

        def pd(a, b):
            ua = a / (np.linalg.norm(a) + 1e-12)
            ub = b / (np.linalg.norm(b) + 1e-12)
            return np.linalg.norm(ua - ub)

        nn = [min(pd(g, t) for t in train) for g in gen]
        spread = np.mean([pd(train[i], train[j])
                          for i, j in itertools.combinations(range(20), 2)])
        assert abs(got["mean_nn_distance"] - np.mean(nn)) < 1e-12
        assert abs(got["tau_dup"] - 0.01 * spread) < 1e-12
        assert got["duplicate_fraction"] == np.mean([d <= 0.01 * spread for d in nn])

    def test_exact_copies_flagged(self):
        rng = np.random.default_rng(9)
        train = [rng.uniform(0, 1, (16, 16, 3)) for _ in range(6)]
        gen = [train[0].copy(), train[3].copy()]
        m = memorization(gen, train, FeatureExtractor(seed=0))
        assert m["duplicate_fraction"] == 1.0

    def test_fresh_samples_not_flagged(self):
        rng = np.random.default_rng(10)
        train = [rng.uniform(0, 1, (16, 16, 3)) for _ in range(6)]
        gen = [rng.uniform(0, 1, (16, 16, 3)) for _ in range(4)]
        m = memorization(gen, train, FeatureExtractor(seed=0))
        assert m["duplicate_fraction"] == 0.0
        assert m["mean_nn_distance"] > m["tau_dup"]


class TestMiou:
    @staticmethod
    def brute(preds, gts, n_classes, include_background):
        start = 0 if include_background else 1
        per, vals = {}, []
        for k in range(start, n_classes):
            inter = sum(int(np.sum((p == k) & (g == k))) for p, g in zip(preds, gts))
            union = sum(int(np.sum((p == k) | (g == k))) for p, g in zip(preds, gts))
            if union:
                per[k] = inter / union
                vals.append(inter / union)
        return per, (float(np.mean(vals)) if vals else 0.0)

    def test_randomized_against_brute_force(self):
        rng = np.random.default_rng(11)
        for trial in range(100):
            n_classes = int(rng.integers(2, 5))
            n = int(rng.integers(1, 4))
            preds = [rng.integers(0, n_classes, (8, 8)) for _ in range(n)]
            gts = [rng.integers(0, n_classes, (8, 8)) for _ in range(n)]
            for inc in (False, True):
                got = miou(preds, gts, n_classes, include_background=inc)
                per, mean = self.brute(preds, gts, n_classes, inc)
                assert got["per_class_iou"] == pytest.approx(per)
                assert got["mean"] == pytest.approx(mean)

    def test_perfect_prediction(self):
        g = np.random.default_rng(12).integers(0, 3, (16, 16))
        assert miou([g], [g], 3)["mean"] == 1.0

    def test_micro_aggregation_not_per_image_mean(self):
        # image 1: intersection 1/union 2 for class 1; image 2: 3/3
        p1 = np.array([[1, 0]]); g1 = np.array([[1, 1]])
        p2 = np.array([[1, 1, 1]]); g2 = np.array([[1, 1, 1]])
        got = miou([p1, p2], [g1, g2], 2)["mean"]
        assert got == pytest.approx(4 / 5)          # micro: (1+3)/(2+3)
        assert got != pytest.approx((1 / 2 + 1) / 2)  # not macro over images

    def test_absent_class_excluded_from_mean(self):
        p = np.array([[1, 0]]); g = np.array([[1, 0]])
        out = miou([p], [g], 3)  # class 2 never appears
        assert 2 not in out["per_class_iou"]
        assert out["mean"] == 1.0

    def test_relabel_symmetry(self):
        # swapping labels 1<->2 consistently in preds and gts swaps the per-class
        # entries but keeps the mean
        rng = np.random.default_rng(13)
        preds = [rng.integers(0, 3, (8, 8)) for _ in range(3)]
        gts = [rng.integers(0, 3, (8, 8)) for _ in range(3)]
        swap = np.array([0, 2, 1])
        a = miou(preds, gts, 3)
        b = miou([swap[p] for p in preds], [swap[g] for g in gts], 3)
        assert a["mean"] == pytest.approx(b["mean"])
        assert a["per_class_iou"][1] == pytest.approx(b["per_class_iou"][2])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            miou([np.zeros((2, 2), int)], [np.zeros((3, 3), int)], 2)

    def test_out_of_range_label_rejected(self):
        with pytest.raises(ValueError):
            miou([np.full((2, 2), 5)], [np.zeros((2, 2), int)], 2)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            miou([np.zeros((2, 2), int)], [], 2)


class TestImageConfusion:
    def test_counts_and_rates(self):
        pred = ["defective", "defective", "benign", "benign", "defective"]
        gt = ["defective", "benign", "defective", "benign", "defective"]
        c = image_confusion(pred, gt)
        assert (c["TP"], c["FP"], c["TN"], c["FN"]) == (2, 1, 1, 1)
        assert c["recall"] == pytest.approx(2 / 3)
        assert c["fpr"] == pytest.approx(1 / 2)

    def test_bool_labels_accepted(self):
        c = image_confusion([True, False], [True, True])
        assert c["TP"] == 1 and c["FN"] == 1

    def test_undefined_rates_are_none(self):
        assert image_confusion([False], [False])["recall"] is None
        assert image_confusion([True], [True])["fpr"] is None

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            image_confusion([True], [True, False])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=40))
    def test_counts_partition_dataset(self, pairs):
        pred, gt = zip(*pairs)
        c = image_confusion(list(pred), list(gt))
        assert c["TP"] + c["FP"] + c["TN"] + c["FN"] == len(pairs)


class TestReport:
    def test_metric_report_and_write(self, tmp_path):
        rng = np.random.default_rng(14)
        gen = [rng.uniform(0, 1, (16, 16, 3)) for _ in range(4)]
        ref = [rng.uniform(0, 1, (16, 16, 3)) for _ in range(5)]
        rep = metric_report(gen, ref, FeatureExtractor(seed=0), u=5)
        flat = rep.flat()
        assert flat["n_generated"] == 4 and flat["n_reference"] == 5
        assert flat["u"] == 5
        p = tmp_path / "report.txt"
        write_report(rep, p)
        text = p.read_text()
        assert "fid=" in text and "diversity=" in text

    def test_extractor_seed_determinism(self):
        rng = np.random.default_rng(15)
        ims = [rng.uniform(0, 1, (16, 16, 3)) for _ in range(3)]
        fa = FeatureExtractor(seed=7).features(ims)
        fb = FeatureExtractor(seed=7).features(ims)
        np.testing.assert_array_equal(fa, fb)
        fc = FeatureExtractor(seed=8).features(ims)
        assert not np.array_equal(fa, fc)
