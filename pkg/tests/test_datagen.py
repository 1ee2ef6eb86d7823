import hashlib

import numpy as np
import pytest

from pll import datagen as dg


class TestGaussianBlobs:
    def test_one_example_per_class(self):
        data = dg.make_gaussian_blobs(4, 4, 4, 0.1, seed=0)
        assert sorted(ex.true_label for ex in data) == [0, 1, 2, 3]

    def test_balance_within_one(self):
        data = dg.make_gaussian_blobs(103, 10, 4, 0.1, seed=0)
        counts = np.bincount([ex.true_label for ex in data], minlength=10)
        assert counts.max() - counts.min() <= 1

    def test_zero_spread_collapses_to_class_mean(self):
        data = dg.make_gaussian_blobs(20, 4, 5, 0.0, seed=1)
        by_class = {}
        for ex in data:
            by_class.setdefault(ex.true_label, []).append(ex.features)
        for feats in by_class.values():
            for f in feats[1:]:
                assert np.array_equal(f, feats[0])

    def test_means_on_unit_sphere(self):
        data = dg.make_gaussian_blobs(8, 4, 6, 0.0, seed=2)
        for ex in data:
            assert np.linalg.norm(ex.features) == pytest.approx(1.0, abs=1e-12)

    def test_nearest_centroid_oracle_separable(self):
        data = dg.make_gaussian_blobs(400, 4, 8, 0.1, seed=3)
        feats = np.stack([ex.features for ex in data])
        labels = np.array([ex.true_label for ex in data])
        centroids = np.stack([feats[labels == c].mean(axis=0) for c in range(4)])
        d2 = ((feats[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assert (d2.argmin(axis=1) == labels).mean() == 1.0

    def test_same_seed_bit_identical(self):
        a = dg.make_gaussian_blobs(50, 5, 4, 0.3, seed=9)
        b = dg.make_gaussian_blobs(50, 5, 4, 0.3, seed=9)
        for ea, eb in zip(a, b):
            assert np.array_equal(ea.features, eb.features)
            assert ea.true_label == eb.true_label


class TestApplyFlip:
    def setup_method(self):
        self.data = dg.make_gaussian_blobs(200, 10, 4, 0.2, seed=0)

    def test_q_zero_gives_singletons(self):
        out = dg.apply_flip(self.data, dg.UniformFlip(0.0), seed=1)
        for ex in out:
            assert ex.candidates == frozenset([ex.hidden_true_label])

    def test_q_one_gives_full_sets(self):
        out = dg.apply_flip(self.data, dg.UniformFlip(1.0), seed=1)
        for ex in out:
            assert ex.candidates == frozenset(range(10))

    def test_mean_set_size_matches_binomial(self):
        data = dg.make_gaussian_blobs(10_000, 10, 4, 0.2, seed=0)
        out = dg.apply_flip(data, dg.UniformFlip(0.5), seed=2)
        sizes = np.array([len(ex.candidates) for ex in out])
        # |Y| = 1 + Binomial(9, 0.5): mean 5.5, var 9/4
        sigma = np.sqrt(9 * 0.25 / len(out))
        assert abs(sizes.mean() - 5.5) < 3 * sigma

    def test_truth_always_included(self):
        out = dg.apply_flip(self.data, dg.UniformFlip(0.3), seed=3)
        assert all(ex.hidden_true_label in ex.candidates for ex in out)

    def test_pair_matrix_candidates(self):
        spec = dg.MatrixFlip(dg.cyclic_pair_matrix(10))
        out = dg.apply_flip(self.data, spec, seed=4)
        for ex in out:
            assert 1 <= len(ex.candidates) <= 2
            extra = ex.candidates - {ex.hidden_true_label}
            if extra:
                assert extra == {(ex.hidden_true_label + 1) % 10}

    def test_band_matrix_candidates_stay_in_band(self):
        spec = dg.MatrixFlip(dg.cyclic_band_matrix(10))
        out = dg.apply_flip(self.data, spec, seed=5)
        for ex in out:
            allowed = {(ex.hidden_true_label + off) % 10 for off in range(6)}
            assert ex.candidates <= allowed

    def test_hierarchical_stays_in_superclass(self):
        partition = ((0, 1, 2, 3, 4), (5, 6, 7, 8, 9))
        out = dg.apply_flip(self.data, dg.HierarchicalFlip(partition, 0.7), seed=6)
        for ex in out:
            group = partition[0] if ex.hidden_true_label < 5 else partition[1]
            assert ex.candidates <= set(group)
            assert ex.hidden_true_label in ex.candidates

    def test_matrix_validation(self):
        bad = np.eye(10)
        bad[0, 0] = 0.5
        with pytest.raises(ValueError):
            dg.apply_flip(self.data, dg.MatrixFlip(bad), seed=0)


class TestApplyNoise:
    def setup_method(self):
        self.originals = dg.make_gaussian_blobs(10_000, 10, 4, 0.2, seed=0)
        self.flip = dg.UniformFlip(0.5)
        self.partials = dg.apply_flip(self.originals, self.flip, seed=1)

    def test_eta_zero_is_identity(self):
        out = dg.apply_noise(self.partials, self.originals, dg.NoiseSpec(0.0),
                             self.flip, seed=2)
        assert out == self.partials

    def test_missing_truth_fraction_matches_eta(self):
        out = dg.apply_noise(self.partials, self.originals, dg.NoiseSpec(0.2),
                             self.flip, seed=3)
        missing = np.array([ex.hidden_true_label not in ex.candidates for ex in out])
        sigma = np.sqrt(0.2 * 0.8 / len(out))
        assert abs(missing.mean() - 0.2) < 3 * sigma

    def test_q_zero_noisy_sets_are_wrong_and_nonempty(self):
        flip = dg.UniformFlip(0.0)
        partials = dg.apply_flip(self.originals[:500], flip, seed=4)
        out = dg.apply_noise(partials, self.originals[:500], dg.NoiseSpec(0.5),
                             flip, seed=5)
        changed = 0
        for ex in out:
            assert len(ex.candidates) >= 1
            if ex.hidden_true_label not in ex.candidates:
                changed += 1
                assert all(c != ex.hidden_true_label for c in ex.candidates)
        assert changed > 0

    def test_all_sets_nonempty(self):
        out = dg.apply_noise(self.partials, self.originals, dg.NoiseSpec(0.3),
                             self.flip, seed=6)
        assert all(len(ex.candidates) >= 1 for ex in out)

    def test_same_seed_bit_identical(self):
        a = dg.apply_noise(self.partials, self.originals, dg.NoiseSpec(0.2),
                           self.flip, seed=7)
        b = dg.apply_noise(self.partials, self.originals, dg.NoiseSpec(0.2),
                           self.flip, seed=7)
        assert a == b


class TestTwoViews:
    def test_no_augmentation_is_identity(self):
        spec = dg.AugmentSpec(0.0, 0.0, 0.0, 0.0)
        x = np.array([1.0, -2.0, 3.0])
        q, k = dg.two_views(x, spec, seed=0)
        assert np.array_equal(q, x) and np.array_equal(k, x)

    def test_full_masking_zeroes_view(self):
        spec = dg.AugmentSpec(0.0, 0.0, 1.0, 1.0)
        q, k = dg.two_views(np.ones(5), spec, seed=1)
        assert not q.any() and not k.any()

    def test_noise_mean_square_matches_chi_square(self):
        spec = dg.AugmentSpec(0.1, 0.0, 0.0, 0.0)
        d, trials = 8, 10_000
        rng = np.random.default_rng(2)
        x = np.zeros(d)
        total = 0.0
        for _ in range(trials):
            q, _ = dg.two_views_rng(x, spec, rng)
            total += (q ** 2).sum()
        # sum of d*trials squared N(0, 0.01) draws: mean 0.01*d, var per trial 2e-4*d
        sigma = np.sqrt(2 * (0.1 ** 4) * d / trials)
        assert abs(total / trials - 0.01 * d) < 3 * sigma

    def test_query_and_key_independent(self):
        spec = dg.AugmentSpec(0.5, 0.5, 0.0, 0.0)
        q, k = dg.two_views(np.zeros(16), spec, seed=3)
        assert not np.array_equal(q, k)


class TestDatasetIO:
    def _roundtrip(self, examples, n_classes, tmp_path):
        path = tmp_path / "data.pll"
        dg.save_dataset(examples, n_classes, path)
        loaded, c = dg.load_dataset(path)
        assert c == n_classes
        return loaded, path

    def test_small_roundtrip_exact(self, tmp_path):
        data = dg.apply_flip(dg.make_gaussian_blobs(3, 2, 3, 0.4, seed=0),
                             dg.UniformFlip(0.5), seed=1)
        loaded, _ = self._roundtrip(data, 2, tmp_path)
        assert loaded == data
        for a, b in zip(loaded, data):
            assert np.array_equal(a.features, b.features)

    def test_large_roundtrip_hash_identical(self, tmp_path):
        data = dg.apply_flip(dg.make_gaussian_blobs(10_000, 10, 4, 0.3, seed=2),
                             dg.UniformFlip(0.4), seed=3)
        path = tmp_path / "big.pll"
        dg.save_dataset(data, 10, path)
        h1 = hashlib.sha256(path.read_bytes()).hexdigest()
        loaded, _ = dg.load_dataset(path)
        dg.save_dataset(loaded, 10, path)
        h2 = hashlib.sha256(path.read_bytes()).hexdigest()
        assert h1 == h2

    def test_candidate_index_out_of_range_rejected_with_position(self, tmp_path):
        path = tmp_path / "bad.pll"
        path.write_text("pll v1 n=1 d=2 C=3\n0.0,1.0 | 0;3 | 0\n")
        with pytest.raises(dg.DatasetFormatError, match=":2:"):
            dg.load_dataset(path)

    def test_empty_candidates_rejected(self, tmp_path):
        path = tmp_path / "bad.pll"
        path.write_text("pll v1 n=1 d=2 C=3\n0.0,1.0 |  | 0\n")
        with pytest.raises(dg.DatasetFormatError):
            dg.load_dataset(path)

    def test_malformed_row_rejected(self, tmp_path):
        path = tmp_path / "bad.pll"
        path.write_text("pll v1 n=1 d=2 C=3\n0.0,oops | 0 | 0\n")
        with pytest.raises(dg.DatasetFormatError, match=":2:"):
            dg.load_dataset(path)

    def test_to_arrays(self):
        data = dg.apply_flip(dg.make_gaussian_blobs(10, 3, 4, 0.2, seed=0),
                             dg.UniformFlip(0.5), seed=1)
        x, cand, truth = dg.to_arrays(data, 3)
        assert x.shape == (10, 4) and cand.shape == (10, 3)
        assert cand[np.arange(10), truth].all()
