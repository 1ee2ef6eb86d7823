import numpy as np
import pytest

from pll import autodiff as ad
from pll.networks import (
    EncoderConfig,
    ModelState,
    load_checkpoint,
    predict_within,
    predict_within_batch,
    save_checkpoint,
)


def small_model(seed=0, d_in=6, n_classes=4):
    cfg = EncoderConfig(d_in=d_in, n_classes=n_classes, hidden=(8, 8), d_emb=5)
    return ModelState(cfg, np.random.default_rng(seed))


class TestForward:
    def test_query_embedding_unit_norm(self):
        model = small_model()
        q, _ = model.forward_query(np.random.default_rng(1).standard_normal((7, 6)))
        assert np.allclose(np.linalg.norm(q.data, axis=1), 1.0, atol=1e-12, rtol=0)

    def test_classifier_output_simplex(self):
        model = small_model()
        _, probs = model.forward_query(np.random.default_rng(2).standard_normal((7, 6)))
        assert np.allclose(probs.data.sum(axis=1), 1.0, atol=1e-12, rtol=0)
        assert probs.data.min() >= 0

    def test_deterministic(self):
        model = small_model()
        x = np.random.default_rng(3).standard_normal((4, 6))
        q1, p1 = model.forward_query(x)
        q2, p2 = model.forward_query(x)
        assert np.array_equal(q1.data, q2.data)
        assert np.array_equal(p1.data, p2.data)

    def test_key_equals_query_at_init(self):
        model = small_model()
        x = np.random.default_rng(4).standard_normal((5, 6))
        q, _ = model.forward_query(x)
        k = model.forward_key(x)
        assert np.allclose(q.data, k, atol=1e-12, rtol=0)

    def test_key_embedding_unit_norm(self):
        model = small_model()
        k = model.forward_key(np.random.default_rng(5).standard_normal((5, 6)))
        assert np.allclose(np.linalg.norm(k, axis=1), 1.0, atol=1e-12, rtol=0)

    def test_key_forward_records_no_gradient(self):
        model = small_model()
        x = np.random.default_rng(6).standard_normal((3, 6))
        tape = ad.Tape()
        with ad.recording(tape):
            model.forward_key(x)
        assert len(tape) == 0

    def test_eval_forward_matches_graph_forward(self):
        model = small_model()
        x = np.random.default_rng(7).standard_normal((5, 6))
        q, p = model.forward_query(x)
        qe, pe = model.forward_eval(x)
        assert np.allclose(q.data, qe, atol=1e-12, rtol=0)
        assert np.allclose(p.data, pe, atol=1e-12, rtol=0)


class TestMomentumUpdate:
    def test_m_one_keeps_key(self):
        model = small_model()
        before = [w.copy() for w, _ in model.key_backbone]
        for w, _ in model.backbone:
            w.data += 1.0
        model.momentum_update(1.0)
        for prev, (now, _) in zip(before, model.key_backbone):
            assert np.array_equal(prev, now)

    def test_m_zero_copies_query(self):
        model = small_model()
        for w, _ in model.backbone:
            w.data += 0.5
        model.momentum_update(0.0)
        for (kw, kb), (qw, qb) in zip(model.key_backbone, model.backbone):
            assert np.array_equal(kw, qw.data)
            assert np.array_equal(kb, qb.data)

    def test_two_steps_of_0999(self):
        model = small_model()
        kw = model.key_backbone[0][0]
        kw[:] = 0.0
        qw = model.backbone[0][0]
        qw.data[:] = 1.0
        model.momentum_update(0.999)
        model.momentum_update(0.999)
        assert np.allclose(kw, 1.0 - 0.999 ** 2, atol=1e-15, rtol=0)

    def test_key_weights_stay_in_query_interval_hull(self):
        rng = np.random.default_rng(8)
        model = small_model()
        qw = model.backbone[0][0]
        lo = np.minimum(qw.data.copy(), model.key_backbone[0][0])
        hi = np.maximum(qw.data.copy(), model.key_backbone[0][0])
        for _ in range(50):
            qw.data += rng.standard_normal(qw.data.shape) * 0.1
            lo = np.minimum(lo, qw.data)
            hi = np.maximum(hi, qw.data)
            model.momentum_update(rng.random())
            kw = model.key_backbone[0][0]
            assert (kw >= lo - 1e-12).all() and (kw <= hi + 1e-12).all()


class TestPredictWithin:
    def test_restriction_excludes_global_argmax(self):
        assert predict_within([0.7, 0.2, 0.1], {1, 2}) == 1

    def test_singleton_wins_regardless(self):
        assert predict_within([0.9, 0.05, 0.05], {2}) == 2

    def test_uniform_ties_break_to_smallest_index(self):
        assert predict_within([1 / 3, 1 / 3, 1 / 3], {2, 0}) == 0

    def test_full_set_equals_unrestricted_argmax(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            p = rng.random(6)
            assert predict_within(p, set(range(6))) == int(np.argmax(p))

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(10)
        probs = rng.random((20, 5))
        mask = rng.random((20, 5)) > 0.5
        mask[:, 0] = True
        got = predict_within_batch(probs, mask)
        for i in range(20):
            assert got[i] == predict_within(probs[i], mask[i])


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        model = small_model(seed=3)
        model.momentum_update(0.5)
        path = tmp_path / "model.npz"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.config == model.config
        x = np.random.default_rng(11).standard_normal((4, 6))
        q1, p1 = model.forward_eval(x)
        q2, p2 = loaded.forward_eval(x)
        assert np.array_equal(q1, q2) and np.array_equal(p1, p2)
        k1, k2 = model.forward_key(x), loaded.forward_key(x)
        assert np.array_equal(k1, k2)

    def test_version_checked(self, tmp_path):
        path = tmp_path / "bad.npz"
        np.savez(path, meta=np.frombuffer(b'{"version": "other"}', dtype=np.uint8))
        with pytest.raises(ValueError):
            load_checkpoint(path)
