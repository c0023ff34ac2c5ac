"""Tests for query/key encoding, matching scores, fusion and attention training."""

import math

import numpy as np
import pytest

from models.tensors import PseudoImage
from services.attention_comm import (
    AttentionState, AttentionTrainer, KeyVector, QueryVector, TrainingExample,
    cross_entropy, encode_key, encode_query, fuse_inference, fuse_training,
    matching_score, normalize_scores, refine_feature, score_gradient,
    select_infrastructure, selection_accuracy, train_attention,
)
from utils.errors import ShapeError, ValidationError


def _image(rng, shape=(2, 2, 2)):
    return PseudoImage(rng.normal(size=shape).astype(np.float32))


def _finite_difference(query, key, w, h=1e-5):
    numeric = np.zeros_like(w)
    for index in np.ndindex(*w.shape):
        plus, minus = w.copy(), w.copy()
        plus[index] += h
        minus[index] -= h
        numeric[index] = (matching_score(query, key, plus) - matching_score(query, key, minus)) / (2 * h)
    return numeric


class TestEncoding:

    def test_zero_image_gives_zero_vectors(self):
        image = PseudoImage.zeros(4, 3, 3)
        rng = np.random.default_rng(0)
        assert not encode_query(image, rng.normal(size=(2, 4))).values.any()
        assert not encode_key(image, rng.normal(size=(5, 4))).values.any()

    def test_homogeneity(self):
        rng = np.random.default_rng(1)
        image = _image(rng, (3, 4, 4))
        projection = rng.normal(size=(6, 3))
        scaled = PseudoImage(image.data * 2.5)
        np.testing.assert_allclose(encode_key(scaled, projection).values,
                                   2.5 * encode_key(image, projection).values, rtol=1e-5)

    def test_mean_pool_against_loop(self):
        data = np.array([[[1, 2], [3, 4]], [[-1, 0], [5, 8]]], dtype=np.float32)
        image = PseudoImage(data)
        projection = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        means = [sum(data[c, i, j] for i in range(2) for j in range(2)) / 4 for c in range(2)]
        np.testing.assert_allclose(encode_query(image, projection).values,
                                   [means[0], means[1], means[0] + means[1]])

    def test_projection_mismatch(self):
        with pytest.raises(ShapeError):
            encode_query(PseudoImage.zeros(4, 2, 2), np.ones((2, 3)))


class TestMatchingScore:

    def test_aligned(self):
        w = np.eye(3)
        assert matching_score([1.0, 2.0, 0.5], [2.0, 4.0, 1.0], w) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert matching_score([1.0, 0.0], [0.0, 3.0], np.eye(2)) == pytest.approx(0.0)

    def test_hand_computed(self):
        score = matching_score(QueryVector([1.0, 0.0]), KeyVector([1.0, 2.0, 2.0]), np.ones((2, 3)))
        assert score == pytest.approx(5 / (3 * math.sqrt(3)))
        assert score == pytest.approx(0.9623, abs=1e-4)

    def test_zero_key_is_degenerate(self, caplog):
        score, degenerate = matching_score([1.0, 0.0], [0.0, 0.0, 0.0], np.ones((2, 3)), return_flag=True)
        assert score == 0.0
        assert degenerate
        assert 'Degenerate' in caplog.text

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            matching_score([1.0, 0.0], [1.0, 2.0], np.ones((2, 3)))

    def test_rescaling_invariance(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            mu, psi, w = rng.normal(size=4), rng.normal(size=7), rng.normal(size=(4, 7))
            base = matching_score(mu, psi, w)
            for s in (0.1, 10.0):
                assert matching_score(mu, s * psi, w) == pytest.approx(base, abs=1e-9)
                assert matching_score(mu, psi, s * w) == pytest.approx(base, abs=1e-9)
            assert -1.0 <= base <= 1.0


class TestNormalizeAndSelect:

    def test_equal_scores(self):
        np.testing.assert_allclose(normalize_scores([0.4, 0.4, 0.4]).normalized, [1 / 3] * 3)

    def test_single_score(self):
        np.testing.assert_allclose(normalize_scores([-0.7]).normalized, [1.0])

    def test_two_scores(self):
        np.testing.assert_allclose(normalize_scores([0.9623, 0.0]).normalized, [0.7236, 0.2764], atol=1e-4)

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            normalize_scores([])

    def test_sum_and_shift_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            raw = rng.uniform(-1, 1, rng.integers(1, 8))
            scores = normalize_scores(raw)
            assert scores.normalized.sum() == pytest.approx(1.0, abs=1e-9)
            np.testing.assert_allclose(normalize_scores(raw + 3.7).normalized, scores.normalized, atol=1e-12)

    def test_select_argmax(self):
        assert select_infrastructure(normalize_scores([0.2, 0.9, 0.1], ids=[4, 7, 9])) == 7

    def test_select_ties_take_lowest_id(self):
        assert select_infrastructure([0.5, 0.5, 0.5]) == 0
        assert select_infrastructure(normalize_scores([0.1, 0.8, 0.8], ids=[0, 2, 1])) == 1

    def test_select_raw_equals_select_softmax(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            raw = rng.uniform(-1, 1, 5)
            assert select_infrastructure(raw) == select_infrastructure(normalize_scores(raw).normalized)


class TestRefineAndFuse:

    def test_refine_weights(self):
        rng = np.random.default_rng(5)
        image = _image(rng, (3, 4, 4))
        assert refine_feature(image, 1.0) == image
        assert not refine_feature(image, 0.0).data.any()
        assert float(refine_feature(image, 0.25).data.sum()) == pytest.approx(0.25 * float(image.data.sum()), abs=1e-5)

    def test_refine_rejects_non_finite(self):
        with pytest.raises(ValidationError):
            refine_feature(PseudoImage.zeros(1, 1, 1), float('nan'))

    def test_fuse_inference_concatenates(self):
        rng = np.random.default_rng(6)
        local, other = _image(rng, (64, 3, 5)), _image(rng, (64, 3, 5))
        fused = fuse_inference(local, PseudoImage.zeros(64, 3, 5))
        assert fused.channels == 128
        np.testing.assert_array_equal(fused.data[:64], local.data)
        assert not fused.data[64:].any()
        np.testing.assert_array_equal(fuse_inference(local, other).data[64:], other.data)

    def test_fuse_inference_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            fuse_inference(PseudoImage.zeros(2, 3, 3), PseudoImage.zeros(2, 3, 4))

    def test_fuse_training_single_matches_inference(self):
        rng = np.random.default_rng(7)
        local, infra = _image(rng), _image(rng)
        assert fuse_training(local, [infra], normalize_scores([0.3])) == fuse_inference(local, refine_feature(infra, 1.0))

    def test_fuse_training_identical_maps(self):
        rng = np.random.default_rng(8)
        local, infra = _image(rng), _image(rng)
        fused = fuse_training(local, [infra] * 3, normalize_scores([0.9, -0.2, 0.1]))
        np.testing.assert_allclose(fused.data[2:], infra.data, atol=1e-6)

    def test_fuse_training_weighted_sum(self):
        rng = np.random.default_rng(9)
        local = _image(rng)
        images = [_image(rng) for _ in range(3)]
        weights = [0.5, 0.3, 0.2]
        scores = normalize_scores(np.log(weights))
        fused = fuse_training(local, images, scores)
        expected = np.zeros((2, 2, 2))
        for c in range(2):
            for i in range(2):
                for j in range(2):
                    expected[c, i, j] = sum(w * img.data[c, i, j] for w, img in zip(weights, images))
        np.testing.assert_allclose(fused.data[2:], expected, atol=1e-6)

    def test_fuse_training_is_convex(self):
        rng = np.random.default_rng(10)
        images = [_image(rng, (3, 4, 4)) for _ in range(4)]
        fused = fuse_training(_image(rng, (3, 4, 4)), images, normalize_scores(rng.uniform(-1, 1, 4)))
        stack = np.stack([img.data for img in images])
        assert np.all(fused.data[3:] >= stack.min(axis=0) - 1e-6)
        assert np.all(fused.data[3:] <= stack.max(axis=0) + 1e-6)

    def test_fuse_training_count_mismatch(self):
        rng = np.random.default_rng(11)
        with pytest.raises(ShapeError):
            fuse_training(_image(rng), [_image(rng)], normalize_scores([0.1, 0.2]))


class TestScoreGradient:

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            mu, psi, w = rng.normal(size=2), rng.normal(size=3), rng.normal(size=(2, 3))
            analytic = score_gradient(mu, psi, w)
            numeric = _finite_difference(mu, psi, w)
            assert np.linalg.norm(analytic - numeric) <= 1e-5 * max(np.linalg.norm(analytic), 1e-8)

    def test_aligned_gradient_vanishes_along_psi(self):
        mu = np.array([1.0, 0.0])
        w = np.array([[1.0, 2.0, 2.0], [0.3, -0.1, 0.4]])
        psi = np.array([1.0, 2.0, 2.0])
        gradient = score_gradient(mu, psi, w)
        assert np.abs(gradient).max() <= 1e-9

    def test_key_scale_leaves_gradient_unchanged(self):
        rng = np.random.default_rng(13)
        mu, psi, w = rng.normal(size=3), rng.normal(size=4), rng.normal(size=(3, 4))
        np.testing.assert_allclose(score_gradient(mu, 5.0 * psi, w), score_gradient(mu, psi, w), atol=1e-12)

    def test_degenerate_raises(self):
        with pytest.raises(ValidationError):
            score_gradient([0.0, 0.0], [1.0, 2.0, 3.0], np.ones((2, 3)))


class TestTraining:

    @staticmethod
    def _separable(rng, count=40):
        anchors = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        examples = []
        for _ in range(count):
            label = int(rng.integers(0, 2))
            keys = np.empty((2, 3))
            keys[label] = anchors[0] + rng.normal(scale=0.05, size=3)
            keys[1 - label] = anchors[1 + rng.integers(0, 2)] + rng.normal(scale=0.05, size=3)
            query = np.array([1.0, 0.5]) + rng.normal(scale=0.05, size=2)
            examples.append(TrainingExample(query, keys, label))
        return examples

    def test_separable_dataset_reaches_full_accuracy(self):
        rng = np.random.default_rng(14)
        examples = self._separable(rng)
        w0 = rng.normal(size=(2, 3))
        w = train_attention(examples, w0, lr=0.1, epochs=200)
        assert selection_accuracy(w, examples) == 1.0

    def test_loss_is_non_increasing(self):
        rng = np.random.default_rng(15)
        result = AttentionTrainer(learning_rate=0.1, epochs=50).fit(self._separable(rng), rng.normal(size=(2, 3)))
        assert len(result.losses) == 50
        assert all(later <= earlier + 1e-12 for earlier, later in zip(result.losses, result.losses[1:]))

    def test_correct_labels_do_not_raise_loss(self):
        rng = np.random.default_rng(16)
        w0 = rng.normal(size=(3, 4))
        examples = []
        for _ in range(20):
            query, keys = rng.normal(size=3), rng.normal(size=(3, 4))
            label = select_infrastructure([matching_score(query, key, w0) for key in keys])
            examples.append(TrainingExample(query, keys, label))
        start = cross_entropy(w0, examples)
        w = train_attention(examples, w0, lr=0.1, epochs=10)
        assert cross_entropy(w, examples) <= start

    def test_single_example_learns_label(self):
        rng = np.random.default_rng(17)
        example = TrainingExample(np.array([1.0, -0.5]), np.array([[1.0, 0.2, 0.0], [0.1, 1.0, 0.3]]), 1)
        w = train_attention([example], rng.normal(size=(2, 3)), lr=0.1, epochs=200)
        assert selection_accuracy(w, [example]) == 1.0

    def test_tuple_dataset_accepted(self):
        rng = np.random.default_rng(18)
        dataset = [(rng.normal(size=2), [rng.normal(size=3), rng.normal(size=3)], 0) for _ in range(5)]
        w = train_attention(dataset, rng.normal(size=(2, 3)), lr=0.1, epochs=3)
        assert w.shape == (2, 3)

    def test_invalid_learning_rate(self):
        with pytest.raises(ValidationError):
            train_attention([], np.ones((2, 3)), lr=0.0, epochs=1)

    def test_label_out_of_range(self):
        with pytest.raises(ValidationError):
            TrainingExample(np.ones(2), np.ones((2, 3)), 2)


class TestAttentionState:

    def test_seeded_shapes_and_determinism(self):
        a = AttentionState.seeded(channels=8, query_size=4, key_size=6, seed=3)
        b = AttentionState.seeded(channels=8, query_size=4, key_size=6, seed=3)
        assert a.query_projection.shape == (4, 8)
        assert a.key_projection.shape == (6, 8)
        assert a.attention.shape == (4, 6)
        np.testing.assert_array_equal(a.attention, b.attention)

    def test_save_and_load(self, tmp_path):
        state = AttentionState.seeded(channels=8, query_size=4, key_size=6, seed=3)
        state.save(tmp_path)
        loaded = AttentionState.load(tmp_path)
        np.testing.assert_allclose(loaded.attention, state.attention, rtol=1e-6, atol=1e-9)
        assert (tmp_path / 'attention_matrix.bin').stat().st_size == 8 + 4 * 6 * 4

    def test_mismatched_attention_rejected(self):
        state = AttentionState.seeded(channels=8, query_size=4, key_size=6, seed=3)
        with pytest.raises(ShapeError):
            state.with_attention(np.ones((6, 4)))
