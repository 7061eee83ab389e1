import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from fundus_vlm_cli.autodiff import Tape, Tensor, backward, exp, grad_check
from fundus_vlm_cli.errors import ContractError, DimensionError
from fundus_vlm_cli.objectives import (
    ContrastiveBatch,
    SequenceBatch,
    SignBatch,
    clip_loss,
    cls_loss,
    cls_loss_per_category,
    combined_loss,
    effective_weights,
    llm_loss,
    sign_accuracy,
    soft_labels,
)


def _logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


class TestClipLoss:
    def test_orthonormal_fixture(self):
        e = Tensor(np.eye(2))
        loss = clip_loss(ContrastiveBatch(e, Tensor(np.eye(2)), soft_labels(2), 1.0))
        assert math.isclose(loss.item(), 0.313262, abs_tol=1e-6)

    def test_symmetric_in_image_and_text(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(3, 4))
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        b /= np.linalg.norm(b, axis=1, keepdims=True)
        ab = clip_loss(ContrastiveBatch(Tensor(a), Tensor(b), soft_labels(3), 2.0)).item()
        ba = clip_loss(ContrastiveBatch(Tensor(b), Tensor(a), soft_labels(3), 2.0)).item()
        assert math.isclose(ab, ba, rel_tol=1e-12)

    def test_rejects_unnormalised_rows(self):
        x = Tensor(np.array([[2.0, 0.0], [0.0, 1.0]]))
        with pytest.raises(ContractError):
            clip_loss(ContrastiveBatch(x, Tensor(np.eye(2)), soft_labels(2)))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(DimensionError):
            clip_loss(ContrastiveBatch(Tensor(np.eye(2)), Tensor(np.eye(3)), soft_labels(2)))

    def test_smoothed_labels_rows_sum_to_one(self):
        labels = soft_labels(4, smoothing=0.1)
        assert_allclose(labels.sum(axis=1), 1.0)
        assert labels[0, 0] == pytest.approx(0.925)

    def test_gradient_with_temperature(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(3, 4))
        img = Tensor(a / np.linalg.norm(a, axis=1, keepdims=True), name="img")
        txt = Tensor(b / np.linalg.norm(b, axis=1, keepdims=True), name="txt")
        scale = Tensor(np.log(1 / 0.07), name="scale")

        def loss():
            return clip_loss(ContrastiveBatch(img, txt, soft_labels(3, 0.1), exp(scale)))

        # finite differences break unit norm on img/txt, so only the scale is checked
        report = grad_check(loss, [scale])
        assert report.passed, report


class TestClsLoss:
    def test_all_half_probabilities(self):
        loss = cls_loss(SignBatch(Tensor(np.zeros((1, 6))), np.array([[1, 0, 1, 0, 0, 0]])))
        assert math.isclose(loss.item(), 6 * math.log(2), abs_tol=1e-9)

    def test_fixture(self):
        logits = _logit([[0.8, 0.4, 0.5, 0.5, 0.5, 0.5]])
        loss = cls_loss(SignBatch(Tensor(logits), np.array([[1, 0, 0, 0, 0, 0]])))
        assert math.isclose(loss.item(), 3.506558, abs_tol=1e-6)

    def test_per_category_sums_to_total(self, rng):
        logits = Tensor(rng.normal(size=(4, 6)))
        targets = rng.integers(0, 2, size=(4, 6))
        batch = SignBatch(logits, targets)
        assert math.isclose(sum(cls_loss_per_category(batch)), cls_loss(batch).item(), rel_tol=1e-12)

    def test_rejects_non_binary_targets(self):
        with pytest.raises(ContractError):
            cls_loss(SignBatch(Tensor(np.zeros((1, 6))), np.full((1, 6), 0.5)))

    def test_gradient(self, rng):
        logits = Tensor(rng.normal(size=(3, 6)), name="logits")
        targets = rng.integers(0, 2, size=(3, 6))
        report = grad_check(lambda: cls_loss(SignBatch(logits, targets)), [logits])
        assert report.passed, report


class TestLlmLoss:
    def test_uniform_logits(self):
        batch = SequenceBatch([Tensor(np.zeros((3, 256)))], [np.array([5, 17, 200])], [np.ones(3, dtype=bool)])
        assert math.isclose(llm_loss(batch).item(), 3 * math.log(256), abs_tol=1e-6)

    def test_masked_positions_do_not_count(self, rng):
        logits = rng.normal(size=(4, 10))
        targets = np.array([1, 2, 3, 4])
        full = llm_loss(SequenceBatch([Tensor(logits)], [targets], [np.array([0, 0, 1, 1], dtype=bool)])).item()
        changed = logits.copy()
        changed[:2] = rng.normal(size=(2, 10))
        again = llm_loss(SequenceBatch([Tensor(changed)], [targets], [np.array([0, 0, 1, 1], dtype=bool)])).item()
        assert full == again

    def test_sum_over_tokens_mean_over_samples(self):
        one = SequenceBatch([Tensor(np.zeros((2, 4)))], [np.array([0, 1])], [np.ones(2, dtype=bool)])
        two = SequenceBatch(
            [Tensor(np.zeros((2, 4))), Tensor(np.zeros((4, 4)))],
            [np.array([0, 1]), np.array([0, 1, 2, 3])],
            [np.ones(2, dtype=bool), np.ones(4, dtype=bool)],
        )
        assert math.isclose(llm_loss(one).item(), 2 * math.log(4))
        assert math.isclose(llm_loss(two).item(), 3 * math.log(4))

    def test_empty_mask_raises(self):
        batch = SequenceBatch([Tensor(np.zeros((2, 4)))], [np.array([0, 1])], [np.zeros(2, dtype=bool)])
        with pytest.raises(ContractError):
            llm_loss(batch)

    def test_target_outside_vocabulary_raises(self):
        batch = SequenceBatch([Tensor(np.zeros((1, 4)))], [np.array([9])], [np.ones(1, dtype=bool)])
        with pytest.raises(ContractError):
            llm_loss(batch)

    def test_gradient(self, rng):
        logits = Tensor(rng.normal(size=(5, 7)), name="logits")
        batch = SequenceBatch([logits], [rng.integers(0, 7, size=5)], [np.array([0, 1, 1, 1, 1], dtype=bool)])
        report = grad_check(lambda: llm_loss(batch), [logits])
        assert report.passed, report


class TestCombinedLoss:
    def test_pretrain_uses_only_text_generation(self):
        assert effective_weights((1.0, 2.0, 3.0), "pretrain") == (0.0, 0.0, 1.0)
        total = combined_loss(None, None, 2.5, (1.0, 1.0, 1.0), "pretrain")
        assert total.item() == 2.5

    def test_weighted_sum(self):
        total = combined_loss(1.0, 2.0, 3.0, (0.5, 0.25, 2.0))
        assert total.item() == pytest.approx(0.5 + 0.5 + 6.0)

    def test_all_zero_weights_raise(self):
        with pytest.raises(ContractError):
            combined_loss(1.0, 1.0, 1.0, (0.0, 0.0, 0.0))

    def test_missing_weighted_component_raises(self):
        with pytest.raises(ContractError):
            combined_loss(None, 1.0, 1.0, (1.0, 1.0, 1.0))

    def test_zero_weighted_component_gets_no_gradient(self):
        clip_value = Tensor(1.5, requires_grad=True)
        llm_value = Tensor(0.5, requires_grad=True)
        with Tape():
            total = combined_loss(clip_value, None, llm_value, (0.0, 0.0, 1.0))
            backward(total)
        assert clip_value.grad is None
        assert llm_value.grad == pytest.approx(1.0)


def test_sign_accuracy_counts_exact_vectors():
    logits = np.array([[5.0, -5.0], [5.0, 5.0]])
    targets = np.array([[1, 0], [1, 0]])
    assert sign_accuracy(logits, targets) == 0.5
