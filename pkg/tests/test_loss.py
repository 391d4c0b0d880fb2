"""Incremental loss: worked examples, gradients, monotone supervision."""

import math

import numpy as np
import pytest
import torch

from sidecarseg import EmptySupervisionError, incremental_loss
from sidecarseg.data import IGNORE_INDEX

NOVEL = 6


class TestWorkedExamples:
    def test_two_by_two_hand_computation(self):
        # labels: [novel, other; ignore, novel], probs [0.9, 0.2; 0.5, 0.8]
        labels = np.array([[NOVEL, 0], [IGNORE_INDEX, NOVEL]])
        probs = np.array([[0.9, 0.2], [0.5, 0.8]])
        expected = (-math.log(0.9) - math.log(0.8) - math.log(0.8)) / 3
        assert incremental_loss(probs, labels, [NOVEL]) == pytest.approx(expected, rel=1e-9)

    def test_single_pixel_at_half(self):
        value = incremental_loss(np.array([[0.5]]), np.array([[NOVEL]]), [NOVEL])
        assert value == pytest.approx(-math.log(0.5), rel=1e-9)

    def test_perfect_prediction_hits_clamp_floor(self):
        labels = np.array([[NOVEL, 0]])
        probs = np.array([[1.0, 0.0]])
        assert incremental_loss(probs, labels, [NOVEL]) <= 1e-6

    def test_all_ignore_is_empty_supervision(self):
        labels = np.full((2, 2), IGNORE_INDEX)
        with pytest.raises(EmptySupervisionError):
            incremental_loss(np.full((2, 2), 0.5), labels, [NOVEL])

    def test_two_novel_classes_sum_over_channels(self):
        labels = np.array([[6, 7]])
        probs = np.array([[[0.9, 0.1]], [[0.2, 0.8]]])  # channel per class
        expected = ((-math.log(0.9) - math.log(1 - 0.2))
                    + (-math.log(1 - 0.1) - math.log(0.8))) / 2
        assert incremental_loss(probs, labels, [6, 7]) == pytest.approx(expected, rel=1e-9)


class TestGradient:
    def test_matches_central_finite_differences(self):
        rng = np.random.default_rng(42)
        for trial in range(5):
            probs = rng.uniform(0.05, 0.95, size=(4, 4))
            labels = rng.choice([0, NOVEL, IGNORE_INDEX], size=(4, 4),
                                p=[0.5, 0.4, 0.1]).astype(np.int64)
            if not ((labels != IGNORE_INDEX).any()):
                continue
            tensor = torch.tensor(probs, dtype=torch.float64, requires_grad=True)
            incremental_loss(tensor, torch.from_numpy(labels), [NOVEL]).backward()
            analytic = tensor.grad.numpy()

            h = 1e-6
            for y in range(4):
                for x in range(4):
                    up, down = probs.copy(), probs.copy()
                    up[y, x] += h
                    down[y, x] -= h
                    numeric = (incremental_loss(up, labels, [NOVEL])
                               - incremental_loss(down, labels, [NOVEL])) / (2 * h)
                    if labels[y, x] == IGNORE_INDEX:
                        assert analytic[y, x] == 0.0
                        assert numeric == pytest.approx(0.0, abs=1e-9)
                    else:
                        assert numeric == pytest.approx(analytic[y, x], rel=1e-4)

    def test_monotone_supervision(self):
        grid = np.linspace(0.02, 0.98, 25)
        positive = [incremental_loss(np.array([[p]]), np.array([[NOVEL]]), [NOVEL])
                    for p in grid]
        negative = [incremental_loss(np.array([[p]]), np.array([[0]]), [NOVEL])
                    for p in grid]
        assert all(b < a for a, b in zip(positive, positive[1:]))
        assert all(b > a for a, b in zip(negative, negative[1:]))


class TestBatchedForm:
    def test_batch_equals_pixel_weighted_mean(self):
        rng = np.random.default_rng(1)
        probs = rng.uniform(0.1, 0.9, size=(2, 1, 4, 4))
        labels = rng.choice([0, NOVEL], size=(2, 4, 4)).astype(np.int64)
        whole = incremental_loss(probs, labels, [NOVEL])
        parts = [incremental_loss(probs[i], labels[i], [NOVEL]) for i in range(2)]
        assert whole == pytest.approx(sum(parts) / 2, rel=1e-9)

    def test_torch_input_returns_differentiable_scalar(self):
        probs = torch.full((1, 2, 2), 0.4, dtype=torch.float64, requires_grad=True)
        labels = torch.tensor([[NOVEL, 0], [0, NOVEL]])
        loss = incremental_loss(probs, labels, [NOVEL])
        assert loss.requires_grad
        loss.backward()
        assert probs.grad is not None
