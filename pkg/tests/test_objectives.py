import math

import numpy as np
import pytest
import torch

from eegfm.numerics import gradient_check, seeded_stream
from eegfm.objectives import (
    ClassPrior,
    balbce_loss,
    recon_loss,
    total_pretrain_loss,
)


def oracle_lp_instance_norm(x: np.ndarray, xhat: np.ndarray, p: float) -> float:
    """Straight transcription: (sum over all entries of |diff|^p)^(1/p) / n."""
    n = x.shape[0] if x.ndim >= 3 else 1
    acc = 0.0
    for diff in np.abs(x - xhat).ravel():
        acc += diff**p
    return acc ** (1.0 / p) / n


class TestReconLoss:
    def test_zero_when_equal(self):
        x = torch.randn(3, 4, 2).double()
        assert float(recon_loss(x, x.clone())) == 0.0

    def test_single_entry_difference(self):
        x = torch.zeros(1, 1, 1, dtype=torch.float64)
        xhat = torch.full((1, 1, 1), 3.0, dtype=torch.float64)
        assert float(recon_loss(x, xhat, 2.0)) == pytest.approx(3.0, abs=1e-12)

    def test_matches_bruteforce_oracle(self):
        rng = seeded_stream(41)
        x = np.asarray(rng.normal(size=(4, 3)))
        xhat = np.asarray(rng.normal(size=(4, 3)))
        got = float(recon_loss(torch.as_tensor(x), torch.as_tensor(xhat), 2.0))
        assert got == pytest.approx(oracle_lp_instance_norm(x, xhat, 2.0), abs=1e-12)

    def test_batch_averaging_and_p(self):
        rng = seeded_stream(42)
        x = np.asarray(rng.normal(size=(5, 4, 3)))
        xhat = np.asarray(rng.normal(size=(5, 4, 3)))
        for p in (1.0, 2.0, 3.0):
            got = float(recon_loss(torch.as_tensor(x), torch.as_tensor(xhat), p))
            assert got == pytest.approx(oracle_lp_instance_norm(x, xhat, p), rel=1e-12)

    def test_masked_only_variant(self):
        x = torch.zeros(2, 2, dtype=torch.float64)
        xhat = torch.tensor([[1.0, 5.0], [2.0, 0.0]], dtype=torch.float64)
        mask = np.array([[True, False], [False, False]])
        assert float(recon_loss(x, xhat, 2.0, mask=mask)) == pytest.approx(1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            recon_loss(torch.zeros(2, 2), torch.zeros(2, 3))

    def test_nonnegative_and_zero_iff_equal(self):
        rng = seeded_stream(7)
        for _ in range(20):
            x = torch.as_tensor(rng.normal(size=(3, 3)))
            y = torch.as_tensor(rng.normal(size=(3, 3)))
            val = float(recon_loss(x, y))
            assert val >= 0.0
            assert (val == 0.0) == bool(torch.equal(x, y))


class TestClassPrior:
    def test_pi_and_bias(self):
        prior = ClassPrior(np.array([9, 1]))
        np.testing.assert_allclose(prior.pi, [0.9, 0.1])
        assert prior.logit_bias()[0] == pytest.approx(math.log(9.0), abs=1e-12)

    def test_from_labels(self):
        prior = ClassPrior.from_labels([0, 1, 1, 2, 2, 2], 3)
        np.testing.assert_array_equal(prior.counts, [1, 2, 3])
        assert prior.total == 6

    def test_degenerate_prior_rejected(self):
        with pytest.raises(ValueError):
            ClassPrior.from_labels([0, 0, 0], 2)

    def test_monotone_bias(self):
        fractions = np.linspace(0.05, 0.95, 10)
        biases = [
            ClassPrior(np.array([int(f * 1000), 1000 - int(f * 1000)])).logit_bias()[0]
            for f in fractions
        ]
        assert all(b1 < b2 for b1, b2 in zip(biases, biases[1:]))


class TestBalBce:
    def test_balanced_prior_equals_plain_bce(self):
        rng = seeded_stream(13)
        logits = torch.as_tensor(rng.normal(size=(6, 2)))
        labels = np.array([0, 1, 0, 1, 1, 0])
        prior = ClassPrior(np.array([3, 3]))
        got = float(balbce_loss(logits, labels, prior))
        onehot = torch.nn.functional.one_hot(torch.as_tensor(labels), 2).double()
        plain = torch.nn.functional.binary_cross_entropy_with_logits(
            logits, onehot, reduction="none"
        ).sum(1).mean()
        assert got == pytest.approx(float(plain), abs=1e-9)

    def test_perfect_logits_saturate(self):
        logits = torch.tensor([[20.0, -20.0], [-20.0, 20.0]], dtype=torch.float64)
        labels = np.array([0, 1])
        assert float(balbce_loss(logits, labels, ClassPrior(np.array([1, 1])))) < 1e-6

    def test_gradient_check(self):
        rng = seeded_stream(21)
        logits = torch.as_tensor(rng.normal(size=(5, 3)))
        labels = np.array([0, 1, 2, 1, 0])
        prior = ClassPrior(np.array([2, 2, 1]))
        report = gradient_check(
            lambda z: balbce_loss(z, labels, prior), [logits], rel_tol=1e-6
        )
        assert report.passed

    def test_nonfinite_logits_rejected(self):
        with pytest.raises(ValueError):
            balbce_loss(
                torch.tensor([[float("inf"), 0.0]]), np.array([0]), ClassPrior(np.array([1, 1]))
            )

    def test_per_class_weights(self):
        logits = torch.zeros(2, 2, dtype=torch.float64)
        labels = np.array([0, 1])
        prior = ClassPrior(np.array([1, 1]))
        unweighted = float(balbce_loss(logits, labels, prior))
        doubled = float(balbce_loss(logits, labels, prior, weights=torch.tensor([2.0, 2.0])))
        assert doubled == pytest.approx(2.0 * unweighted, rel=1e-12)


class TestTotalLoss:
    def test_zero_aux(self):
        total, breakdown = total_pretrain_loss(torch.tensor(1.5), 0.0, 0.8)
        assert float(total) == pytest.approx(1.5)
        assert breakdown.total == breakdown.reconstruction

    def test_zero_weight_ignores_aux(self):
        total, _ = total_pretrain_loss(torch.tensor(1.5), torch.tensor(99.0), 0.0)
        assert float(total) == pytest.approx(1.5)

    def test_arithmetic(self):
        total, breakdown = total_pretrain_loss(torch.tensor(1.0), torch.tensor(0.5), 0.8)
        assert float(total) == pytest.approx(1.4, abs=1e-12)
        assert breakdown.as_dict()["total"] == pytest.approx(1.4, abs=1e-12)
