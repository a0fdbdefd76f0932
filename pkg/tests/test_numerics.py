import numpy as np
import pytest
import torch

from eegfm.numerics import GradReport, gradient_check, seeded_stream, tensor


class TestGradientCheck:
    def test_identity_zero_error(self):
        x = tensor([0.3, -1.2, 2.5], requires_grad=True)
        report = gradient_check(lambda t: t, [x])
        assert report.passed
        assert report.max_rel_error == 0.0

    def test_sum_of_squares_matches_closed_form(self):
        x = tensor([1.0, 2.0, 3.0], requires_grad=True)

        def op(t):
            return (t**2).sum()

        xg = x.detach().clone().requires_grad_(True)
        op(xg).backward()
        np.testing.assert_allclose(xg.grad.numpy(), [2.0, 4.0, 6.0])
        report = gradient_check(op, [x])
        assert report.passed
        assert report.max_abs_error < 1e-8

    def test_nonfinite_output_fails_with_note(self):
        x = tensor([0.5], requires_grad=True)
        report = gradient_check(lambda t: torch.log(t - 1.0), [x], op_name="bad")
        assert not report.passed
        assert "non-finite" in report.note

    def test_wrong_gradient_detected(self):
        class Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, t):
                ctx.save_for_backward(t)
                return (t**2).sum()

            @staticmethod
            def backward(ctx, g):
                (t,) = ctx.saved_tensors
                return g * 3.0 * t  # should be 2t

        report = gradient_check(lambda t: Wrong.apply(t), [tensor([1.0, -2.0])])
        assert not report.passed

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            gradient_check(lambda t: t, [tensor([1.0])], eps=0.0)

    def test_report_str(self):
        rep = GradReport("op", 1e-9, 1e-12, True)
        assert "op" in str(rep) and "ok" in str(rep)


class TestRngStream:
    def test_same_seed_same_draws(self):
        a = seeded_stream(520)
        b = seeded_stream(520)
        np.testing.assert_array_equal(a.uniform(size=100), b.uniform(size=100))

    def test_distinct_seeds_differ(self):
        assert seeded_stream(520).uniform() != seeded_stream(521).uniform()

    def test_position_advances(self):
        s = seeded_stream(1)
        assert s.position == 0
        s.normal(size=3)
        s.uniform()
        assert s.position == 2

    def test_split_reproducible_and_independent(self):
        parent = seeded_stream(520)
        a = parent.split("mask").uniform(size=10_000)
        b = parent.split("router").uniform(size=10_000)
        a2 = seeded_stream(520).split("mask").uniform(size=10_000)
        np.testing.assert_array_equal(a, a2)
        # rank correlation between sibling streams stays near zero
        ra = np.argsort(np.argsort(a)).astype(float)
        rb = np.argsort(np.argsort(b)).astype(float)
        rho = np.corrcoef(ra, rb)[0, 1]
        assert abs(rho) < 0.1

    def test_torch_uniform_deterministic(self):
        a = seeded_stream(7).torch_uniform((4, 4))
        b = seeded_stream(7).torch_uniform((4, 4))
        assert torch.equal(a, b)
