import math

import numpy as np
import pytest
import torch

from eegfm.model import init_parameters
from eegfm.numerics import seeded_stream
from eegfm.pmoe import GateOutput, PMoELayer, aux_loss, pmoe_forward, route, topk_softmax


def make_layer(n_experts, noise_std=0.0, d=8, seed=0):
    layer = PMoELayer(d, n_experts, 6, 10, activation="swiglu", noise_std=noise_std).to(torch.float64)
    init_parameters(layer, seeded_stream(seed))
    return layer


class TestTopkSoftmax:
    def test_reference_values(self):
        w = topk_softmax(torch.tensor([1.0, 2.0, 3.0]), 2)
        e = math.exp(2.0) + math.exp(3.0)
        np.testing.assert_allclose(w.numpy(), [0.0, math.exp(2.0) / e, math.exp(3.0) / e], atol=1e-5)

    def test_k_equals_e_is_softmax(self):
        logits = torch.tensor([0.3, -1.0, 0.7, 0.1])
        np.testing.assert_allclose(
            topk_softmax(logits, 4).numpy(), torch.softmax(logits, -1).numpy(), atol=1e-12
        )

    def test_tie_breaks_to_lowest_index(self):
        w = topk_softmax(torch.tensor([0.5, 0.5, 0.5]), 1)
        np.testing.assert_allclose(w.numpy(), [1.0, 0.0, 0.0])

    def test_rows_sum_to_one_with_k_nonzeros(self):
        rng = seeded_stream(3)
        logits = torch.as_tensor(rng.normal(size=(50, 6)))
        w = topk_softmax(logits, 3)
        np.testing.assert_allclose(w.sum(-1).numpy(), 1.0, atol=1e-9)
        assert ((w > 0).sum(-1) <= 3).all()

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            topk_softmax(torch.zeros(4), 0)
        with pytest.raises(ValueError):
            topk_softmax(torch.zeros(4), 5)


class TestRoute:
    def test_identical_tokens_identical_rows(self):
        layer = make_layer(4)
        tokens = torch.ones(5, 8, dtype=torch.float64)
        gate = route(tokens, layer, 2, rng=None, training=False)
        for row in gate.weights[1:]:
            np.testing.assert_array_equal(row.detach().numpy(), gate.weights[0].detach().numpy())

    def test_k_from_fraction(self):
        layer = make_layer(6)
        assert layer.k == 3  # ceil(0.5 * 6)
        layer.top_k_fraction = 0.34
        assert layer.k == 3  # ceil(2.04)
        layer.top_k_fraction = 0.01
        assert layer.k == 1

    def test_single_expert_degenerates(self):
        layer = make_layer(1)
        gate = route(torch.randn(7, 8).double(), layer, 1, None, False)
        np.testing.assert_allclose(gate.weights.detach().numpy(), np.ones((7, 1)))

    def test_noise_changes_nothing_at_eval(self):
        layer = make_layer(4, noise_std=0.5)
        tokens = torch.randn(9, 8).double()
        a = route(tokens, layer, 2, seeded_stream(0), training=False)
        b = route(tokens, layer, 2, seeded_stream(1), training=False)
        np.testing.assert_array_equal(a.weights.detach().numpy(), b.weights.detach().numpy())

    def test_statistics_shapes(self):
        layer = make_layer(5)
        gate = route(torch.randn(11, 8).double(), layer, 2, None, False)
        assert gate.importance.shape == (5,)
        assert gate.load.shape == (5,)
        assert float(gate.load.sum()) == pytest.approx(11 * 2)

    def test_smooth_load_close_to_hard_load(self):
        layer = make_layer(4, noise_std=0.001)
        tokens = torch.randn(40, 8).double()
        gate = route(tokens, layer, 2, seeded_stream(5), training=True)
        # with tiny noise the expected counts sit next to the realized ones
        np.testing.assert_allclose(
            gate.load_smooth.detach().numpy(), gate.load.numpy(), atol=1.0
        )


class TestPMoEForward:
    def test_zero_experts_is_shared_only(self):
        layer = make_layer(0)
        z = torch.randn(6, 8).double()
        out, gate = layer(z)
        assert gate is None
        np.testing.assert_array_equal(out.detach().numpy(), layer.shared(z).detach().numpy())

    def test_one_hot_gate_selects_single_expert(self):
        layer = make_layer(3)
        z = torch.randn(4, 8).double()
        weights = torch.zeros(4, 3, dtype=torch.float64)
        weights[:, 1] = 1.0
        gate = GateOutput(weights, weights.sum(0), (weights > 0).sum(0).double(), weights.sum(0), k=1)
        out = pmoe_forward(z, layer, gate)
        expected = layer.experts[1](z) + layer.shared(z)
        np.testing.assert_allclose(out.detach().numpy(), expected.detach().numpy(), atol=1e-12)

    def test_sparse_equals_dense(self):
        layer = make_layer(6, seed=4)
        z = torch.randn(25, 8).double()
        gate = route(z, layer, 3, None, False)
        sparse = pmoe_forward(z, layer, gate)
        dense = layer.shared(z)
        for e in range(6):
            dense = dense + gate.weights[:, e : e + 1] * layer.experts[e](z)
        np.testing.assert_allclose(sparse.detach().numpy(), dense.detach().numpy(), atol=1e-12)


class TestAuxLoss:
    def test_uniform_utilization_is_zero(self):
        gate = GateOutput(
            weights=torch.full((4, 2), 0.5, dtype=torch.float64),
            importance=torch.tensor([2.0, 2.0], dtype=torch.float64),
            load=torch.tensor([4.0, 4.0], dtype=torch.float64),
            load_smooth=torch.tensor([4.0, 4.0], dtype=torch.float64),
            k=2,
        )
        assert float(aux_loss([gate], 0.008)) == pytest.approx(0.0, abs=1e-9)

    def test_cv_squared_by_hand(self):
        gate = GateOutput(
            weights=torch.zeros(2, 2, dtype=torch.float64),
            importance=torch.tensor([2.0, 0.0], dtype=torch.float64),
            load=torch.tensor([2.0, 0.0], dtype=torch.float64),
            load_smooth=torch.tensor([1.0, 1.0], dtype=torch.float64),
            k=1,
        )
        # CV^2(importance) = var/mean^2 = 1/1 = 1; load term 0
        assert float(aux_loss([gate], 0.5)) == pytest.approx(0.5, abs=1e-9)

    def test_single_expert_layers_contribute_nothing(self):
        gate = GateOutput(
            weights=torch.ones(3, 1, dtype=torch.float64),
            importance=torch.tensor([3.0], dtype=torch.float64),
            load=torch.tensor([3.0], dtype=torch.float64),
            load_smooth=torch.tensor([3.0], dtype=torch.float64),
            k=1,
        )
        assert float(aux_loss([gate], 0.8)) == 0.0
        assert float(aux_loss([], 0.8)) == 0.0


class TestProgressiveSchedule:
    def test_parameter_inventory(self):
        from eegfm import geometry
        from eegfm.model import EEGModel, ModelConfig

        cfg = ModelConfig(
            d_model=12, n_heads=2, n_layers=6,
            merge_factors=[1, 4, 1, 2, 1, 2],
            expert_counts=[0, 0, 2, 4, 4, 6],
            shared_ffn_width=12, expert_ffn_width=8, decoder_layers=1, dropout=0.0,
        )
        model = EEGModel(cfg, geometry.builtin_layout("ten_twenty_19"))
        for l, layer in enumerate(model.encoder_layers):
            expected = cfg.expert_counts[l]
            assert len(layer.ffn_time.experts) == expected
            assert len(layer.ffn_space.experts) == expected
            has_router = layer.ffn_time.router is not None
            assert has_router == (expected >= 1)
        # decoder and cross blocks carry no routed experts
        for block in model.decoder_blocks:
            assert len(block.tsa.ffn_time.experts) == 0
            assert len(block.tsa.ffn_space.experts) == 0
