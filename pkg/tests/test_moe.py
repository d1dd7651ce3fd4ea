import math

import numpy as np
import pytest
import torch

from m2cd.errors import ConfigurationError, ShapeError
from m2cd.moe import GateDecision, MoeConfig, MoeLayer, load_balance_stats


def make_layer(channels=4, num_experts=4, top_k=2, embed_dim=4, noise=0.01, seed=0):
    torch.manual_seed(seed)
    cfg = MoeConfig(channels=channels, num_experts=num_experts, top_k=top_k, embed_dim=embed_dim)
    return MoeLayer(cfg, init_noise_std=noise)


def dense_reference(layer, x):
    """Dense masked-sum oracle: evaluate all experts, zero the non-selected."""
    probs = layer.gate_probs(x)
    k = layer.config.top_k
    order = torch.argsort(-probs, dim=1, stable=True)[:, :k]
    mask = torch.zeros_like(probs)
    mask.scatter_(1, order, 1.0)
    masked = probs * mask
    out = torch.zeros_like(x)
    for m, expert in enumerate(layer.experts):
        out = out + masked[:, m].view(-1, 1, 1, 1) * expert(x)
    return out


class TestConfig:
    def test_validation(self):
        with pytest.raises(ConfigurationError):
            MoeConfig(channels=4, num_experts=0)
        with pytest.raises(ConfigurationError):
            MoeConfig(channels=4, num_experts=4, top_k=5)
        with pytest.raises(ConfigurationError):
            MoeConfig(channels=0)

    def test_embedding_columns_unit_norm_at_init(self):
        layer = make_layer()
        norms = layer.expert_embeddings.norm(dim=0)
        assert torch.allclose(norms, torch.ones_like(norms), atol=1e-6)


class TestGate:
    def test_single_expert_picks_it_with_weight_one(self):
        layer = make_layer(num_experts=1, top_k=1)
        x = torch.randn(1, 4, 3, 3)
        indices, weights = layer.gate(x)
        assert indices.tolist() == [[0]]
        assert weights.tolist() == [[1.0]]

    def test_orthonormal_embedding_hand_case(self):
        # W = I, E = I4, pooled feature = e2: cosine scores are one-hot on
        # expert 2, so softmax gives e/(e+3) there and 1/(e+3) elsewhere;
        # the tie among experts {0, 1, 3} resolves to the lowest index.
        layer = make_layer(channels=4, num_experts=4, top_k=2, embed_dim=4)
        with torch.no_grad():
            layer.router.weight.copy_(torch.eye(4))
            layer.expert_embeddings.copy_(torch.eye(4))
        x = torch.zeros(1, 4, 2, 2)
        x[0, 2] = 1.0
        indices, weights = layer.gate(x)
        assert indices.tolist() == [[2, 0]]
        e = math.e
        assert weights[0, 0].item() == pytest.approx(e / (e + 3), rel=1e-6)
        assert weights[0, 1].item() == pytest.approx(1 / (e + 3), rel=1e-6)
        assert weights[0, 0].item() == pytest.approx(0.4753668, rel=1e-5)

    def test_positive_scale_invariance_bit_exact_for_pow2(self):
        layer = make_layer(seed=3)
        x = torch.randn(2, 4, 5, 5)
        base_idx, base_w = layer.gate(x)
        for alpha in (0.5, 2.0, 8.0):
            idx, w = layer.gate(alpha * x)
            assert torch.equal(idx, base_idx)
            assert torch.equal(w, base_w)

    def test_positive_scale_invariance_general(self):
        layer = make_layer(seed=4).double()
        x = torch.randn(2, 4, 5, 5, dtype=torch.float64)
        base_idx, base_w = layer.gate(x)
        for alpha in (3.7, 0.013, 517.0):
            idx, w = layer.gate(alpha * x)
            assert torch.equal(idx, base_idx)
            assert torch.allclose(w, base_w, rtol=1e-12, atol=1e-14)

    def test_zero_feature_fallback_uniform(self):
        layer = make_layer(num_experts=4, top_k=2)
        before = layer.zero_gate_fallbacks
        x = torch.zeros(1, 4, 3, 3)
        indices, weights = layer.gate(x)
        assert indices.tolist() == [[0, 1]]
        assert torch.allclose(weights, torch.full((1, 2), 0.25))
        assert layer.zero_gate_fallbacks == before + 1

    def test_tie_break_prefers_lowest_index(self):
        layer = make_layer(num_experts=4, top_k=2)
        with torch.no_grad():
            # Identical embedding columns make every cosine score equal.
            layer.expert_embeddings.copy_(torch.ones(layer.config.embed_dim, 4))
        x = torch.randn(3, 4, 2, 2)
        indices, _ = layer.gate(x)
        assert indices.tolist() == [[0, 1]] * 3

    def test_decisions_have_distinct_positive_weights(self):
        layer = make_layer(seed=6)
        x = torch.randn(5, 4, 4, 4)
        for d in layer.gate_decisions(x):
            assert len(set(d.indices)) == layer.config.top_k
            assert all(w > 0 for w in d.weights)
            assert sum(d.weights) <= 1.0 + 1e-6

    def test_wrong_channels_rejected(self):
        layer = make_layer()
        with pytest.raises(ShapeError):
            layer.gate(torch.randn(1, 5, 3, 3))


class TestForward:
    def test_identity_expert_is_noop(self):
        layer = make_layer(num_experts=1, top_k=1, noise=0.0)
        x = torch.randn(2, 4, 6, 6)
        assert torch.equal(layer(x), x)

    def test_sparse_equals_dense_reference(self):
        for seed in range(20):
            layer = make_layer(channels=6, num_experts=4, top_k=2, embed_dim=8, seed=seed)
            x = torch.randn(3, 6, 5, 5)
            sparse = layer(x)
            dense = dense_reference(layer, x)
            assert torch.allclose(sparse, dense, rtol=1e-6, atol=1e-7)

    def test_zero_feature_uniform_mixture(self):
        layer = make_layer(num_experts=4, top_k=2, noise=0.0)
        x = torch.zeros(1, 4, 3, 3)
        out = layer(x)
        # Identity experts on a zero map: output stays zero, weights 1/M each.
        assert torch.equal(out, x)
        _, weights = layer.gate(x)
        assert torch.allclose(weights, torch.full((1, 2), 0.25))

    def test_only_selected_experts_get_gradients(self):
        layer = make_layer(channels=4, num_experts=4, top_k=2, seed=8)
        x = torch.randn(1, 4, 4, 4)
        indices, _ = layer.gate(x)
        selected = set(indices[0].tolist())
        out = layer(x)
        out.sum().backward()
        for m, expert in enumerate(layer.experts):
            if m in selected:
                assert expert.weight.grad is not None
                assert torch.any(expert.weight.grad != 0)
            else:
                assert expert.weight.grad is None or torch.all(expert.weight.grad == 0)

    def test_gradients_match_finite_differences(self):
        layer = make_layer(channels=4, num_experts=4, top_k=2, seed=9).double()
        x = torch.randn(1, 4, 8, 8, dtype=torch.float64)
        probs = layer.gate_probs(x)[0].sort(descending=True).values
        assert probs[1] - probs[2] > 1e-3  # away from a selection boundary

        proj = torch.randn(1, 4, 8, 8, dtype=torch.float64)
        x_var = x.clone().requires_grad_(True)
        loss = (layer(x_var) * proj).sum()
        loss.backward()
        x_grad = x_var.grad.clone()

        eps = 1e-6
        flat = x.view(-1)
        for j in range(0, flat.numel(), 17):
            plus, minus = x.clone(), x.clone()
            plus.view(-1)[j] += eps
            minus.view(-1)[j] -= eps
            with torch.no_grad():
                fd = float(((layer(plus) - layer(minus)) * proj).sum()) / (2 * eps)
            assert float(x_grad.view(-1)[j]) == pytest.approx(fd, rel=1e-4, abs=1e-9)

        indices, _ = layer.gate(x)
        for m in set(indices[0].tolist()):
            expert = layer.experts[m]
            grad = expert.weight.grad.view(-1)
            w0 = expert.weight.detach().clone()
            for j in range(0, w0.numel(), 5):
                with torch.no_grad():
                    expert.weight.view(-1)[j] = w0.view(-1)[j] + eps
                    up = float((layer(x) * proj).sum())
                    expert.weight.view(-1)[j] = w0.view(-1)[j] - eps
                    down = float((layer(x) * proj).sum())
                    expert.weight.view(-1)[j] = w0.view(-1)[j]
                fd = (up - down) / (2 * eps)
                assert float(grad[j]) == pytest.approx(fd, rel=1e-4, abs=1e-9)

    def test_output_shape_matches_input(self):
        layer = make_layer(channels=6, embed_dim=8)
        x = torch.randn(2, 6, 7, 5)
        assert layer(x).shape == x.shape


class TestLoadBalance:
    def test_single_decision(self):
        stats = load_balance_stats([GateDecision(indices=[0, 1], weights=[0.5, 0.3])], 4)
        assert stats.tolist() == [1, 1, 0, 0]

    def test_two_decisions_cover_all(self):
        decisions = [
            GateDecision(indices=[0, 1], weights=[0.5, 0.3]),
            GateDecision(indices=[2, 3], weights=[0.4, 0.2]),
        ]
        assert load_balance_stats(decisions, 4).tolist() == [1, 1, 1, 1]

    def test_sum_is_k_per_decision(self):
        layer = make_layer(seed=10)
        x = torch.randn(16, 4, 3, 3)
        decisions = layer.gate_decisions(x)
        stats = load_balance_stats(decisions, 4)
        assert stats.sum() == 16 * layer.config.top_k

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            load_balance_stats([], 4)

    def test_no_expert_starves_at_random_init(self):
        layer = make_layer(channels=8, num_experts=4, top_k=2, embed_dim=8, seed=11)
        x = torch.randn(1000, 8, 2, 2)
        stats = load_balance_stats(layer.gate_decisions(x), 4)
        assert np.all(stats > 0)
