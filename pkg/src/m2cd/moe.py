"""Modality-specialized Mixture-of-Experts layer.

Routing: the stage feature map is global-average pooled, linearly projected
(no bias) into an embedding space, and scored against learnable per-expert
embedding columns by cosine similarity. A softmax over the scores gives
expert probabilities; the top-k experts keep their raw probabilities and
everything else contributes zero. Experts are 1x1 convolutions initialized
near identity so a freshly inserted layer barely perturbs the backbone.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .errors import ConfigurationError, ShapeError


@dataclass(frozen=True)
class MoeConfig:
    channels: int
    num_experts: int = 4
    top_k: int = 2
    embed_dim: int = 16

    def __post_init__(self):
        if self.num_experts < 1:
            raise ConfigurationError(f"num_experts must be >= 1, got {self.num_experts}")
        if not (1 <= self.top_k <= self.num_experts):
            raise ConfigurationError(
                f"top_k must be in [1, num_experts={self.num_experts}], got {self.top_k}"
            )
        if self.channels < 1 or self.embed_dim < 1:
            raise ConfigurationError("channels and embed_dim must be >= 1")


@dataclass
class GateDecision:
    """Selected expert indices and their softmax probabilities for one input."""

    indices: list[int]
    weights: list[float]


class MoeLayer(nn.Module):
    def __init__(self, config: MoeConfig, init_noise_std: float = 0.01):
        super().__init__()
        self.config = config
        c, m, d = config.channels, config.num_experts, config.embed_dim
        self.router = nn.Linear(c, d, bias=False)
        self.expert_embeddings = nn.Parameter(torch.empty(d, m))
        self.experts = nn.ModuleList(nn.Conv2d(c, c, kernel_size=1) for _ in range(m))
        # Count of routing calls that hit the zero-norm pooled-feature fallback.
        self.zero_gate_fallbacks = 0
        self._init_parameters(init_noise_std)

    def _init_parameters(self, noise_std: float):
        with torch.no_grad():
            nn.init.normal_(self.expert_embeddings)
            norms = self.expert_embeddings.norm(dim=0)
            for j in torch.nonzero(norms == 0).flatten().tolist():
                self.expert_embeddings[:, j] = torch.randn(self.config.embed_dim) + 0.1
            self.expert_embeddings /= self.expert_embeddings.norm(dim=0, keepdim=True)
            eye = torch.eye(self.config.channels).view(
                self.config.channels, self.config.channels, 1, 1
            )
            for conv in self.experts:
                conv.weight.copy_(eye)
                if noise_std > 0:
                    conv.weight.add_(torch.randn_like(conv.weight) * noise_std)
                conv.bias.zero_()

    def gate_probs(self, feature: Tensor) -> Tensor:
        """Softmax expert probabilities (B, M) for a (B, C, H, W) feature map."""
        if feature.dim() != 4 or feature.shape[1] != self.config.channels:
            raise ShapeError(
                f"expected (B, {self.config.channels}, H, W) feature, got {tuple(feature.shape)}"
            )
        pooled = feature.mean(dim=(2, 3))
        v = self.router(pooled)
        v_norm = v.norm(dim=1, keepdim=True)
        e_norm = self.expert_embeddings.norm(dim=0)
        zero = (v_norm == 0).squeeze(1)
        denom = torch.where(v_norm == 0, torch.ones_like(v_norm), v_norm) * e_norm
        scores = (v @ self.expert_embeddings) / denom
        if bool(zero.any()):
            # Zero pooled feature has no direction: fall back to uniform scores.
            scores = torch.where(zero.unsqueeze(1), torch.zeros_like(scores), scores)
            self.zero_gate_fallbacks += int(zero.sum())
        return torch.softmax(scores, dim=1)

    def gate(self, feature: Tensor) -> tuple[Tensor, Tensor]:
        """Top-k selection: (indices (B, k) long, weights (B, k)).

        Ties are broken deterministically toward the lowest expert index.
        Weights are the raw softmax probabilities of the selected experts;
        non-selected experts are implicitly zero (no renormalization).
        """
        probs = self.gate_probs(feature)
        order = torch.argsort(-probs, dim=1, stable=True)[:, : self.config.top_k]
        weights = probs.gather(1, order)
        return order, weights

    def gate_decisions(self, feature: Tensor) -> list[GateDecision]:
        indices, weights = self.gate(feature)
        return [
            GateDecision(indices=idx.tolist(), weights=w.tolist())
            for idx, w in zip(indices.detach().cpu(), weights.detach().cpu())
        ]

    def forward(self, feature: Tensor) -> Tensor:
        """Sparse expert mixture: sum of weight_m * expert_m(feature) over the top-k.

        Only selected experts are evaluated, and each only on the batch rows
        that routed to it, so non-selected expert parameters receive no
        gradient at all.
        """
        indices, weights = self.gate(feature)
        out = torch.zeros_like(feature)
        for m in torch.unique(indices).tolist():
            sel = indices == m  # (B, k)
            rows = sel.any(dim=1)
            w = (weights * sel).sum(dim=1)[rows]  # per-row weight of expert m
            expert_out = self.experts[m](feature[rows])
            out[rows] = out[rows] + w.view(-1, 1, 1, 1) * expert_out
        return out


def moe_forward(feature: Tensor, layer: MoeLayer) -> Tensor:
    return layer(feature)


def load_balance_stats(decisions: list[GateDecision], num_experts: int) -> np.ndarray:
    """Selection counts per expert over a sequence of gate decisions."""
    if len(decisions) == 0:
        raise ValueError("decisions must be nonempty")
    counts = np.zeros(num_experts, dtype=np.int64)
    for d in decisions:
        for idx in d.indices:
            counts[idx] += 1
    return counts
