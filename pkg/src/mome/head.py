"""Dynamic per-class segmentation heads and the end-to-end forward pass.

Head weights come from the controller output, not from trained head
parameters: three 1x1x1 convolutions (C_tok -> 8 -> 8 -> 1) with GELU
after the first two, logits clamped to +/-30, sigmoid per voxel. Classes
are independent one-vs-all channels; no cross-class normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .backbone import (
    Decoder,
    Encoder,
    ExpertProjector,
    ExpertTokens,
    global_feature,
)
from .core import ModelConfig
from .errors import ConfigError
from .router import FusedFeature, GateMLP, normalize_gates, raw_gates, topk_filter, fuse
from .textbranch import Controller, DynamicHeadParams, controller_params

LOGIT_CLAMP = 30.0


@dataclass(frozen=True)
class Prediction:
    """Per-class probability volume, entries strictly inside (0, 1)."""

    probs: np.ndarray  # (K, D, W, H) float64

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", p)
        if p.ndim != 4:
            raise ConfigError(f"prediction must be K x D x W x H, got {p.shape}")
        if not ((p > 0.0) & (p < 1.0)).all():
            raise ConfigError("prediction probabilities must lie strictly in (0, 1)")

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]


def dynamic_head_logits(G: FusedFeature, theta: DynamicHeadParams) -> torch.Tensor:
    """Clamped logits of the generated three-layer head, shape (1, D, W, H)."""
    c_tok = G.G.shape[0]
    if theta.c_tok != c_tok:
        raise ConfigError(f"head params built for C_tok={theta.c_tok}, feature has {c_tok}")
    x = G.G.unsqueeze(0)
    w1, b1 = theta.theta1
    w2, b2 = theta.theta2
    w3, b3 = theta.theta3
    x = F.gelu(F.conv3d(x, w1.reshape(8, c_tok, 1, 1, 1), b1))
    x = F.gelu(F.conv3d(x, w2.reshape(8, 8, 1, 1, 1), b2))
    x = F.conv3d(x, w3.reshape(1, 8, 1, 1, 1), b3)
    return torch.clamp(x.squeeze(0), -LOGIT_CLAMP, LOGIT_CLAMP)


def dynamic_head(G: FusedFeature, theta: DynamicHeadParams) -> torch.Tensor:
    """Per-voxel class probability, computed in float64 so the clamp keeps
    the output strictly inside (0, 1)."""
    return torch.sigmoid(dynamic_head_logits(G, theta).double())


class MoMEModel(nn.Module):
    """Mixture of multi-scale decoder experts with text-conditioned routing."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.projector = ExpertProjector(cfg)
        self.controller = Controller(cfg, c_bottleneck=cfg.encoder_widths[-1])
        self.router = GateMLP(cfg)

    def expert_tokens(self, patch: torch.Tensor) -> tuple[ExpertTokens, torch.Tensor]:
        """Class-independent part of the forward pass: tokens plus the
        pooled bottleneck feature."""
        enc = self.encoder(patch)
        g = global_feature(enc).g
        pyramid = self.decoder(enc)
        return self.projector(pyramid), g

    def class_logits(
        self,
        tokens: ExpertTokens,
        g: torch.Tensor,
        w: torch.Tensor,
        k: int,
        k_active: int | None = None,
        tok_term: torch.Tensor | None = None,
    ) -> torch.Tensor:
        theta = controller_params(self.controller, w, g)
        if tok_term is None:
            raw = raw_gates(theta, tokens, self.router)
        else:
            raw = self.router.raw_from_terms(self.router.theta_term(theta.flat), tok_term)
        gates = normalize_gates(raw, k=k)
        gates = topk_filter(gates, self.cfg.K_active if k_active is None else k_active)
        return dynamic_head_logits(fuse(gates, tokens), theta)

    def forward(
        self,
        patch: torch.Tensor,
        embeddings: torch.Tensor,
        k_active: int | None = None,
    ) -> torch.Tensor:
        """Logits of shape (K, D, W, H); backbone outputs and the router's
        token term are computed once per patch and shared across classes."""
        if embeddings.ndim != 2 or embeddings.shape[1] != self.cfg.d_text:
            raise ConfigError(
                f"embeddings must be (K, {self.cfg.d_text}), got {tuple(embeddings.shape)}"
            )
        tokens, g = self.expert_tokens(patch)
        tok_term = self.router.token_term(tokens.tokens)
        return torch.cat(
            [
                self.class_logits(tokens, g, w, k, k_active, tok_term=tok_term)
                for k, w in enumerate(embeddings)
            ]
        )


def build_model(cfg: ModelConfig, seed: int) -> MoMEModel:
    """Deterministic construction: same config and seed give identical weights."""
    torch.manual_seed(seed)
    return MoMEModel(cfg)


def logits_to_prediction(logits: torch.Tensor) -> Prediction:
    return Prediction(probs=torch.sigmoid(logits.detach().double()).numpy())


def predict_patch(model: MoMEModel, patch: torch.Tensor, embeddings: torch.Tensor,
                  k_active: int | None = None) -> Prediction:
    with torch.no_grad():
        return logits_to_prediction(model(patch, embeddings, k_active=k_active))
