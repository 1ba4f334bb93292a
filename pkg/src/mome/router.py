"""Per-voxel, per-expert gating: raw gates, simplex normalization,
top-K filtering and fusion of expert tokens.

One two-layer perceptron is shared across all experts and classes; it
scores concat(flat head params, token vector) per voxel. Raw scores pass
through a sigmoid before the divide-by-sum normalization so the simplex
is well defined for any sign of the raw output.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .backbone import ExpertTokens
from .core import ModelConfig
from .errors import ConfigError, NumericError
from .textbranch import DynamicHeadParams

SIMPLEX_TOL = 1e-5
NORM_EPS = 1e-8
# raw gate scores are smoothly bounded before the sigmoid; this keeps every
# sigmoid output >= sigma(-RAW_BOUND) ~ 1.5e-3, so the epsilon in the
# normalization can never distort per-voxel sums past SIMPLEX_TOL
RAW_BOUND = 6.5


@dataclass(frozen=True)
class GateField:
    """Per-voxel expert weights for one class; a simplex at every voxel."""

    gates: torch.Tensor  # (L, D, W, H)
    k: int
    max_nonzero: int | None = None

    def __post_init__(self):
        validate_gates(self.gates, self.max_nonzero)


@dataclass(frozen=True)
class FusedFeature:
    G: torch.Tensor  # (C_tok, D, W, H)
    k: int

    def __post_init__(self):
        if not torch.isfinite(self.G).all():
            raise NumericError(f"fused feature for class {self.k} is not finite")


def validate_gates(gates: torch.Tensor, max_nonzero: int | None = None) -> None:
    """Simplex and sparsity invariants; value-level failures are numeric
    (they surface mid-run from blown-up weights, not from bad config)."""
    if (gates < 0).any():
        raise NumericError("gate values must be nonnegative")
    sums = gates.detach().sum(dim=0)
    if (sums - 1.0).abs().max() > SIMPLEX_TOL:
        raise NumericError(
            f"per-voxel gate sums deviate from 1 by {float((sums - 1.0).abs().max()):.3g}"
        )
    if max_nonzero is not None:
        nz = (gates != 0).sum(dim=0)
        if int(nz.max()) > max_nonzero:
            raise NumericError(f"{int(nz.max())} nonzero gates at a voxel, limit {max_nonzero}")


class GateMLP(nn.Module):
    """Shared router perceptron: concat(flat theta, token vector) -> scalar.

    The first linear layer splits into its theta and token column blocks:
    the token block is one pointwise convolution over all experts (class
    independent, so callers may compute it once per patch), the theta block
    is a single matrix-vector product reused at every voxel.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.flat_len = cfg.flat_theta_len
        self.c_tok = cfg.C_tok
        self.fc1 = nn.Linear(self.flat_len + cfg.C_tok, cfg.router_hidden)
        self.fc2 = nn.Linear(cfg.router_hidden, 1)

    def token_term(self, tokens: torch.Tensor) -> torch.Tensor:
        w_tok = self.fc1.weight[:, self.flat_len :]
        return F.conv3d(tokens, w_tok.reshape(-1, self.c_tok, 1, 1, 1))

    def theta_term(self, flat_theta: torch.Tensor) -> torch.Tensor:
        return self.fc1.weight[:, : self.flat_len] @ flat_theta + self.fc1.bias

    def raw_from_terms(self, theta_term: torch.Tensor, tok_term: torch.Tensor) -> torch.Tensor:
        h = F.gelu(tok_term + theta_term.reshape(1, -1, 1, 1, 1))
        out = F.conv3d(h, self.fc2.weight.reshape(1, -1, 1, 1, 1), self.fc2.bias)
        return out.squeeze(1)

    def forward(self, flat_theta: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """tokens: (L, C_tok, D, W, H) -> raw gate values (L, D, W, H)."""
        return self.raw_from_terms(self.theta_term(flat_theta), self.token_term(tokens))


def raw_gates(theta: DynamicHeadParams, tokens: ExpertTokens, router: GateMLP) -> torch.Tensor:
    if theta.flat.numel() != router.flat_len:
        raise ConfigError(
            f"router expects flat theta of length {router.flat_len}, got {theta.flat.numel()}"
        )
    if tokens.tokens.shape[1] != router.c_tok:
        raise ConfigError(
            f"router expects {router.c_tok} token channels, got {tokens.tokens.shape[1]}"
        )
    return router(theta.flat, tokens.tokens)


def simplex_normalize(positive: torch.Tensor) -> torch.Tensor:
    """Divide positive per-voxel values by their expert sum (plus epsilon)."""
    return positive / (positive.sum(dim=0, keepdim=True) + NORM_EPS)


def normalize_gates(raw: torch.Tensor, k: int = 0) -> GateField:
    if not torch.isfinite(raw).all():
        raise NumericError("raw gate values must be finite")
    bounded = RAW_BOUND * torch.tanh(raw / RAW_BOUND)
    return GateField(gates=simplex_normalize(torch.sigmoid(bounded)), k=k)


def topk_filter(g: GateField, k_active: int) -> GateField:
    """Keep the K largest gates per voxel (ties to the lowest expert index),
    zero the rest and renormalize. K equal to L is the bit-exact identity."""
    L = g.gates.shape[0]
    if not 1 <= k_active <= L:
        raise ConfigError(f"K_active must be in [1, {L}], got {k_active}")
    if k_active == L:
        return g
    # stable descending sort resolves ties in favor of the lowest index
    order = torch.sort(g.gates, dim=0, descending=True, stable=True).indices
    mask = torch.zeros_like(g.gates)
    mask.scatter_(0, order[:k_active], 1.0)
    kept = g.gates * mask  # straight-through: gradients flow via kept gates only
    return GateField(gates=kept / kept.sum(dim=0, keepdim=True), k=g.k, max_nonzero=k_active)


def fuse(g: GateField, tokens: ExpertTokens) -> FusedFeature:
    """Per-voxel convex combination of expert token vectors.

    Contributions are sorted by value before summation, which makes the
    result bit-identical under any permutation of the experts.
    """
    if g.gates.shape[0] != tokens.num_experts or g.gates.shape[-3:] != tokens.tokens.shape[-3:]:
        raise ConfigError(
            f"gate field {tuple(g.gates.shape)} does not match tokens {tuple(tokens.tokens.shape)}"
        )
    contrib = g.gates.unsqueeze(1) * tokens.tokens  # (L, C_tok, D, W, H)
    ordered = torch.sort(contrib, dim=0).values
    return FusedFeature(G=ordered.sum(dim=0), k=g.k)
