"""Per-class prompts, semantic embeddings and the dynamic-head controller.

The pretrained text encoder is abstracted behind an embedding provider:
either a deterministic hash-seeded Gaussian stub, or a JSON file of
precomputed vectors keyed by prompt string.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .core import ClassVocabulary, ModelConfig
from .errors import ConfigError, SidecarError

DEFAULT_TEMPLATE = "a computerized tomography of a [CLS]"
PLACEHOLDER = "[CLS]"


@dataclass(frozen=True)
class PromptTemplate:
    template: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        if self.template.count(PLACEHOLDER) != 1:
            raise ConfigError(
                f"template must contain exactly one {PLACEHOLDER!r}: {self.template!r}"
            )

    def format(self, class_name: str) -> str:
        return self.template.replace(PLACEHOLDER, class_name)


def build_prompt(vocab: ClassVocabulary, k: int, template: PromptTemplate | None = None) -> str:
    if not 0 <= k < len(vocab):
        raise ConfigError(f"class index {k} out of range [0, {len(vocab)})")
    return (template or PromptTemplate()).format(vocab.entries[k].name)


@dataclass(frozen=True)
class TextEmbedding:
    """Unit-norm semantic vector for one class."""

    w: torch.Tensor
    class_index: int

    def __post_init__(self):
        n = float(torch.linalg.vector_norm(self.w.double()))
        if abs(n - 1.0) > 1e-6:
            raise ConfigError(f"embedding for class {self.class_index} has norm {n} != 1")


def _prompt_seed(prompt: str) -> int:
    # stable across runs and platforms, unlike hash()
    return int.from_bytes(hashlib.blake2b(prompt.encode("utf-8"), digest_size=8).digest(), "little")


class StubEmbeddingProvider:
    """Deterministic text-encoder stand-in: hash-seeded Gaussian unit vectors."""

    def vector(self, prompt: str, d_text: int) -> np.ndarray:
        rng = np.random.default_rng(_prompt_seed(prompt))
        v = rng.standard_normal(d_text)
        return v / np.linalg.norm(v)


class FileEmbeddingProvider:
    """Precomputed embeddings from a JSON file mapping prompt -> float list."""

    def __init__(self, path: str | Path):
        path = Path(path)
        if not path.exists():
            raise SidecarError(f"{path}: embedding file missing")
        try:
            self.table = {str(k): np.asarray(v, dtype=np.float64) for k, v in json.loads(path.read_text()).items()}
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise SidecarError(f"{path}: invalid embedding file ({exc})") from exc
        self.path = path

    def vector(self, prompt: str, d_text: int) -> np.ndarray:
        if prompt not in self.table:
            raise SidecarError(f"{self.path}: no embedding for prompt {prompt!r}")
        v = self.table[prompt]
        if v.shape != (d_text,):
            raise ConfigError(f"embedding for {prompt!r} has dim {v.shape}, expected ({d_text},)")
        n = np.linalg.norm(v)
        if n == 0 or not np.isfinite(n):
            raise ConfigError(f"embedding for {prompt!r} cannot be normalized")
        return v / n


def embed(provider, prompt: str, d_text: int, class_index: int = 0) -> TextEmbedding:
    v = provider.vector(prompt, d_text)
    return TextEmbedding(w=torch.from_numpy(np.asarray(v, dtype=np.float64)).float(), class_index=class_index)


def embedding_matrix(
    vocab: ClassVocabulary,
    d_text: int,
    provider=None,
    template: PromptTemplate | None = None,
) -> torch.Tensor:
    """Stack every class embedding into a (K, d_text) float tensor."""
    provider = provider or StubEmbeddingProvider()
    rows = [
        embed(provider, build_prompt(vocab, k, template), d_text, k).w
        for k in range(len(vocab))
    ]
    return torch.stack(rows)


# ---------------------------------------------------------------------------
# dynamic head parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DynamicHeadParams:
    """Generated weights for the three-layer 1x1x1 head, kept flat for routing.

    Split order of ``flat``: theta1 weights (8*C_tok), theta1 bias (8),
    theta2 weights (64), theta2 bias (8), theta3 weights (8), theta3 bias (1).
    """

    flat: torch.Tensor

    def __post_init__(self):
        n = self.flat.numel()
        if self.flat.ndim != 1 or (n - 89) % 8 != 0 or n <= 89:
            raise ConfigError(f"flat head parameters must have length 8*C_tok+89, got {n}")

    @property
    def c_tok(self) -> int:
        return (self.flat.numel() - 89) // 8

    def _chunks(self):
        c = self.c_tok
        sizes = [8 * c, 8, 64, 8, 8, 1]
        return torch.split(self.flat, sizes)

    @property
    def theta1(self) -> tuple[torch.Tensor, torch.Tensor]:
        w, b = self._chunks()[0:2]
        return w.reshape(8, self.c_tok), b

    @property
    def theta2(self) -> tuple[torch.Tensor, torch.Tensor]:
        w, b = self._chunks()[2:4]
        return w.reshape(8, 8), b

    @property
    def theta3(self) -> tuple[torch.Tensor, torch.Tensor]:
        w, b = self._chunks()[4:6]
        return w.reshape(1, 8), b

    @classmethod
    def from_parts(
        cls,
        theta1: tuple[torch.Tensor, torch.Tensor],
        theta2: tuple[torch.Tensor, torch.Tensor],
        theta3: tuple[torch.Tensor, torch.Tensor],
    ) -> "DynamicHeadParams":
        flat = torch.cat(
            [
                theta1[0].reshape(-1),
                theta1[1].reshape(-1),
                theta2[0].reshape(-1),
                theta2[1].reshape(-1),
                theta3[0].reshape(-1),
                theta3[1].reshape(-1),
            ]
        )
        return cls(flat=flat)


class Controller(nn.Module):
    """Two-layer perceptron mapping concat(w_k, global feature) to flat head params."""

    def __init__(self, cfg: ModelConfig, c_bottleneck: int):
        super().__init__()
        self.fc1 = nn.Linear(cfg.d_text + c_bottleneck, 256)
        self.fc2 = nn.Linear(256, cfg.flat_theta_len)

    def forward(self, w: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        x = torch.cat([w, g])
        return self.fc2(nn.functional.gelu(self.fc1(x)))


def controller_params(controller: Controller, w: torch.Tensor, g: torch.Tensor) -> DynamicHeadParams:
    if w.numel() + g.numel() != controller.fc1.in_features:
        raise ConfigError(
            f"controller expects dim {controller.fc1.in_features}, got {w.numel()}+{g.numel()}"
        )
    return DynamicHeadParams(flat=controller(w, g))
