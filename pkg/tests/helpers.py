"""Shared test utilities: tiny configs, fixtures builders and the
finite-difference gradient oracle used to verify analytic gradients."""

from __future__ import annotations

import numpy as np
import torch

from mome.core import ClassVocabulary, ModelConfig, PartialLabelSet, VocabEntry
from mome.datasynth import OrganSpec, PhantomSpec, TumorSpec


def tiny_model_config(L: int = 3, c_tok: int = 4, d_text: int = 16) -> ModelConfig:
    widths = tuple(4 * (1 << i) for i in range(L))
    return ModelConfig(L=L, C_tok=c_tok, d_text=d_text, encoder_widths=widths, router_hidden=8)


def tiny_vocab(k_organs: int = 2, k_tumors: int = 1) -> ClassVocabulary:
    entries = [VocabEntry(f"organ {chr(97 + i)}", "organ") for i in range(k_organs)]
    entries += [VocabEntry(f"organ {chr(97 + i)} tumor", "tumor", i) for i in range(k_tumors)]
    return ClassVocabulary(tuple(entries))


def tiny_phantom_spec(grid=(16, 16, 16)) -> PhantomSpec:
    organs = (
        OrganSpec("alpha", (0.34, 0.34, 0.34), (0.17, 0.16, 0.16), 90.0, 6.0),
        OrganSpec("beta", (0.66, 0.66, 0.66), (0.16, 0.17, 0.16), 180.0, 6.0),
    )
    tumors = (TumorSpec("alpha tumor", 0, (0.05, 0.08), -60.0, 0.7),)
    return PhantomSpec(grid=grid, organ_specs=organs, tumor_specs=tumors, noise_sd=10.0)


def random_labels(rng: np.random.Generator, k: int, dims, annotated=None) -> PartialLabelSet:
    annotated = np.ones(k, dtype=bool) if annotated is None else np.asarray(annotated, dtype=bool)
    masks = (rng.random((k,) + tuple(dims)) < 0.2).astype(np.uint8)
    masks[~annotated] = 0
    return PartialLabelSet(masks=masks, annotated=annotated, volume_id="rand")


def finite_diff_param_grads(
    loss_fn,
    params: dict[str, torch.Tensor],
    coords: dict[str, np.ndarray],
    h: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central finite differences of loss_fn() at selected coordinates.

    Perturbs each chosen coordinate of each (float64) parameter tensor in
    place, so loss_fn must recompute the forward pass on every call. This
    stays independent of autograd: only forward evaluations are used.
    """
    out: dict[str, np.ndarray] = {}
    with torch.no_grad():
        for name, idxs in coords.items():
            p = params[name]
            flat = p.reshape(-1)
            vals = np.empty(len(idxs))
            for j, idx in enumerate(idxs):
                orig = flat[idx].item()
                step = h * max(1.0, abs(orig))
                flat[idx] = orig + step
                up = float(loss_fn())
                flat[idx] = orig - step
                down = float(loss_fn())
                flat[idx] = orig
                vals[j] = (up - down) / (2.0 * step)
            out[name] = vals
    return out


def sample_coords(
    params: dict[str, torch.Tensor], per_tensor: int, seed: int = 0
) -> dict[str, np.ndarray]:
    """A fixed-seed subset of coordinates covering every parameter tensor."""
    rng = np.random.default_rng(seed)
    coords = {}
    for name, p in params.items():
        n = p.numel()
        take = min(per_tensor, n)
        coords[name] = rng.choice(n, size=take, replace=False)
    return coords


def max_rel_error(
    analytic: dict[str, np.ndarray],
    numeric: dict[str, np.ndarray],
    abs_floor: float = 1e-8,
) -> tuple[float, str]:
    """Worst relative disagreement (with an absolute floor) and where it is."""
    worst, where = 0.0, ""
    for name, num in numeric.items():
        ana = analytic[name]
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), abs_floor)
        rel = np.abs(ana - num) / denom
        rel[np.abs(ana - num) <= abs_floor] = 0.0
        i = int(np.argmax(rel))
        if rel[i] > worst:
            worst, where = float(rel[i]), f"{name}[{i}] analytic={ana[i]:.6g} numeric={num[i]:.6g}"
    return worst, where
