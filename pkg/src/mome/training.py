"""Masked partial-label loss, warmup-cosine schedule, AdamW training loop
and bit-exact checkpointing.

Checkpoint layout (little-endian): magic ``MOMECKPT`` | uint32 version |
uint64 metadata length | metadata JSON | uint32 array count | per array:
uint16 name length, name, uint8 ndim, uint32 dims, float32 payload.
Metadata holds configs, vocabulary, epoch/step counters and the sampler
PRNG state, so load(save(state)) resumes training bit-exactly.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from .core import ClassVocabulary, ModelConfig, PartialLabelSet, TrainConfig, Volume
from .errors import (
    BadMagicError,
    ConfigError,
    NumericError,
    TruncatedPayloadError,
)
from .head import MoMEModel, build_model

CHECKPOINT_MAGIC = b"MOMECKPT"
CHECKPOINT_VERSION = 1
DICE_SMOOTH = 1e-5
METRICS_HEADER = "step,epoch,lr,total,bce,dice"
FOREGROUND_BIAS = 0.5


@dataclass
class LossReport:
    total: float
    bce: float
    dice: float
    per_class: np.ndarray  # length K, NaN where unannotated


def masked_loss(logits: torch.Tensor, labels: PartialLabelSet) -> tuple[torch.Tensor, LossReport]:
    """BCE plus soft Dice over annotated classes only.

    Unannotated classes never enter the graph, so both the loss value and
    its gradients are exactly independent of their placeholder masks.
    Returns the differentiable total alongside the float report.
    """
    K = labels.num_classes
    if logits.shape[0] != K or tuple(logits.shape[1:]) != labels.masks.shape[1:]:
        raise ConfigError(
            f"logits {tuple(logits.shape)} do not match labels {labels.masks.shape}"
        )
    ann = [k for k in range(K) if labels.annotated[k]]
    if not ann:
        raise ConfigError(f"labels '{labels.volume_id}' annotate no classes at all")
    target = torch.from_numpy(labels.masks[ann].astype(np.float32)).to(logits.dtype)
    z = logits[ann]
    bce_per = F.binary_cross_entropy_with_logits(z, target, reduction="none").mean(dim=(1, 2, 3))
    p = torch.sigmoid(z)
    inter = (p * target).sum(dim=(1, 2, 3))
    denom = p.sum(dim=(1, 2, 3)) + target.sum(dim=(1, 2, 3))
    dice_per = 1.0 - (2.0 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    total = bce_per.mean() + dice_per.mean()

    per_class = np.full(K, np.nan)
    bce_d, dice_d = bce_per.detach(), dice_per.detach()
    for i, k in enumerate(ann):
        per_class[k] = float(bce_d[i] + dice_d[i])
    bce_f, dice_f = float(bce_d.mean()), float(dice_d.mean())
    report = LossReport(total=bce_f + dice_f, bce=bce_f, dice=dice_f, per_class=per_class)
    return total, report


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to cfg.lr, then cosine decay to 0 at total_steps."""
    if not 0 <= step < total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps})")
    warmup = cfg.warmup_fraction * total_steps
    if step < warmup:
        return cfg.lr * step / warmup
    span = total_steps - warmup
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / span))


# ---------------------------------------------------------------------------
# trainer state
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    model: MoMEModel
    optimizer: torch.optim.AdamW
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    vocab: ClassVocabulary
    embeddings: torch.Tensor  # (K, d_text)
    epoch: int = 0
    global_step: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))


def init_state(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    vocab: ClassVocabulary,
    embeddings: torch.Tensor,
) -> TrainState:
    model = build_model(model_cfg, train_cfg.seed)
    opt = torch.optim.AdamW(
        model.parameters(),
        lr=train_cfg.lr,
        betas=(train_cfg.beta1, 0.999),
        weight_decay=train_cfg.weight_decay,
    )
    return TrainState(
        model=model,
        optimizer=opt,
        model_cfg=model_cfg,
        train_cfg=train_cfg,
        vocab=vocab,
        embeddings=embeddings,
        rng=np.random.default_rng(train_cfg.seed),
    )


def _training_k_active(state: TrainState) -> int:
    cfg = state.model_cfg
    return cfg.L if cfg.topk_inference_only else cfg.K_active


def sample_patch(
    volume: Volume, labels: PartialLabelSet, patch: tuple[int, int, int], rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Random patch crop, centered on an annotated foreground voxel with
    probability 0.5 when one exists."""
    dims = volume.voxels.shape
    if any(p > d for p, d in zip(patch, dims)):
        raise ConfigError(f"patch {patch} larger than volume {dims}")
    origin = None
    if rng.random() < FOREGROUND_BIAS:
        ann = [k for k in range(labels.num_classes) if labels.annotated[k] and labels.masks[k].any()]
        if ann:
            k = int(rng.choice(np.asarray(ann)))
            coords = np.argwhere(labels.masks[k])
            center = coords[int(rng.integers(len(coords)))]
            origin = [
                int(np.clip(c - p // 2, 0, d - p)) for c, p, d in zip(center, patch, dims)
            ]
    if origin is None:
        origin = [int(rng.integers(d - p + 1)) for p, d in zip(patch, dims)]
    sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
    return volume.voxels[sl], labels.masks[(slice(None),) + sl]


def train_step(
    state: TrainState,
    batch: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
    lr: float,
) -> LossReport:
    """One AdamW update on the mean loss over the batch of
    (patch voxels, masks, annotated) triples."""
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad()
    k_active = _training_k_active(state)
    totals, reports = [], []
    for voxels, masks, annotated in batch:
        patch_t = torch.from_numpy(np.ascontiguousarray(voxels, dtype=np.float32))
        logits = state.model(patch_t, state.embeddings, k_active=k_active)
        labels = PartialLabelSet(masks=masks, annotated=annotated, volume_id="batch")
        total, report = masked_loss(logits, labels)
        totals.append(total)
        reports.append(report)
    loss = torch.stack(totals).mean()
    if not torch.isfinite(loss):
        raise NumericError(
            f"non-finite loss at step {state.global_step}: "
            f"components bce={reports[0].bce} dice={reports[0].dice}"
        )
    loss.backward()
    state.optimizer.step()
    state.global_step += 1
    n = len(reports)
    if n == 1:
        return reports[0]
    vals = np.stack([r.per_class for r in reports])
    present = ~np.isnan(vals)
    counts = present.sum(axis=0)
    per_class = np.where(
        counts > 0, np.where(present, vals, 0.0).sum(axis=0) / np.maximum(counts, 1), np.nan
    )
    bce_f = sum(r.bce for r in reports) / n
    dice_f = sum(r.dice for r in reports) / n
    return LossReport(total=bce_f + dice_f, bce=bce_f, dice=dice_f, per_class=per_class)


def train(
    state: TrainState,
    volumes: dict[str, Volume],
    labels: dict[str, PartialLabelSet],
    volume_order: list[str],
    checkpoint_path: str | Path | None = None,
    log_rows: list[str] | None = None,
    until_epoch: int | None = None,
) -> TrainState:
    """Epoch loop with shuffled volumes and foreground-biased patch sampling.

    Appends ``step,epoch,lr,total,bce,dice`` rows to log_rows and writes a
    periodic checkpoint after each epoch when a path is given. The schedule
    always spans cfg.epochs; until_epoch stops early (an interrupted run),
    leaving a state that resumes bit-exactly.
    """
    cfg = state.train_cfg
    steps_per_epoch = max(1, math.ceil(len(volume_order) / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    stop = cfg.epochs if until_epoch is None else min(cfg.epochs, until_epoch)
    while state.epoch < stop:
        order = list(volume_order)
        perm = state.rng.permutation(len(order))
        shuffled = [order[i] for i in perm]
        for start in range(0, len(shuffled), cfg.batch_size):
            ids = shuffled[start : start + cfg.batch_size]
            batch = []
            for vid in ids:
                voxels, masks = sample_patch(volumes[vid], labels[vid], cfg.patch, state.rng)
                batch.append((voxels, masks, labels[vid].annotated))
            step_idx = state.global_step
            lr = lr_at(step_idx, total_steps, cfg)
            report = train_step(state, batch, lr)
            if log_rows is not None:
                log_rows.append(
                    f"{step_idx},{state.epoch},{lr:.10g},"
                    f"{report.total:.10g},{report.bce:.10g},{report.dice:.10g}"
                )
        state.epoch += 1
        if checkpoint_path is not None and (
            state.epoch % cfg.checkpoint_every == 0 or state.epoch == cfg.epochs
        ):
            save_checkpoint(state, checkpoint_path)
    return state


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------


def _named_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays = {
        f"model.{name}": t.detach().numpy().astype(np.float32, copy=False)
        for name, t in state.model.state_dict().items()
    }
    params = dict(state.model.named_parameters())
    for name, p in params.items():
        opt_state = state.optimizer.state.get(p)
        if opt_state:
            arrays[f"opt.{name}.exp_avg"] = opt_state["exp_avg"].numpy().astype(np.float32, copy=False)
            arrays[f"opt.{name}.exp_avg_sq"] = opt_state["exp_avg_sq"].numpy().astype(np.float32, copy=False)
            arrays[f"opt.{name}.step"] = np.asarray(
                [float(opt_state["step"])], dtype=np.float32
            )
    arrays["embeddings"] = state.embeddings.numpy().astype(np.float32, copy=False)
    return arrays


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "model_config": state.model_cfg.to_dict(),
        "train_config": state.train_cfg.to_dict(),
        "vocabulary": state.vocab.to_dict(),
        "epoch": state.epoch,
        "global_step": state.global_step,
        "rng_state": state.rng.bit_generator.state,
    }
    blob = json.dumps(meta).encode("utf-8")
    arrays = _named_arrays(state)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            enc = name.encode("utf-8")
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{max(arr.ndim, 1)}I", *(arr.shape or (1,))))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 12:
        raise TruncatedPayloadError(f"{path}: shorter than the fixed header")
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: expected magic {CHECKPOINT_MAGIC!r}")
    off = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if off + meta_len > len(raw):
        raise TruncatedPayloadError(f"{path}: metadata block truncated")
    meta = json.loads(raw[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (n_arrays,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        dims = struct.unpack_from(f"<{max(ndim, 1)}I", raw, off)
        off += 4 * max(ndim, 1)
        count = int(np.prod(dims)) if ndim else int(dims[0])
        end = off + 4 * count
        if end > len(raw):
            raise TruncatedPayloadError(f"{path}: array '{name}' truncated")
        arr = np.frombuffer(raw[off:end], dtype="<f4").reshape(dims if ndim else dims[:1])
        arrays[name] = arr.copy()
        off = end
    return meta, arrays


def load_checkpoint(path: str | Path) -> TrainState:
    """Rebuild a TrainState that continues training bit-exactly."""
    meta, arrays = read_checkpoint(path)
    model_cfg = ModelConfig.from_dict(meta["model_config"])
    train_cfg = TrainConfig.from_dict(meta["train_config"])
    vocab = ClassVocabulary.from_dict(meta["vocabulary"])
    embeddings = torch.from_numpy(arrays["embeddings"].copy())
    state = init_state(model_cfg, train_cfg, vocab, embeddings)
    sd = {
        name[len("model.") :]: torch.from_numpy(arr.copy())
        for name, arr in arrays.items()
        if name.startswith("model.")
    }
    state.model.load_state_dict(sd)
    # rebuild AdamW slots only for parameters that have them in the file
    for name, p in state.model.named_parameters():
        key = f"opt.{name}.exp_avg"
        if key in arrays:
            state.optimizer.state[p] = {
                "step": torch.tensor(float(arrays[f"opt.{name}.step"][0])),
                "exp_avg": torch.from_numpy(arrays[key].copy()),
                "exp_avg_sq": torch.from_numpy(arrays[f"opt.{name}.exp_avg_sq"].copy()),
            }
    state.epoch = int(meta["epoch"])
    state.global_step = int(meta["global_step"])
    state.rng = np.random.default_rng()
    state.rng.bit_generator.state = meta["rng_state"]
    return state
