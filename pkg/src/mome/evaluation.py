"""Dice metrics, patient-level tumor detection, sliding-window inference,
the top-K router ablation and report/slice-image export."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import check_patch_dims
from .core import ClassVocabulary, PartialLabelSet, Volume
from .errors import ConfigError
from .head import MoMEModel, Prediction

DETECT_THRESHOLD = 0.5
DETECT_MIN_VOXELS = 8


@dataclass
class DetectionResult:
    sensitivity: float
    specificity: float
    harmonic: float
    n_positive: int
    n_negative: int


@dataclass
class EvalReport:
    per_class_dice: np.ndarray  # length K
    mean_dice: float
    mean_organ_dice: float
    mean_tumor_dice: float
    detection: dict[str, DetectionResult]  # tumor class name -> result
    config_hash: str = ""
    seed: int = 0


def dice(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Overlap 2|A n B| / (|A| + |B|); defined as 1.0 when both are empty."""
    if pred_mask.shape != gt_mask.shape:
        raise ConfigError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    a = pred_mask.astype(bool)
    b = gt_mask.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def _tile_origins(extent: int, patch: int, stride: int) -> list[int]:
    origins = list(range(0, extent - patch + 1, stride))
    if origins[-1] != extent - patch:
        origins.append(extent - patch)  # clamp the last tile inside bounds
    return origins


def sliding_window_infer(
    v: Volume,
    model: MoMEModel,
    embeddings: torch.Tensor,
    patch: tuple[int, int, int],
    overlap: float = 0.25,
    k_active: int | None = None,
) -> Prediction:
    """Tile the volume with stride patch*(1-overlap) and average the
    per-tile probabilities with uniform weights.

    A volume smaller than the patch along any axis is zero-padded
    symmetrically to patch size, predicted as a single tile and cropped.
    """
    if not 0.0 <= overlap <= 0.75:
        raise ConfigError(f"overlap must be in [0, 0.75], got {overlap}")
    check_patch_dims(patch, model.cfg.L)
    vox = v.voxels
    pad = [max(0, p - d) for p, d in zip(patch, vox.shape)]
    if any(pad):
        before = [q // 2 for q in pad]
        vox = np.pad(vox, [(b, q - b) for b, q in zip(before, pad)])
    K = embeddings.shape[0]
    acc = np.zeros((K,) + vox.shape, dtype=np.float64)
    count = np.zeros(vox.shape, dtype=np.float64)
    origins = [
        _tile_origins(d, p, max(1, round(p * (1.0 - overlap)))) for d, p in zip(vox.shape, patch)
    ]
    with torch.no_grad():
        for oz in origins[0]:
            for oy in origins[1]:
                for ox in origins[2]:
                    sl = (
                        slice(oz, oz + patch[0]),
                        slice(oy, oy + patch[1]),
                        slice(ox, ox + patch[2]),
                    )
                    tile = torch.from_numpy(np.ascontiguousarray(vox[sl], dtype=np.float32))
                    logits = model(tile, embeddings, k_active=k_active)
                    acc[(slice(None),) + sl] += torch.sigmoid(logits.double()).numpy()
                    count[sl] += 1.0
    probs = acc / count
    if any(pad):
        crop = tuple(
            slice(b, b + d) for b, d in zip([q // 2 for q in pad], v.voxels.shape)
        )
        probs = probs[(slice(None),) + crop]
    return Prediction(probs=probs)


def detect(
    pred: Prediction,
    vocab: ClassVocabulary,
    k_tumor: int,
    threshold: float = DETECT_THRESHOLD,
    min_voxels: int = DETECT_MIN_VOXELS,
) -> bool:
    """Patient-level call: positive iff at least min_voxels voxels exceed
    the probability threshold."""
    if not 0 <= k_tumor < len(vocab) or vocab.entries[k_tumor].kind != "tumor":
        raise ConfigError(f"class {k_tumor} is not a tumor class")
    return int((pred.probs[k_tumor] > threshold).sum()) >= min_voxels


def harmonic_mean(sensitivity: float, specificity: float) -> float:
    s = sensitivity + specificity
    if s <= 0:
        return 0.0
    return 2.0 * sensitivity * specificity / s


def detection_metrics(
    decisions: list[bool], ground_truth_presence: list[bool]
) -> tuple[float, float, float]:
    """Patient-level sensitivity, specificity and their harmonic mean."""
    if len(decisions) != len(ground_truth_presence):
        raise ConfigError("decision and ground-truth lists differ in length")
    pos = [d for d, g in zip(decisions, ground_truth_presence) if g]
    neg = [d for d, g in zip(decisions, ground_truth_presence) if not g]
    if not pos or not neg:
        raise ConfigError(
            f"need at least one tumor-bearing and one tumor-free case, got {len(pos)}/{len(neg)}"
        )
    sen = sum(pos) / len(pos)
    spec = sum(1 for d in neg if not d) / len(neg)
    return sen, spec, harmonic_mean(sen, spec)


def evaluate(
    model: MoMEModel,
    embeddings: torch.Tensor,
    volumes: dict[str, Volume],
    labels: dict[str, PartialLabelSet],
    vocab: ClassVocabulary,
    patch: tuple[int, int, int],
    overlap: float = 0.25,
    threshold: float = DETECT_THRESHOLD,
    min_voxels: int = DETECT_MIN_VOXELS,
    k_active: int | None = None,
    config_hash: str = "",
    seed: int = 0,
    workers: int = 1,
) -> EvalReport:
    """Dice per class over fully labeled volumes plus tumor detection.

    Volumes may be predicted by parallel workers; metrics are assembled
    single-threaded in sorted id order, so the report is deterministic.
    """
    K = len(vocab)
    dice_sums = np.zeros(K)
    decisions: dict[int, list[bool]] = {k: [] for k in vocab.tumor_indices()}
    presence: dict[int, list[bool]] = {k: [] for k in vocab.tumor_indices()}
    order = sorted(volumes)

    def _predict(vid: str) -> Prediction:
        return sliding_window_infer(
            volumes[vid], model, embeddings, patch, overlap, k_active=k_active
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = dict(zip(order, pool.map(_predict, order)))
    else:
        preds = {vid: _predict(vid) for vid in order}
    for vid in order:
        pred = preds[vid]
        gt = labels[vid]
        for k in range(K):
            dice_sums[k] += dice(pred.probs[k] > threshold, gt.masks[k])
        for k in vocab.tumor_indices():
            decisions[k].append(detect(pred, vocab, k, threshold, min_voxels))
            presence[k].append(bool(gt.masks[k].any()))
    per_class = dice_sums / max(len(order), 1)
    organ_idx = vocab.organ_indices()
    tumor_idx = vocab.tumor_indices()
    detection = {}
    for k in tumor_idx:
        try:
            sen, spec, harm = detection_metrics(decisions[k], presence[k])
            detection[vocab.entries[k].name] = DetectionResult(
                sen, spec, harm, sum(presence[k]), len(presence[k]) - sum(presence[k])
            )
        except ConfigError:
            detection[vocab.entries[k].name] = DetectionResult(
                float("nan"), float("nan"), float("nan"), sum(presence[k]),
                len(presence[k]) - sum(presence[k]),
            )
    return EvalReport(
        per_class_dice=per_class,
        mean_dice=float(per_class.mean()),
        mean_organ_dice=float(per_class[organ_idx].mean()) if organ_idx else float("nan"),
        mean_tumor_dice=float(per_class[tumor_idx].mean()) if tumor_idx else float("nan"),
        detection=detection,
        config_hash=config_hash,
        seed=seed,
    )


def ablate_topk(
    models: list[tuple[MoMEModel, torch.Tensor]],
    volumes: dict[str, Volume],
    labels: dict[str, PartialLabelSet],
    vocab: ClassVocabulary,
    k_values: list[int],
    patch: tuple[int, int, int],
    overlap: float = 0.25,
    threshold: float = DETECT_THRESHOLD,
) -> dict[int, np.ndarray]:
    """Mean Dice per class (last entry: average) for each router top-K,
    averaged over the given (model, embeddings) pairs — one per training
    seed."""
    K = len(vocab)
    table: dict[int, np.ndarray] = {}
    for k_active in k_values:
        rows = []
        for model, embeddings in models:
            report = evaluate(
                model, embeddings, volumes, labels, vocab, patch, overlap,
                threshold=threshold, k_active=k_active,
            )
            rows.append(np.append(report.per_class_dice, report.mean_dice))
        table[k_active] = np.mean(rows, axis=0)
    return table


# ---------------------------------------------------------------------------
# slice export (binary portable graymap)
# ---------------------------------------------------------------------------


def _write_pgm(path: Path, img: np.ndarray) -> None:
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.astype(np.uint8).tobytes())


def _class_gray(k: int, num_classes: int) -> int:
    return int(round(255 * (k + 1) / num_classes))


def export_slices(
    v: Volume,
    pred: Prediction | None,
    gt: PartialLabelSet | None,
    z_indices: list[int],
    out_dir: str | Path,
    threshold: float = DETECT_THRESHOLD,
) -> list[Path]:
    """Grayscale slice images: the input, the thresholded-argmax prediction
    overlay, and the ground-truth overlay. Returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lo, hi = float(v.voxels.min()), float(v.voxels.max())
    span = hi - lo if hi > lo else 1.0
    written: list[Path] = []
    for z in z_indices:
        if not 0 <= z < v.voxels.shape[0]:
            raise ConfigError(f"slice index {z} outside [0, {v.voxels.shape[0]})")
        base = ((v.voxels[z] - lo) / span * 255.0).astype(np.uint8)
        plane = [(f"slice_z{z:03d}_input.pgm", base)]
        if pred is not None:
            num_classes = pred.num_classes
            sl = pred.probs[:, z]
            best = sl.argmax(axis=0)
            hit = sl.max(axis=0) > threshold
            overlay = base.copy()
            for k in range(num_classes):
                overlay[hit & (best == k)] = _class_gray(k, num_classes)
            plane.append((f"slice_z{z:03d}_pred.pgm", overlay))
        if gt is not None:
            overlay = base.copy()
            for k in range(gt.num_classes):  # later classes (tumors) drawn on top
                overlay[gt.masks[k][z] > 0] = _class_gray(k, gt.num_classes)
            plane.append((f"slice_z{z:03d}_gt.pgm", overlay))
        for name, img in plane:
            path = out_dir / name
            _write_pgm(path, img)
            written.append(path)
    return written
