"""Domain types, configuration records and bit-exact on-disk formats.

Binary layouts (all little-endian):

  volume file   magic ``MOMEVOL1`` | uint32 D,W,H | D*W*H float32, D-major
  label file    magic ``MOMELBL1`` | uint32 D,W,H | uint32 K | K*D*W*H uint8

Spacing, ids and annotation flags live in a JSON sidecar next to the
binary file (``<file>.json``). Loaders reject violating files instead of
repairing them.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    BadMagicError,
    ClassCountError,
    ConfigError,
    DimensionMismatchError,
    NonBinaryPayloadError,
    SidecarError,
    TruncatedPayloadError,
)

VOLUME_MAGIC = b"MOMEVOL1"
LABEL_MAGIC = b"MOMELBL1"


def sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".json")


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Volume:
    """3D scalar field with voxel spacing. Axis order is (D, W, H)."""

    voxels: np.ndarray
    spacing_mm: tuple[float, float, float]
    id: str

    def __post_init__(self):
        v = self.voxels
        if v.ndim != 3 or any(d < 1 for d in v.shape):
            raise ConfigError(f"volume '{self.id}' needs 3 positive dims, got {v.shape}")
        if v.dtype != np.float32:
            object.__setattr__(self, "voxels", v.astype(np.float32))
        if not np.isfinite(self.voxels).all():
            raise ConfigError(f"volume '{self.id}' contains non-finite voxels")
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise ConfigError(f"volume '{self.id}' has non-positive spacing {self.spacing_mm}")
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)


@dataclass(frozen=True)
class PartialLabelSet:
    """Per-class binary masks plus the annotated-class flag vector.

    Masks of unannotated classes are all-zero placeholders and are never
    trained on.
    """

    masks: np.ndarray
    annotated: np.ndarray
    volume_id: str
    dataset_id: str = ""

    def __post_init__(self):
        m = self.masks
        if m.ndim != 4:
            raise ConfigError(f"labels '{self.volume_id}': masks must be K x D x W x H, got {m.shape}")
        if m.dtype != np.uint8:
            object.__setattr__(self, "masks", m.astype(np.uint8))
        if not np.isin(self.masks, (0, 1)).all():
            raise NonBinaryPayloadError(f"labels '{self.volume_id}': mask values outside {{0,1}}")
        ann = np.asarray(self.annotated, dtype=bool)
        object.__setattr__(self, "annotated", ann)
        if ann.shape != (m.shape[0],):
            raise ConfigError(
                f"labels '{self.volume_id}': annotated vector length {ann.shape} != K={m.shape[0]}"
            )
        bad = [k for k in range(m.shape[0]) if not ann[k] and self.masks[k].any()]
        if bad:
            raise ConfigError(
                f"labels '{self.volume_id}': unannotated classes {bad} have nonzero masks"
            )

    @property
    def num_classes(self) -> int:
        return self.masks.shape[0]


@dataclass(frozen=True)
class VocabEntry:
    name: str
    kind: str  # "organ" or "tumor"
    host_organ_index: int | None = None


@dataclass(frozen=True)
class ClassVocabulary:
    """Ordered class list; owns K and the index order of every per-class array."""

    entries: tuple[VocabEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ConfigError("vocabulary names must be unique")
        for e in self.entries:
            if e.kind not in ("organ", "tumor"):
                raise ConfigError(f"class '{e.name}': kind must be organ or tumor, got {e.kind!r}")
            if e.kind == "tumor":
                h = e.host_organ_index
                if h is None or not (0 <= h < len(self.entries)) or self.entries[h].kind != "organ":
                    raise ConfigError(f"tumor class '{e.name}' must reference a valid organ index")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def organ_indices(self) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.kind == "organ"]

    def tumor_indices(self) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.kind == "tumor"]

    def to_dict(self) -> list[dict]:
        return [
            {"name": e.name, "kind": e.kind, "host_organ_index": e.host_organ_index}
            for e in self.entries
        ]

    @classmethod
    def from_dict(cls, items: Sequence[dict]) -> "ClassVocabulary":
        return cls(tuple(VocabEntry(d["name"], d["kind"], d.get("host_organ_index")) for d in items))


@dataclass(frozen=True)
class DatasetEntry:
    dataset_id: str
    volume_ids: tuple[str, ...]
    annotated_classes: np.ndarray  # bool, length K

    def __post_init__(self):
        object.__setattr__(self, "volume_ids", tuple(self.volume_ids))
        object.__setattr__(self, "annotated_classes", np.asarray(self.annotated_classes, dtype=bool))


@dataclass(frozen=True)
class DatasetManifest:
    datasets: tuple[DatasetEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "datasets", tuple(self.datasets))

    def all_volume_ids(self) -> list[str]:
        return [vid for d in self.datasets for vid in d.volume_ids]


@dataclass(frozen=True)
class ModelConfig:
    L: int = 6
    C_tok: int = 16
    d_text: int = 512
    encoder_widths: tuple[int, ...] = ()
    router_hidden: int = 64
    head_channels: tuple[int, int, int] = (8, 8, 1)
    K_active: int | None = None
    topk_inference_only: bool = False

    def __post_init__(self):
        if self.L < 1:
            raise ConfigError(f"expert count L must be >= 1, got {self.L}")
        if not self.encoder_widths:
            object.__setattr__(
                self, "encoder_widths", tuple(min(16 << i, 320) for i in range(self.L))
            )
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        if len(self.encoder_widths) != self.L:
            raise ConfigError(
                f"encoder_widths needs {self.L} entries (one per scale), got {len(self.encoder_widths)}"
            )
        if tuple(self.head_channels) != (8, 8, 1):
            raise ConfigError(f"head_channels is fixed at (8, 8, 1), got {self.head_channels}")
        if self.K_active is None:
            object.__setattr__(self, "K_active", self.L)
        if not 1 <= self.K_active <= self.L:
            raise ConfigError(f"K_active must be in [1, {self.L}], got {self.K_active}")
        if self.C_tok < 1 or self.d_text < 1 or self.router_hidden < 1:
            raise ConfigError("C_tok, d_text and router_hidden must be positive")

    @property
    def flat_theta_len(self) -> int:
        # (8 x C_tok + 8) + (8 x 8 + 8) + (1 x 8 + 1)
        return 8 * self.C_tok + 89

    def to_dict(self) -> dict:
        return {
            "L": self.L,
            "C_tok": self.C_tok,
            "d_text": self.d_text,
            "encoder_widths": list(self.encoder_widths),
            "router_hidden": self.router_hidden,
            "head_channels": list(self.head_channels),
            "K_active": self.K_active,
            "topk_inference_only": self.topk_inference_only,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("encoder_widths", "head_channels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    epochs: int = 50
    warmup_fraction: float = 0.1
    patch: tuple[int, int, int] = (32, 32, 32)
    seed: int = 0
    batch_size: int = 1
    checkpoint_every: int = 1  # epochs between periodic checkpoints

    def __post_init__(self):
        object.__setattr__(self, "patch", tuple(int(p) for p in self.patch))
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigError(f"warmup_fraction must be in [0, 1), got {self.warmup_fraction}")
        if any(p < 8 for p in self.patch):
            raise ConfigError(f"patch dims must be >= 8, got {self.patch}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "beta1": self.beta1,
            "epochs": self.epochs,
            "warmup_fraction": self.warmup_fraction,
            "patch": list(self.patch),
            "seed": self.seed,
            "batch_size": self.batch_size,
            "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "patch" in d:
            d["patch"] = tuple(d["patch"])
        return cls(**d)


# ---------------------------------------------------------------------------
# binary volume format
# ---------------------------------------------------------------------------


def save_volume(v: Volume, path: str | Path) -> None:
    """Write the binary voxel file plus its JSON sidecar."""
    path = Path(path)
    d, w, h = v.voxels.shape
    with open(path, "wb") as f:
        f.write(VOLUME_MAGIC)
        f.write(struct.pack("<III", d, w, h))
        f.write(np.ascontiguousarray(v.voxels, dtype="<f4").tobytes())
    sidecar_path(path).write_text(
        json.dumps({"spacing_mm": list(v.spacing_mm), "id": v.id}, indent=1)
    )


def load_volume(path: str | Path) -> Volume:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(VOLUME_MAGIC) + 12:
        raise TruncatedPayloadError(f"{path}: shorter than the fixed header")
    if raw[: len(VOLUME_MAGIC)] != VOLUME_MAGIC:
        raise BadMagicError(f"{path}: expected magic {VOLUME_MAGIC!r}")
    d, w, h = struct.unpack_from("<III", raw, len(VOLUME_MAGIC))
    if min(d, w, h) < 1:
        raise DimensionMismatchError(f"{path}: header dims ({d},{w},{h}) must all be >= 1")
    payload = raw[len(VOLUME_MAGIC) + 12 :]
    expected = d * w * h * 4
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{path}: payload {len(payload)} B < expected {expected} B")
    if len(payload) > expected:
        raise DimensionMismatchError(f"{path}: payload {len(payload)} B > header dims ({d},{w},{h})")
    voxels = np.frombuffer(payload, dtype="<f4").reshape(d, w, h).copy()
    meta = _read_sidecar(path)
    try:
        spacing = tuple(float(s) for s in meta["spacing_mm"])
        vol_id = str(meta["id"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SidecarError(f"{sidecar_path(path)}: missing or malformed field ({exc})") from exc
    if not np.isfinite(voxels).all():
        raise DimensionMismatchError(f"{path}: non-finite voxel values")
    return Volume(voxels=voxels, spacing_mm=spacing, id=vol_id)


# ---------------------------------------------------------------------------
# binary label format
# ---------------------------------------------------------------------------


def save_labels(l: PartialLabelSet, path: str | Path) -> None:
    path = Path(path)
    k, d, w, h = l.masks.shape
    with open(path, "wb") as f:
        f.write(LABEL_MAGIC)
        f.write(struct.pack("<IIII", d, w, h, k))
        f.write(np.ascontiguousarray(l.masks, dtype=np.uint8).tobytes())
    sidecar_path(path).write_text(
        json.dumps(
            {
                "annotated": [bool(a) for a in l.annotated],
                "volume_id": l.volume_id,
                "dataset_id": l.dataset_id,
            },
            indent=1,
        )
    )


def load_labels(path: str | Path, expected_k: int | None = None) -> PartialLabelSet:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(LABEL_MAGIC) + 16:
        raise TruncatedPayloadError(f"{path}: shorter than the fixed header")
    if raw[: len(LABEL_MAGIC)] != LABEL_MAGIC:
        raise BadMagicError(f"{path}: expected magic {LABEL_MAGIC!r}")
    d, w, h, k = struct.unpack_from("<IIII", raw, len(LABEL_MAGIC))
    if min(d, w, h, k) < 1:
        raise DimensionMismatchError(f"{path}: header dims ({d},{w},{h},K={k}) must all be >= 1")
    if expected_k is not None and k != expected_k:
        raise ClassCountError(f"{path}: file has K={k}, vocabulary has K={expected_k}")
    payload = raw[len(LABEL_MAGIC) + 16 :]
    expected = k * d * w * h
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{path}: payload {len(payload)} B < expected {expected} B")
    if len(payload) > expected:
        raise DimensionMismatchError(f"{path}: payload {len(payload)} B > header dims")
    masks = np.frombuffer(payload, dtype=np.uint8).reshape(k, d, w, h).copy()
    if not np.isin(masks, (0, 1)).all():
        raise NonBinaryPayloadError(f"{path}: mask payload contains values outside {{0,1}}")
    meta = _read_sidecar(path)
    try:
        annotated = np.asarray(meta["annotated"], dtype=bool)
        volume_id = str(meta["volume_id"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SidecarError(f"{sidecar_path(path)}: missing or malformed field ({exc})") from exc
    if annotated.shape != (k,):
        raise ClassCountError(f"{path}: annotated vector length {annotated.size} != K={k}")
    for cls in range(k):
        if not annotated[cls] and masks[cls].any():
            raise NonBinaryPayloadError(
                f"{path}: class {cls} is unannotated but its mask is nonzero"
            )
    return PartialLabelSet(
        masks=masks,
        annotated=annotated,
        volume_id=volume_id,
        dataset_id=str(meta.get("dataset_id", "")),
    )


def _read_sidecar(path: Path) -> dict:
    sc = sidecar_path(path)
    if not sc.exists():
        raise SidecarError(f"{sc}: sidecar file missing")
    try:
        return json.loads(sc.read_text())
    except json.JSONDecodeError as exc:
        raise SidecarError(f"{sc}: invalid JSON ({exc})") from exc


# ---------------------------------------------------------------------------
# manifest validation
# ---------------------------------------------------------------------------


def validate_manifest(
    manifest: DatasetManifest, labels: dict[str, PartialLabelSet]
) -> list[str]:
    """Return all manifest invariant violations; an empty list means valid."""
    violations: list[str] = []
    seen: dict[str, str] = {}
    for ds in manifest.datasets:
        for vid in ds.volume_ids:
            if vid in seen:
                violations.append(
                    f"duplicate-membership: volume '{vid}' in datasets "
                    f"'{seen[vid]}' and '{ds.dataset_id}'"
                )
            else:
                seen[vid] = ds.dataset_id
    for ds in manifest.datasets:
        for vid in ds.volume_ids:
            lab = labels.get(vid)
            if lab is None:
                violations.append(f"missing-labels: volume '{vid}' of dataset '{ds.dataset_id}'")
                continue
            if lab.num_classes != ds.annotated_classes.size:
                violations.append(
                    f"class-count: volume '{vid}' has K={lab.num_classes}, "
                    f"dataset '{ds.dataset_id}' declares K={ds.annotated_classes.size}"
                )
                continue
            if not np.array_equal(lab.annotated, ds.annotated_classes):
                violations.append(
                    f"annotated-mismatch: volume '{vid}' flags {lab.annotated.tolist()} "
                    f"!= dataset '{ds.dataset_id}' plan {ds.annotated_classes.tolist()}"
                )
    return violations
