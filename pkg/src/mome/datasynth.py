"""Procedural synthetic multi-dataset generator and CT-style preprocessing.

Each phantom is background noise plus one jittered axis-aligned ellipsoid
per organ class and one sphere per tumor class placed fully inside its
host organ. Ground-truth masks come exactly from the analytic shapes;
organ masks include contained tumor voxels.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
from torch.nn import functional as F

from .core import (
    ClassVocabulary,
    DatasetEntry,
    DatasetManifest,
    PartialLabelSet,
    VocabEntry,
    Volume,
)
from .errors import ConfigError

DEFAULT_WINDOW = (-175.0, 250.0)
DEFAULT_SPACING = 1.5


@dataclass(frozen=True)
class OrganSpec:
    name: str
    center: tuple[float, float, float]  # fractions of the grid
    radii: tuple[float, float, float]  # fractions of the grid
    intensity_mean: float
    intensity_sd: float


@dataclass(frozen=True)
class TumorSpec:
    name: str
    host_organ: int  # index into organ_specs
    radius_range: tuple[float, float]  # fractions of the grid
    intensity_offset: float
    presence_prob: float = 0.7


@dataclass(frozen=True)
class PhantomSpec:
    grid: tuple[int, int, int] = (32, 32, 32)
    organ_specs: tuple[OrganSpec, ...] = ()
    tumor_specs: tuple[TumorSpec, ...] = ()
    center_jitter: float = 0.03
    radius_jitter: float = 0.10
    noise_sd: float = 12.0
    background_mean: float = -110.0
    spacing_mm: tuple[float, float, float] = (DEFAULT_SPACING,) * 3

    def __post_init__(self):
        if any(g < 4 for g in self.grid):
            raise ConfigError(f"grid dims must be >= 4, got {self.grid}")
        for o in self.organ_specs:
            for c, r in zip(o.center, o.radii):
                reach = self.center_jitter + r * (1.0 + self.radius_jitter)
                if c - reach <= 0.0 or c + reach >= 1.0:
                    raise ConfigError(f"organ '{o.name}' can leave the grid after maximal jitter")
        for t in self.tumor_specs:
            if not 0 <= t.host_organ < len(self.organ_specs):
                raise ConfigError(f"tumor '{t.name}' references missing organ {t.host_organ}")
            host = self.organ_specs[t.host_organ]
            if t.radius_range[1] >= min(host.radii) * (1.0 - self.radius_jitter):
                raise ConfigError(
                    f"tumor '{t.name}' max radius {t.radius_range[1]} does not fit inside "
                    f"organ '{host.name}' at minimal jittered radius"
                )
            if not 0.0 <= t.presence_prob <= 1.0:
                raise ConfigError(f"tumor '{t.name}' presence_prob outside [0, 1]")

    def vocabulary(self) -> ClassVocabulary:
        entries = [VocabEntry(o.name, "organ") for o in self.organ_specs]
        entries += [VocabEntry(t.name, "tumor", t.host_organ) for t in self.tumor_specs]
        return ClassVocabulary(tuple(entries))

    @property
    def num_classes(self) -> int:
        return len(self.organ_specs) + len(self.tumor_specs)


def default_phantom_spec(grid: tuple[int, int, int] = (32, 32, 32)) -> PhantomSpec:
    """Four organs plus two tumors, sized for a 32-cube desk corpus."""
    organs = (
        OrganSpec("liver", (0.32, 0.32, 0.34), (0.16, 0.15, 0.14), 90.0, 8.0),
        OrganSpec("kidney", (0.32, 0.68, 0.66), (0.13, 0.12, 0.12), 150.0, 8.0),
        OrganSpec("spleen", (0.68, 0.32, 0.66), (0.12, 0.13, 0.12), 35.0, 8.0),
        OrganSpec("pancreas", (0.68, 0.68, 0.34), (0.14, 0.11, 0.11), 205.0, 8.0),
    )
    tumors = (
        TumorSpec("liver tumor", 0, (0.055, 0.085), -70.0, 0.7),
        TumorSpec("kidney tumor", 1, (0.050, 0.075), -80.0, 0.7),
    )
    return PhantomSpec(grid=grid, organ_specs=organs, tumor_specs=tumors)


def _ellipsoid_mask(grid: tuple[int, int, int], center: np.ndarray, radii: np.ndarray) -> np.ndarray:
    axes = [np.arange(g, dtype=np.float64) + 0.5 for g in grid]
    zz, yy, xx = np.meshgrid(*axes, indexing="ij")
    q = (
        ((zz - center[0]) / radii[0]) ** 2
        + ((yy - center[1]) / radii[1]) ** 2
        + ((xx - center[2]) / radii[2]) ** 2
    )
    return q <= 1.0


def generate_volume(
    spec: PhantomSpec, seed: int, volume_id: str | None = None
) -> tuple[Volume, PartialLabelSet]:
    """One phantom with fully annotated ground truth."""
    rng = np.random.default_rng(seed)
    grid = np.asarray(spec.grid, dtype=np.float64)
    vox = spec.background_mean + spec.noise_sd * rng.standard_normal(spec.grid)
    K = spec.num_classes
    masks = np.zeros((K,) + spec.grid, dtype=np.uint8)

    organ_geom: list[tuple[np.ndarray, np.ndarray]] = []
    for k, o in enumerate(spec.organ_specs):
        center = (np.asarray(o.center) + spec.center_jitter * rng.uniform(-1, 1, 3)) * grid
        radii = np.asarray(o.radii) * (1.0 + spec.radius_jitter * rng.uniform(-1, 1, 3)) * grid
        mask = _ellipsoid_mask(spec.grid, center, radii)
        vox[mask] = o.intensity_mean + o.intensity_sd * rng.standard_normal(int(mask.sum()))
        masks[k][mask] = 1
        organ_geom.append((center, radii))

    for j, t in enumerate(spec.tumor_specs):
        k = len(spec.organ_specs) + j
        present = rng.random() < t.presence_prob
        radius = rng.uniform(*t.radius_range) * float(grid.min())
        # center drawn uniformly inside the host ellipsoid shrunk by the
        # tumor radius, which guarantees containment
        center_h, radii_h = organ_geom[t.host_organ]
        room = radii_h - radius
        u = rng.standard_normal(3)
        u /= np.linalg.norm(u)
        scale = rng.random() ** (1.0 / 3.0)
        center = center_h + u * scale * np.maximum(room, 0.0)
        if not present:
            continue
        if (room <= 0).any():
            raise ConfigError(f"tumor '{t.name}' cannot fit inside its jittered host")
        mask = _ellipsoid_mask(spec.grid, center, np.full(3, radius))
        host = spec.organ_specs[t.host_organ]
        vox[mask] = (
            host.intensity_mean
            + t.intensity_offset
            + host.intensity_sd * rng.standard_normal(int(mask.sum()))
        )
        masks[k][mask] = 1

    vid = volume_id or f"vol_{seed:08x}"
    volume = Volume(voxels=vox.astype(np.float32), spacing_mm=spec.spacing_mm, id=vid)
    labels = PartialLabelSet(masks=masks, annotated=np.ones(K, dtype=bool), volume_id=vid)
    return volume, labels


def volume_seed(master_seed: int, index: int) -> int:
    payload = f"{master_seed}:{index}".encode("utf-8")
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def make_corpus(
    spec: PhantomSpec,
    n_volumes: int,
    n_datasets: int,
    annotation_plan: list[set[int]],
    seed: int,
    id_prefix: str = "vol",
    dataset_prefix: str = "ds",
) -> tuple[DatasetManifest, dict[str, Volume], dict[str, PartialLabelSet], dict[str, PartialLabelSet]]:
    """Generate a partially labeled multi-dataset corpus.

    Volumes go round-robin to datasets; each dataset zeroes the masks of
    classes it does not annotate. Returns the manifest, the volumes, the
    partial labels seen in training, and the full ground truth kept for
    evaluation.
    """
    K = spec.num_classes
    if len(annotation_plan) != n_datasets:
        raise ConfigError(f"annotation plan has {len(annotation_plan)} entries for {n_datasets} datasets")
    covered = set().union(*annotation_plan) if annotation_plan else set()
    if covered != set(range(K)):
        raise ConfigError(f"annotation plan covers classes {sorted(covered)}, need all of 0..{K - 1}")

    volumes: dict[str, Volume] = {}
    partial: dict[str, PartialLabelSet] = {}
    full: dict[str, PartialLabelSet] = {}
    members: list[list[str]] = [[] for _ in range(n_datasets)]
    for i in range(n_volumes):
        ds = i % n_datasets
        ds_id = f"{dataset_prefix}{ds}"
        vid = f"{id_prefix}_{i:03d}"
        volume, gt = generate_volume(spec, volume_seed(seed, i), volume_id=vid)
        annotated = np.zeros(K, dtype=bool)
        annotated[sorted(annotation_plan[ds])] = True
        masks = gt.masks.copy()
        masks[~annotated] = 0
        volumes[vid] = volume
        full[vid] = gt
        partial[vid] = PartialLabelSet(
            masks=masks, annotated=annotated, volume_id=vid, dataset_id=ds_id
        )
        members[ds].append(vid)

    datasets = []
    for ds in range(n_datasets):
        annotated = np.zeros(K, dtype=bool)
        annotated[sorted(annotation_plan[ds])] = True
        datasets.append(
            DatasetEntry(
                dataset_id=f"{dataset_prefix}{ds}",
                volume_ids=tuple(members[ds]),
                annotated_classes=annotated,
            )
        )
    return DatasetManifest(datasets=tuple(datasets)), volumes, partial, full


def preprocess(
    v: Volume,
    target_spacing: float = DEFAULT_SPACING,
    window: tuple[float, float] = DEFAULT_WINDOW,
) -> Volume:
    """Resample to isotropic spacing, clip to the intensity window, scale to [0, 1]."""
    wmin, wmax = window
    if wmin >= wmax:
        raise ConfigError(f"degenerate intensity window {window}")
    if target_spacing <= 0:
        raise ConfigError(f"target spacing must be positive, got {target_spacing}")
    vox = v.voxels
    if any(abs(s - target_spacing) > 1e-9 for s in v.spacing_mm):
        new_dims = tuple(
            max(1, round(d * s / target_spacing)) for d, s in zip(vox.shape, v.spacing_mm)
        )
        t = torch.from_numpy(vox).reshape(1, 1, *vox.shape)
        vox = F.interpolate(t, size=new_dims, mode="trilinear", align_corners=False)[0, 0].numpy()
    scaled = (np.clip(vox, wmin, wmax) - wmin) / (wmax - wmin)
    return Volume(
        voxels=scaled.astype(np.float32), spacing_mm=(target_spacing,) * 3, id=v.id
    )
