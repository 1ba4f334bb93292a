import numpy as np
import pytest

from mome.core import (
    ClassVocabulary,
    DatasetEntry,
    DatasetManifest,
    ModelConfig,
    PartialLabelSet,
    TrainConfig,
    VocabEntry,
    Volume,
    load_labels,
    load_volume,
    save_labels,
    save_volume,
    sidecar_path,
    validate_manifest,
)
from mome.errors import (
    BadMagicError,
    ClassCountError,
    ConfigError,
    DimensionMismatchError,
    NonBinaryPayloadError,
    SidecarError,
    TruncatedPayloadError,
)


def test_volume_round_trip_zeros(tmp_path):
    v = Volume(np.zeros((2, 2, 2), dtype=np.float32), (1.0, 1.0, 1.0), "zeros")
    p = tmp_path / "v.mvol"
    save_volume(v, p)
    back = load_volume(p)
    assert np.array_equal(back.voxels, v.voxels)
    assert back.voxels.dtype == np.float32
    assert back.spacing_mm == v.spacing_mm
    assert back.id == "zeros"


def test_volume_sidecar_metadata_exact(tmp_path):
    vox = np.zeros((3, 2, 4), dtype=np.float32)
    vox[0, 0, 0] = -175.0
    v = Volume(vox, (1.5, 1.5, 1.5), "windowed")
    p = tmp_path / "v.mvol"
    save_volume(v, p)
    back = load_volume(p)
    assert back.voxels[0, 0, 0] == -175.0
    assert back.spacing_mm == (1.5, 1.5, 1.5)


def test_volume_round_trip_random(tmp_path):
    rng = np.random.default_rng(7)
    for i in range(20):
        dims = tuple(rng.integers(1, 9, size=3))
        vox = rng.standard_normal(dims).astype(np.float32) * 100
        spacing = tuple(float(s) for s in rng.uniform(0.5, 3.0, size=3))
        v = Volume(vox, spacing, f"r{i}")
        p = tmp_path / f"v{i}.mvol"
        save_volume(v, p)
        back = load_volume(p)
        assert back.voxels.tobytes() == vox.tobytes()
        assert back.spacing_mm == spacing


def test_volume_bad_magic(tmp_path):
    v = Volume(np.zeros((2, 2, 2), dtype=np.float32), (1, 1, 1), "x")
    p = tmp_path / "v.mvol"
    save_volume(v, p)
    raw = bytearray(p.read_bytes())
    raw[:8] = b"BADMAGIC"
    p.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        load_volume(p)


def test_volume_truncated(tmp_path):
    v = Volume(np.zeros((2, 2, 2), dtype=np.float32), (1, 1, 1), "x")
    p = tmp_path / "v.mvol"
    save_volume(v, p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-5])
    with pytest.raises(TruncatedPayloadError):
        load_volume(p)


def test_volume_dims_mismatch(tmp_path):
    v = Volume(np.zeros((2, 2, 2), dtype=np.float32), (1, 1, 1), "x")
    p = tmp_path / "v.mvol"
    save_volume(v, p)
    p.write_bytes(p.read_bytes() + b"\x00\x00\x00\x00")
    with pytest.raises(DimensionMismatchError):
        load_volume(p)


def test_volume_missing_sidecar(tmp_path):
    v = Volume(np.zeros((2, 2, 2), dtype=np.float32), (1, 1, 1), "x")
    p = tmp_path / "v.mvol"
    save_volume(v, p)
    sidecar_path(p).unlink()
    with pytest.raises(SidecarError):
        load_volume(p)


def test_volume_rejects_nonfinite():
    vox = np.zeros((2, 2, 2), dtype=np.float32)
    vox[0, 0, 0] = np.nan
    with pytest.raises(ConfigError):
        Volume(vox, (1, 1, 1), "bad")


def _labels(k=3, dims=(2, 2, 2), annotated=None):
    annotated = np.ones(k, bool) if annotated is None else np.asarray(annotated, bool)
    masks = np.zeros((k,) + dims, dtype=np.uint8)
    return PartialLabelSet(masks=masks, annotated=annotated, volume_id="v0")


def test_labels_round_trip_empty(tmp_path):
    l = _labels(annotated=[False, False, False])
    p = tmp_path / "l.mlbl"
    save_labels(l, p)
    back = load_labels(p)
    assert np.array_equal(back.masks, l.masks)
    assert np.array_equal(back.annotated, l.annotated)
    assert back.volume_id == "v0"


def test_labels_round_trip_one_voxel(tmp_path):
    masks = np.zeros((3, 2, 2, 2), dtype=np.uint8)
    masks[0, 1, 0, 1] = 1
    l = PartialLabelSet(masks=masks, annotated=np.array([True, False, False]), volume_id="v1")
    p = tmp_path / "l.mlbl"
    save_labels(l, p)
    back = load_labels(p)
    assert np.array_equal(back.masks, masks)


def test_labels_round_trip_random(tmp_path):
    rng = np.random.default_rng(11)
    for i in range(20):
        k = int(rng.integers(1, 5))
        dims = tuple(rng.integers(1, 7, size=3))
        annotated = rng.random(k) < 0.7
        if not annotated.any():
            annotated[0] = True
        masks = (rng.random((k,) + dims) < 0.3).astype(np.uint8)
        masks[~annotated] = 0
        l = PartialLabelSet(masks=masks, annotated=annotated, volume_id=f"v{i}", dataset_id="dsX")
        p = tmp_path / f"l{i}.mlbl"
        save_labels(l, p)
        back = load_labels(p)
        assert back.masks.tobytes() == masks.tobytes()
        assert np.array_equal(back.annotated, annotated)
        assert back.dataset_id == "dsX"


def test_labels_non_binary_payload(tmp_path):
    l = _labels()
    p = tmp_path / "l.mlbl"
    save_labels(l, p)
    raw = bytearray(p.read_bytes())
    raw[-1] = 2
    p.write_bytes(bytes(raw))
    with pytest.raises(NonBinaryPayloadError):
        load_labels(p)


def test_labels_k_mismatch(tmp_path):
    l = _labels(k=3)
    p = tmp_path / "l.mlbl"
    save_labels(l, p)
    with pytest.raises(ClassCountError):
        load_labels(p, expected_k=4)


def test_labels_unannotated_nonzero_rejected_at_load(tmp_path):
    import json

    l = _labels(annotated=[True, True, True])
    p = tmp_path / "l.mlbl"
    save_labels(l, p)
    # flip one payload voxel of class 2, then mark class 2 unannotated
    raw = bytearray(p.read_bytes())
    raw[-1] = 1
    p.write_bytes(bytes(raw))
    sc = sidecar_path(p)
    meta = json.loads(sc.read_text())
    meta["annotated"] = [True, True, False]
    sc.write_text(json.dumps(meta))
    with pytest.raises(NonBinaryPayloadError):
        load_labels(p)


def test_labels_constructor_enforces_placeholder_invariant():
    masks = np.zeros((2, 2, 2, 2), dtype=np.uint8)
    masks[1, 0, 0, 0] = 1
    with pytest.raises(ConfigError):
        PartialLabelSet(masks=masks, annotated=np.array([True, False]), volume_id="bad")


def test_vocabulary_invariants():
    vocab = ClassVocabulary(
        (
            VocabEntry("liver", "organ"),
            VocabEntry("liver tumor", "tumor", 0),
        )
    )
    assert len(vocab) == 2
    assert vocab.organ_indices() == [0]
    assert vocab.tumor_indices() == [1]
    with pytest.raises(ConfigError):
        ClassVocabulary((VocabEntry("a", "organ"), VocabEntry("a", "organ")))
    with pytest.raises(ConfigError):
        ClassVocabulary((VocabEntry("a", "organ"), VocabEntry("t", "tumor", 5)))
    with pytest.raises(ConfigError):
        # a tumor may not host a tumor
        ClassVocabulary((VocabEntry("t1", "tumor", 1), VocabEntry("t2", "tumor", 0)))


def _manifest(entries):
    return DatasetManifest(
        datasets=tuple(
            DatasetEntry(ds, tuple(vids), np.asarray(ann, bool)) for ds, vids, ann in entries
        )
    )


def test_manifest_consistent():
    m = _manifest(
        [
            ("dsA", ["v0"], [True, False]),
            ("dsB", ["v1"], [False, True]),
        ]
    )
    labels = {
        "v0": PartialLabelSet(
            np.zeros((2, 2, 2, 2), np.uint8), np.array([True, False]), "v0"
        ),
        "v1": PartialLabelSet(
            np.zeros((2, 2, 2, 2), np.uint8), np.array([False, True]), "v1"
        ),
    }
    assert validate_manifest(m, labels) == []


def test_manifest_duplicate_membership():
    m = _manifest([("dsA", ["v0"], [True]), ("dsB", ["v0"], [True])])
    labels = {"v0": PartialLabelSet(np.zeros((1, 2, 2, 2), np.uint8), np.array([True]), "v0")}
    violations = validate_manifest(m, labels)
    assert any(v.startswith("duplicate-membership") for v in violations)


def test_manifest_annotated_mismatch():
    m = _manifest([("dsA", ["v0"], [True, False])])
    labels = {
        "v0": PartialLabelSet(np.zeros((2, 2, 2, 2), np.uint8), np.array([True, True]), "v0")
    }
    violations = validate_manifest(m, labels)
    assert any(v.startswith("annotated-mismatch") for v in violations)


def test_manifest_missing_labels():
    m = _manifest([("dsA", ["v0", "v1"], [True])])
    labels = {"v0": PartialLabelSet(np.zeros((1, 2, 2, 2), np.uint8), np.array([True]), "v0")}
    assert any(v.startswith("missing-labels") for v in validate_manifest(m, labels))


def test_model_config_defaults_and_bounds():
    cfg = ModelConfig()
    assert cfg.L == 6 and cfg.C_tok == 16 and cfg.d_text == 512
    assert cfg.K_active == cfg.L
    assert len(cfg.encoder_widths) == cfg.L
    assert cfg.flat_theta_len == 8 * 16 + 89
    with pytest.raises(ConfigError):
        ModelConfig(K_active=7)
    with pytest.raises(ConfigError):
        ModelConfig(K_active=0)
    with pytest.raises(ConfigError):
        ModelConfig(head_channels=(8, 8, 2))


def test_train_config_bounds():
    cfg = TrainConfig()
    assert cfg.lr == 1e-4 and cfg.epochs == 50 and cfg.patch == (32, 32, 32)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(warmup_fraction=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(patch=(4, 32, 32))


def test_config_round_trip_dicts():
    m = ModelConfig(L=4, C_tok=8, d_text=32, encoder_widths=(4, 8, 16, 32))
    assert ModelConfig.from_dict(m.to_dict()) == m
    t = TrainConfig(lr=3e-3, epochs=7, patch=(16, 16, 16), seed=5)
    assert TrainConfig.from_dict(t.to_dict()) == t
