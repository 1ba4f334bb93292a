"""Single entry-point command line exposing the full pipeline:
gen-data, train, eval, ablate-topk, infer and report.

Exit codes: 0 success, 1 usage, 2 config, 3 I/O, 4 numeric failure.
Every failure prints one machine-parsable line to stderr; every output
artifact embeds the effective config hash.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import evaluation, training
from .core import (
    ClassVocabulary,
    DatasetEntry,
    DatasetManifest,
    PartialLabelSet,
    Volume,
    load_labels,
    load_volume,
    save_labels,
    save_volume,
    validate_manifest,
)
from .datasynth import generate_volume, make_corpus, preprocess, volume_seed
from .errors import ConfigError, MomeError, NumericError, SidecarError, UsageError
from .evaluation import EvalReport, ablate_topk, evaluate, export_slices, sliding_window_infer
from .runconfig import (
    config_hash,
    load_config,
    model_config,
    phantom_spec,
    train_config,
)
from .textbranch import FileEmbeddingProvider, StubEmbeddingProvider, embedding_matrix

MANIFEST_NAME = "manifest.json"
CHECKPOINT_NAME = "checkpoint.mckpt"
METRICS_NAME = "metrics.csv"


# ---------------------------------------------------------------------------
# corpus I/O
# ---------------------------------------------------------------------------


def _write_volume_pair(out_dir: Path, vol: Volume, labels: PartialLabelSet) -> None:
    save_volume(vol, out_dir / f"{vol.id}.mvol")
    save_labels(labels, out_dir / f"{vol.id}.mlbl")


def write_corpus(cfg: dict, out_dir: Path, seed: int, workers: int) -> dict:
    spec = phantom_spec(cfg)
    vocab = spec.vocabulary()
    data = cfg["data"]
    plan = [set(p) for p in data["annotation_plan"]]
    manifest, volumes, partial, _ = make_corpus(
        spec, data["n_train"], data["n_datasets"], plan, seed
    )
    eval_seed = volume_seed(seed, -1)
    _, eval_volumes, _, eval_full = make_corpus(
        spec,
        data["n_eval"],
        1,
        [set(range(spec.num_classes))],
        eval_seed,
        id_prefix="eval",
        dataset_prefix="evalset",
    )
    train_dir = out_dir / "train"
    eval_dir = out_dir / "eval"
    train_dir.mkdir(parents=True, exist_ok=True)
    eval_dir.mkdir(parents=True, exist_ok=True)

    jobs = [(train_dir, volumes[vid], partial[vid]) for vid in sorted(volumes)]
    jobs += [(eval_dir, eval_volumes[vid], eval_full[vid]) for vid in sorted(eval_volumes)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda j: _write_volume_pair(*j), jobs))
    else:
        for job in jobs:
            _write_volume_pair(*job)

    doc = {
        "config_hash": config_hash(cfg),
        "seed": seed,
        "vocabulary": vocab.to_dict(),
        "datasets": [
            {
                "dataset_id": d.dataset_id,
                "volume_ids": list(d.volume_ids),
                "annotated_classes": [bool(a) for a in d.annotated_classes],
            }
            for d in manifest.datasets
        ],
        "eval_volume_ids": sorted(eval_volumes),
        "config": cfg,
    }
    (out_dir / MANIFEST_NAME).write_text(json.dumps(doc, indent=1))
    return doc


def read_manifest(corpus_dir: Path) -> dict:
    path = corpus_dir / MANIFEST_NAME
    if not path.exists():
        raise SidecarError(f"{path}: manifest missing")
    return json.loads(path.read_text())


def load_split(
    corpus_dir: Path, doc: dict, split: str, vocab: ClassVocabulary
) -> tuple[dict[str, Volume], dict[str, PartialLabelSet]]:
    if split == "train":
        ids = [vid for d in doc["datasets"] for vid in d["volume_ids"]]
    else:
        ids = doc["eval_volume_ids"]
    volumes, labels = {}, {}
    for vid in ids:
        volumes[vid] = load_volume(corpus_dir / split / f"{vid}.mvol")
        labels[vid] = load_labels(corpus_dir / split / f"{vid}.mlbl", expected_k=len(vocab))
    return volumes, labels


def _manifest_object(doc: dict) -> DatasetManifest:
    return DatasetManifest(
        datasets=tuple(
            DatasetEntry(
                dataset_id=d["dataset_id"],
                volume_ids=tuple(d["volume_ids"]),
                annotated_classes=np.asarray(d["annotated_classes"], dtype=bool),
            )
            for d in doc["datasets"]
        )
    )


def _preprocess_all(cfg: dict, volumes: dict[str, Volume]) -> dict[str, Volume]:
    pp = cfg["preprocess"]
    return {
        vid: preprocess(v, pp["target_spacing"], tuple(pp["window"]))
        for vid, v in volumes.items()
    }


def _embedding_provider(cfg: dict):
    emb = cfg["embedding"]
    if emb["provider"] == "stub":
        return StubEmbeddingProvider()
    if emb["provider"] == "file":
        if not emb["file"]:
            raise ConfigError("embedding.provider=file needs embedding.file")
        return FileEmbeddingProvider(emb["file"])
    raise ConfigError(f"unknown embedding provider {emb['provider']!r}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, overrides) -> int:
    cfg = load_config(args.config, overrides)
    out_dir = Path(args.out)
    workers = args.workers or int(os.environ.get("MOME_WORKERS", "1"))
    doc = write_corpus(cfg, out_dir, args.seed, workers)
    n_train = sum(len(d["volume_ids"]) for d in doc["datasets"])
    print(
        f"wrote corpus: {n_train} train + {len(doc['eval_volume_ids'])} eval volumes "
        f"to {out_dir} (config {doc['config_hash']})"
    )
    return 0


def _metrics_path(out_dir: Path) -> Path:
    return out_dir / METRICS_NAME


def cmd_train(args, overrides) -> int:
    cfg = load_config(args.config, overrides)
    chash = config_hash(cfg)  # hash covers file+overrides; the seed is stamped separately
    cfg["train"]["seed"] = args.seed
    corpus_dir = Path(args.corpus)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = read_manifest(corpus_dir)
    vocab = ClassVocabulary.from_dict(doc["vocabulary"])
    volumes, labels = load_split(corpus_dir, doc, "train", vocab)
    problems = validate_manifest(_manifest_object(doc), labels)
    if problems:
        raise ConfigError("; ".join(problems))
    volumes = _preprocess_all(cfg, volumes)

    ckpt_path = out_dir / CHECKPOINT_NAME
    if args.resume:
        if not ckpt_path.exists():
            raise SidecarError(f"{ckpt_path}: cannot resume, checkpoint missing")
        state = training.load_checkpoint(ckpt_path)
        state.train_cfg = train_config(cfg)
    else:
        mcfg = model_config(cfg)
        tcfg = train_config(cfg)
        embeddings = embedding_matrix(vocab, mcfg.d_text, _embedding_provider(cfg))
        state = training.init_state(mcfg, tcfg, vocab, embeddings)

    rows: list[str] = []
    state = training.train(
        state, volumes, labels, sorted(volumes), checkpoint_path=ckpt_path, log_rows=rows
    )
    training.save_checkpoint(state, ckpt_path)

    metrics = _metrics_path(out_dir)
    if args.resume and metrics.exists():
        with open(metrics, "a") as f:
            f.writelines(r + "\n" for r in rows)
    else:
        with open(metrics, "w") as f:
            f.write(f"# config_hash={chash} seed={args.seed}\n")
            f.write(training.METRICS_HEADER + "\n")
            f.writelines(r + "\n" for r in rows)
    print(
        f"trained to epoch {state.epoch} ({state.global_step} steps); "
        f"checkpoint at {ckpt_path} (config {chash})"
    )
    return 0


def _load_state(path: str | Path) -> training.TrainState:
    p = Path(path)
    if not p.exists():
        raise SidecarError(f"{p}: checkpoint missing")
    return training.load_checkpoint(p)


def _write_eval_report(
    report: EvalReport, vocab: ClassVocabulary, out_dir: Path
) -> tuple[Path, Path]:
    csv_path = out_dir / "eval_report.csv"
    md_path = out_dir / "eval_report.md"
    lines = [
        f"# config_hash={report.config_hash} seed={report.seed}",
        "class,kind,dice,sensitivity,specificity,harmonic",
    ]
    md = [
        f"evaluation (config `{report.config_hash}`, seed {report.seed})",
        "",
        "| class | kind | dice | sen | spec | harm |",
        "|---|---|---|---|---|---|",
    ]
    for k, entry in enumerate(vocab.entries):
        det = report.detection.get(entry.name)
        if det is not None and np.isfinite(det.harmonic):
            tail = f"{det.sensitivity:.6g},{det.specificity:.6g},{det.harmonic:.6g}"
            md_tail = f"{det.sensitivity:.4f} | {det.specificity:.4f} | {det.harmonic:.4f}"
        else:
            tail, md_tail = ",,", "- | - | -"
        lines.append(f"{entry.name},{entry.kind},{report.per_class_dice[k]:.6g},{tail}")
        md.append(
            f"| {entry.name} | {entry.kind} | {report.per_class_dice[k]:.4f} | {md_tail} |"
        )
    for name, value in (
        ("mean", report.mean_dice),
        ("mean_organ", report.mean_organ_dice),
        ("mean_tumor", report.mean_tumor_dice),
    ):
        lines.append(f"{name},summary,{value:.6g},,,")
        md.append(f"| {name} | summary | {value:.4f} | - | - | - |")
    csv_path.write_text("\n".join(lines) + "\n")
    md_path.write_text("\n".join(md) + "\n")
    return csv_path, md_path


def cmd_eval(args, overrides) -> int:
    cfg = load_config(args.config, overrides)
    chash = config_hash(cfg)
    state = _load_state(args.checkpoint)
    corpus_dir = Path(args.corpus)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = read_manifest(corpus_dir)
    vocab = state.vocab
    volumes, labels = load_split(corpus_dir, doc, "eval", vocab)
    volumes = _preprocess_all(cfg, volumes)
    ev = cfg["eval"]
    workers = args.workers or int(os.environ.get("MOME_WORKERS", "1"))
    report = evaluate(
        state.model,
        state.embeddings,
        volumes,
        labels,
        vocab,
        patch=state.train_cfg.patch,
        overlap=ev["overlap"],
        threshold=ev["threshold"],
        min_voxels=ev["min_voxels"],
        config_hash=chash,
        seed=state.train_cfg.seed,
        workers=workers,
    )
    csv_path, _ = _write_eval_report(report, vocab, out_dir)
    print(
        f"mean dice {report.mean_dice:.4f} (organ {report.mean_organ_dice:.4f}, "
        f"tumor {report.mean_tumor_dice:.4f}); report at {csv_path}"
    )
    return 0


def cmd_ablate_topk(args, overrides) -> int:
    cfg = load_config(args.config, overrides)
    chash = config_hash(cfg)
    states = [_load_state(p) for p in args.checkpoint]
    corpus_dir = Path(args.corpus)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = read_manifest(corpus_dir)
    vocab = states[0].vocab
    volumes, labels = load_split(corpus_dir, doc, "eval", vocab)
    volumes = _preprocess_all(cfg, volumes)
    ev = cfg["eval"]
    L = states[0].model_cfg.L
    k_values = args.k_values or list(range(1, L + 1))
    models = [(s.model, s.embeddings) for s in states]
    table = ablate_topk(
        models, volumes, labels, vocab,
        k_values, patch=states[0].train_cfg.patch, overlap=ev["overlap"],
        threshold=ev["threshold"],
    )
    if L in table:
        unablated = ablate_topk(
            models, volumes, labels, vocab, [L],
            patch=states[0].train_cfg.patch, overlap=ev["overlap"], threshold=ev["threshold"],
        )[L]
        if not np.array_equal(unablated, table[L]):
            raise NumericError("top-K at K=L does not reproduce the unablated evaluation")

    names = [e.name for e in vocab.entries]
    lines = [f"# config_hash={chash} seed={states[0].train_cfg.seed}"]
    lines.append("K," + ",".join(names) + ",avg")
    for k in sorted(table):
        row = table[k]
        lines.append(f"{k}," + ",".join(f"{x:.6g}" for x in row))
    csv_path = out_dir / "ablation.csv"
    csv_path.write_text("\n".join(lines) + "\n")
    from .figures import topk_bar_chart

    topk_bar_chart({k: float(row[-1]) for k, row in table.items()}, out_dir / "ablation.png")
    print(f"ablation table at {csv_path} for K in {sorted(table)}")
    return 0


def cmd_infer(args, overrides) -> int:
    cfg = load_config(args.config, overrides)
    chash = config_hash(cfg)
    state = _load_state(args.checkpoint)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    vol = load_volume(args.volume)
    pp = cfg["preprocess"]
    vol_p = preprocess(vol, pp["target_spacing"], tuple(pp["window"]))
    ev = cfg["eval"]
    pred = sliding_window_infer(
        vol_p, state.model, state.embeddings, state.train_cfg.patch, ev["overlap"]
    )
    names = [e.name for e in state.vocab.entries]
    for k, name in enumerate(names):
        safe = name.replace(" ", "_")
        save_volume(
            Volume(
                voxels=pred.probs[k].astype(np.float32),
                spacing_mm=vol_p.spacing_mm,
                id=f"{vol.id}/pred/{safe}",
            ),
            out_dir / f"pred_{k:02d}_{safe}.mvol",
        )
    (out_dir / "prediction.json").write_text(
        json.dumps({"config_hash": chash, "volume_id": vol.id, "classes": names}, indent=1)
    )
    if args.slices:
        z_indices = [int(z) for z in args.slices.split(",")]
        gt = None
        label_path = Path(str(args.volume).replace(".mvol", ".mlbl"))
        if label_path.exists() and label_path != Path(args.volume):
            gt = load_labels(label_path)
        export_slices(vol_p, pred, gt, z_indices, out_dir, threshold=ev["threshold"])
    print(f"prediction for {vol.id} written to {out_dir} (config {chash})")
    return 0


def cmd_report(args, overrides) -> int:
    run_dir = Path(args.run)
    out_dir = Path(args.out) if args.out else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    parts = ["# run report", ""]
    metrics = run_dir / METRICS_NAME
    if metrics.exists():
        rows = []
        for line in metrics.read_text().splitlines():
            if line.startswith("#") or line.startswith("step,") or not line.strip():
                continue
            step, epoch, lr, total, bce, dice_v = line.split(",")
            rows.append(
                {"step": int(step), "total": float(total), "bce": float(bce), "dice": float(dice_v)}
            )
        if rows:
            from .figures import loss_curve

            loss_curve(rows, out_dir / "loss_curve.png")
            parts += [
                f"- training steps: {rows[-1]['step'] + 1}, final loss {rows[-1]['total']:.4f}",
                "- loss curve: `loss_curve.png`",
                "",
            ]
    for name in ("eval_report.md", "eval_report.csv", "ablation.csv"):
        if (run_dir / name).exists():
            parts.append(f"## {name}")
            parts.append("")
            parts.append("```" if name.endswith(".csv") else "")
            parts.append((run_dir / name).read_text().rstrip())
            parts.append("```" if name.endswith(".csv") else "")
            parts.append("")
    (out_dir / "report.md").write_text("\n".join(parts) + "\n")
    print(f"report at {out_dir / 'report.md'}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: D102 - argparse hook
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="mome", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen-data", help="generate a synthetic multi-dataset corpus")
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--config")
    gen.add_argument("--workers", type=int, default=0)
    gen.set_defaults(func=cmd_gen_data)

    tr = sub.add_parser("train", help="train on a generated corpus")
    tr.add_argument("--corpus", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int, required=True)
    tr.add_argument("--config")
    tr.add_argument("--resume", action="store_true")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on the held-out volumes")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--config")
    ev.add_argument("--workers", type=int, default=0)
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate-topk", help="re-evaluate with each router top-K")
    ab.add_argument("--checkpoint", nargs="+", required=True)
    ab.add_argument("--corpus", required=True)
    ab.add_argument("--out", required=True)
    ab.add_argument("--config")
    ab.add_argument("--k-values", type=int, nargs="+", dest="k_values")
    ab.set_defaults(func=cmd_ablate_topk)

    inf = sub.add_parser("infer", help="predict one volume file")
    inf.add_argument("--checkpoint", required=True)
    inf.add_argument("--volume", required=True)
    inf.add_argument("--out", required=True)
    inf.add_argument("--config")
    inf.add_argument("--slices", help="comma-separated z indices to export as images")
    inf.set_defaults(func=cmd_infer)

    rep = sub.add_parser("report", help="assemble figures and tables from a run directory")
    rep.add_argument("--run", required=True)
    rep.add_argument("--out")
    rep.set_defaults(func=cmd_report)
    return parser


def _split_overrides(rest: list[str]) -> list[tuple[str, str]]:
    overrides = []
    i = 0
    while i < len(rest):
        key = rest[i]
        if not key.startswith("--") or i + 1 >= len(rest):
            raise UsageError(f"override arguments must come as --key value pairs, got {key!r}")
        overrides.append((key[2:], rest[i + 1]))
        i += 2
    return overrides


def main(argv: list[str] | None = None) -> int:
    try:
        parser = _build_parser()
        args, rest = parser.parse_known_args(argv)
        overrides = _split_overrides(rest)
        return args.func(args, overrides)
    except MomeError as exc:
        print(f"error: {exc.one_line()}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # pragma: no cover - safety net
        print(f"error: internal: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
