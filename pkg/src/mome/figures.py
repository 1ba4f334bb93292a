"""Static figure export for training curves and the top-K ablation."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def loss_curve(rows: list[dict], path: str | Path) -> None:
    """rows: parsed metrics records with step/total/bce/dice fields."""
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = [r["step"] for r in rows]
    for key in ("total", "bce", "dice"):
        ax.plot(steps, [r[key] for r in rows], label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def topk_bar_chart(table: dict[int, float], path: str | Path) -> None:
    """Mean Dice per router top-K."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ks = sorted(table)
    ax.bar([str(k) for k in ks], [table[k] for k in ks], color="#4878a8")
    ax.set_xlabel("top-K experts")
    ax.set_ylabel("mean Dice")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
