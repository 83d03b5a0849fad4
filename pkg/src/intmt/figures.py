"""Figures rendered next to the tab-separated outputs.

Training produces a loss curve with phase boundaries marked; evaluation
produces a small BLEU summary chart.  Everything renders headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def save_loss_curve(rows, path: str, title: str = "training loss") -> str:
    """rows: (step, phase, loss, lr_factor) tuples, as in the metrics log.

    Phase transitions show as dotted vertical lines, which makes the
    activation-quantization loss spike at the phase-3 entry visible.
    """
    steps = [r[0] for r in rows]
    losses = [r[2] for r in rows]
    phases = [r[1] for r in rows]

    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.plot(steps, losses, lw=0.9, color="#1f77b4")
    for i in range(1, len(rows)):
        if phases[i] != phases[i - 1]:
            ax.axvline(steps[i], color="gray", ls=":", lw=0.8)
            ax.text(steps[i], ax.get_ylim()[1], f" p{phases[i]}",
                    fontsize=7, va="top", color="gray")
    ax.set_xlabel("step")
    ax.set_ylabel("cross entropy")
    ax.set_title(title)
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_eval_figure(report: dict, path: str) -> str:
    """Bar chart of the evaluation report (BLEU cased/uncased, accuracy)."""
    labels = ["BLEU cased", "BLEU uncased", "token acc %"]
    values = [report["bleu_cased"], report["bleu_uncased"],
              100.0 * report["token_accuracy"]]
    colors = ["#1f77b4", "#5a9bd4", "#7f7f7f"]
    if "relative_bleu" in report:
        labels.append("relative BLEU %")
        values.append(report["relative_bleu"])
        colors.append("#2ca02c")

    fig, ax = plt.subplots(figsize=(6, 4))
    bars = ax.bar(labels, values, color=colors)
    for bar, v in zip(bars, values):
        ax.text(bar.get_x() + bar.get_width() / 2, bar.get_height(),
                f"{v:.2f}", ha="center", va="bottom", fontsize=8)
    ax.set_ylim(0, max(105.0, max(values) * 1.1))
    ax.set_ylabel("score")
    ax.set_title(f"{report.get('mode', '')} evaluation")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
