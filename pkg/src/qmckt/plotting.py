"""PNG figures for state exports, prediction traces and training curves."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    # a fixed Software key keeps the PNG bytes independent of the matplotlib version
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_knowledge_states(table: dict, path, title: str | None = None):
    """Heatmap of concept mastery per step; columns ``kc_<k>`` of an ``export_states`` table."""
    kcs = [c for c in table if c.startswith("kc_")]
    if not kcs:
        raise ValueError("table has no kc_<k> columns")
    grid = np.array([table[c] for c in kcs], dtype=float)
    steps = len(table["step"])
    fig, ax = plt.subplots(figsize=(max(4.0, 0.18 * steps + 2), 0.4 * len(kcs) + 1.6))
    im = ax.imshow(grid, aspect="auto", cmap="viridis", vmin=0.0, vmax=1.0, interpolation="nearest")
    ax.set_yticks(range(len(kcs)), [c[3:] for c in kcs])
    ax.set_ylabel("KC")
    labels = [f"{q}{'+' if r else '-'}" for q, r in zip(table["question_id"], table["response"])]
    if steps <= 60:
        ax.set_xticks(range(steps), labels, rotation=90, fontsize=7)
    ax.set_xlabel("question (+ correct / - wrong)")
    fig.colorbar(im, ax=ax, label="mastery")
    if title:
        ax.set_title(title)
    _save(fig, path)


def plot_prediction_components(trace, student: str, path):
    """sigmoid(alpha), sigmoid(beta_bar) and the prediction for one student's steps."""
    idx = [i for i, s in enumerate(trace.student) if s == student]
    if not idx:
        raise ValueError(f"student {student!r} has no scored steps")
    idx = np.asarray(idx)
    order = idx[np.argsort(trace.step[idx], kind="stable")]
    x = trace.step[order]
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))  # noqa: E731
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot(x, sig(trace.alpha[order]), label="question score", marker=".")
    ax.plot(x, sig(trace.beta_bar[order]), label="concept score", marker=".")
    ax.plot(x, trace.r_hat[order], label="prediction", color="black", lw=1.5)
    r = trace.r[order]
    ax.scatter(x, r, c=np.where(r == 1, "tab:green", "tab:red"), s=12, zorder=3, label="response")
    ax.set_ylim(-0.05, 1.05)
    ax.set_xlabel("step")
    ax.set_title(student)
    ax.legend(fontsize=7, loc="lower right")
    _save(fig, path)


def plot_history(history: list[dict], path):
    """Training loss and validation AUC per epoch."""
    if not history:
        raise ValueError("empty history")
    ep = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(ep, [h["loss"] for h in history], color="tab:blue", label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax2 = ax.twinx()
    ax2.plot(ep, [h["val_auc"] for h in history], color="tab:orange", label="validation AUC")
    ax2.set_ylabel("validation AUC")
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], fontsize=7, loc="center right")
    _save(fig, path)
