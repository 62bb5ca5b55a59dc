"""Metrics, sliced evaluation, knowledge-state export and the qDKT-style baseline."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from scipy.stats import rankdata

from .dataio import Window
from .model import QMCKT, make_batch
from .predictor import PredictionTrace

STATE_COLUMNS = ["student_id", "step", "question_id", "response"]
TRACE_COLUMNS = [
    "student_id",
    "step",
    "question_id",
    "alpha",
    "sigmoid_alpha",
    "beta_bar",
    "sigmoid_beta_bar",
    "r_hat",
    "r",
]


def compute_auc(predictions, labels) -> float:
    """Mann-Whitney AUC: P(score of a positive > score of a negative), ties count 1/2."""
    p = np.asarray(predictions, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if p.shape != y.shape:
        raise ValueError(f"{len(p)} predictions but {len(y)} labels")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative label")
    ranks = rankdata(p, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def compute_accuracy(predictions, labels, threshold: float = 0.5) -> float:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if len(p) == 0:
        raise ValueError("no predictions")
    return float(np.mean((p >= threshold).astype(int) == y))


@dataclass
class MetricReport:
    auc: float
    accuracy: float
    count: int
    slice: str = "all"

    def to_dict(self):
        return asdict(self)


@torch.no_grad()
def predict(model: QMCKT, windows: list[Window], batch_size: int = 256) -> PredictionTrace:
    """Pooled predictions over every target step of ``windows``, in window order."""
    model.eval()
    parts = {k: [] for k in ("alpha", "beta_bar", "r_hat", "r", "question", "step")}
    students = []
    for s in range(0, len(windows), batch_size):
        chunk = windows[s : s + batch_size]
        batch = make_batch(chunk, model.dtype)
        out = model(batch, need_aux=True)
        mask = batch.target_mask.numpy()
        T1 = mask.shape[1]
        zeros = torch.zeros_like(out["r_hat"])
        parts["alpha"].append(out.get("alpha", zeros).double().numpy()[mask])
        parts["beta_bar"].append(out.get("beta_bar", zeros).double().numpy()[mask])
        parts["r_hat"].append(out["r_hat"].double().numpy()[mask])
        parts["r"].append(batch.targets.numpy().astype(np.int64)[mask])
        parts["question"].append(batch.questions[:, 1:].numpy()[mask])
        steps = np.asarray(batch.offsets)[:, None] + np.arange(1, T1 + 1)[None, :]
        parts["step"].append(steps[mask])
        for i, sid in enumerate(batch.students):
            students.extend([sid] * int(mask[i].sum()))
    model.train()
    cat = {k: np.concatenate(v) if v else np.zeros(0) for k, v in parts.items()}
    return PredictionTrace(
        alpha=cat["alpha"],
        beta_bar=cat["beta_bar"],
        r_hat=cat["r_hat"],
        r=cat["r"],
        question=cat["question"],
        student=students,
        step=cat["step"],
    )


def metrics_from_trace(trace: PredictionTrace, keep=None, name="all") -> MetricReport:
    p, y = trace.r_hat, trace.r
    if keep is not None:
        p, y = p[keep], y[keep]
    if len(y) == 0:
        raise ValueError(f"slice {name!r} selects no steps")
    return MetricReport(compute_auc(p, y), compute_accuracy(p, y), int(len(y)), name)


def evaluate(model: QMCKT, windows, batch_size: int = 256) -> MetricReport:
    return metrics_from_trace(predict(model, windows, batch_size))


def less_interactive(frequency: np.ndarray, epsilon: float) -> Callable[[np.ndarray], np.ndarray]:
    """Slice predicate: target question seen fewer than ``epsilon`` times in training."""
    freq = np.asarray(frequency)

    def pred(questions):
        return freq[questions] < epsilon

    pred.__name__ = f"frequency<{epsilon:g}"
    return pred


def sliced_eval(model, windows, predicate, name: str | None = None, trace: PredictionTrace | None = None) -> MetricReport:
    trace = trace if trace is not None else predict(model, windows)
    keep = np.asarray(predicate(trace.question), dtype=bool)
    return metrics_from_trace(trace, keep, name or getattr(predicate, "__name__", "slice"))


def write_metrics(reports: dict, path):
    Path(path).write_text(json.dumps({k: v.to_dict() for k, v in reports.items()}, indent=2, sort_keys=True) + "\n")


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def export_trace(trace: PredictionTrace, path):
    """Per-step prediction decomposition as CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for i in range(len(trace)):
            a, b = float(trace.alpha[i]), float(trace.beta_bar[i])
            w.writerow(
                [
                    trace.student[i],
                    int(trace.step[i]),
                    int(trace.question[i]),
                    f"{a:.6g}",
                    f"{_sig(a):.6g}",
                    f"{b:.6g}",
                    f"{_sig(b):.6g}",
                    f"{float(trace.r_hat[i]):.6g}",
                    int(trace.r[i]),
                ]
            )


@torch.no_grad()
def export_states(model: QMCKT, window: Window, kcs=None, path=None) -> dict:
    """Concept mastery ``sigmoid(gamma_c[k])`` after every step of one window.

    Returns a column dict (``student_id, step, question_id, response,
    kc_<k>...``); also written as CSV when ``path`` is given.
    """
    M = model.config.M
    kcs = list(range(M)) if kcs is None else list(kcs)
    bad = [k for k in kcs if not 0 <= k < M]
    if bad:
        raise ValueError(f"unknown KC ids {bad}")
    if model.mcka is None:
        raise ValueError("model has no concept acquisition module")
    batch = make_batch([window], model.dtype)
    states = model.knowledge_states(batch)
    mastery = torch.sigmoid(states["gamma_c"][0]).double().numpy()
    table = {
        "student_id": [window.student_id] * len(window),
        "step": list(range(window.origin[1], window.origin[1] + len(window))),
        "question_id": [int(q) for q in window.questions],
        "response": [int(r) for r in window.responses],
    }
    for k in kcs:
        table[f"kc_{k}"] = [float(v) for v in mastery[:, k]]
    if path is not None:
        cols = list(table)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for i in range(len(window)):
                w.writerow([f"{table[c][i]:.6g}" if c.startswith("kc_") else table[c][i] for c in cols])
    return table


@torch.no_grad()
def mean_concept_mastery(model: QMCKT, windows) -> dict[tuple[str, int], float]:
    """Mean over steps of ``sigmoid(gamma_c[k])`` per (student, KC), pooled across a student's windows."""
    sums: dict[tuple[str, int], float] = {}
    counts: dict[str, int] = {}
    for s in range(0, len(windows), 256):
        chunk = windows[s : s + 256]
        batch = make_batch(chunk, model.dtype)
        g = torch.sigmoid(model.knowledge_states(batch)["gamma_c"]).double().numpy()
        valid = batch.valid.numpy()
        for i, sid in enumerate(batch.students):
            tot = g[i][valid[i]].sum(0)
            for k in range(g.shape[-1]):
                sums[(sid, k)] = sums.get((sid, k), 0.0) + float(tot[k])
            counts[sid] = counts.get(sid, 0) + int(valid[i].sum())
    return {key: v / counts[key[0]] for key, v in sums.items()}


def baseline_config(cfg):
    """Q-MCKT switched down to a qDKT-style model: one LSTM over e_t, per-question linear read-out."""
    from dataclasses import replace

    return replace(cfg, no_moe=True, no_cl=True, no_irt=True, no_mcka=True, lambda1=0.0, lambda2=0.0)


def baseline_train_eval(prepared, cfg, fold: int = 0):
    """Train the baseline on the same folds; returns (test MetricReport, fit result)."""
    from .trainer import fit

    result = fit(prepared, baseline_config(cfg), fold=fold)
    return evaluate(result.model, prepared.split_windows("test")), result
