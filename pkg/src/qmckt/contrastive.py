"""Question-centric pair construction and the distance-aware margin loss.

Anchors are questions seen fewer than ``epsilon`` times in the training
split.  Candidates are frequent questions with the anchor's KC set; those in
the anchor's difficulty band are positives, those at least ``min_gap`` bands
away are negatives.  Bands come from the global accuracy of each question.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import diffcore as dc

DEFAULT_EDGES = (0.0, 0.3, 0.4, 0.5, 0.6, 0.7, 1.0)
BAND_LETTERS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"


@dataclass
class QuestionStats:
    frequency: np.ndarray
    correct: np.ndarray

    @property
    def accuracy(self) -> np.ndarray:
        acc = np.zeros(len(self.frequency), dtype=np.float64)
        seen = self.frequency > 0
        acc[seen] = self.correct[seen] / self.frequency[seen]
        return acc


def compute_question_stats(windows, n: int) -> QuestionStats:
    """Interaction and correct-response counts per question over ``windows``.

    Pass training windows only; validation/test responses must not leak into
    the banding.
    """
    freq = np.zeros(n, dtype=np.int64)
    correct = np.zeros(n, dtype=np.int64)
    for w in windows:
        np.add.at(freq, w.questions, 1)
        np.add.at(correct, w.questions, w.responses.astype(np.int64))
    return QuestionStats(freq, correct)


@dataclass
class DifficultyBanding:
    edges: tuple[float, ...] = DEFAULT_EDGES
    min_gap: int = 2

    def __post_init__(self):
        e = tuple(float(x) for x in self.edges)
        if len(e) < 2 or e[0] != 0.0 or e[-1] != 1.0 or any(b <= a for a, b in zip(e, e[1:])):
            raise ValueError(f"band edges must increase strictly from 0 to 1, got {e}")
        if self.min_gap < 1:
            raise ValueError("min_gap must be at least 1")
        self.edges = e

    @property
    def n_bands(self) -> int:
        return len(self.edges) - 1

    def band_of(self, accuracy) -> np.ndarray:
        """First band is [e0, e1]; the rest are half-open (e_i, e_{i+1}]."""
        acc = np.asarray(accuracy, dtype=np.float64)
        if np.any((acc < 0) | (acc > 1)) or np.any(np.isnan(acc)):
            raise ValueError("accuracy must lie in [0, 1]")
        return np.searchsorted(np.asarray(self.edges[1:-1]), acc, side="left")

    def label(self, band: int) -> str:
        return BAND_LETTERS[band]


def assign_bands(stats: QuestionStats, banding: DifficultyBanding) -> np.ndarray:
    """Band id per question; -1 for questions never observed."""
    bands = np.full(len(stats.frequency), -1, dtype=np.int64)
    seen = stats.frequency > 0
    bands[seen] = banding.band_of(stats.accuracy[seen])
    return bands


@dataclass
class PairEntry:
    anchor: int
    positives: tuple[int, ...]
    negatives: tuple[int, ...]
    band: int
    frequency: int


@dataclass
class PairSet:
    entries: list[PairEntry]
    epsilon: float
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def to_json(self) -> dict:
        return {
            "config": dict(self.config, epsilon=self.epsilon),
            "pairs": [
                {
                    "anchor_id": e.anchor,
                    "positive_ids": list(e.positives),
                    "negative_ids": list(e.negatives),
                    "band": e.band,
                    "frequency": e.frequency,
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PairSet":
        cfg = dict(obj["config"])
        eps = cfg.pop("epsilon")
        entries = [
            PairEntry(p["anchor_id"], tuple(p["positive_ids"]), tuple(p["negative_ids"]), p["band"], p["frequency"])
            for p in obj["pairs"]
        ]
        return cls(entries, eps, cfg)


def save_pairs(pairset: PairSet, path):
    Path(path).write_text(json.dumps(pairset.to_json(), indent=2, sort_keys=True) + "\n")


def load_pairs(path) -> PairSet:
    return PairSet.from_json(json.loads(Path(path).read_text()))


def _kc_match(a, b, mode):
    if mode == "exact":
        return a == b
    if mode == "overlap":
        return bool(set(a) & set(b))
    raise ValueError(f"unknown kc match mode {mode!r}")


def _cap(ids, cap, rng):
    if cap is None or len(ids) <= cap:
        return tuple(ids)
    pick = rng.choice(len(ids), size=cap, replace=False)
    return tuple(ids[i] for i in sorted(pick))


def build_pairs(
    kc_map,
    stats: QuestionStats,
    banding: DifficultyBanding,
    epsilon: float,
    k_max: int | None = 10,
    l_max: int | None = 10,
    seed: int = 0,
    kc_match: str = "exact",
) -> PairSet:
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    kc_map = [tuple(sorted(k)) for k in kc_map]
    freq = stats.frequency
    bands = assign_bands(stats, banding)
    frequent = [q for q in range(len(freq)) if freq[q] >= epsilon]
    by_kcs: dict[tuple, list[int]] = {}
    for q in frequent:
        by_kcs.setdefault(kc_map[q], []).append(q)

    entries = []
    for a in range(len(freq)):
        if not 0 < freq[a] < epsilon:
            continue
        if kc_match == "exact":
            cands = by_kcs.get(kc_map[a], [])
        else:
            cands = [q for q in frequent if _kc_match(kc_map[a], kc_map[q], kc_match)]
        pos = [q for q in cands if bands[q] == bands[a]]
        if not pos:
            continue
        neg = [q for q in cands if abs(int(bands[q]) - int(bands[a])) >= banding.min_gap]
        rng = np.random.default_rng([seed, a])
        entries.append(PairEntry(a, _cap(pos, k_max, rng), _cap(neg, l_max, rng), int(bands[a]), int(freq[a])))
    if not entries:
        warnings.warn("no contrastive pairs could be built", stacklevel=2)
    config = {
        "edges": list(banding.edges),
        "min_gap": banding.min_gap,
        "k_max": k_max,
        "l_max": l_max,
        "seed": seed,
        "kc_match": kc_match,
    }
    return PairSet(entries, float(epsilon), config)


def validate_pairs(pairset: PairSet, kc_map, stats: QuestionStats, banding: DifficultyBanding, kc_match="exact") -> list[str]:
    """Re-check every emitted pair; returns a list of violations (empty when valid)."""
    bands = assign_bands(stats, banding)
    freq = stats.frequency
    eps = pairset.epsilon
    problems = []
    for e in pairset.entries:
        a = e.anchor
        if not 0 < freq[a] < eps:
            problems.append(f"anchor {a} has frequency {freq[a]}")
        for p in e.positives:
            if freq[p] < eps or bands[p] != bands[a] or not _kc_match(kc_map[a], kc_map[p], kc_match):
                problems.append(f"positive {p} invalid for anchor {a}")
        for q in e.negatives:
            if freq[q] < eps or abs(int(bands[q]) - int(bands[a])) < banding.min_gap or not _kc_match(kc_map[a], kc_map[q], kc_match):
                problems.append(f"negative {q} invalid for anchor {a}")
    return problems


class PairTensors:
    """Padded index tensors for a pair set, ready for batched loss evaluation."""

    def __init__(self, pairset: PairSet):
        A = len(pairset)
        K = max((len(e.positives) for e in pairset.entries), default=1)
        L = max((len(e.negatives) for e in pairset.entries), default=1) or 1
        self.anchor = torch.zeros(A, dtype=torch.long)
        self.pos = torch.zeros(A, K, dtype=torch.long)
        self.pos_mask = torch.zeros(A, K, dtype=torch.bool)
        self.neg = torch.zeros(A, L, dtype=torch.long)
        self.neg_mask = torch.zeros(A, L, dtype=torch.bool)
        for i, e in enumerate(pairset.entries):
            self.anchor[i] = e.anchor
            self.pos[i, : len(e.positives)] = torch.tensor(e.positives, dtype=torch.long)
            self.pos_mask[i, : len(e.positives)] = True
            if e.negatives:
                self.neg[i, : len(e.negatives)] = torch.tensor(e.negatives, dtype=torch.long)
                self.neg_mask[i, : len(e.negatives)] = True

    def __len__(self):
        return len(self.anchor)

    def subset(self, idx) -> "PairTensors":
        out = PairTensors.__new__(PairTensors)
        for k in ("anchor", "pos", "pos_mask", "neg", "neg_mask"):
            setattr(out, k, getattr(self, k)[idx])
        return out


def sample_anchor_batch(n_anchors: int, size: int, rng: np.random.Generator) -> np.ndarray | None:
    """Sorted anchor indices for one step, or None to use every anchor."""
    if size is None or n_anchors <= size:
        return None
    return np.sort(rng.choice(n_anchors, size=size, replace=False))


def contrastive_loss(
    pairs,
    Q: torch.Tensor,
    Q_c: torch.Tensor,
    sigma_p: float = 0.5,
    sigma_n: float = 2.0,
    tau: float = 1.0,
    mode: str = "push-apart",
):
    """Mean over anchors of (positive hinge + negative hinge) / tau.

    Anchor embeddings come from ``Q`` and carry gradients; positives and
    negatives come from the frozen snapshot ``Q_c``.  ``mode`` selects the
    negative hinge: ``push-apart`` penalises negatives closer than
    ``sigma_n``; ``literal`` penalises negatives farther than ``sigma_n``.
    """
    if sigma_p <= 0 or sigma_n <= 0 or tau <= 0:
        raise ValueError("margins and temperature must be positive")
    if sigma_p >= sigma_n:
        raise ValueError(f"sigma_p ({sigma_p}) must be smaller than sigma_n ({sigma_n})")
    if mode not in ("push-apart", "literal"):
        raise ValueError(f"unknown negative hinge mode {mode!r}")
    if isinstance(pairs, PairSet):
        pairs = PairTensors(pairs)
    if len(pairs) == 0:
        warnings.warn("empty pair set; contrastive loss is zero", stacklevel=2)
        return Q.sum() * 0.0
    Qc = Q_c.detach()
    ea = Q[pairs.anchor].unsqueeze(1)
    dp = torch.linalg.vector_norm(ea - Qc[pairs.pos], dim=-1)
    dn = torch.linalg.vector_norm(ea - Qc[pairs.neg], dim=-1)
    pm = pairs.pos_mask.to(Q.dtype)
    nm = pairs.neg_mask.to(Q.dtype)
    lp = (dc.relu(dp - sigma_p) * pm).sum(1) / pm.sum(1).clamp_min(1.0)
    hinge = dc.relu(sigma_n - dn) if mode == "push-apart" else dc.relu(dn - sigma_n)
    ln = (hinge * nm).sum(1) / nm.sum(1).clamp_min(1.0)
    return ((lp + ln) / tau).mean()
