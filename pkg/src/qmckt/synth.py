"""Synthetic interaction logs with known abilities and a long-tailed question popularity.

Each student has an ability per KC, drawn from N(0, ability_std); each
question a difficulty from N(0, difficulty_std).  A response is correct with
probability ``sigmoid(mean ability over the question's KCs - difficulty)``,
and every practised KC then gains ``eta``.  Questions are picked with Zipf
weights ``rank ** -popularity_exponent`` over a random ranking.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .evalsuite import compute_auc


@dataclass
class SynthConfig:
    students: int = 500
    questions: int = 200
    kcs: int = 10
    kc_count_probs: tuple = (0.7, 0.3)
    difficulty_std: float = 1.0
    ability_std: float = 1.0
    eta: float = 0.2
    min_len: int = 20
    max_len: int = 100
    popularity_exponent: float = 1.2
    seed: int = 0

    def __post_init__(self):
        if min(self.students, self.questions, self.kcs) < 1:
            raise ValueError("counts must be positive")
        if self.popularity_exponent < 0:
            raise ValueError("popularity exponent must be >= 0")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        probs = np.asarray(self.kc_count_probs, dtype=float)
        if len(probs) > self.kcs or probs.min() < 0 or not np.isclose(probs.sum(), 1.0):
            raise ValueError("kc_count_probs must be a distribution over 1..kcs KCs per question")


@dataclass
class SynthDataset:
    config: SynthConfig
    kc_map: list[tuple[int, ...]]
    difficulty: np.ndarray
    popularity: np.ndarray
    rows: list[tuple[str, int, tuple[int, ...], int, int]]  # student, question, kcs, response, timestamp
    probability: np.ndarray
    initial_theta: dict[str, np.ndarray]
    final_theta: dict[str, np.ndarray]
    theta_rows: list[tuple[str, int, int, float]]  # student, step, kc, ability used at that step


def _student_name(i: int, width: int) -> str:
    return f"s{i:0{width}d}"


def generate_dataset(config: SynthConfig) -> SynthDataset:
    ss = np.random.SeedSequence(config.seed)
    global_seq, *student_seqs = ss.spawn(config.students + 1)
    rng = np.random.default_rng(global_seq)
    sizes = rng.choice(np.arange(1, len(config.kc_count_probs) + 1), size=config.questions, p=config.kc_count_probs)
    kc_map = [tuple(sorted(rng.choice(config.kcs, size=int(k), replace=False).tolist())) for k in sizes]
    difficulty = rng.normal(0.0, config.difficulty_std, size=config.questions)
    ranks = rng.permutation(config.questions) + 1
    weights = ranks.astype(float) ** -config.popularity_exponent
    popularity = weights / weights.sum()

    width = len(str(config.students - 1))
    rows, probs, theta_rows = [], [], []
    initial, final = {}, {}
    for i, seq in enumerate(student_seqs):
        srng = np.random.default_rng(seq)
        sid = _student_name(i, width)
        theta = srng.normal(0.0, config.ability_std, size=config.kcs)
        initial[sid] = theta.copy()
        length = int(srng.integers(config.min_len, config.max_len + 1))
        qs = srng.choice(config.questions, size=length, p=popularity)
        u = srng.random(length)
        for t, q in enumerate(qs):
            kcs = kc_map[q]
            p = 1.0 / (1.0 + np.exp(-(theta[list(kcs)].mean() - difficulty[q])))
            r = int(u[t] < p)
            for k in kcs:
                theta_rows.append((sid, t, k, float(theta[k])))
            rows.append((sid, int(q), kcs, r, t))
            probs.append(p)
            theta[list(kcs)] += config.eta
        final[sid] = theta.copy()
    return SynthDataset(config, kc_map, difficulty, popularity, rows, np.asarray(probs), initial, final, theta_rows)


def write_dataset(ds: SynthDataset, out_dir) -> dict[str, Path]:
    """Write ``interactions.csv`` (loader format), ``ground_truth.csv`` and ``questions.csv``.

    ``ground_truth.csv`` lists the ability used at every step for each KC of
    that step's question, followed by one row per KC at ``step == length``
    holding the final ability.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / f"{k}.csv" for k in ("interactions", "ground_truth", "questions")}
    with paths["interactions"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["student_id", "question_id", "kc_ids", "response", "timestamp"])
        for sid, q, kcs, r, t in ds.rows:
            w.writerow([sid, q, "|".join(map(str, kcs)), r, t])
    lengths = {}
    for sid, *_rest, t in ds.rows:
        lengths[sid] = t + 1
    with paths["ground_truth"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["student_id", "step", "kc_id", "theta"])
        by_student: dict[str, list] = {}
        for row in ds.theta_rows:
            by_student.setdefault(row[0], []).append(row)
        for sid in sorted(by_student):
            for _, t, k, th in by_student[sid]:
                w.writerow([sid, t, k, repr(th)])
            for k, th in enumerate(ds.final_theta[sid]):
                w.writerow([sid, lengths[sid], k, repr(float(th))])
    with paths["questions"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["question_id", "b", "kc_ids", "popularity"])
        for q in range(len(ds.kc_map)):
            w.writerow([q, repr(float(ds.difficulty[q])), "|".join(map(str, ds.kc_map[q])), repr(float(ds.popularity[q]))])
    return paths


def load_ground_truth(directory):
    """Read back ``(theta_at_step, final_theta, difficulty, kc_map)`` from a written dataset."""
    d = Path(directory)
    lengths: dict[str, int] = {}
    steps: dict[tuple[str, int], dict[int, float]] = {}
    with (d / "ground_truth.csv").open() as fh:
        for row in csv.DictReader(fh):
            key = (row["student_id"], int(row["step"]))
            steps.setdefault(key, {})[int(row["kc_id"])] = float(row["theta"])
            lengths[row["student_id"]] = max(lengths.get(row["student_id"], 0), int(row["step"]))
    final = {s: steps.pop((s, L)) for s, L in lengths.items()}
    difficulty, kc_map = [], []
    with (d / "questions.csv").open() as fh:
        for row in csv.DictReader(fh):
            difficulty.append(float(row["b"]))
            kc_map.append(tuple(int(k) for k in row["kc_ids"].split("|")))
    return steps, final, np.asarray(difficulty), kc_map


def true_probabilities(directory, students=None) -> tuple[np.ndarray, np.ndarray]:
    """Generating probability and realised response per interaction, in file order."""
    steps, _, difficulty, kc_map = load_ground_truth(directory)
    probs, resp = [], []
    with (Path(directory) / "interactions.csv").open() as fh:
        for row in csv.DictReader(fh):
            if students is not None and row["student_id"] not in students:
                continue
            q = int(row["question_id"])
            th = steps[(row["student_id"], int(row["timestamp"]))]
            z = np.mean([th[k] for k in kc_map[q]]) - difficulty[q]
            probs.append(1.0 / (1.0 + np.exp(-z)))
            resp.append(int(row["response"]))
    return np.asarray(probs), np.asarray(resp)


def oracle_auc(ds_or_dir, students=None) -> float:
    """AUC of the generating probabilities against the realised responses."""
    if isinstance(ds_or_dir, SynthDataset):
        keep = np.array([students is None or r[0] in students for r in ds_or_dir.rows])
        resp = np.array([r[3] for r in ds_or_dir.rows])
        return compute_auc(ds_or_dir.probability[keep], resp[keep])
    probs, resp = true_probabilities(ds_or_dir, students)
    return compute_auc(probs, resp)


def config_dict(cfg: SynthConfig) -> dict:
    out = asdict(cfg)
    out["kc_count_probs"] = list(cfg.kc_count_probs)
    return out
