"""Interaction-log ingestion, question bank, windowing and fold assignment.

Input rows look like ``student_id,question_id,kc_ids,response,timestamp`` with
``kc_ids`` a ``|``-separated list of integers.  Question and KC ids are
densely re-indexed (sorted by original value) and the maps are kept so a
prepared directory can always be traced back to the raw file.

Prepared directory layout::

    bank.json     id maps, kc_map, counts, student list, window/fold settings
    windows.bin   binary window table (layout below)
    folds.json    test students and the 5 validation folds

``windows.bin`` is little-endian throughout::

    header   : magic b"QMKW", uint32 version, uint32 window count
    window   : uint32 student index, uint32 sequence index, uint32 offset,
               uint32 length, followed by ``length`` packed records
    record   : uint32 question id, uint8 response, int64 timestamp  (13 bytes)
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MIN_SEQ_LEN = 3
DEFAULT_MAX_LEN = 200
DEFAULT_COLUMNS = {
    "student": "student_id",
    "question": "question_id",
    "kcs": "kc_ids",
    "response": "response",
    "timestamp": "timestamp",
}

_MAGIC = b"QMKW"
_VERSION = 1
_WINDOW_HEADER = np.dtype([("student", "<u4"), ("seq", "<u4"), ("offset", "<u4"), ("length", "<u4")])
_RECORD = np.dtype([("question", "<u4"), ("response", "u1"), ("timestamp", "<i8")])


class DataError(ValueError):
    """Malformed or inconsistent interaction data."""


class DataWarning(UserWarning):
    pass


@dataclass(frozen=True)
class InteractionRecord:
    student_id: str
    question_id: int
    kc_ids: tuple[int, ...]
    response: int
    timestamp: int

    def __post_init__(self):
        if not self.kc_ids:
            raise DataError("kc_ids must be non-empty")
        if len(set(self.kc_ids)) != len(self.kc_ids):
            raise DataError(f"duplicate kc ids {self.kc_ids}")
        if self.response not in (0, 1):
            raise DataError(f"response must be 0 or 1, got {self.response}")


@dataclass
class StudentSequence:
    student_id: str
    records: list[InteractionRecord]

    def __len__(self):
        return len(self.records)


@dataclass
class IdMaps:
    """Original id for every dense index."""

    questions: list[int]
    kcs: list[int]


@dataclass
class QuestionBank:
    n: int
    M: int
    kc_map: list[tuple[int, ...]]
    id_maps: IdMaps | None = None

    def kcs_of(self, question_id: int) -> tuple[int, ...]:
        if not 0 <= question_id < self.n:
            raise IndexError(f"question id {question_id} out of range [0, {self.n})")
        return self.kc_map[question_id]

    def kc_matrix(self) -> np.ndarray:
        """Row-normalised question-KC relation matrix: entry (q, k) = 1/m_q if k in q's KC set."""
        A = np.zeros((self.n, self.M), dtype=np.float64)
        for q, kcs in enumerate(self.kc_map):
            A[q, list(kcs)] = 1.0 / len(kcs)
        return A


@dataclass
class Window:
    student_id: str
    questions: np.ndarray
    responses: np.ndarray
    timestamps: np.ndarray
    origin: tuple[int, int]

    def __len__(self):
        return len(self.questions)


@dataclass
class FoldAssignment:
    seed: int
    test: list[str]
    folds: list[list[str]]

    def fold_of(self, student_id: str) -> int | str:
        if student_id in set(self.test):
            return "test"
        for i, members in enumerate(self.folds):
            if student_id in members:
                return i
        raise KeyError(student_id)

    def students(self, split: str, fold: int = 0) -> set[str]:
        """``split`` is one of train / valid / test / trainval, relative to ``fold``."""
        if split == "test":
            return set(self.test)
        if split == "valid":
            return set(self.folds[fold])
        if split == "train":
            return {s for i, f in enumerate(self.folds) if i != fold for s in f}
        if split == "trainval":
            return {s for f in self.folds for s in f}
        raise ValueError(f"unknown split {split!r}")


@dataclass
class PreparedDataset:
    bank: QuestionBank
    windows: list[Window]
    folds: FoldAssignment
    students: list[str]
    max_len: int = DEFAULT_MAX_LEN
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def split_windows(self, split: str, fold: int = 0) -> list[Window]:
        keep = self.folds.students(split, fold)
        return [w for w in self.windows if w.student_id in keep]


def _parse_int(value: str, what: str, lineno: int) -> int:
    try:
        return int(value.strip())
    except ValueError:
        raise DataError(f"line {lineno}: {what} is not an integer: {value!r}") from None


def load_interactions(path, columns: dict | None = None, delimiter: str = ","):
    """Read an interaction log and return ``(sequences, id_maps)``.

    Sequences are sorted by student id; records within a student are sorted by
    timestamp, stable on ties.  Students with fewer than three interactions are
    dropped with a :class:`DataWarning`.
    """
    cols = dict(DEFAULT_COLUMNS, **(columns or {}))
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)

    raw: dict[str, list[tuple[int, int, tuple[int, ...], int]]] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        missing = [c for c in cols.values() if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        idx = {k: header.index(v) for k, v in cols.items()}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            student = row[idx["student"]].strip()
            if not student:
                raise DataError(f"line {lineno}: empty student id")
            question = _parse_int(row[idx["question"]], "question_id", lineno)
            kc_field = row[idx["kcs"]].strip()
            if not kc_field:
                raise DataError(f"line {lineno}: empty kc_ids field")
            kcs = [_parse_int(k, "kc id", lineno) for k in kc_field.split("|")]
            if len(set(kcs)) != len(kcs):
                raise DataError(f"line {lineno}: duplicate kc ids {kc_field!r}")
            response = _parse_int(row[idx["response"]], "response", lineno)
            if response not in (0, 1):
                raise DataError(f"line {lineno}: response must be 0 or 1, got {response}")
            ts = _parse_int(row[idx["timestamp"]], "timestamp", lineno)
            raw.setdefault(student, []).append((ts, question, tuple(sorted(kcs)), response))

    kept = {}
    for student in sorted(raw):
        rows = raw[student]
        if len(rows) < MIN_SEQ_LEN:
            warnings.warn(
                f"student {student!r} has {len(rows)} interactions (< {MIN_SEQ_LEN}); dropped",
                DataWarning,
                stacklevel=2,
            )
            continue
        # sorted() is stable, so equal timestamps keep file order
        kept[student] = sorted(rows, key=lambda r: r[0])

    q_orig = sorted({r[1] for rows in kept.values() for r in rows})
    k_orig = sorted({k for rows in kept.values() for r in rows for k in r[2]})
    q_index = {q: i for i, q in enumerate(q_orig)}
    k_index = {k: i for i, k in enumerate(k_orig)}

    seqs = []
    for student, rows in kept.items():
        records = [
            InteractionRecord(student, q_index[q], tuple(sorted(k_index[k] for k in kcs)), r, ts)
            for ts, q, kcs, r in rows
        ]
        seqs.append(StudentSequence(student, records))
    return seqs, IdMaps(q_orig, k_orig)


def build_question_bank(seqs: list[StudentSequence], id_maps: IdMaps | None = None) -> QuestionBank:
    if not seqs:
        raise DataError("no sequences to build a question bank from")
    kc_of: dict[int, tuple[int, ...]] = {}
    for seq in seqs:
        for rec in seq.records:
            known = kc_of.setdefault(rec.question_id, rec.kc_ids)
            if known != rec.kc_ids:
                raise DataError(
                    f"question {rec.question_id} has inconsistent KC sets {known} and {rec.kc_ids}"
                )
    n = max(kc_of) + 1
    M = max(k for kcs in kc_of.values() for k in kcs) + 1
    if len(kc_of) != n:
        raise DataError("question ids are not dense; load through load_interactions first")
    return QuestionBank(n=n, M=M, kc_map=[kc_of[q] for q in range(n)], id_maps=id_maps)


def _rebalance(lengths: list[int], max_len: int, student: str) -> list[int]:
    tail = lengths[-1]
    if tail >= MIN_SEQ_LEN or len(lengths) == 1:
        return lengths
    need = MIN_SEQ_LEN - tail
    if lengths[-2] - need >= MIN_SEQ_LEN:
        return lengths[:-2] + [lengths[-2] - need, MIN_SEQ_LEN]
    warnings.warn(
        f"student {student!r}: trailing window of {tail} steps dropped (max_len={max_len})",
        DataWarning,
        stacklevel=3,
    )
    return lengths[:-1]


def window_sequences(seqs: list[StudentSequence], max_len: int = DEFAULT_MAX_LEN) -> list[Window]:
    """Cut every sequence into consecutive windows of at most ``max_len`` steps.

    A trailing remainder shorter than three steps borrows steps from the window
    before it (401 steps at max_len 200 gives 200, 198, 3).
    """
    if max_len < MIN_SEQ_LEN:
        raise ValueError(f"max_len must be >= {MIN_SEQ_LEN}, got {max_len}")
    windows = []
    for si, seq in enumerate(seqs):
        L = len(seq.records)
        lengths = [max_len] * (L // max_len)
        if L % max_len:
            lengths.append(L % max_len)
        lengths = _rebalance(lengths, max_len, seq.student_id)
        q = np.array([r.question_id for r in seq.records], dtype=np.int64)
        r = np.array([r.response for r in seq.records], dtype=np.int8)
        t = np.array([r.timestamp for r in seq.records], dtype=np.int64)
        offset = 0
        for ln in lengths:
            sl = slice(offset, offset + ln)
            windows.append(Window(seq.student_id, q[sl].copy(), r[sl].copy(), t[sl].copy(), (si, offset)))
            offset += ln
    return windows


def split_folds(student_ids, seed: int, test_frac: float = 0.2, k: int = 5) -> FoldAssignment:
    """Student-level split: one held-out test set plus ``k`` near-equal folds."""
    students = sorted(set(student_ids))
    S = len(students)
    if S < k + 1:
        raise DataError(f"need at least {k + 1} students for a {k}-fold split, got {S}")
    n_test = int(math.floor(test_frac * S + 0.5))
    n_test = min(n_test, S - k)
    order = np.random.default_rng(seed).permutation(S)
    shuffled = [students[i] for i in order]
    test = sorted(shuffled[:n_test])
    rest = shuffled[n_test:]
    folds = [sorted(rest[i::k]) for i in range(k)]
    return FoldAssignment(seed=seed, test=test, folds=folds)


def prepare(path, max_len: int = DEFAULT_MAX_LEN, seed: int = 0, columns=None, delimiter=",") -> PreparedDataset:
    seqs, id_maps = load_interactions(path, columns=columns, delimiter=delimiter)
    return prepare_sequences(seqs, id_maps, max_len=max_len, seed=seed)


def prepare_sequences(seqs, id_maps=None, max_len: int = DEFAULT_MAX_LEN, seed: int = 0) -> PreparedDataset:
    bank = build_question_bank(seqs, id_maps)
    windows = window_sequences(seqs, max_len)
    students = [s.student_id for s in seqs]
    folds = split_folds(students, seed)
    return PreparedDataset(bank, windows, folds, students, max_len=max_len, seed=seed)


def compute_dataset_stats(prepared: PreparedDataset) -> dict:
    bank = prepared.bank
    n_inter = int(sum(len(w) for w in prepared.windows))
    kc_links = sum(len(k) for k in bank.kc_map)
    return {
        "students": len(prepared.students),
        "interactions": n_inter,
        "questions": bank.n,
        "kcs": bank.M,
        "avg_kcs_per_question": kc_links / bank.n,
        "avg_questions_per_kc": kc_links / bank.M,
        "avg_interactions_per_question": n_inter / bank.n,
    }


def _dump_json(obj, path: Path):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_prepared(prepared: PreparedDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bank = prepared.bank
    _dump_json(
        {
            "n": bank.n,
            "M": bank.M,
            "kc_map": [list(k) for k in bank.kc_map],
            "question_ids": bank.id_maps.questions if bank.id_maps else list(range(bank.n)),
            "kc_ids": bank.id_maps.kcs if bank.id_maps else list(range(bank.M)),
            "students": prepared.students,
            "max_len": prepared.max_len,
            "seed": prepared.seed,
        },
        out / "bank.json",
    )
    _dump_json(
        {"seed": prepared.folds.seed, "test": prepared.folds.test, "folds": prepared.folds.folds},
        out / "folds.json",
    )
    student_index = {s: i for i, s in enumerate(prepared.students)}
    with (out / "windows.bin").open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.array([_VERSION, len(prepared.windows)], dtype="<u4").tobytes())
        for w in prepared.windows:
            head = np.array(
                [(student_index[w.student_id], w.origin[0], w.origin[1], len(w))], dtype=_WINDOW_HEADER
            )
            fh.write(head.tobytes())
            rec = np.empty(len(w), dtype=_RECORD)
            rec["question"] = w.questions
            rec["response"] = w.responses
            rec["timestamp"] = w.timestamps
            fh.write(rec.tobytes())
    return out


def load_prepared(path) -> PreparedDataset:
    root = Path(path)
    try:
        meta = json.loads((root / "bank.json").read_text())
        fold_meta = json.loads((root / "folds.json").read_text())
        blob = (root / "windows.bin").read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"not a prepared directory: {exc.filename}") from None
    bank = QuestionBank(
        n=meta["n"],
        M=meta["M"],
        kc_map=[tuple(k) for k in meta["kc_map"]],
        id_maps=IdMaps(meta["question_ids"], meta["kc_ids"]),
    )
    if blob[:4] != _MAGIC:
        raise DataError("windows.bin: bad magic")
    version, count = np.frombuffer(blob, dtype="<u4", count=2, offset=4)
    if version != _VERSION:
        raise DataError(f"windows.bin: unsupported version {version}")
    students = meta["students"]
    pos = 12
    windows = []
    for _ in range(int(count)):
        if pos + _WINDOW_HEADER.itemsize > len(blob):
            raise DataError("windows.bin: truncated")
        head = np.frombuffer(blob, dtype=_WINDOW_HEADER, count=1, offset=pos)[0]
        pos += _WINDOW_HEADER.itemsize
        ln = int(head["length"])
        if pos + ln * _RECORD.itemsize > len(blob):
            raise DataError("windows.bin: truncated")
        rec = np.frombuffer(blob, dtype=_RECORD, count=ln, offset=pos)
        pos += ln * _RECORD.itemsize
        windows.append(
            Window(
                students[int(head["student"])],
                rec["question"].astype(np.int64),
                rec["response"].astype(np.int8),
                rec["timestamp"].astype(np.int64),
                (int(head["seq"]), int(head["offset"])),
            )
        )
    folds = FoldAssignment(fold_meta["seed"], fold_meta["test"], fold_meta["folds"])
    return PreparedDataset(bank, windows, folds, students, max_len=meta["max_len"], seed=meta["seed"])
