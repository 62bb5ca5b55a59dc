import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import write_csv
from qmckt.dataio import (
    DataError,
    FoldAssignment,
    PreparedDataset,
    DataWarning,
    InteractionRecord,
    StudentSequence,
    build_question_bank,
    compute_dataset_stats,
    load_interactions,
    load_prepared,
    prepare,
    prepare_sequences,
    save_prepared,
    split_folds,
    window_sequences,
)


def _seq(student, n, start=0):
    return StudentSequence(student, [InteractionRecord(student, 0, (0,), 1, start + t) for t in range(n)])


def test_sorted_by_timestamp(tmp_path):
    p = write_csv(tmp_path / "a.csv", [("s", 10, "1", 1, 3), ("s", 11, "1", 0, 1), ("s", 12, "1", 1, 2), ("s", 13, "1", 0, 4)])
    seqs, maps = load_interactions(p)
    assert [r.timestamp for r in seqs[0].records] == [1, 2, 3, 4]
    assert [maps.questions[r.question_id] for r in seqs[0].records] == [11, 12, 10, 13]


def test_short_student_dropped_with_warning(tmp_path):
    rows = [("a", 1, "1", 1, t) for t in range(3)] + [("b", 1, "1", 0, 0), ("b", 1, "1", 1, 1)]
    with pytest.warns(DataWarning, match="'b'"):
        seqs, _ = load_interactions(write_csv(tmp_path / "a.csv", rows))
    assert [s.student_id for s in seqs] == ["a"]


def test_equal_timestamps_keep_file_order(tmp_path):
    rows = [("s", q, "0", 1, 5) for q in (7, 3, 9)]
    seqs, maps = load_interactions(write_csv(tmp_path / "a.csv", rows))
    assert [maps.questions[r.question_id] for r in seqs[0].records] == [7, 3, 9]


@pytest.mark.parametrize(
    "row,pattern",
    [
        (("s", 1, "1", 2, 0), "line 3: response"),
        (("s", 1, "", 1, 0), "line 3: empty kc_ids"),
        (("s", "x", "1", 1, 0), "line 3: question_id"),
        (("s", 1, "1|1", 1, 0), "line 3: duplicate"),
    ],
)
def test_malformed_rows_name_the_line(tmp_path, row, pattern):
    p = write_csv(tmp_path / "a.csv", [("s", 1, "1", 1, 0), row])
    with pytest.raises(DataError, match=pattern):
        load_interactions(p)


def test_wrong_field_count(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("student_id,question_id,kc_ids,response,timestamp\ns,1,1,1\n")
    with pytest.raises(DataError, match="line 2"):
        load_interactions(p)


def test_missing_column(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("student_id,question_id,response,timestamp\n")
    with pytest.raises(DataError, match="kc_ids"):
        load_interactions(p)


def test_question_bank_counts():
    recs = [InteractionRecord("s", 0, (0,), 1, 0), InteractionRecord("s", 1, (0, 1), 0, 1), InteractionRecord("s", 0, (0,), 1, 2)]
    bank = build_question_bank([StudentSequence("s", recs)])
    assert (bank.n, bank.M) == (2, 2)
    assert bank.kc_map == [(0,), (0, 1)]
    np.testing.assert_allclose(bank.kc_matrix(), [[1, 0], [0.5, 0.5]])


def test_single_question_bank():
    bank = build_question_bank([_seq("s", 3)])
    assert (bank.n, bank.M) == (1, 1)


def test_inconsistent_kcs_rejected():
    recs = [InteractionRecord("s", 0, (0,), 1, 0), InteractionRecord("s", 0, (1,), 1, 1)]
    with pytest.raises(DataError, match="inconsistent"):
        build_question_bank([StudentSequence("s", recs)])


@pytest.mark.parametrize(
    "length,max_len,expected",
    [(450, 200, [200, 200, 50]), (200, 200, [200]), (401, 200, [200, 198, 3]), (5, 3, [3]), (7, 5, [4, 3])],
)
def test_window_lengths(length, max_len, expected):
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        wins = window_sequences([_seq("s", length)], max_len)
    assert [len(w) for w in wins] == expected


def test_unmergeable_tail_dropped_with_warning():
    # 4 steps at max_len 3: the tail of 1 cannot borrow without shrinking the first window below 3
    with pytest.warns(DataWarning, match="dropped"):
        wins = window_sequences([_seq("s", 4)], 3)
    assert [len(w) for w in wins] == [3]


@settings(max_examples=60, deadline=None)
@given(length=st.integers(3, 900), max_len=st.integers(6, 250))
def test_windows_partition_every_record(length, max_len):
    wins = window_sequences([_seq("s", length)], max_len)
    stamps = np.concatenate([w.timestamps for w in wins])
    assert stamps.tolist() == list(range(length))
    assert all(3 <= len(w) <= max_len for w in wins)
    assert [w.origin[1] for w in wins] == list(np.cumsum([0] + [len(w) for w in wins[:-1]]))


@pytest.mark.parametrize("S,test,sizes", [(100, 20, [16] * 5), (11, 2, [2, 2, 2, 2, 1]), (6, 1, [1] * 5)])
def test_fold_sizes(S, test, sizes):
    fa = split_folds([f"s{i}" for i in range(S)], seed=4)
    assert len(fa.test) == test
    assert sorted((len(f) for f in fa.folds), reverse=True) == sizes


def test_folds_partition_and_determinism():
    ids = [f"s{i}" for i in range(57)]
    a, b = split_folds(ids, 9), split_folds(list(reversed(ids)), 9)
    assert a == b
    members = a.test + [s for f in a.folds for s in f]
    assert sorted(members) == sorted(ids)
    assert split_folds(ids, 10) != a
    for fold in range(5):
        tr, va, te = a.students("train", fold), a.students("valid", fold), a.students("test")
        assert not (tr & va) and not (tr & te) and not (va & te)
        assert tr | va | te == set(ids)


def test_too_few_students():
    with pytest.raises(DataError):
        split_folds(["a", "b", "c"], 0)


def test_stats_tiny():
    seqs = [
        StudentSequence(s, [InteractionRecord(s, q, (q % 2,), 1, q) for q in range(3)]) for s in ("a", "b", "c", "d", "e", "f")
    ]
    stats = compute_dataset_stats(prepare_sequences(seqs, seed=0))
    assert stats["students"] == 6 and stats["interactions"] == 18
    assert stats["questions"] == 3 and stats["kcs"] == 2
    assert stats["avg_interactions_per_question"] == 6.0
    assert stats["avg_kcs_per_question"] == 1.0
    assert stats["avg_questions_per_kc"] == 1.5


def test_stats_two_students_three_questions():
    # folds need six students; avg interactions per question only depends on the windows
    seqs = [StudentSequence(s, [InteractionRecord(s, q, (0,), 1, q) for q in range(3)]) for s in ("a", "b")]
    prepared = PreparedDataset(build_question_bank(seqs), window_sequences(seqs), FoldAssignment(0, [], []), ["a", "b"])
    assert compute_dataset_stats(prepared)["avg_interactions_per_question"] == 2.0


def test_prepared_round_trip_is_byte_identical(small_synth, tmp_path):
    src, _ = small_synth
    a = save_prepared(prepare(src / "interactions.csv", max_len=30, seed=5), tmp_path / "a")
    b = save_prepared(prepare(src / "interactions.csv", max_len=30, seed=5), tmp_path / "b")
    for name in ("bank.json", "folds.json", "windows.bin"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    back = load_prepared(a)
    orig = prepare(src / "interactions.csv", max_len=30, seed=5)
    assert back.bank.kc_map == orig.bank.kc_map
    assert back.folds == orig.folds
    assert len(back.windows) == len(orig.windows)
    for w1, w2 in zip(back.windows, orig.windows):
        assert w1.student_id == w2.student_id and w1.origin == w2.origin
        np.testing.assert_array_equal(w1.questions, w2.questions)
        np.testing.assert_array_equal(w1.responses, w2.responses)
        np.testing.assert_array_equal(w1.timestamps, w2.timestamps)


def test_windows_bin_layout(small_prepared, tmp_path):
    out = save_prepared(small_prepared, tmp_path / "p")
    blob = (out / "windows.bin").read_bytes()
    assert blob[:4] == b"QMKW"
    version, count = np.frombuffer(blob, "<u4", 2, 4)
    assert version == 1 and count == len(small_prepared.windows)
    total = sum(len(w) for w in small_prepared.windows)
    assert len(blob) == 12 + 16 * count + 13 * total


def test_truncated_windows_bin(small_prepared, tmp_path):
    out = save_prepared(small_prepared, tmp_path / "p")
    blob = (out / "windows.bin").read_bytes()
    (out / "windows.bin").write_bytes(blob[:-5])
    with pytest.raises(DataError, match="truncated"):
        load_prepared(out)


def test_missing_prepared_dir(tmp_path):
    with pytest.raises(DataError):
        load_prepared(tmp_path)


def test_every_record_in_one_window(small_synth, small_prepared):
    _, ds = small_synth
    assert sum(len(w) for w in small_prepared.windows) == len(ds.rows)
