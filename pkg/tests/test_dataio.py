import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import make_token
from phoneprobe.dataio import (
    ALIGNMENT_COLUMNS,
    AlignmentTable,
    DataError,
    FeatureArchive,
    load_alignments,
    load_archive,
    save_alignments,
    save_archive,
    seconds_to_frames,
)


def write_manifest(root, dim, entries, rate=100.0):
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(json.dumps({"dim": dim, "frame_rate_hz": rate, "utterances": entries}))


def test_load_one_utterance_80_bytes(tmp_path):
    values = np.arange(20, dtype="<f4")
    (tmp_path / "u.f32").write_bytes(values.tobytes())
    write_manifest(tmp_path, 4, [{"id": "u", "file": "u.f32", "n_frames": 5}])
    arch = load_archive(tmp_path)
    assert len(arch) == 1
    assert arch["u"].shape == (5, 4)
    assert np.array_equal(arch["u"].ravel(), values)


def test_byte_length_mismatch(tmp_path):
    (tmp_path / "u.f32").write_bytes(b"\0" * 79)
    write_manifest(tmp_path, 4, [{"id": "u", "file": "u.f32", "n_frames": 5}])
    with pytest.raises(DataError, match="byte-length mismatch") as exc:
        load_archive(tmp_path)
    assert "'u'" in str(exc.value)


def test_missing_file_and_manifest(tmp_path):
    with pytest.raises(DataError, match="missing manifest"):
        load_archive(tmp_path)
    write_manifest(tmp_path, 4, [{"id": "gone", "file": "gone.f32", "n_frames": 1}])
    with pytest.raises(DataError, match="'gone'.*missing file"):
        load_archive(tmp_path)


def test_non_finite_rejected(tmp_path):
    values = np.zeros(8, dtype="<f4")
    values[3] = np.nan
    (tmp_path / "u.f32").write_bytes(values.tobytes())
    write_manifest(tmp_path, 4, [{"id": "u", "file": "u.f32", "n_frames": 2}])
    with pytest.raises(DataError, match="'u'.*non-finite"):
        load_archive(tmp_path)


def test_dim_mismatch_in_constructor():
    with pytest.raises(DataError, match="dim mismatch"):
        FeatureArchive({"u": np.zeros((2, 3))}, 4, 100.0)


def test_empty_archive_manifest(tmp_path):
    save_archive(FeatureArchive({}, 8, 100.0), tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["utterances"] == []
    assert len(load_archive(tmp_path)) == 0


def test_one_utterance_layout(tmp_path, tiny_archive):
    save_archive(FeatureArchive({"u1": tiny_archive["u1"]}, 4, 100.0), tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["000000.f32", "manifest.json"]


def test_save_load_save_identical_bytes(tmp_path, rng):
    utts = {f"u{i}": rng.normal(size=(int(rng.integers(1, 9)), 6)) for i in range(5)}
    arch = FeatureArchive(utts, 6, 100.0)
    save_archive(arch, tmp_path / "a")
    again = load_archive(tmp_path / "a")
    assert again == arch
    save_archive(again, tmp_path / "b")
    for name in ["manifest.json"] + [f"{i:06d}.f32" for i in range(5)]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


matrices = st.lists(
    hnp.arrays(
        np.float32,
        st.tuples(st.integers(1, 6), st.just(3)),
        elements=st.floats(-1e6, 1e6, width=32),
    ),
    max_size=4,
)


@settings(max_examples=30, deadline=None)
@given(matrices)
def test_round_trip_property(tmp_path_factory, mats):
    root = tmp_path_factory.mktemp("rt")
    arch = FeatureArchive({f"utt-{i}": m for i, m in enumerate(mats)}, 3, 50.0)
    save_archive(arch, root)
    back = load_archive(root)
    assert back == arch
    for u in arch.utterances:
        assert back[u].tobytes() == arch[u].tobytes()


def write_csv(path, rows):
    lines = [",".join(ALIGNMENT_COLUMNS)]
    lines += [",".join(map(str, r)) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def row(tid, utt, phone, cls, start, end):
    return (tid, utt, phone, cls, start, end, "spk", "female", "EN")


def test_alignment_span_out_of_range(tmp_path, tiny_archive):
    write_csv(tmp_path / "a.csv", [row("t0", "u1", "a", "vowel", 0, 6)])
    with pytest.raises(DataError, match="span out of range"):
        load_alignments(tmp_path / "a.csv", tiny_archive)


def test_alignment_two_adjacent_rows(tmp_path, tiny_archive):
    write_csv(tmp_path / "a.csv", [row("t0", "u1", "a", "vowel", 0, 2), row("t1", "u1", "b", "plosive", 2, 4)])
    table = load_alignments(tmp_path / "a.csv", tiny_archive)
    assert len(table) == 2
    assert table.label_vocabularies["phone"] == ("a", "b")


def test_alignment_inconsistent_phone_class(tmp_path, tiny_archive):
    write_csv(tmp_path / "a.csv", [row("t0", "u1", "a", "vowel", 0, 2), row("t1", "u2", "a", "nasal", 0, 2)])
    with pytest.raises(DataError, match="phone 'a'"):
        load_alignments(tmp_path / "a.csv", tiny_archive)


@pytest.mark.parametrize(
    "rows, message",
    [
        ([row("t0", "zz", "a", "vowel", 0, 1)], "unknown utterance"),
        ([row("t0", "u1", "a", "vowel", 0, 3), row("t1", "u1", "b", "plosive", 2, 4)], "overlaps"),
        ([row("t0", "u1", "a", "vowel", 2, 2)], "invalid span"),
        ([row("t0", "u1", "a", "vowel", 0, 1), row("t0", "u1", "b", "plosive", 1, 2)], "duplicate token_id"),
        ([row("t0", "u1", "a", "vowel", "x", 1)], "non-integer"),
    ],
)
def test_alignment_errors(tmp_path, tiny_archive, rows, message):
    write_csv(tmp_path / "a.csv", rows)
    with pytest.raises(DataError, match=message):
        load_alignments(tmp_path / "a.csv", tiny_archive)


def test_bad_header(tmp_path, tiny_archive):
    (tmp_path / "a.csv").write_text("token_id,utterance_id\nt0,u1\n")
    with pytest.raises(DataError, match="header"):
        load_alignments(tmp_path / "a.csv", tiny_archive)


def test_token_count_equals_rows_and_csv_round_trip(tmp_path, small_corpus):
    archive, table = small_corpus
    save_alignments(table, tmp_path / "al.csv")
    n_rows = len((tmp_path / "al.csv").read_text().strip().splitlines()) - 1
    back = load_alignments(tmp_path / "al.csv", archive)
    assert len(back) == n_rows == len(table)
    assert back.tokens == table.tokens
    for kind, vocab in back.label_vocabularies.items():
        assert set(vocab) == {t.label(kind) for t in back.tokens}


def test_vocabularies_sorted(tiny_table):
    assert tiny_table.label_vocabularies["phone"] == ("a", "b")
    assert tiny_table.label_vocabularies["gender"] == ("female",)


def test_matrices_are_read_only(tiny_archive):
    with pytest.raises(ValueError):
        tiny_archive["u1"][0, 0] = 1.0


def test_seconds_to_frames():
    assert seconds_to_frames(0.123, 0.201, 100.0) == (12, 21)
    assert seconds_to_frames(0.0, 0.05, 100.0) == (0, 5)


def test_table_without_archive_skips_range_checks():
    table = AlignmentTable.from_tokens([make_token("x", 0, "a", 0, 100)])
    assert len(table) == 1
