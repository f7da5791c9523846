"""Feature archives and phone alignment tables.

A feature archive is a directory holding ``manifest.json`` plus one raw
little-endian float32 file per utterance (row-major, ``n_frames x dim``).
Alignments are a UTF-8 CSV with one row per phone token, spans given as
frame indices with an exclusive end.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from phoneprobe._fileio import atomic_write_bytes, atomic_write_text, read_json, write_json

MANIFEST = "manifest.json"
FLOAT_DTYPE = np.dtype("<f4")
LABEL_KINDS = ("phone", "phone_class", "speaker", "gender", "language")
PROBE_LABELS = ("phone_class", "gender", "language")
ALIGNMENT_COLUMNS = (
    "token_id",
    "utterance_id",
    "phone",
    "phone_class",
    "start_frame",
    "end_frame",
    "speaker",
    "gender",
    "language",
)


class DataError(ValueError):
    """Malformed archive, alignment or derived file."""


@dataclass(frozen=True)
class PhoneToken:
    token_id: str
    utterance_id: str
    phone: str
    phone_class: str
    start_frame: int
    end_frame: int
    speaker: str
    gender: str
    language: str

    @property
    def n_frames(self) -> int:
        return self.end_frame - self.start_frame

    def label(self, kind: str) -> str:
        if kind not in LABEL_KINDS:
            raise ValueError(f"unknown label kind {kind!r}")
        return getattr(self, kind)


class FeatureArchive:
    """Per-utterance ``n_frames x dim`` float32 matrices at a fixed frame rate.

    Matrices are converted to float32 and frozen (read-only) on construction.
    """

    def __init__(self, utterances: Mapping[str, np.ndarray], dim: int, frame_rate_hz: float):
        dim = int(dim)
        frame_rate_hz = float(frame_rate_hz)
        if dim < 1:
            raise DataError(f"dim must be positive, got {dim}")
        if not (frame_rate_hz > 0 and math.isfinite(frame_rate_hz)):
            raise DataError(f"frame_rate_hz must be positive, got {frame_rate_hz}")
        frozen = {}
        for utt_id, values in utterances.items():
            arr = np.array(values, dtype=np.float32, copy=True, order="C")
            if arr.ndim != 2:
                raise DataError(f"utterance {utt_id!r}: expected a 2-D matrix, got shape {arr.shape}")
            if arr.shape[0] < 1:
                raise DataError(f"utterance {utt_id!r}: no frames")
            if arr.shape[1] != dim:
                raise DataError(f"utterance {utt_id!r}: dim mismatch ({arr.shape[1]} != {dim})")
            if not np.isfinite(arr).all():
                raise DataError(f"utterance {utt_id!r}: non-finite value")
            arr.setflags(write=False)
            frozen[str(utt_id)] = arr
        self._utterances = frozen
        self.dim = dim
        self.frame_rate_hz = frame_rate_hz

    @property
    def utterances(self) -> Mapping[str, np.ndarray]:
        return self._utterances

    def __getitem__(self, utt_id: str) -> np.ndarray:
        return self._utterances[utt_id]

    def __contains__(self, utt_id) -> bool:
        return utt_id in self._utterances

    def __len__(self) -> int:
        return len(self._utterances)

    def n_frames(self, utt_id: str) -> int:
        return self._utterances[utt_id].shape[0]

    @property
    def total_frames(self) -> int:
        return sum(m.shape[0] for m in self._utterances.values())

    def stacked(self) -> np.ndarray:
        """All frames, utterances concatenated in insertion order."""
        if not self._utterances:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.concatenate(list(self._utterances.values()), axis=0)

    def map(self, fn, dim: int | None = None) -> "FeatureArchive":
        """New archive with ``fn`` applied to every matrix."""
        return FeatureArchive(
            {u: fn(m) for u, m in self._utterances.items()},
            self.dim if dim is None else dim,
            self.frame_rate_hz,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureArchive):
            return NotImplemented
        if (self.dim, self.frame_rate_hz) != (other.dim, other.frame_rate_hz):
            return False
        if list(self._utterances) != list(other._utterances):
            return False
        return all(np.array_equal(m, other[u]) for u, m in self._utterances.items())

    def __repr__(self) -> str:
        return (
            f"FeatureArchive(n_utterances={len(self)}, dim={self.dim}, "
            f"frame_rate_hz={self.frame_rate_hz}, total_frames={self.total_frames})"
        )


@dataclass(frozen=True)
class AlignmentTable:
    tokens: tuple[PhoneToken, ...]
    label_vocabularies: dict[str, tuple[str, ...]] = field(default_factory=dict)

    @classmethod
    def from_tokens(cls, tokens: Iterable[PhoneToken], archive: FeatureArchive | None = None) -> "AlignmentTable":
        """Validate ``tokens`` (optionally against ``archive``) and compute vocabularies."""
        tokens = tuple(tokens)
        validate_tokens(tokens, archive)
        vocab = {kind: tuple(sorted({t.label(kind) for t in tokens})) for kind in LABEL_KINDS}
        return cls(tokens, vocab)

    def __len__(self) -> int:
        return len(self.tokens)

    def labels(self, kind: str) -> np.ndarray:
        return np.array([t.label(kind) for t in self.tokens], dtype=object)

    def by_utterance(self) -> dict[str, list[PhoneToken]]:
        groups: dict[str, list[PhoneToken]] = {}
        for tok in self.tokens:
            groups.setdefault(tok.utterance_id, []).append(tok)
        return groups


def validate_tokens(tokens: tuple[PhoneToken, ...], archive: FeatureArchive | None = None) -> None:
    seen_ids = set()
    phone_class: dict[str, str] = {}
    last_end: dict[str, tuple[int, str]] = {}
    for tok in tokens:
        if tok.token_id in seen_ids:
            raise DataError(f"duplicate token_id {tok.token_id!r}")
        seen_ids.add(tok.token_id)
        if not (0 <= tok.start_frame < tok.end_frame):
            raise DataError(
                f"token {tok.token_id!r}: invalid span [{tok.start_frame}, {tok.end_frame})"
            )
        if archive is not None:
            if tok.utterance_id not in archive:
                raise DataError(f"token {tok.token_id!r}: unknown utterance id {tok.utterance_id!r}")
            n = archive.n_frames(tok.utterance_id)
            if tok.end_frame > n:
                raise DataError(
                    f"token {tok.token_id!r}: span out of range "
                    f"([{tok.start_frame}, {tok.end_frame}) for {n}-frame utterance {tok.utterance_id!r})"
                )
        prev = last_end.get(tok.utterance_id)
        if prev is not None and tok.start_frame < prev[0]:
            raise DataError(
                f"token {tok.token_id!r}: overlaps or precedes token {prev[1]!r} "
                f"in utterance {tok.utterance_id!r}"
            )
        last_end[tok.utterance_id] = (tok.end_frame, tok.token_id)
        known = phone_class.setdefault(tok.phone, tok.phone_class)
        if known != tok.phone_class:
            raise DataError(
                f"token {tok.token_id!r}: phone {tok.phone!r} mapped to both "
                f"{known!r} and {tok.phone_class!r}"
            )


def seconds_to_frames(start_s: float, end_s: float, frame_rate_hz: float) -> tuple[int, int]:
    """Frame span covering ``[start_s, end_s)``: floor on the start, ceil on the end."""
    return math.floor(start_s * frame_rate_hz), math.ceil(end_s * frame_rate_hz)


def save_archive(archive: FeatureArchive, root_path) -> None:
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (utt_id, values) in enumerate(archive.utterances.items()):
        fname = f"{i:06d}.f32"
        atomic_write_bytes(root / fname, values.astype(FLOAT_DTYPE, copy=False).tobytes(order="C"))
        entries.append({"id": utt_id, "file": fname, "n_frames": int(values.shape[0])})
    write_json(
        root / MANIFEST,
        {"dim": archive.dim, "frame_rate_hz": archive.frame_rate_hz, "utterances": entries},
    )


def load_archive(root_path) -> FeatureArchive:
    root = Path(root_path)
    manifest_path = root / MANIFEST
    if not manifest_path.is_file():
        raise DataError(f"missing manifest: {manifest_path}")
    try:
        manifest = read_json(manifest_path)
        dim = int(manifest["dim"])
        rate = float(manifest["frame_rate_hz"])
        entries = manifest["utterances"]
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"malformed manifest {manifest_path}: {exc}") from exc
    if dim < 1:
        raise DataError(f"manifest dim must be positive, got {dim}")
    utterances = {}
    for entry in entries:
        try:
            utt_id, fname, n_frames = str(entry["id"]), str(entry["file"]), int(entry["n_frames"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed manifest entry {entry!r}") from exc
        if utt_id in utterances:
            raise DataError(f"utterance {utt_id!r}: duplicate id in manifest")
        path = root / fname
        if not path.is_file():
            raise DataError(f"utterance {utt_id!r}: missing file {path}")
        raw = path.read_bytes()
        expected = n_frames * dim * FLOAT_DTYPE.itemsize
        if len(raw) != expected:
            raise DataError(
                f"utterance {utt_id!r}: byte-length mismatch ({len(raw)} bytes, expected {expected})"
            )
        utterances[utt_id] = np.frombuffer(raw, dtype=FLOAT_DTYPE).reshape(n_frames, dim)
    return FeatureArchive(utterances, dim, rate)


def _parse_row(row: dict, lineno: int) -> PhoneToken:
    try:
        values = {name: row[name] for name in ALIGNMENT_COLUMNS}
    except KeyError as exc:
        raise DataError(f"line {lineno}: missing column {exc}") from exc
    if any(v is None for v in values.values()):
        raise DataError(f"line {lineno}: too few fields")
    try:
        values["start_frame"] = int(values["start_frame"])
        values["end_frame"] = int(values["end_frame"])
    except ValueError as exc:
        raise DataError(f"line {lineno}: non-integer frame index") from exc
    return PhoneToken(**values)


def read_tokens_csv(path) -> list[PhoneToken]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing alignment file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != ALIGNMENT_COLUMNS:
            raise DataError(f"{path}: header must be {','.join(ALIGNMENT_COLUMNS)}")
        return [_parse_row(row, i + 2) for i, row in enumerate(reader)]


def tokens_to_csv(tokens: Iterable[PhoneToken]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ALIGNMENT_COLUMNS)
    names = [f.name for f in fields(PhoneToken)]
    for tok in tokens:
        writer.writerow([getattr(tok, n) for n in names])
    return buf.getvalue()


def load_alignments(path, archive: FeatureArchive | None) -> AlignmentTable:
    """Read and validate an alignment CSV.

    When ``archive`` is given every span is checked against its utterance
    length.
    """
    return AlignmentTable.from_tokens(read_tokens_csv(path), archive)


def save_alignments(table: AlignmentTable | Iterable[PhoneToken], path) -> None:
    tokens = table.tokens if isinstance(table, AlignmentTable) else table
    atomic_write_text(path, tokens_to_csv(tokens))
