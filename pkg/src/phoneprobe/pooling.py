"""Phone-level pooling of frame representations."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from phoneprobe._fileio import atomic_write_bytes, atomic_write_text, read_json, write_json
from phoneprobe.dataio import (
    AlignmentTable,
    DataError,
    FeatureArchive,
    PhoneToken,
    read_tokens_csv,
    tokens_to_csv,
)


@dataclass(frozen=True)
class PooledDataset:
    """One vector per phone token; ``vectors[i]`` belongs to ``tokens[i]``.

    ``k`` is set for one-hot pooled data (``source == "onehot"``) and is
    None for continuous features.
    """

    vectors: np.ndarray
    tokens: tuple[PhoneToken, ...]
    source: str = "continuous"
    k: int | None = None

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.tokens):
            raise DataError(
                f"vectors shape {self.vectors.shape} does not match {len(self.tokens)} tokens"
            )
        if self.source not in ("continuous", "onehot"):
            raise DataError(f"unknown source {self.source!r}")
        if self.source == "onehot" and self.k != self.vectors.shape[1]:
            raise DataError(f"onehot dataset needs k == dim, got k={self.k}, dim={self.vectors.shape[1]}")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.tokens)

    def labels(self, kind: str) -> np.ndarray:
        return np.array([t.label(kind) for t in self.tokens], dtype=object)

    def subset(self, rows) -> "PooledDataset":
        rows = np.asarray(rows, dtype=np.intp)
        return PooledDataset(self.vectors[rows], tuple(self.tokens[i] for i in rows), self.source, self.k)


def _token_frames(archive: FeatureArchive, tok: PhoneToken) -> np.ndarray:
    return archive[tok.utterance_id][tok.start_frame:tok.end_frame]


def mean_pool(archive: FeatureArchive, alignments: AlignmentTable) -> PooledDataset:
    """Average each token's frames ``[start_frame, end_frame)``.

    Sums are accumulated in float64 with ``math.fsum`` per column so the
    result does not depend on memory layout or chunking.
    """
    out = np.empty((len(alignments), archive.dim), dtype=np.float64)
    for i, tok in enumerate(alignments.tokens):
        frames = _token_frames(archive, tok).astype(np.float64)
        out[i] = [math.fsum(col) for col in frames.T]
        out[i] /= frames.shape[0]
    return PooledDataset(out, alignments.tokens, "continuous", None)


def one_hot_pool(assignments, alignments: AlignmentTable) -> PooledDataset:
    """Normalized cluster-id histogram over each token's frames."""
    k = assignments.k
    out = np.zeros((len(alignments), k), dtype=np.float64)
    for i, tok in enumerate(alignments.tokens):
        ids = assignments.ids.get(tok.utterance_id)
        if ids is None or tok.end_frame > len(ids):
            raise DataError(f"token {tok.token_id!r}: frames not covered by cluster assignment")
        counts = np.bincount(ids[tok.start_frame:tok.end_frame], minlength=k)
        out[i] = counts / tok.n_frames
    return PooledDataset(out, alignments.tokens, "onehot", k)


def save_pooled(data: PooledDataset, root_path) -> None:
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(root / "vectors.f32", data.vectors.astype("<f4").tobytes(order="C"))
    atomic_write_text(root / "tokens.csv", tokens_to_csv(data.tokens))
    meta = {"dim": data.dim, "source": data.source, "n_tokens": len(data)}
    if data.k is not None:
        meta["k"] = data.k
    write_json(root / "pooled.json", meta)


def load_pooled(root_path) -> PooledDataset:
    """Read a pooled dataset directory (vectors come back as float64)."""
    root = Path(root_path)
    if not (root / "pooled.json").is_file():
        raise DataError(f"missing pooled.json in {root}")
    meta = read_json(root / "pooled.json")
    tokens = tuple(read_tokens_csv(root / "tokens.csv"))
    raw = (root / "vectors.f32").read_bytes()
    dim = int(meta["dim"])
    if len(raw) != len(tokens) * dim * 4:
        raise DataError(f"{root}: vectors.f32 byte-length mismatch")
    vectors = np.frombuffer(raw, dtype="<f4").reshape(len(tokens), dim).astype(np.float64)
    return PooledDataset(vectors, tokens, meta["source"], meta.get("k"))
