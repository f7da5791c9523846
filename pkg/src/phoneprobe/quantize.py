"""k-means quantization of frame features into discrete units."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from phoneprobe._fileio import atomic_write_bytes, read_json, write_json
from phoneprobe.dataio import DataError, FeatureArchive

DEFAULT_RESTARTS = 10
MAX_ITER = 300
_CHUNK = 4096


class QuantizeError(ValueError):
    pass


@dataclass
class KMeansModel:
    centroids: np.ndarray
    k: int
    inertia: float
    seed: int
    n_iters_run: int
    n_restarts: int = DEFAULT_RESTARTS
    max_frames: int | None = None
    inertia_history: list[float] = field(default_factory=list, repr=False)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass
class ClusterAssignment:
    ids: dict[str, np.ndarray]
    k: int
    frame_rate_hz: float = 100.0

    def stacked(self) -> np.ndarray:
        if not self.ids:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(list(self.ids.values()))


def nearest_centroid(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid (squared Euclidean), lowest index on ties.

    Distances come from the ``|x|^2 - 2 x.c + |c|^2`` expansion; rows whose
    best candidates fall within rounding slack are re-scored exactly so the
    tie rule holds.
    """
    X = np.asarray(X, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    c2 = np.einsum("ij,ij->i", C, C)
    out = np.empty(X.shape[0], dtype=np.int64)
    for lo in range(0, X.shape[0], _CHUNK):
        x = X[lo:lo + _CHUNK]
        x2 = np.einsum("ij,ij->i", x, x)
        D = x2[:, None] - 2.0 * (x @ C.T) + c2[None, :]
        best = D.min(axis=1)
        slack = 1e-9 * (x2 + c2.max()) + 1e-12
        close = D <= (best + slack)[:, None]
        labels = np.argmax(close, axis=1)
        ambiguous = np.flatnonzero(close.sum(axis=1) > 1)
        for r in ambiguous:
            exact = ((C - x[r]) ** 2).sum(axis=1)
            labels[r] = int(np.argmin(exact))
        out[lo:lo + _CHUNK] = labels
    return out


def _sse(X, C, labels) -> float:
    diff = X - C[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def _kmeans_pp(X, k, rng) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise QuantizeError("k-means++ ran out of distinct points")
        idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
        idx = min(idx, n - 1)
        while d2[idx] == 0:  # never pick a point already chosen
            idx = (idx + 1) % n
        centers[j] = X[idx]
        d2 = np.minimum(d2, ((X - centers[j]) ** 2).sum(axis=1))
    return centers


def _update(X, labels, k) -> np.ndarray:
    n = X.shape[0]
    onehot = sparse.csr_matrix((np.ones(n), (labels, np.arange(n))), shape=(k, n))
    counts = np.bincount(labels, minlength=k)
    sums = onehot @ X
    C = np.empty_like(sums)
    nonempty = counts > 0
    C[nonempty] = sums[nonempty] / counts[nonempty, None]
    for j in np.flatnonzero(~nonempty):
        # move the point farthest from the centre of the largest cluster
        big = int(np.argmax(counts))
        members = np.flatnonzero(labels == big)
        far = members[int(np.argmax(((X[members] - C[big]) ** 2).sum(axis=1)))]
        C[j] = X[far]
        labels[far] = j
        counts[big] -= 1
        counts[j] = 1
    return C


def _lloyd(X, C, max_iter):
    labels = None
    history = []
    it = 0
    while True:
        new_labels = nearest_centroid(X, C)
        inertia = _sse(X, C, new_labels)
        if history and inertia > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"Lloyd inertia increased: {history[-1]} -> {inertia}")
        history.append(inertia)
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
        if it == max_iter:
            break
        it += 1
        C = _update(X, labels.copy(), C.shape[0])
    return C, new_labels, inertia, it, history


def fit_kmeans(
    archive: FeatureArchive,
    k: int,
    seed: int = 0,
    n_restarts: int = DEFAULT_RESTARTS,
    *,
    max_iter: int = MAX_ITER,
    max_frames: int | None = None,
) -> KMeansModel:
    """Lloyd's algorithm from k-means++ seeding, best of ``n_restarts``.

    ``max_frames`` fits on a seeded uniform subsample of the frames.
    """
    if k < 1:
        raise QuantizeError(f"k must be positive, got {k}")
    if n_restarts < 1:
        raise QuantizeError("n_restarts must be >= 1")
    X = archive.stacked().astype(np.float64)
    rng = np.random.default_rng(seed)
    if max_frames is not None and X.shape[0] > max_frames:
        X = X[np.sort(rng.choice(X.shape[0], size=max_frames, replace=False))]
    if X.shape[0] < k:
        raise QuantizeError(f"{X.shape[0]} frames available for k={k}")
    n_distinct = np.unique(X, axis=0).shape[0]
    if n_distinct < k:
        raise QuantizeError(f"only {n_distinct} distinct frames for k={k}")
    best = None
    for child in np.random.SeedSequence(seed).spawn(n_restarts):
        init = _kmeans_pp(X, k, np.random.default_rng(child))
        C, _, inertia, n_it, history = _lloyd(X, init, max_iter)
        if best is None or inertia < best[1]:
            best = (C, inertia, n_it, history)
    C, inertia, n_it, history = best
    return KMeansModel(
        centroids=C,
        k=k,
        inertia=inertia,
        seed=seed,
        n_iters_run=n_it,
        n_restarts=n_restarts,
        max_frames=max_frames,
        inertia_history=history,
    )


def assign(model: KMeansModel, archive: FeatureArchive) -> ClusterAssignment:
    if archive.dim != model.dim:
        raise QuantizeError(f"archive dim {archive.dim} != model dim {model.dim}")
    ids = {u: nearest_centroid(m, model.centroids) for u, m in archive.utterances.items()}
    return ClusterAssignment(ids, model.k, archive.frame_rate_hz)


def assignment_inertia(model: KMeansModel, archive: FeatureArchive, assignment: ClusterAssignment) -> float:
    return sum(
        _sse(archive[u].astype(np.float64), model.centroids, ids) for u, ids in assignment.ids.items()
    )


def onehot_frames(assignment: ClusterAssignment) -> FeatureArchive:
    """One-hot rows of width ``k`` for every frame."""
    eye = np.eye(assignment.k, dtype=np.float32)
    return FeatureArchive({u: eye[ids] for u, ids in assignment.ids.items()}, assignment.k, assignment.frame_rate_hz)


def save_kmeans(model: KMeansModel, root_path) -> None:
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(root / "centroids.f32", model.centroids.astype("<f4").tobytes())
    write_json(
        root / "kmeans.json",
        {
            "k": model.k,
            "dim": model.dim,
            "seed": model.seed,
            "n_restarts": model.n_restarts,
            "inertia": model.inertia,
            "n_iters_run": model.n_iters_run,
            "max_iter": MAX_ITER,
            "max_frames": model.max_frames,
            "init": "k-means++",
            "metric": "squared_euclidean",
        },
    )


def load_kmeans(root_path) -> KMeansModel:
    root = Path(root_path)
    if not (root / "kmeans.json").is_file():
        raise DataError(f"missing kmeans.json in {root}")
    meta = read_json(root / "kmeans.json")
    raw = (root / "centroids.f32").read_bytes()
    k, dim = int(meta["k"]), int(meta["dim"])
    if len(raw) != k * dim * 4:
        raise DataError(f"{root}: centroids.f32 byte-length mismatch")
    C = np.frombuffer(raw, dtype="<f4").reshape(k, dim).astype(np.float64)
    return KMeansModel(
        centroids=C,
        k=k,
        inertia=float(meta["inertia"]),
        seed=int(meta["seed"]),
        n_iters_run=int(meta["n_iters_run"]),
        n_restarts=int(meta["n_restarts"]),
        max_frames=meta.get("max_frames"),
    )


def save_assignment(assignment: ClusterAssignment, root_path) -> None:
    if assignment.k > np.iinfo(np.uint16).max + 1:
        raise QuantizeError("k too large for uint16 assignment files")
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (u, ids) in enumerate(assignment.ids.items()):
        fname = f"{i:06d}.u16"
        atomic_write_bytes(root / fname, ids.astype("<u2").tobytes())
        entries.append({"id": u, "file": fname, "n_frames": int(len(ids))})
    write_json(
        root / "assign.json",
        {"k": assignment.k, "frame_rate_hz": assignment.frame_rate_hz, "utterances": entries},
    )


def load_assignment(root_path) -> ClusterAssignment:
    root = Path(root_path)
    if not (root / "assign.json").is_file():
        raise DataError(f"missing assign.json in {root}")
    meta = read_json(root / "assign.json")
    k = int(meta["k"])
    ids = {}
    for entry in meta["utterances"]:
        raw = (root / entry["file"]).read_bytes()
        if len(raw) != 2 * int(entry["n_frames"]):
            raise DataError(f"utterance {entry['id']!r}: byte-length mismatch")
        seq = np.frombuffer(raw, dtype="<u2").astype(np.int64)
        if seq.size and seq.max() >= k:
            raise DataError(f"utterance {entry['id']!r}: cluster id out of range")
        ids[entry["id"]] = seq
    return ClusterAssignment(ids, k, float(meta["frame_rate_hz"]))
