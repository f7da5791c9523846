"""Within-speaker phone ABX discrimination.

Frames are compared with the angular distance ``arccos(cos(a, b)) / pi``
(evaluated as ``2 * atan2(|a^ - b^|, |a^ + b^|) / pi`` on unit vectors,
which is the same angle without the loss of precision near 0 and pi).
Token distances are DTW costs averaged along the alignment path, taking
the path with the lowest mean cost.
"""

from __future__ import annotations

import csv
import io
import zlib
from dataclasses import dataclass, field
from itertools import combinations

import numba
import numpy as np

from phoneprobe._fileio import atomic_write_text
from phoneprobe.dataio import AlignmentTable, DataError, FeatureArchive, PhoneToken

BOUNDARY = "#"
MODES = ("continuous", "onehot")
DEFAULT_MAX_PER_PHONE = 10


class AbxError(ValueError):
    pass


@numba.njit(cache=True)
def _angular(a, b):
    s = 0.0
    t = 0.0
    for k in range(a.shape[0]):
        u = a[k] - b[k]
        v = a[k] + b[k]
        s += u * u
        t += v * v
    return 2.0 * np.arctan2(np.sqrt(s), np.sqrt(t)) / np.pi


@numba.njit(cache=True)
def _min_mean_dtw(xn, yn):
    m = xn.shape[0]
    n = yn.shape[0]
    # best[i, j, L]: cheapest summed cost of a path from (0, 0) to (i, j) visiting L cells
    maxlen = m + n
    best = np.full((m, n, maxlen), np.inf)
    for i in range(m):
        for j in range(n):
            d = _angular(xn[i], yn[j])
            if i == 0 and j == 0:
                best[0, 0, 1] = d
                continue
            for L in range(2, i + j + 2):
                c = np.inf
                if i > 0 and best[i - 1, j, L - 1] < c:
                    c = best[i - 1, j, L - 1]
                if j > 0 and best[i, j - 1, L - 1] < c:
                    c = best[i, j - 1, L - 1]
                if i > 0 and j > 0 and best[i - 1, j - 1, L - 1] < c:
                    c = best[i - 1, j - 1, L - 1]
                best[i, j, L] = c + d
    out = np.inf
    for L in range(max(m, n), m + n):
        v = best[m - 1, n - 1, L] / L
        if v < out:
            out = v
    return out


@numba.njit(cache=True)
def _pairwise_dtw(frames, offsets):
    n = offsets.shape[0] - 1
    D = np.zeros((n, n))
    for p in range(n):
        for q in range(p + 1, n):
            v = _min_mean_dtw(frames[offsets[p]:offsets[p + 1]], frames[offsets[q]:offsets[q + 1]])
            D[p, q] = v
            D[q, p] = v
    return D


def _normalize(x: np.ndarray, what: str = "frame") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt((x * x).sum(axis=1))
    if np.any(norms == 0):
        raise AbxError(f"zero-norm {what}: angular distance undefined")
    return x / norms[:, None]


def frame_distance(a, b) -> float:
    """Angular distance between two frames, in [0, 1]."""
    xn = _normalize(np.atleast_2d(a))
    yn = _normalize(np.atleast_2d(b))
    return float(_angular(xn[0], yn[0]))


def dtw_distance(x, y) -> float:
    """Path-length-normalized DTW cost between two frame sequences.

    Steps are (i-1, j), (i, j-1) and (i-1, j-1); the returned value is the
    minimum over monotone paths of the mean angular frame distance along
    the path.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[1] != y.shape[1]:
        raise AbxError(f"dimension mismatch: {x.shape[1]} != {y.shape[1]}")
    if x.shape[0] < 1 or y.shape[0] < 1:
        raise AbxError("empty sequence")
    return float(_min_mean_dtw(_normalize(x), _normalize(y)))


@dataclass(frozen=True)
class Cell:
    """Minimal-pair cell: two phones said by one speaker in one context.

    ``items_a`` always holds at least 2 tokens so the (a, b) direction is
    scoreable; the (b, a) direction is scored too when ``items_b`` has 2.
    """

    phone_a: str
    phone_b: str
    speaker: str
    context: tuple[str, str]
    items_a: tuple[PhoneToken, ...]
    items_b: tuple[PhoneToken, ...]

    @property
    def pair(self) -> tuple[str, str]:
        return tuple(sorted((self.phone_a, self.phone_b)))


@dataclass
class AbxResult:
    error_pct: float
    n_cells: int
    n_triplets: int
    mode: str
    max_per_phone: int = DEFAULT_MAX_PER_PHONE
    seed: int = 0
    pair_scores: dict = field(default_factory=dict, repr=False)

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "error_pct": self.error_pct,
            "n_cells": self.n_cells,
            "n_triplets": self.n_triplets,
            "max_per_phone": self.max_per_phone,
            "seed": self.seed,
        }

    def pairs_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["phone_a", "phone_b", "error_pct", "n_cells"])
        for (a, b), (err, n) in sorted(self.pair_scores.items()):
            writer.writerow([a, b, repr(err), n])
        return buf.getvalue()

    def save_pairs(self, path) -> None:
        atomic_write_text(path, self.pairs_csv())


def token_contexts(alignments: AlignmentTable) -> dict[str, tuple[str, str]]:
    """(previous phone, next phone) of every token within its utterance."""
    out = {}
    for toks in alignments.by_utterance().values():
        for i, tok in enumerate(toks):
            prev = toks[i - 1].phone if i > 0 else BOUNDARY
            nxt = toks[i + 1].phone if i + 1 < len(toks) else BOUNDARY
            out[tok.token_id] = (prev, nxt)
    return out


def _cap(items: list, max_per_phone: int, seed: int, key: tuple) -> tuple:
    if max_per_phone is None or len(items) <= max_per_phone:
        return tuple(items)
    salt = zlib.crc32("\x1f".join(map(str, key)).encode("utf-8"))
    rng = np.random.default_rng([seed, salt])
    keep = np.sort(rng.choice(len(items), size=max_per_phone, replace=False))
    return tuple(items[i] for i in keep)


def _groups(alignments, max_per_phone, seed):
    contexts = token_contexts(alignments)
    groups: dict[tuple, dict[str, list]] = {}
    for tok in alignments.tokens:
        key = (tok.speaker, contexts[tok.token_id])
        groups.setdefault(key, {}).setdefault(tok.phone, []).append(tok)
    out = {}
    for (speaker, ctx), by_phone in sorted(groups.items()):
        out[(speaker, ctx)] = {
            ph: _cap(items, max_per_phone, seed, (speaker, *ctx, ph)) for ph, items in sorted(by_phone.items())
        }
    return out


def enumerate_cells(
    alignments: AlignmentTable,
    mode: str = "continuous",
    max_per_phone: int = DEFAULT_MAX_PER_PHONE,
    seed: int = 0,
) -> list[Cell]:
    """All within-speaker minimal-pair cells, sorted by (speaker, context, phones)."""
    if mode not in MODES:
        raise AbxError(f"mode must be one of {MODES}, got {mode!r}")
    cells = []
    for (speaker, ctx), by_phone in _groups(alignments, max_per_phone, seed).items():
        for p, q in combinations(sorted(by_phone), 2):
            ip, iq = by_phone[p], by_phone[q]
            if len(ip) >= 2:
                cells.append(Cell(p, q, speaker, ctx, ip, iq))
            elif len(iq) >= 2:
                cells.append(Cell(q, p, speaker, ctx, iq, ip))
    return cells


def _direction_score(D, a_idx, b_idx):
    """Mean ABX correctness with A, X from ``a_idx`` (A != X) and B from ``b_idx``."""
    d_ax = D[np.ix_(a_idx, a_idx)]  # [A, X]
    d_bx = D[np.ix_(b_idx, a_idx)]  # [B, X]
    cmp = d_ax[:, None, :] - d_bx[None, :, :]  # [A, B, X]
    score = np.where(cmp < 0, 1.0, np.where(cmp == 0, 0.5, 0.0))
    na = len(a_idx)
    valid = ~np.eye(na, dtype=bool)[:, None, :]
    n = int(valid.sum()) * len(b_idx)
    return float((score * valid).sum() / n), n


def _check_onehot(frames: np.ndarray, tok: PhoneToken) -> None:
    ok = np.all((frames == 0) | (frames == 1)) and np.all(frames.sum(axis=1) == 1)
    if not ok:
        raise AbxError(f"token {tok.token_id!r}: frames are not one-hot")


def score_abx(
    archive: FeatureArchive,
    alignments: AlignmentTable,
    mode: str = "continuous",
    max_per_phone: int = DEFAULT_MAX_PER_PHONE,
    seed: int = 0,
) -> AbxResult:
    """Within-speaker ABX error over all minimal-pair cells.

    Cell scores average the two directions when both are scoreable, then
    are averaged over contexts, speakers and finally phone pairs.
    """
    cells = enumerate_cells(alignments, mode, max_per_phone, seed)
    if not cells:
        raise AbxError("no ABX cells")
    by_group: dict[tuple, list[Cell]] = {}
    for cell in cells:
        by_group.setdefault((cell.speaker, cell.context), []).append(cell)

    pair_spk_ctx: dict[tuple, dict[str, list[float]]] = {}
    n_triplets = 0
    for (speaker, ctx), group_cells in by_group.items():
        toks = []
        index = {}
        for cell in group_cells:
            for tok in cell.items_a + cell.items_b:
                if tok.token_id not in index:
                    index[tok.token_id] = len(toks)
                    toks.append(tok)
        mats = []
        for tok in toks:
            if tok.utterance_id not in archive:
                raise DataError(f"token {tok.token_id!r}: utterance {tok.utterance_id!r} not in archive")
            frames = archive[tok.utterance_id][tok.start_frame:tok.end_frame]
            if frames.shape[0] != tok.n_frames:
                raise DataError(f"token {tok.token_id!r}: span exceeds utterance")
            if mode == "onehot":
                _check_onehot(frames, tok)
            mats.append(_normalize(frames, f"frame in token {tok.token_id!r}"))
        offsets = np.concatenate([[0], np.cumsum([m.shape[0] for m in mats])]).astype(np.int64)
        D = _pairwise_dtw(np.concatenate(mats, axis=0), offsets)
        for cell in group_cells:
            a_idx = [index[t.token_id] for t in cell.items_a]
            b_idx = [index[t.token_id] for t in cell.items_b]
            s_ab, n_ab = _direction_score(D, a_idx, b_idx)
            n_triplets += n_ab
            if len(b_idx) >= 2:
                s_ba, n_ba = _direction_score(D, b_idx, a_idx)
                n_triplets += n_ba
                s = 0.5 * (s_ab + s_ba)
            else:
                s = s_ab
            pair_spk_ctx.setdefault(cell.pair, {}).setdefault(speaker, []).append(s)

    pair_scores = {}
    pair_acc = []
    for pair in sorted(pair_spk_ctx):
        by_spk = pair_spk_ctx[pair]
        acc = float(np.mean([np.mean(v) for _, v in sorted(by_spk.items())]))
        pair_acc.append(acc)
        pair_scores[pair] = (100.0 * (1.0 - acc), sum(len(v) for v in by_spk.values()))
    overall = float(np.mean(pair_acc))
    return AbxResult(
        error_pct=100.0 * (1.0 - overall),
        n_cells=len(cells),
        n_triplets=n_triplets,
        mode=mode,
        max_per_phone=max_per_phone,
        seed=seed,
        pair_scores=pair_scores,
    )
