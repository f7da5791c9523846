"""Exact t-SNE maps of pooled phone vectors, with CSV/SVG export."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from html import escape
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist, squareform

from phoneprobe._fileio import atomic_write_text
from phoneprobe.dataio import PROBE_LABELS, PhoneToken
from phoneprobe.pooling import PooledDataset

DEFAULT_SUBSET = 6000
DEFAULT_PERPLEXITY = 30.0
LEARNING_RATE = 200.0
EXAGGERATION = 12.0
EXAGGERATION_ITERS = 250
MOMENTUM_EARLY = 0.5
MOMENTUM_LATE = 0.8
INIT_SIGMA = 1e-4
MIN_GAIN = 0.01
PERPLEXITY_TOL = 1e-4

PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


class EmbedError(ValueError):
    pass


@dataclass
class Embedding2D:
    coords: np.ndarray
    kl_initial: float
    kl_final: float
    perplexity: float
    seed: int
    rows: np.ndarray = field(repr=False, default=None)
    n_iters: int = 1000

    def params(self) -> dict:
        return {
            "perplexity": self.perplexity,
            "seed": self.seed,
            "n_iters": self.n_iters,
            "n_points": int(self.coords.shape[0]),
            "learning_rate": LEARNING_RATE,
            "early_exaggeration": EXAGGERATION,
            "exaggeration_iters": EXAGGERATION_ITERS,
            "momentum": [MOMENTUM_EARLY, MOMENTUM_LATE],
            "init_sigma": INIT_SIGMA,
            "min_gain": MIN_GAIN,
            "kl_initial": self.kl_initial,
            "kl_final": self.kl_final,
        }


def _sq_distances(X: np.ndarray) -> np.ndarray:
    # built from coordinate differences, so an exact translation leaves D bit-identical
    return squareform(pdist(X, "sqeuclidean"))


def _row_entropy(D, beta):
    """Shannon entropy (nats) and normalized rows of exp(-beta * D) off the diagonal."""
    P = np.exp(-D * beta[:, None])
    sums = P.sum(axis=1)
    P /= sums[:, None]
    H = np.log(sums) + beta * (np.where(P > 0, D, 0.0) * P).sum(axis=1)
    return H, P


def conditional_affinities(X: np.ndarray, perplexity: float, tol: float = PERPLEXITY_TOL, max_steps: int = 200):
    """Row-stochastic Gaussian affinities with per-point bandwidths.

    Each precision is bisected (in log space) until the row perplexity
    ``exp(H)`` is within ``tol`` of the target. Returns ``(P, perplexities)``.
    """
    n = X.shape[0]
    D = _sq_distances(np.asarray(X, dtype=np.float64))
    # shift each row by its nearest-neighbour distance; P is invariant to it
    off = ~np.eye(n, dtype=bool)
    Dm = np.where(off, D, np.inf)
    Dm = Dm - Dm.min(axis=1, keepdims=True)
    target = math.log(perplexity)
    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    log_beta = np.zeros(n)
    scale = np.median(Dm[off].reshape(n, n - 1), axis=1)
    log_beta -= np.log(np.where(scale > 0, scale, 1.0))
    P = np.zeros((n, n))
    perp = np.zeros(n)
    active = np.arange(n)
    for _ in range(max_steps):
        H, Pa = _row_entropy(Dm[active], np.exp(log_beta[active]))
        P[active] = Pa
        perp[active] = np.exp(H)
        done = np.abs(perp[active] - perplexity) < tol
        too_flat = H > target
        # entropy falls as beta grows
        lo[active] = np.where(too_flat, log_beta[active], lo[active])
        hi[active] = np.where(too_flat, hi[active], log_beta[active])
        nxt = np.where(
            np.isfinite(lo[active]) & np.isfinite(hi[active]),
            0.5 * (lo[active] + hi[active]),
            np.where(too_flat, log_beta[active] + 1.0, log_beta[active] - 1.0),
        )
        log_beta[active] = np.where(done, log_beta[active], nxt)
        active = active[~done]
        if active.size == 0:
            break
    np.fill_diagonal(P, 0.0)
    return P, perp


def joint_affinities(X, perplexity):
    P, _ = conditional_affinities(X, perplexity)
    P = (P + P.T) / (2.0 * P.shape[0])
    return np.maximum(P, 1e-12)


def _student_t(Y):
    sq = np.einsum("ij,ij->i", Y, Y)
    num = 1.0 / (1.0 + np.maximum(sq[:, None] + sq[None, :] - 2.0 * (Y @ Y.T), 0.0))
    np.fill_diagonal(num, 0.0)
    return num


def kl_divergence(P, Y) -> float:
    num = _student_t(Y)
    Q = np.maximum(num / num.sum(), 1e-12)
    return float(np.sum(P * np.log(P / Q)))


def tsne(
    data: PooledDataset,
    subset_n: int = DEFAULT_SUBSET,
    perplexity: float = DEFAULT_PERPLEXITY,
    seed: int = 0,
    n_iters: int = 1000,
) -> Embedding2D:
    """Exact (O(n^2)) t-SNE of a seeded subset of ``data`` to two dimensions.

    ``Embedding2D.rows`` holds the indices of the subset rows in ``data``;
    coordinates follow that order.
    """
    n_total = len(data)
    if subset_n < 1 or subset_n > n_total:
        raise EmbedError(f"subset_n must lie in [1, {n_total}], got {subset_n}")
    if not (0 < perplexity < subset_n / 3):
        raise EmbedError(f"perplexity {perplexity} infeasible for {subset_n} points (needs < n/3)")
    rng = np.random.default_rng(seed)
    rows = np.arange(n_total) if subset_n == n_total else np.sort(rng.choice(n_total, subset_n, replace=False))
    X = np.asarray(data.vectors[rows], dtype=np.float64)
    P = joint_affinities(X, perplexity)

    Y = rng.normal(0.0, INIT_SIGMA, size=(subset_n, 2))
    kl_initial = kl_divergence(P, Y)
    velocity = np.zeros_like(Y)
    gains = np.ones_like(Y)
    for it in range(n_iters):
        early = it < EXAGGERATION_ITERS
        exag = EXAGGERATION if early else 1.0
        momentum = MOMENTUM_EARLY if early else MOMENTUM_LATE
        num = _student_t(Y)
        W = (exag * P - num / num.sum()) * num
        grad = 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)
        # delta-bar-delta: grow the step where the gradient keeps its direction
        same = np.sign(grad) == np.sign(velocity)
        gains = np.maximum(np.where(same, gains * 0.8, gains + 0.2), MIN_GAIN)
        velocity = momentum * velocity - LEARNING_RATE * gains * grad
        Y = Y + velocity
    return Embedding2D(
        coords=Y,
        kl_initial=kl_initial,
        kl_final=kl_divergence(P, Y),
        perplexity=perplexity,
        seed=seed,
        rows=rows,
        n_iters=n_iters,
    )


def coords_csv(embedding: Embedding2D, tokens) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["token_id", "x", "y"])
    for tok, (x, y) in zip(tokens, embedding.coords):
        writer.writerow([tok.token_id, repr(float(x)), repr(float(y))])
    return buf.getvalue()


def label_colors(labels) -> dict[str, str]:
    """Colour per label value, assigned in sorted order."""
    return {lab: PALETTE[i % len(PALETTE)] for i, lab in enumerate(sorted(set(labels)))}


def _svg(coords, labels, title, size=480, pad=30) -> str:
    colors = label_colors(labels)
    xy = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    if len(xy):
        lo, hi = xy.min(axis=0), xy.max(axis=0)
    else:
        lo, hi = np.zeros(2), np.ones(2)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    inner = size - 2 * pad
    legend_w = 140
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + legend_w}" height="{size}" '
        f'viewBox="0 0 {size + legend_w} {size}">',
        f'<title>{escape(title)}</title>',
        f'<rect x="0" y="0" width="{size + legend_w}" height="{size}" fill="white"/>',
        '<g class="points">',
    ]
    for (x, y), lab in zip(xy, labels):
        px = pad + (x - lo[0]) / span[0] * inner
        py = size - pad - (y - lo[1]) / span[1] * inner
        lines.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="2.5" fill="{colors[lab]}" fill-opacity="0.7"/>')
    lines.append("</g>")
    lines.append('<g class="legend" font-family="sans-serif" font-size="12">')
    for i, (lab, col) in enumerate(colors.items()):
        ly = pad + 18 * i
        lines.append(f'<rect x="{size + 10}" y="{ly - 9}" width="10" height="10" fill="{col}"/>')
        lines.append(f'<text x="{size + 26}" y="{ly}">{escape(lab)}</text>')
    lines.append("</g>")
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def export_scatter(embedding: Embedding2D, tokens, color_by: str, path) -> tuple[Path, Path]:
    """Write ``scatter_<color_by>.csv`` (x, y, label) and ``.svg`` under ``path``.

    ``tokens`` must follow the embedding rows. Only label values that occur
    get a legend entry.
    """
    if color_by not in PROBE_LABELS:
        raise EmbedError(f"color_by must be one of {PROBE_LABELS}")
    tokens = list(tokens)
    if len(tokens) != embedding.coords.shape[0]:
        raise EmbedError(f"{len(tokens)} tokens for {embedding.coords.shape[0]} points")
    labels = [t.label(color_by) for t in tokens]
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["x", "y", "label"])
    for (x, y), lab in zip(embedding.coords, labels):
        writer.writerow([repr(float(x)), repr(float(y)), lab])
    csv_path = root / f"scatter_{color_by}.csv"
    svg_path = root / f"scatter_{color_by}.svg"
    atomic_write_text(csv_path, buf.getvalue())
    atomic_write_text(svg_path, _svg(embedding.coords, labels, f"t-SNE coloured by {color_by}"))
    return csv_path, svg_path
