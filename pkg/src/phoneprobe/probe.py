"""Multinomial logistic-regression probes with optional l1 penalty.

The penalized objective is

    F(W, b) = (1/n) * sum_i NLL(y_i | x_i; W, b) + lam * ||W||_1

with ``lam = 1 / (c * n)`` for an inverse strength ``c`` (the usual
``C * sum(loss) + ||W||_1`` convention divided by ``C * n``).  The bias is
never penalized.  It is minimized by monotone FISTA with backtracking, so
the l1 case produces exact zeros through soft-thresholding and the
unregularized case runs through the same loop with ``lam = 0``.

Training stops when no parameter moves by more than ``TOL`` in one step,
or when the gradient mapping falls below ``GRAD_TOL`` (separable data
without a penalty has no finite minimizer, only a vanishing gradient).
Hitting ``MAX_ITER`` first is reported, never silently accepted.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from phoneprobe._fileio import atomic_write_text
from phoneprobe.dataio import PROBE_LABELS
from phoneprobe.pooling import PooledDataset

MAX_ITER = 10_000
TOL = 1e-7
GRAD_TOL = 1e-9
SPARSE_DENSITY = 0.1

NOTES = (
    "l1 strength lambda = 1/(c*n_train) on the per-sample mean loss; "
    "features probed raw, without standardization"
)


class ProbeError(ValueError):
    pass


class ProbeConvergenceError(RuntimeError):
    pass


class ProbeConvergenceWarning(UserWarning):
    pass


@dataclass
class ProbeModel:
    weights: np.ndarray
    bias: np.ndarray
    label_kind: str
    classes: tuple[str, ...]
    c: float | None = None
    lam: float = 0.0
    converged: bool = True
    n_iters: int = 0
    grad_norm: float = 0.0
    n_train: int = 0
    objective_history: list[float] = field(default_factory=list, repr=False)

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        return X @ self.weights.T + self.bias

    def predict_index(self, X: np.ndarray) -> np.ndarray:
        # argmax returns the first maximum, i.e. the lowest class index on ties
        return np.argmax(self.decision_function(X), axis=1)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.array(self.classes, dtype=object)[self.predict_index(X)]


@dataclass
class ProbeReport:
    label_kind: str
    c: float | None
    error_pct: float
    n_active_features: int
    chance_error_pct: float
    split_seed: int | None
    train_fraction: float | None
    lam: float
    converged: bool
    n_iters: int
    n_test: int

    def to_json(self) -> dict:
        return {
            "label_kind": self.label_kind,
            "c": self.c,
            "error_pct": self.error_pct,
            "n_active_features": self.n_active_features,
            "chance_error_pct": self.chance_error_pct,
            "split_seed": self.split_seed,
            "train_fraction": self.train_fraction,
            "lambda": self.lam,
            "converged": self.converged,
            "n_iters": self.n_iters,
            "n_test": self.n_test,
            "notes": NOTES,
        }


@dataclass
class RegPathCurve:
    label_kind: str
    points: list[tuple[float, float, int]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["c", "accuracy_pct", "n_active_features"])
        for c, acc, active in self.points:
            writer.writerow([repr(float(c)), repr(float(acc)), int(active)])
        return buf.getvalue()

    def save(self, path) -> None:
        atomic_write_text(path, self.to_csv())

    def best_within_budget(self, max_active: int) -> float | None:
        """Highest accuracy among points using at most ``max_active`` features."""
        accs = [acc for _, acc, active in self.points if active <= max_active]
        return max(accs) if accs else None


def _check_label_kind(label_kind: str) -> None:
    if label_kind not in PROBE_LABELS:
        raise ProbeError(f"label_kind must be one of {PROBE_LABELS}, got {label_kind!r}")


def stratified_counts(counts: list[int], train_fraction: float) -> list[int]:
    """Per-label train counts for a stratified split.

    Each label gets ``floor(fraction * count)`` (kept within ``[1, count-1]``);
    the remaining train slots up to ``round(fraction * total)`` go to labels
    by descending fractional part, ties broken by label order, never taking
    a label past ``ceil(fraction * count)``.
    """
    total = sum(counts)
    target = math.floor(train_fraction * total + 0.5)
    raw = [train_fraction * n for n in counts]
    train = [min(max(math.floor(r), 1), n - 1) for r, n in zip(raw, counts)]
    cap = [min(math.ceil(r), n - 1) for r, n in zip(raw, counts)]
    frac = [r - math.floor(r) for r in raw]
    order = sorted(range(len(counts)), key=lambda i: (-frac[i], i))
    remainder = target - sum(train)
    while remainder > 0:
        grown = False
        for i in order:
            if remainder == 0:
                break
            if train[i] < cap[i]:
                train[i] += 1
                remainder -= 1
                grown = True
        if not grown:
            break
    for i in reversed(order):
        if remainder >= 0:
            break
        if train[i] > 1:
            train[i] -= 1
            remainder += 1
    return train


def split_dataset(data: PooledDataset, label_kind: str, train_fraction: float = 0.85, seed: int = 0):
    """Stratified, seeded train/test split; returns ``(train, test)``.

    Rows keep their original relative order on both sides.
    """
    _check_label_kind(label_kind)
    if not 0 < train_fraction < 1:
        raise ProbeError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    labels = data.labels(label_kind)
    vocab = sorted(set(labels))
    rows_by_label = [np.flatnonzero(labels == v) for v in vocab]
    counts = [len(r) for r in rows_by_label]
    for v, n in zip(vocab, counts):
        if n < 2:
            raise ProbeError(f"label {v!r} has {n} token(s); need at least 2 to split")
    n_train = stratified_counts(counts, train_fraction)
    rng = np.random.default_rng(seed)
    train_rows = []
    for rows, k in zip(rows_by_label, n_train):
        train_rows.append(rng.permutation(rows)[:k])
    train_idx = np.sort(np.concatenate(train_rows))
    mask = np.zeros(len(data), dtype=bool)
    mask[train_idx] = True
    return data.subset(train_idx), data.subset(np.flatnonzero(~mask))


def _soft_threshold(w: np.ndarray, t: float) -> np.ndarray:
    if t == 0:
        return w
    return np.sign(w) * np.maximum(np.abs(w) - t, 0.0)


class _Objective:
    """Smooth multinomial loss. Logits are held class-major, ``(K, n)``, so
    every reduction over classes runs along contiguous rows."""

    def __init__(self, X: np.ndarray, y: np.ndarray, n_classes: int, lam: float):
        self.n = X.shape[0]
        # pooled one-hot histograms are mostly zeros
        if np.count_nonzero(X) < SPARSE_DENSITY * X.size:
            self.X = sparse.csr_matrix(X)
            self.XT = self.X.T.tocsr()
        else:
            self.X = np.ascontiguousarray(X)
            self.XT = np.ascontiguousarray(X.T)
        self.Y = np.zeros((n_classes, self.n))
        self.Y[y, np.arange(self.n)] = 1.0
        self.y = y
        self.lam = lam

    def smooth(self, W, b):
        Z = np.ascontiguousarray((self.X @ W.T).T)
        Z += b[:, None]
        top = Z.max(axis=0)
        lse = top + np.log(np.exp(Z - top).sum(axis=0))
        loss = float(np.mean(lse - Z[self.y, np.arange(self.n)]))
        return loss, Z, lse

    def grad(self, Z, lse):
        R = (np.exp(Z - lse) - self.Y) / self.n
        return np.asarray(self.XT @ R.T).T, R.sum(axis=1)

    def penalty(self, W) -> float:
        return self.lam * float(np.abs(W).sum())


def objective_value(model: ProbeModel, data: PooledDataset) -> float:
    """Penalized objective of ``model`` on ``data`` at the model's own lambda."""
    y = _encode(data.labels(model.label_kind), model.classes)
    obj = _Objective(data.vectors, y, len(model.classes), model.lam)
    return obj.smooth(model.weights, model.bias)[0] + obj.penalty(model.weights)


def _encode(labels, classes) -> np.ndarray:
    index = {c: i for i, c in enumerate(classes)}
    return np.array([index.get(v, -1) for v in labels], dtype=np.intp)


def train_probe(
    train: PooledDataset,
    label_kind: str,
    c: float | None = None,
    seed: int = 0,
    *,
    max_iter: int = MAX_ITER,
    tol: float = TOL,
    strict: bool = False,
    record_history: bool = False,
) -> ProbeModel:
    """Fit a multinomial logistic probe for ``label_kind``.

    Parameters
    ----------
    c : float or None
        Inverse l1 strength; None trains without penalty.
    seed : int
        Recorded for provenance. The solver itself starts from zero and is
        deterministic.
    strict : bool
        Raise ``ProbeConvergenceError`` instead of warning when the
        iteration cap is hit.
    record_history : bool
        Keep the objective value of every iterate on the model.
    """
    _check_label_kind(label_kind)
    if c is not None and not c > 0:
        raise ProbeError(f"c must be positive, got {c}")
    labels = train.labels(label_kind)
    classes = tuple(sorted(set(labels)))
    if len(classes) < 2:
        raise ProbeError(f"need at least 2 classes of {label_kind!r} in the training set, got {classes}")
    X = np.ascontiguousarray(train.vectors, dtype=np.float64)
    n, d = X.shape
    K = len(classes)
    lam = 0.0 if c is None else 1.0 / (c * n)
    obj = _Objective(X, _encode(labels, classes), K, lam)

    W = np.zeros((K, d))
    b = np.zeros(K)
    f_x, Z, lse = obj.smooth(W, b)
    F_x = f_x + obj.penalty(W)
    history = [F_x] if record_history else []

    # initial Lipschitz guess from the spectral norm of [X, 1]
    L = 0.5 * (np.linalg.norm(X, 2) ** 2 / n + 1.0)
    L = max(L * 1e-2, 1e-8)
    yW, yb, t = W.copy(), b.copy(), 1.0
    f_y, Zy, lse_y = f_x, Z, lse
    converged = False
    at_restart = False
    grad_norm = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        gW, gb = obj.grad(Zy, lse_y)
        L = max(L / 2.0, 1e-12)
        while True:
            zW = _soft_threshold(yW - gW / L, lam / L)
            zb = yb - gb / L
            dW, db = zW - yW, zb - yb
            f_z, Zz, lse_z = obj.smooth(zW, zb)
            quad = f_y + float((gW * dW).sum() + gb @ db) + 0.5 * L * float((dW * dW).sum() + db @ db)
            if f_z <= quad + 1e-12 * max(1.0, abs(f_y)):
                break
            L *= 2.0
        grad_norm = L * math.sqrt(float((dW * dW).sum() + db @ db))
        F_z = f_z + obj.penalty(zW)
        if F_z <= F_x:
            step = max(np.abs(zW - W).max(initial=0.0), np.abs(zb - b).max())
            t_next = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
            beta = (t - 1) / t_next
            newW, newb = zW, zb
            yW = zW + beta * (zW - W)
            yb = zb + beta * (zb - b)
            W, b, F_x, t = newW, newb, F_z, t_next
            if beta == 0:
                f_y, Zy, lse_y = f_z, Zz, lse_z
            else:
                f_y, Zy, lse_y = obj.smooth(yW, yb)
            # separable data without penalty has no finite minimizer: stop once stationary
            if step < tol or grad_norm < GRAD_TOL:
                converged = True
            at_restart = False
        elif at_restart:
            # a plain proximal step from the iterate cannot improve it
            converged = True
        else:
            # momentum overshoot: restart from the current iterate
            at_restart = True
            t = 1.0
            yW, yb = W.copy(), b.copy()
            f_y, Zy, lse_y = obj.smooth(yW, yb)
        if record_history:
            assert F_x <= history[-1], "objective increased"
            history.append(F_x)
        if converged:
            break

    if not converged:
        msg = (
            f"probe for {label_kind!r} (c={c}) did not converge in {max_iter} iterations; "
            f"final gradient-mapping norm {grad_norm:.3e}"
        )
        if strict:
            raise ProbeConvergenceError(msg)
        warnings.warn(msg, ProbeConvergenceWarning, stacklevel=2)
    return ProbeModel(
        weights=W,
        bias=b,
        label_kind=label_kind,
        classes=classes,
        c=c,
        lam=lam,
        converged=converged,
        n_iters=it,
        grad_norm=grad_norm,
        n_train=n,
        objective_history=history,
    )


def count_active_features(model: ProbeModel) -> int:
    """Number of feature columns with at least one exactly nonzero weight."""
    return int(np.count_nonzero(np.any(model.weights != 0, axis=0)))


def chance_baseline(
    test: PooledDataset,
    label_kind: str,
    seed: int = 0,
    n_draws: int = 1000,
    strategy: str = "uniform",
) -> float:
    """Mean error (percent) of random labelings of the test rows.

    ``strategy="uniform"`` draws every label uniformly from the labels
    observed in ``test``; ``"prior"`` draws them from the empirical label
    distribution instead.
    """
    if n_draws < 1:
        raise ProbeError("n_draws must be >= 1")
    labels = test.labels(label_kind)
    if len(labels) == 0:
        return 0.0
    vocab, y = np.unique(labels.astype(str), return_inverse=True)
    rng = np.random.default_rng(seed)
    if strategy == "uniform":
        draws = rng.integers(0, len(vocab), size=(n_draws, len(y)))
    elif strategy == "prior":
        p = np.bincount(y, minlength=len(vocab)) / len(y)
        draws = rng.choice(len(vocab), size=(n_draws, len(y)), p=p)
    else:
        raise ProbeError(f"unknown strategy {strategy!r}")
    return float(100.0 * np.mean(draws != y[None, :]))


def evaluate_probe(
    model: ProbeModel,
    test: PooledDataset,
    *,
    split_seed: int | None = None,
    train_fraction: float | None = None,
    chance_draws: int = 1000,
) -> ProbeReport:
    if test.dim != model.n_features:
        raise ProbeError(f"test dim {test.dim} != model dim {model.n_features}")
    truth = _encode(test.labels(model.label_kind), model.classes)
    pred = model.predict_index(test.vectors)
    n_test = len(truth)
    error = 100.0 * float(np.sum(pred != truth)) / n_test if n_test else 0.0
    chance = chance_baseline(test, model.label_kind, seed=0 if split_seed is None else split_seed, n_draws=chance_draws)
    return ProbeReport(
        label_kind=model.label_kind,
        c=model.c,
        error_pct=error,
        n_active_features=count_active_features(model),
        chance_error_pct=chance,
        split_seed=split_seed,
        train_fraction=train_fraction,
        lam=model.lam,
        converged=model.converged,
        n_iters=model.n_iters,
        n_test=n_test,
    )


def run_probe(data: PooledDataset, label_kind: str, c=None, train_fraction=0.85, seed=0, **kwargs):
    """Split, train and evaluate in one call; returns ``(model, report)``."""
    train, test = split_dataset(data, label_kind, train_fraction, seed)
    model = train_probe(train, label_kind, c, seed, **kwargs)
    return model, evaluate_probe(model, test, split_seed=seed, train_fraction=train_fraction)


def reg_path(
    data: PooledDataset,
    label_kind: str,
    c_grid,
    train_fraction: float = 0.85,
    seed: int = 0,
    **kwargs,
) -> RegPathCurve:
    """Accuracy and active-feature count for each ``c`` on one shared split."""
    c_grid = [float(c) for c in c_grid]
    if not c_grid:
        raise ProbeError("c_grid must be non-empty")
    if any(not c > 0 for c in c_grid):
        raise ProbeError("c_grid values must be positive")
    if c_grid != sorted(c_grid):
        raise ProbeError("c_grid must be sorted ascending")
    train, test = split_dataset(data, label_kind, train_fraction, seed)
    points = []
    for c in c_grid:
        model = train_probe(train, label_kind, c, seed, **kwargs)
        report = evaluate_probe(model, test, split_seed=seed, train_fraction=train_fraction, chance_draws=1)
        points.append((c, 100.0 - report.error_pct, report.n_active_features))
    return RegPathCurve(label_kind, points)
