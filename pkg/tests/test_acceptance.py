"""End-to-end acceptance criteria, one test per criterion.

Each test is tagged with ``acceptance(number, title)``; the terminal summary
prints one PASS/FAIL line per criterion along with the measured values.
"""

import json
import re
import time
import warnings

import numpy as np
import pytest
from scipy.stats import ortho_group

import oracles
from conftest import SMALL_PHONES, make_token
from phoneprobe.abx import dtw_distance, score_abx
from phoneprobe.cli import run
from phoneprobe.dataio import FeatureArchive
from phoneprobe.embed2d import conditional_affinities, tsne
from phoneprobe.pooling import PooledDataset, mean_pool, one_hot_pool
from phoneprobe.probe import (
    ProbeConvergenceWarning,
    chance_baseline,
    count_active_features,
    objective_value,
    reg_path,
    run_probe,
    split_dataset,
    train_probe,
)
from phoneprobe.quantize import assign, fit_kmeans, onehot_frames
from phoneprobe.synth import FactorSpec, SynthProfile, generate, preset

LABELS = ("phone_class", "gender", "language")


def detail(request, text):
    request.node.user_properties.append(("detail", text))


def dataset(X, labels, kind="language"):
    toks = tuple(make_token(f"u{i}", 0, "a", 0, 1, **{kind: str(lab)}) for i, lab in enumerate(labels))
    return PooledDataset(np.asarray(X, dtype=np.float64), toks)


@pytest.mark.acceptance(1, "oracle equivalence")
def test_oracle_equivalence(request):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(200):
        m, n, d = rng.integers(1, 7), rng.integers(1, 7), rng.integers(1, 6)
        x, y = rng.normal(size=(m, d)), rng.normal(size=(n, d))
        worst = max(worst, abs(dtw_distance(x, y) - oracles.brute_dtw(x, y)))
    t_dtw = time.perf_counter() - t0

    t0 = time.perf_counter()
    pts = np.array([[0.0], [1.0], [10.0], [11.0]], dtype=np.float32)
    model = fit_kmeans(FeatureArchive({"u": pts}, 1, 100.0), 2, seed=0, n_restarts=3)
    best, _ = oracles.best_bipartition([0.0, 1.0, 10.0, 11.0])
    t_km = time.perf_counter() - t0

    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    X = rng.normal(size=(40, 5))
    y01 = (X @ [1.0, -0.5, 0.0, 0.3, 0.0] + 0.7 * rng.normal(size=40) > 0).astype(int)
    data = dataset(X, np.where(y01 == 1, "FR", "EN"))
    ours = objective_value(train_probe(data, "language", c=0.5), data)
    grid = oracles.grid_search_objective(X, y01, 1.0 / (0.5 * 40))
    t_probe = time.perf_counter() - t0

    detail(request, f"dtw max |diff| {worst:.1e} in {t_dtw:.1f}s; k-means inertia {model.inertia!r} "
                    f"in {t_km:.1f}s; probe {ours:.6f} vs grid {grid:.6f} in {t_probe:.1f}s")
    assert worst <= 1e-9
    assert model.inertia == best == 1.0
    assert ours <= grid + 1e-3
    assert max(t_dtw, t_km, t_probe) < 60


@pytest.mark.acceptance(2, "trivial limits")
def test_trivial_limits(request):
    same = SynthProfile(n_speakers=2, n_utterances=40, dim=8, phones=SMALL_PHONES, noise_sigma=0.0,
                        factors={"phone": FactorSpec(list(range(8)), 1.0)})
    abx_same = score_abx(*generate(same)).error_pct

    noise = SynthProfile(n_speakers=4, n_utterances=400, dim=64, phones=SMALL_PHONES, noise_sigma=1.0, seed=3)
    archive, table = generate(noise)
    abx_noise = score_abx(archive, table).error_pct
    pooled = mean_pool(archive, table)
    _, report = run_probe(pooled, "gender", None, 0.85, 0)
    _, test = split_dataset(pooled, "gender", 0.85, 0)
    chance = chance_baseline(test, "gender", seed=0)
    l1_noise, _ = run_probe(pooled, "gender", 0.001, 0.85, 0)
    zeros = PooledDataset(np.zeros_like(pooled.vectors), pooled.tokens)
    l1_zero, _ = run_probe(zeros, "gender", 0.001, 0.85, 0)

    detail(request, f"identical ABX {abx_same:.2f}%; noise ABX {abx_noise:.2f}%; noise probe "
                    f"{report.error_pct:.1f}% vs chance {chance:.1f}%; active features "
                    f"{count_active_features(l1_noise)} (noise) {count_active_features(l1_zero)} (zeros)")
    assert abx_same == 0.0
    assert abs(abx_noise - 50.0) <= 3.0
    assert abs(report.error_pct - chance) <= 5.0
    assert count_active_features(l1_noise) == 0 and count_active_features(l1_zero) == 0


@pytest.mark.acceptance(3, "concentrated vs diffuse language code")
def test_concentrated_vs_diffuse(request):
    t0 = time.perf_counter()
    grid = list(np.logspace(-4, 0, 17))
    out = {}
    for name in ("concentrated", "diffuse"):
        pooled = mean_pool(*generate(preset(name, n_utterances=420, seed=11)))
        curve = reg_path(pooled, "language", grid, 0.85, 0)
        _, full = run_probe(pooled, "language", None, 0.85, 0)
        out[name] = (len(pooled), curve.best_within_budget(2), 100.0 - full.error_pct)
    elapsed = time.perf_counter() - t0
    (n_c, sparse_c, _), (n_d, sparse_d, full_d) = out["concentrated"], out["diffuse"]
    detail(request, f"concentrated {sparse_c:.1f}% at <=2 features ({n_c} tokens); diffuse {sparse_d:.1f}% "
                    f"at <=2 vs {full_d:.1f}% unregularized ({n_d} tokens); {elapsed:.0f}s")
    assert 4000 <= n_c <= 6000 and 4000 <= n_d <= 6000
    assert sparse_c >= 85.0
    assert full_d - sparse_d >= 15.0
    assert elapsed < 300


@pytest.mark.acceptance(4, "discretization degrades probes and ABX")
def test_discretization_degradation(request):
    archive, table = generate(preset("quantization", n_utterances=420, seed=21))
    pooled = mean_pool(archive, table)
    cont = {l: run_probe(pooled, l, None, 0.85, 0)[1].error_pct for l in LABELS}
    abx_cont = score_abx(archive, table).error_pct
    onehot, abx = {}, {}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ProbeConvergenceWarning)
        for k in (50, 200):
            km = fit_kmeans(archive, k, seed=0, n_restarts=1, max_frames=10_000)
            assignment = assign(km, archive)
            units = one_hot_pool(assignment, table)
            onehot[k] = {l: run_probe(units, l, None, 0.85, 0)[1].error_pct for l in LABELS}
            abx[k] = score_abx(onehot_frames(assignment), table, "onehot").error_pct
    capped = sum(issubclass(w.category, ProbeConvergenceWarning) for w in caught)
    drop = (onehot[50]["gender"] - onehot[200]["gender"]) / onehot[50]["gender"]
    fmt = lambda d: "/".join(f"{d[l]:.1f}" for l in LABELS)
    detail(request, f"probe err class/gender/lang continuous {fmt(cont)}, K50 {fmt(onehot[50])}, "
                    f"K200 {fmt(onehot[200])}; ABX continuous {abx_cont:.2f}, K50 {abx[50]:.2f}, "
                    f"K200 {abx[200]:.2f}; gender drop {100 * drop:.0f}%; {capped} probes hit the iteration cap")
    assert all(onehot[50][l] > cont[l] for l in LABELS)
    assert abx_cont < abx[50] and abx_cont < abx[200]
    assert drop >= 0.10


@pytest.mark.acceptance(5, "invariant suites")
def test_invariants(request):
    rng = np.random.default_rng(5)
    archive, table = generate(preset("concentrated", n_utterances=30, seed=5, phones=SMALL_PHONES))

    km = fit_kmeans(archive, 20, seed=1, n_restarts=2)
    h = np.asarray(km.inertia_history)
    lloyd = len(h) >= 2 and bool(np.all(np.diff(h) <= 1e-9 * h[0]))

    pooled = mean_pool(archive, table)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ProbeConvergenceWarning)
        model = train_probe(pooled, "phone_class", c=0.05, record_history=True)
    prox = bool(np.all(np.diff(model.objective_history) <= 0))

    sym = rot = 0.0
    for _ in range(50):
        x, y = rng.normal(size=(rng.integers(1, 8), 6)), rng.normal(size=(rng.integers(1, 8), 6))
        Q = ortho_group.rvs(6, random_state=int(rng.integers(1 << 30)))
        base = dtw_distance(x, y)
        sym = max(sym, abs(base - dtw_distance(y, x)))
        rot = max(rot, abs(base - dtw_distance(x @ Q, y @ Q)))

    shift = rng.normal(size=archive.dim).astype(np.float32)
    moved = mean_pool(archive.map(lambda m: m + shift), table).vectors
    equivariance = float(np.max(np.abs(moved - (pooled.vectors + shift))))

    units = one_hot_pool(assign(km, archive), table)
    row_sums = float(np.max(np.abs(units.vectors.sum(axis=1) - 1.0)))

    a_train, a_test = split_dataset(pooled, "gender", 0.85, 3)
    b_train, b_test = split_dataset(pooled, "gender", 0.85, 3)
    split_ok = [t.token_id for t in a_train.tokens] == [t.token_id for t in b_train.tokens] and \
        [t.token_id for t in a_test.tokens] == [t.token_id for t in b_test.tokens]

    X = rng.normal(size=(120, 5))
    _, perp = conditional_affinities(X, 20.0)
    perp_err = float(np.max(np.abs(perp - 20.0)))
    Xq = np.round(X * 1024) / 1024
    e1 = tsne(PooledDataset(Xq, pooled.tokens[:120]), subset_n=120, perplexity=20, seed=0, n_iters=300)
    e2 = tsne(PooledDataset(Xq + 32.0, pooled.tokens[:120]), subset_n=120, perplexity=20, seed=0, n_iters=300)
    tsne_shift = bool(np.array_equal(e1.coords, e2.coords))

    detail(request, f"lloyd {lloyd}; proximal {prox}; dtw sym {sym:.0e} rot {rot:.0e}; pooling shift "
                    f"{equivariance:.0e}; one-hot sums {row_sums:.0e}; split {split_ok}; perplexity "
                    f"{perp_err:.0e}; t-SNE shift {tsne_shift}")
    assert lloyd and prox and split_ok and tsne_shift
    assert sym <= 1e-12 and rot <= 1e-9
    assert equivariance <= 1e-5 and row_sums <= 1e-6
    assert perp_err <= 1e-3


@pytest.mark.acceptance(6, "battery grid structure")
def test_battery_grid(request, tmp_path):
    paths = {}
    for name in ("concentrated", "diffuse"):
        out = tmp_path / name
        preset(name, phones=SMALL_PHONES).save(tmp_path / f"{name}.json")
        assert run(["synth", "--profile", str(tmp_path / f"{name}.json"), "--n-utterances", "40",
                    "--out-dir", str(out)]) == 0
        paths[name] = (str(out / "archive"), str(out / "alignments.csv"))
    argv = ["battery", "--kmeans-restarts", "1", "--max-frames", "3000", "--out-dir", str(tmp_path / "b")]
    for name, (archive, align) in paths.items():
        argv += ["--model", name, archive, align, archive]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ProbeConvergenceWarning)
        assert run(argv) == 0

    results = json.loads((tmp_path / "b" / "battery.json").read_text())
    assert results["params"]["c_grid"] == [0.001, 0.0001] and results["params"]["k"] == [50, 100, 200]
    n_cells = 0
    for entry in results["models"].values():
        for label in LABELS:
            assert set(entry["probes"][label]) == {"none", "0.001", "0.0001"}
            n_cells += 3
        assert set(entry["kmeans"]) == {"50", "100", "200"}
        for k in entry["kmeans"].values():
            assert set(k["probes"]) == set(LABELS) and k["abx"]["mode"] == "onehot"
            n_cells += 4
        assert entry["abx"]["continuous"]["mode"] == "continuous"

    md = (tmp_path / "b" / "battery.md").read_text().splitlines()
    header = "| | " + " | ".join(f"{t} {m}" for t in ("Phone Class", "Gender", "Language")
                                 for m in ("concentrated", "diffuse")) + " |"
    assert md.count(header) == 2
    rows = [line.split(" |")[0] for line in md if line.startswith("| ") and not line.startswith("| |")]
    assert rows == ["| LogReg", "| LogReg+l1a (C=0.001)", "| LogReg+l1b (C=0.0001)",
                    "| Continuous", "| K50", "| K100", "| K200", "| concentrated", "| diffuse"]
    assert "| | Continuous | K50 | K100 | K200 |" in md
    probe_rows = [line.split(" | ")[1:] for line in md if line.startswith("| LogReg")]
    assert all(len(cells) == 6 and all(re.search(r"\(\d+\)", c) for c in cells) for cells in probe_rows)
    detail(request, f"{n_cells} probe/ABX results for 2 models; probe, k-means and ABX tables in the expected layout")
