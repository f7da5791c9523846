"""Command-line entry point: ``phoneprobe <command> ...``.

Every command writes its outputs under ``--out-dir`` together with a
``run.json`` recording the effective parameters; ``phoneprobe rerun
OUT_DIR/run.json`` replays it.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from phoneprobe import __version__
from phoneprobe._fileio import atomic_write_text, read_json, write_json
from phoneprobe.abx import DEFAULT_MAX_PER_PHONE, AbxError, score_abx
from phoneprobe.dataio import PROBE_LABELS, DataError, load_alignments, load_archive, save_alignments, save_archive
from phoneprobe.embed2d import DEFAULT_PERPLEXITY, DEFAULT_SUBSET, EmbedError, coords_csv, export_scatter, tsne
from phoneprobe.pooling import PooledDataset, load_pooled, mean_pool, one_hot_pool, save_pooled
from phoneprobe.probe import (
    ProbeConvergenceError,
    ProbeError,
    reg_path,
    run_probe,
)
from phoneprobe.quantize import (
    DEFAULT_RESTARTS,
    QuantizeError,
    assign,
    fit_kmeans,
    load_assignment,
    load_kmeans,
    onehot_frames,
    save_assignment,
    save_kmeans,
)
from phoneprobe.synth import PRESETS, ProfileError, SynthProfile, generate, preset

TRAIN_FRACTION = 0.85
SPLIT_SEED = 0
L1_GRID = (0.001, 0.0001)
K_LIST = (50, 100, 200)

VALIDATION_ERRORS = (DataError, ProfileError, ProbeError, QuantizeError, AbxError, EmbedError, FileNotFoundError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _c_value(text: str):
    if text.lower() in ("none", "inf"):
        return None
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError("c must be positive")
    return value


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="phoneprobe", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=PRESETS)
    src.add_argument("--profile", help="profile JSON file")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-utterances", type=int)
    p.add_argument("--n-speakers", type=int)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("pool", help="pool frames into one vector per phone token")
    p.add_argument("--archive", help="feature archive directory (continuous pooling)")
    p.add_argument("--alignments", required=True)
    p.add_argument("--onehot", action="store_true", help="pool one-hot cluster ids instead of features")
    p.add_argument("--assign", help="assignment directory from 'quantize apply' (with --onehot)")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("probe", help="train and evaluate one logistic probe")
    p.add_argument("--pooled", required=True)
    p.add_argument("--label", required=True, choices=PROBE_LABELS)
    p.add_argument("--c", type=_c_value, default=None, help="inverse l1 strength; omit for no penalty")
    p.add_argument("--train-fraction", type=float, default=TRAIN_FRACTION)
    p.add_argument("--seed", type=int, default=SPLIT_SEED)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("path", help="accuracy vs active features over a c grid")
    p.add_argument("--pooled", required=True)
    p.add_argument("--label", required=True, choices=PROBE_LABELS)
    p.add_argument("--c-grid", type=float, nargs="+", default=list(np.logspace(-4, 0, 17)))
    p.add_argument("--train-fraction", type=float, default=TRAIN_FRACTION)
    p.add_argument("--seed", type=int, default=SPLIT_SEED)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("quantize", help="k-means discretization")
    qsub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)
    q = qsub.add_parser("fit")
    q.add_argument("--fit-on", required=True, help="archive the k-means model is fitted on")
    q.add_argument("--k", type=int, required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--n-restarts", type=int, default=DEFAULT_RESTARTS)
    q.add_argument("--max-frames", type=int)
    q.add_argument("--out-dir", required=True)
    q = qsub.add_parser("apply")
    q.add_argument("--model", required=True, help="directory written by 'quantize fit'")
    q.add_argument("--archive", required=True)
    q.add_argument("--out-dir", required=True)

    p = sub.add_parser("abx", help="within-speaker phone ABX")
    p.add_argument("--archive", help="feature archive (continuous mode)")
    p.add_argument("--assign", help="assignment directory (onehot mode)")
    p.add_argument("--alignments", required=True)
    p.add_argument("--mode", choices=("continuous", "onehot"), default="continuous")
    p.add_argument("--max-per-phone", type=int, default=DEFAULT_MAX_PER_PHONE)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("tsne", help="2D t-SNE map of pooled vectors")
    p.add_argument("--pooled", required=True)
    p.add_argument("--subset-n", type=int, default=DEFAULT_SUBSET)
    p.add_argument("--perplexity", type=float, default=DEFAULT_PERPLEXITY)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-iters", type=int, default=1000)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("battery", help="full probe / k-means / ABX grid on several models")
    p.add_argument(
        "--model",
        nargs=4,
        action="append",
        required=True,
        metavar=("NAME", "ARCHIVE", "ALIGNMENTS", "FIT_ON"),
        help="model name, its archive and alignments, and the archive k-means is fitted on",
    )
    p.add_argument("--labels", nargs="+", choices=PROBE_LABELS, default=list(PROBE_LABELS))
    p.add_argument("--c-grid", type=float, nargs="+", default=list(L1_GRID))
    p.add_argument("--k", type=int, nargs="+", default=list(K_LIST))
    p.add_argument("--kmeans-restarts", type=int, default=DEFAULT_RESTARTS)
    p.add_argument("--max-frames", type=int)
    p.add_argument("--max-per-phone", type=int, default=DEFAULT_MAX_PER_PHONE)
    p.add_argument("--train-fraction", type=float, default=TRAIN_FRACTION)
    p.add_argument("--seed", type=int, default=SPLIT_SEED)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("rerun", help="replay a run.json")
    p.add_argument("run_json")
    return parser


def _write_run(out_dir: Path, argv, args) -> None:
    params = {k: v for k, v in vars(args).items()}
    write_json(
        out_dir / "run.json",
        {
            "argv": list(argv),
            "params": params,
            "version": __version__,
            "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        },
    )


def cmd_synth(args) -> None:
    profile = preset(args.preset) if args.preset else SynthProfile.load(args.profile)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.n_utterances is not None:
        changes["n_utterances"] = args.n_utterances
    if args.n_speakers is not None:
        changes["n_speakers"] = args.n_speakers
    profile = profile.replace(**changes)
    archive, table = generate(profile)
    out = Path(args.out_dir)
    save_archive(archive, out / "archive")
    save_alignments(table, out / "alignments.csv")
    profile.save(out / "profile.json")


def _load_pair(archive_dir, alignments):
    archive = load_archive(archive_dir)
    return archive, load_alignments(alignments, archive)


def cmd_pool(args) -> None:
    if args.onehot:
        if not args.assign:
            raise UsageError("pool --onehot needs --assign")
        assignment = load_assignment(args.assign)
        ref = onehot_frames(assignment)
        table = load_alignments(args.alignments, ref)
        data = one_hot_pool(assignment, table)
    else:
        if not args.archive:
            raise UsageError("pool needs --archive (or --onehot --assign)")
        archive, table = _load_pair(args.archive, args.alignments)
        data = mean_pool(archive, table)
    save_pooled(data, args.out_dir)


def cmd_probe(args) -> None:
    data = load_pooled(args.pooled)
    model, report = run_probe(data, args.label, args.c, args.train_fraction, args.seed)
    out = Path(args.out_dir)
    write_json(out / "probe_report.json", report.to_json())
    write_json(
        out / "probe_model.json",
        {
            "label_kind": model.label_kind,
            "classes": list(model.classes),
            "c": model.c,
            "lambda": model.lam,
            "weights": model.weights.tolist(),
            "bias": model.bias.tolist(),
        },
    )


def cmd_path(args) -> None:
    data = load_pooled(args.pooled)
    curve = reg_path(data, args.label, sorted(args.c_grid), args.train_fraction, args.seed)
    curve.save(Path(args.out_dir) / "path.csv")


def cmd_quantize(args) -> None:
    if args.action == "fit":
        archive = load_archive(args.fit_on)
        model = fit_kmeans(archive, args.k, args.seed, args.n_restarts, max_frames=args.max_frames)
        save_kmeans(model, args.out_dir)
    else:
        model = load_kmeans(args.model)
        save_assignment(assign(model, load_archive(args.archive)), args.out_dir)


def cmd_abx(args) -> None:
    if args.mode == "onehot":
        if not args.assign:
            raise UsageError("abx --mode onehot needs --assign")
        archive = onehot_frames(load_assignment(args.assign))
    else:
        if not args.archive:
            raise UsageError("abx --mode continuous needs --archive")
        archive = load_archive(args.archive)
    table = load_alignments(args.alignments, archive)
    result = score_abx(archive, table, args.mode, args.max_per_phone, args.seed)
    out = Path(args.out_dir)
    write_json(out / "abx.json", result.to_json())
    result.save_pairs(out / "abx_pairs.csv")


def cmd_tsne(args) -> None:
    data = load_pooled(args.pooled)
    emb = tsne(data, min(args.subset_n, len(data)), args.perplexity, args.seed, args.n_iters)
    tokens = [data.tokens[i] for i in emb.rows]
    out = Path(args.out_dir)
    atomic_write_text(out / "coords.csv", coords_csv(emb, tokens))
    for label in PROBE_LABELS:
        export_scatter(emb, tokens, label, out)
    write_json(out / "tsne.json", emb.params())


def _fmt(x: float) -> str:
    return f"{x:.1f}"


def battery_markdown(results: dict) -> str:
    """Render battery results as three tables shaped like the probe, k-means and ABX tables."""
    models = results["models"]
    labels = results["params"]["labels"]
    c_grid = results["params"]["c_grid"]
    ks = results["params"]["k"]
    names = {"phone_class": "Phone Class", "gender": "Gender", "language": "Language"}
    head = "| | " + " | ".join(f"{names[l]} {m}" for l in labels for m in models) + " |"
    rule = "|---|" + "---|" * (len(labels) * len(models))
    lines = ["## Logistic-regression probe error (%) with active features", "", head, rule]
    rows = [("LogReg", "none")] + [(f"LogReg+l1{chr(ord('a') + i)} (C={c:g})", repr(c)) for i, c in enumerate(c_grid)]
    for title, key in rows:
        cells = []
        for l in labels:
            for m in models:
                r = models[m]["probes"][l][key]
                cells.append(f"{_fmt(r['error_pct'])} ({r['n_active_features']})")
        lines.append(f"| {title} | " + " | ".join(cells) + " |")
    lines += ["", "## Probe error (%) on continuous features and one-hot k-means units", "", head, rule]
    cont = " | ".join(_fmt(models[m]["probes"][l]["none"]["error_pct"]) for l in labels for m in models)
    lines.append(f"| Continuous | {cont} |")
    for k in ks:
        cells = " | ".join(_fmt(models[m]["kmeans"][str(k)]["probes"][l]["error_pct"]) for l in labels for m in models)
        lines.append(f"| K{k} | {cells} |")
    lines += [
        "",
        "## Within-speaker ABX error (%)",
        "",
        "| | Continuous | " + " | ".join(f"K{k}" for k in ks) + " |",
        "|---|---|" + "---|" * len(ks),
    ]
    for m in models:
        cells = [_fmt(models[m]["abx"]["continuous"]["error_pct"])]
        cells += [_fmt(models[m]["kmeans"][str(k)]["abx"]["error_pct"]) for k in ks]
        lines.append(f"| {m} | " + " | ".join(cells) + " |")
    chance = ", ".join(
        f"{l}: {_fmt(np.mean([models[m]['probes'][l]['none']['chance_error_pct'] for m in models]))}%"
        for l in labels
    )
    lines += ["", f"Chance error (uniform random labelling, mean over models): {chance}", ""]
    return "\n".join(lines)


def run_battery(models, labels, c_grid, ks, *, kmeans_restarts=DEFAULT_RESTARTS, max_frames=None,
                max_per_phone=DEFAULT_MAX_PER_PHONE, train_fraction=TRAIN_FRACTION, seed=SPLIT_SEED) -> dict:
    """Run the whole grid. ``models`` maps name -> (archive, table, fit_archive)."""
    c_grid = [float(c) for c in c_grid]
    out = {
        "params": {
            "labels": list(labels),
            "c_grid": c_grid,
            "k": [int(k) for k in ks],
            "kmeans_restarts": kmeans_restarts,
            "max_frames": max_frames,
            "max_per_phone": max_per_phone,
            "train_fraction": train_fraction,
            "seed": seed,
        },
        "models": {},
    }
    for name, (archive, table, fit_archive) in models.items():
        pooled = mean_pool(archive, table)
        entry = {"n_tokens": len(pooled), "probes": {}, "kmeans": {}, "abx": {}}
        for label in labels:
            entry["probes"][label] = {}
            for c in [None] + c_grid:
                _, report = run_probe(pooled, label, c, train_fraction, seed)
                entry["probes"][label]["none" if c is None else repr(c)] = report.to_json()
        entry["abx"]["continuous"] = score_abx(archive, table, "continuous", max_per_phone, seed).to_json()
        for k in ks:
            km = fit_kmeans(fit_archive, int(k), seed, kmeans_restarts, max_frames=max_frames)
            assignment = assign(km, archive)
            onehot = one_hot_pool(assignment, table)
            probes = {label: run_probe(onehot, label, None, train_fraction, seed)[1].to_json() for label in labels}
            abx = score_abx(onehot_frames(assignment), table, "onehot", max_per_phone, seed).to_json()
            entry["kmeans"][str(k)] = {"inertia": km.inertia, "n_iters_run": km.n_iters_run, "probes": probes, "abx": abx}
        out["models"][name] = entry
    return out


def cmd_battery(args) -> None:
    models = {}
    for name, archive_dir, alignments, fit_on in args.model:
        if name in models:
            raise UsageError(f"duplicate model name {name!r}")
        archive, table = _load_pair(archive_dir, alignments)
        fit_archive = archive if Path(fit_on).resolve() == Path(archive_dir).resolve() else load_archive(fit_on)
        models[name] = (archive, table, fit_archive)
    results = run_battery(
        models,
        args.labels,
        sorted(args.c_grid, reverse=True),
        args.k,
        kmeans_restarts=args.kmeans_restarts,
        max_frames=args.max_frames,
        max_per_phone=args.max_per_phone,
        train_fraction=args.train_fraction,
        seed=args.seed,
    )
    out = Path(args.out_dir)
    write_json(out / "battery.json", results)
    atomic_write_text(out / "battery.md", battery_markdown(results))


COMMANDS = {
    "synth": cmd_synth,
    "pool": cmd_pool,
    "probe": cmd_probe,
    "path": cmd_path,
    "quantize": cmd_quantize,
    "abx": cmd_abx,
    "tsne": cmd_tsne,
    "battery": cmd_battery,
}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _build_parser().parse_args(argv)
        if args.command == "rerun":
            record = read_json(args.run_json)
            return run(record["argv"])
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            COMMANDS[args.command](args)
        _write_run(out_dir, argv, args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        _build_parser().print_usage(sys.stderr)
        return 1
    except VALIDATION_ERRORS as exc:
        print(f"phoneprobe: {exc}", file=sys.stderr)
        return 1
    except (ProbeConvergenceError, OSError, RuntimeError, json.JSONDecodeError) as exc:
        print(f"phoneprobe: runtime failure: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
