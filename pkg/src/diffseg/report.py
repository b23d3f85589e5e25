"""Ablation report: comparison table, per-seed table and training-curve SVG."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .metrics import paired_t_test

ALPHA = 0.01
REPORT_CSV = "ablation_report.csv"
SEEDS_CSV = "ablation_seeds.csv"
CURVES_SVG = "training_curves.svg"
REPORT_COLUMNS = ("arm", "status", "seeds", "dice_mean", "dice_sd", "hd95_mean", "hd95_sd",
                  "delta_dice_vs_reference", "p_value", "significant", "config_hashes")
SEED_COLUMNS = ("arm", "seed", "status", "config_hash", "mean_dice", "mean_hd95",
                "delta_dice_vs_reference")


def _load_run(run_dir: Path):
    summary = run_dir / "summary_test.json"
    if (run_dir / "FAILED").exists() or not summary.exists():
        return None
    return json.loads(summary.read_text())


def _load_curve(run_dir: Path):
    path = run_dir / "train_log.csv"
    if not path.exists():
        return None
    steps, totals = [], []
    with path.open() as fh:
        for row in csv.DictReader(line for line in fh if not line.startswith("#")):
            steps.append(int(row["step"]))
            totals.append(float(row["total"]))
    return np.asarray(steps), np.asarray(totals)


def _num(x) -> float:
    return math.nan if x is None else float(x)


def _mean_sd(values) -> tuple[float, float]:
    v = np.asarray([x for x in values if not math.isnan(x)])
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.4f}"


def collect(out_dir, arms, seeds) -> dict:
    """``{arm: {seed: summary or None}}`` read from an ablation directory."""
    out = Path(out_dir)
    return {arm: {s: _load_run(out / arm / f"seed{s}") for s in seeds} for arm in arms}


def _paired_case_dice(runs_a, runs_b, seeds):
    """Per-case Dice of two arms, paired on (seed, case)."""
    a, b = [], []
    for s in seeds:
        ra, rb = runs_a.get(s), runs_b.get(s)
        if ra is None or rb is None:
            continue
        db = dict(zip(rb["case_ids"], rb["case_dice"]))
        for case, d in zip(ra["case_ids"], ra["case_dice"]):
            if case in db:
                a.append(d)
                b.append(db[case])
    return a, b


def write_report(out_dir, arms, seeds, reference: str = "proposed") -> list[dict]:
    """Write the report CSVs and SVG into ``out_dir``; return the arm rows."""
    out = Path(out_dir)
    seeds = list(seeds)
    runs = collect(out, arms, seeds)
    ref_runs = runs.get(reference) or collect(out, [reference], seeds)[reference]
    rows, seed_rows = [], []
    for arm in arms:
        done = {s: r for s, r in runs[arm].items() if r is not None}
        status = "ok" if len(done) == len(seeds) else ("failed" if not done else "partial")
        case_dice = [d for r in done.values() for d in r["case_dice"]]
        case_hd = [_num(h) for r in done.values() for h in r["case_hd95"]]
        dm, ds = _mean_sd(case_dice)
        hm, hs = _mean_sd(case_hd)
        a, b = _paired_case_dice(runs[arm], ref_runs, seeds)
        if arm == reference or len(a) < 2:
            p, delta = math.nan, (0.0 if arm == reference else math.nan)
        else:
            p = paired_t_test(a, b)[1]
            delta = float(np.mean(a) - np.mean(b))
        rows.append({
            "arm": arm, "status": status, "seeds": len(done),
            "dice_mean": dm, "dice_sd": ds, "hd95_mean": hm, "hd95_sd": hs,
            "delta_dice_vs_reference": delta, "p_value": p,
            "significant": (not math.isnan(p)) and p < ALPHA,
            "config_hashes": " ".join(r["config_hash"] for r in done.values()),
        })
        for s in seeds:
            r = runs[arm][s]
            ref = ref_runs.get(s)
            md = r["mean_dice"] if r else math.nan
            seed_rows.append({
                "arm": arm, "seed": s, "status": "ok" if r else "failed",
                "config_hash": r["config_hash"] if r else "",
                "mean_dice": md, "mean_hd95": _num(r["mean_hd95"]) if r else math.nan,
                "delta_dice_vs_reference": md - ref["mean_dice"] if (r and ref) else math.nan,
            })

    with (out / REPORT_CSV).open("w", newline="") as fh:
        fh.write(f"# reference arm: {reference}; paired t-test on per-case Dice, alpha={ALPHA}\n")
        fh.write("# non_diffusion matches the U-net architecture and optimization step count\n")
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([r["arm"], r["status"], r["seeds"],
                        _fmt(r["dice_mean"]), _fmt(r["dice_sd"]), _fmt(r["hd95_mean"]), _fmt(r["hd95_sd"]),
                        _fmt(r["delta_dice_vs_reference"]),
                        "nan" if math.isnan(r["p_value"]) else f"{r['p_value']:.3g}",
                        "yes" if r["significant"] else "no", r["config_hashes"]])
    with (out / SEEDS_CSV).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SEED_COLUMNS)
        for r in seed_rows:
            w.writerow([r["arm"], r["seed"], r["status"], r["config_hash"], _fmt(r["mean_dice"]),
                        _fmt(r["mean_hd95"]), _fmt(r["delta_dice_vs_reference"])])
    write_curves(out, arms, seeds)
    return rows


def _smooth(y: np.ndarray, window: int) -> np.ndarray:
    window = max(1, min(window, len(y)))
    kernel = np.ones(window) / window
    return np.convolve(y, kernel, mode="valid")


def write_curves(out_dir, arms, seeds, window: int = 50) -> Path:
    """Seed-averaged, moving-average training loss per arm as a standalone SVG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    fig, ax = plt.subplots(figsize=(7, 4))
    for arm in arms:
        curves = [c for c in (_load_curve(out / arm / f"seed{s}") for s in seeds) if c is not None]
        if not curves:
            continue
        n = min(len(c[0]) for c in curves)
        if n == 0:
            continue
        mean = np.mean([c[1][:n] for c in curves], axis=0)
        y = _smooth(mean, window)
        x = curves[0][0][:n][len(mean) - len(y):]
        ax.plot(x, y, label=arm, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel(f"training loss ({window}-step mean)")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    if ax.lines:
        ax.legend(fontsize=8)
    path = out / CURVES_SVG
    with matplotlib.rc_context({"svg.hashsalt": "diffseg", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
