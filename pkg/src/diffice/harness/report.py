"""Figures rendered from evaluated reports and persisted records.

Outputs (under ``figures/``):
    iterations.png   per-iteration realism/validity trends
    qd_vs_qs.png     oracle quality difference against input quality, per structure
    strips.png       original -> iteration 1..L image strips for a few inputs
    ablation.png     final-iteration metrics across the tau / L_p grid
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .. import metrics as MT  # noqa: E402
from .config import ExperimentConfig  # noqa: E402
from .pipeline import (MissingArtifact, _out, file_hash, load_records, load_reports, read_manifest,  # noqa: E402
                       tree_hashes, write_manifest)

# fixed metadata keeps PNG bytes reproducible across runs
PNG_META = {"Software": None}
STYLE = {"figure.dpi": 100, "font.size": 8, "axes.spines.top": False, "axes.spines.right": False,
         "axes.grid": True, "grid.alpha": 0.3}
STRUCT_COLORS = {"FP": "#d62728", "CSP": "#2ca02c", "TH": "#1f77b4"}


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="png", metadata=PNG_META)
    plt.close(fig)


def plot_iterations(rows: list[dict], path: Path) -> None:
    it = [r["iteration"] for r in rows]
    panels = [("cosine", "feature cosine", True), ("FD", "Frechet feature distance", False),
              ("MAD", "MAD", True), ("BKL", "BKL", False), ("MQD", "MQD", True), ("FR", "flip ratio", True)]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 3, figsize=(9, 5))
        for ax, (key, label, up) in zip(axes.ravel(), panels):
            vals = [np.nan if r[key] is None else r[key] for r in rows]
            ax.plot(it, vals, marker="o", color="k")
            ax.set_title(f"{label} ({'higher' if up else 'lower'} is better)")
            ax.set_xticks(it)
            ax.set_xlabel("iteration")
        fig.tight_layout()
        _save(fig, path)


def plot_qd_vs_qs(points: list[dict], path: Path) -> None:
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(10, 3.2), sharey=True)
        for ax, s in zip(axes, MT.STRUCTURES):
            pts = [p for p in points if p["structure"] == s and p["valid"]]
            qs = np.array([p["QS"] for p in pts])
            qd = np.array([p["QD"] for p in pts])
            confident = np.array([p["QS_O"] < MT.QS_THRESHOLD for p in pts], dtype=bool)
            if len(pts):
                ax.scatter(qs[confident], qd[confident], s=12, c=STRUCT_COLORS[s], label="QS_O(x) < 0.5")
                ax.scatter(qs[~confident], qd[~confident], s=12, facecolors="none", edgecolors=STRUCT_COLORS[s],
                           label="QS_O(x) >= 0.5")
            ax.axhline(0.0, color="0.4", lw=0.8)
            ax.set_xlim(0, 1)
            ax.set_xlabel(f"QS_{s}(x)")
            ax.set_title(f"QD_{s}")
        axes[0].set_ylabel("QS(x^c) - QS(x)")
        axes[0].legend(frameon=False, loc="lower left")
        fig.tight_layout()
        _save(fig, path)


def plot_strips(records, path: Path, n: int = 4) -> None:
    recs = records[:n]
    L = recs[0].L
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(recs), L + 1, figsize=(1.3 * (L + 1), 1.1 * len(recs)), squeeze=False)
        for r, rec in enumerate(recs):
            images = [rec.original, *rec.iterations]
            probs = [rec.p_sp_original, *rec.p_sp]
            for c, (im, p) in enumerate(zip(images, probs)):
                ax = axes[r, c]
                ax.imshow(im, cmap="gray", vmin=-1, vmax=1)
                ax.set_xticks([])
                ax.set_yticks([])
                ax.grid(False)
                ax.set_title(("input" if c == 0 else f"it {c}") + f"  p={p:.2f}", fontsize=6)
        fig.tight_layout()
        _save(fig, path)


def plot_ablation(table_csv: str, path: Path) -> None:
    rows = list(csv.DictReader(io.StringIO(table_csv)))
    labels = [f"tau={r['tau']}\nLp {r['L_p']}" + ("" if r["lambda_c"] == "search" else f"\nlc={r['lambda_c']}")
              for r in rows]
    x = np.arange(len(rows))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
        for ax, key in zip(axes, ("cosine", "MAD", "FD")):
            ax.bar(x, [float(r[key]) for r in rows], color=["0.3" if r["L_p"] == "on" else "0.7" for r in rows])
            ax.set_xticks(x)
            ax.set_xticklabels(labels, fontsize=5)
            ax.set_title(key)
        fig.tight_layout()
        _save(fig, path)


def cmd_report(config: ExperimentConfig) -> dict:
    out = _out(config)
    reports = load_reports(out)
    if not reports:
        raise MissingArtifact("metric reports", "evaluate")
    figs = out / "figures"
    figs.mkdir(parents=True, exist_ok=True)
    primary = "diff_ice" if "diff_ice" in reports else sorted(reports)[0]
    rep = reports[primary]
    plot_iterations(rep["per_iteration"], figs / "iterations.png")
    records = load_records(out, primary.replace("ablation_", "ablation/", 1))
    points = MT.build_report(records).qd_vs_qs
    if points:
        plot_qd_vs_qs(points, figs / "qd_vs_qs.png")
    plot_strips(records, figs / "strips.png")
    ablation = out / "reports" / "ablation.csv"
    if ablation.is_file():
        plot_ablation(ablation.read_text(), figs / "ablation.png")
    inputs = {"manifests/evaluate.json": file_hash(out / "manifests" / "evaluate.json")}
    read_manifest(out, "evaluate", "metric reports")
    return write_manifest(out, "report", config.section_hash("generate"), inputs,
                          {f"figures/{k}": v for k, v in tree_hashes(figs).items()})
