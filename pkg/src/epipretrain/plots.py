"""Figures from a results directory: loss curves, RMSE by horizon, RMSE by data fraction."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


class MissingResults(FileNotFoundError):
    pass


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def emit_plots(results_dir) -> list[Path]:
    results_dir = Path(results_dir)
    reports = sorted(results_dir.glob("seed_*/pretrain_report.json"))
    finetune = sorted(results_dir.glob("seed_*/finetune_reports.json"))
    evals = sorted(results_dir.glob("seed_*/eval.csv"))
    sweep = results_dir / "sweep.csv"
    if not (reports or finetune or evals or sweep.exists()):
        raise MissingResults(
            f"{results_dir}: no results found; expected seed_*/pretrain_report.json, "
            "seed_*/finetune_reports.json, seed_*/eval.csv or sweep.csv"
        )
    written = []

    if reports or finetune:
        fig, ax = plt.subplots(figsize=(6, 4))
        for p in reports:
            ax.plot(json.loads(p.read_text())["total"], label=f"{p.parent.name} pretrain")
        for p in finetune:
            runs = json.loads(p.read_text())
            if runs and runs[-1]:
                curve = [x for rep in runs[-1] for x in rep["total"]]
                ax.plot(curve, label=f"{p.parent.name} last fine-tune", alpha=0.7)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend(fontsize=7)
        out = results_dir / "loss_curves.png"
        fig.tight_layout()
        fig.savefig(out)
        plt.close(fig)
        written.append(out)

    if evals:
        fig, ax = plt.subplots(figsize=(6, 4))
        width = 0.8 / len(evals)
        for i, p in enumerate(evals):
            rows = [r for r in _read_csv(p) if r["horizon"] != "avg"]
            xs = [float(r["horizon"]) + i * width for r in rows]
            ax.bar(xs, [float(r["rmse"]) for r in rows], width=width, label=p.parent.name)
        ax.set_xlabel("weeks ahead")
        ax.set_ylabel("RMSE")
        ax.legend(fontsize=7)
        out = results_dir / "rmse_by_horizon.png"
        fig.tight_layout()
        fig.savefig(out)
        plt.close(fig)
        written.append(out)

    if sweep.exists():
        rows = [r for r in _read_csv(sweep) if not r["flag"]]
        fig, ax = plt.subplots(figsize=(6, 4))
        for seed in sorted({r["seed"] for r in rows}):
            pts = sorted((float(r["fraction"]), float(r["avg_rmse"])) for r in rows if r["seed"] == seed)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"seed {seed}")
        ax.set_xlabel("fraction of training data")
        ax.set_ylabel("avg RMSE")
        ax.legend(fontsize=7)
        out = results_dir / "rmse_by_fraction.png"
        fig.tight_layout()
        fig.savefig(out)
        plt.close(fig)
        written.append(out)
    return written
