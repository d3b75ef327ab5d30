"""CSV helpers and figure rendering for experiment directories."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

# files an experiment directory may contain, and what renders from them
INPUTS = {
    "success.csv": "success rate per threshold",
    "chain.csv": "chain coverage and IoU per problem",
    "value_curves.json": "rank-reward value curves",
    "tracking.csv": "closed-loop tracking trials",
}


class ExportError(FileNotFoundError):
    pass


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: _fmt(r[c]) for c in columns})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return v


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _success_plot(src: Path, out: Path, plt) -> list[Path]:
    rows = read_csv(src)
    th = [float(r["threshold"]) for r in rows]
    rate = [100 * float(r["success_rate"]) for r in rows]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar([f"{t:g}" for t in th], rate, color="tab:blue")
    ax.set_xlabel("translation threshold (board lengths)")
    ax.set_ylabel("success rate (%)")
    ax.set_ylim(0, 100)
    fig.tight_layout()
    p = out / "success_rates.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    return [p]


def _chain_plot(src: Path, out: Path, plt) -> list[Path]:
    rows = read_csv(src)
    lengths = sorted({int(r["length"]) for r in rows})
    agg = []
    for L in lengths:
        sel = [r for r in rows if int(r["length"]) == L]
        agg.append({"length": L,
                    "mean_iou": float(np.mean([float(r["iou"]) for r in sel])),
                    "mean_coverage": float(np.mean([float(r["coverage"]) for r in sel])),
                    "n": len(sel)})
    csv_p = out / "chain_by_length.csv"
    write_csv(csv_p, ("length", "mean_iou", "mean_coverage", "n"), agg)
    fig, ax = plt.subplots(figsize=(4, 3))
    for key, label in (("iou", "IoU"), ("coverage", "coverage")):
        data = [[float(r[key]) for r in rows if int(r["length"]) == L] for L in lengths]
        ax.plot(lengths, [np.mean(d) for d in data], marker="o", label=label)
    ax.set_xlabel("problem length (steps)")
    ax.set_ylabel("overlap with goal")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    p = out / "chain_vs_length.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    return [csv_p, p]


def _curves_plot(src: Path, out: Path, plt) -> list[Path]:
    data = json.loads(src.read_text())
    curves = data["curves"]
    lengths = sorted({c["length"] for c in curves})
    csv_p = out / "value_rho.csv"
    write_csv(csv_p, ("length", "run", "rho"), curves)
    fig, axes = plt.subplots(1, len(lengths), figsize=(2.2 * len(lengths), 2.6), sharey=True, squeeze=False)
    for ax, L in zip(axes[0], lengths):
        for c in curves:
            if c["length"] == L:
                ax.plot(c["progress"], c["value"], color="tab:green", alpha=0.6, lw=1)
        ax.set_title(f"{L} steps")
        ax.set_xlabel("progress")
    axes[0][0].set_ylabel("normalised value")
    fig.tight_layout()
    p = out / "value_curves.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    return [csv_p, p]


def _tracking_plot(src: Path, out: Path, plt) -> list[Path]:
    rows = read_csv(src)
    mpc = [float(r["mpc_error"]) for r in rows]
    ol = [float(r["open_loop_error"]) for r in rows]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.boxplot([mpc, ol])
    ax.set_xticks([1, 2], ["closed loop", "open loop"])
    ax.set_ylabel("terminal translation error")
    fig.tight_layout()
    p = out / "tracking_errors.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    return [p]


RENDERERS = {
    "success.csv": _success_plot,
    "chain.csv": _chain_plot,
    "value_curves.json": _curves_plot,
    "tracking.csv": _tracking_plot,
}


def export_plots(exp_dir, out_dir=None) -> list[Path]:
    """Render figures and aggregated data files for whatever results ``exp_dir`` holds."""
    src = Path(exp_dir)
    found = [name for name in INPUTS if (src / name).is_file()]
    if not found:
        expected = ", ".join(f"{n} ({d})" for n, d in INPUTS.items())
        raise ExportError(f"{src}: no experiment outputs found; expected at least one of {expected}")
    out = Path(out_dir) if out_dir is not None else src / "plots"
    out.mkdir(parents=True, exist_ok=True)
    plt = _pyplot()
    written = []
    for name in found:
        written += RENDERERS[name](src / name, out, plt)
    return written
