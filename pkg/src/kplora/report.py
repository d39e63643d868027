"""Report emission: JSON, aligned text tables, and PNG figures.

Tables mirror the shape of the usual model-comparison layout (Model,
MPJPE, PCK@0.05, PCK@0.10, Trainable Params) and the rank-ablation layout
(LoRA Rank, MPJPE, PCK@0.05, PCK@0.10). Every writer is deterministic:
sorted JSON keys, fixed float formatting, and figures rendered through
the Agg backend with fixed metadata.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .metrics import EvalReport  # noqa: E402

_PNG_META = {"Software": None}  # drop the version string for stable bytes


def _fmt(value, digits=4) -> str:
    return "n/a" if value is None else f"{value:.{digits}f}"


def _alpha_key(alpha: float) -> str:
    return f"{alpha:g}"


def report_to_dict(report: EvalReport, label: str, trainable_params=None) -> dict:
    return {
        "model": label,
        "mpjpe": report.mpjpe,
        "pck": {_alpha_key(a): report.pck[a] for a in report.pck_alphas},
        "per_class": {
            cls: {
                "mpjpe": row.mpjpe,
                "pck": {_alpha_key(a): row.pck[a] for a in report.pck_alphas},
                "instances": row.instances,
            }
            for cls, row in sorted(report.per_class.items())
        },
        "matched": report.matched,
        "unmatched_gt": report.unmatched_gt,
        "unmatched_pred": report.unmatched_pred,
        "scored_keypoints": report.scored_keypoints,
        "unmatched_policy": report.unmatched_policy,
        "trainable_params": trainable_params,
    }


def _render_table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [
        max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
        for i, h in enumerate(headers)
    ]
    def line(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    sep = "-" * (sum(widths) + 2 * (len(widths) - 1))
    return "\n".join([line(headers), sep] + [line(r) for r in rows]) + "\n"


def comparison_table(rows: list[dict]) -> str:
    """Model-comparison table; one dict per row as from report_to_dict."""
    body = []
    for r in rows:
        params = r.get("trainable_params")
        body.append(
            [
                str(r["model"]),
                _fmt(r["mpjpe"]),
                _fmt(r["pck"].get("0.05")),
                _fmt(r["pck"].get("0.1", r["pck"].get("0.10"))),
                "-" if params is None else f"{params:,}",
            ]
        )
    return _render_table(
        ["Model", "MPJPE", "PCK@0.05", "PCK@0.10", "Trainable Params"], body
    )


def ablation_table(rows: list[dict]) -> str:
    """Rank-ablation table; rows carry rank plus metric fields."""
    body = [
        [
            f"Rank = {r['rank']}",
            _fmt(r["mpjpe"]),
            _fmt(r["pck"].get("0.05")),
            _fmt(r["pck"].get("0.1", r["pck"].get("0.10"))),
        ]
        for r in rows
    ]
    return _render_table(["LoRA Rank", "MPJPE", "PCK@0.05", "PCK@0.10"], body)


def per_class_figure(report: EvalReport, path: str | Path) -> None:
    """Grouped bars of per-class PCK plus an MPJPE overlay axis."""
    classes = sorted(report.per_class)
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(9, 6), sharex=True)
    if classes:
        x = np.arange(len(classes))
        alphas = report.pck_alphas
        width = 0.8 / max(len(alphas), 1)
        for i, a in enumerate(alphas):
            vals = [report.per_class[c].pck[a] or 0.0 for c in classes]
            ax1.bar(x + (i - (len(alphas) - 1) / 2) * width, vals, width,
                    label=f"PCK@{_alpha_key(a)}")
        ax1.set_ylabel("PCK")
        ax1.set_ylim(0, 1.05)
        ax1.legend(loc="lower right")
        ax2.bar(x, [report.per_class[c].mpjpe or 0.0 for c in classes],
                0.5, color="tab:gray")
        ax2.set_ylabel("MPJPE")
        ax2.set_xticks(x)
        ax2.set_xticklabels(classes, rotation=45, ha="right")
    else:
        ax1.text(0.5, 0.5, "no matched instances", ha="center", va="center")
        ax1.set_axis_off()
        ax2.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def ablation_figure(rows: list[dict], path: str | Path) -> None:
    """Metric-vs-rank lines for the ablation report."""
    fig, ax1 = plt.subplots(figsize=(7, 4.5))
    ranks = [r["rank"] for r in rows]
    for key, style in (("0.05", "o-"), ("0.1", "s-")):
        vals = [r["pck"].get(key, r["pck"].get(key + "0")) for r in rows]
        ax1.plot(ranks, vals, style, label=f"PCK@{key}")
    ax1.set_xlabel("LoRA rank")
    ax1.set_ylabel("PCK")
    ax1.set_xscale("log", base=2)
    ax1.set_xticks(ranks)
    ax1.set_xticklabels([str(r) for r in ranks])
    ax1.set_ylim(0, 1.05)
    ax2 = ax1.twinx()
    ax2.plot(ranks, [r["mpjpe"] for r in rows], "d--", color="tab:red", label="MPJPE")
    ax2.set_ylabel("MPJPE", color="tab:red")
    handles1, labels1 = ax1.get_legend_handles_labels()
    handles2, labels2 = ax2.get_legend_handles_labels()
    ax1.legend(handles1 + handles2, labels1 + labels2, loc="center right")
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def loss_curve_figure(log_csv: str | Path, path: str | Path) -> None:
    """Training-loss curve from the step log."""
    steps, losses = [], []
    with Path(log_csv).open(newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            steps.append(int(row["step"]))
            losses.append(float(row["loss"]))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def write_json(payload, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
