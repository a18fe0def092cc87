"""Plain-text metric tables, `key = value` dumps, and PNG chart rendering.

Every writer is deterministic: fixed float formatting, insertion-ordered
keys, and matplotlib figures saved without varying metadata so repeated
runs produce byte-identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from .metrics import CorruptionScores, MetricReport  # noqa: E402
from .scan_io import atomic_write_bytes  # noqa: E402


def _fmt(value: float) -> str:
    return "nan" if not np.isfinite(value) else f"{value:.4f}"


def metric_table(report: MetricReport, class_names: Optional[Sequence[str]] = None) -> str:
    """Aligned per-class table with mean rows, scores in percent."""
    n = report.iou.shape[0]
    names = list(class_names) if class_names else [f"class {i}" for i in range(n)]
    width = max(len(s) for s in names + ["mean"])
    lines = [f"{'':{width}}  {'IoU %':>8}  {'Acc %':>8}"]
    for i, name in enumerate(names):
        iou = "-" if np.isnan(report.iou[i]) else f"{100 * report.iou[i]:8.2f}"
        acc = "-" if np.isnan(report.acc[i]) else f"{100 * report.acc[i]:8.2f}"
        lines.append(f"{name:{width}}  {iou:>8}  {acc:>8}")
    lines.append(f"{'mean':{width}}  {100 * report.miou:8.2f}  {100 * report.macc:8.2f}")
    return "\n".join(lines)


def metric_kv(report: MetricReport) -> str:
    """Machine-readable dump, one `key = value` per line, percent scores."""
    lines = []
    for i in range(report.iou.shape[0]):
        lines.append(f"iou.class{i} = {_fmt(100 * report.iou[i])}")
    for i in range(report.acc.shape[0]):
        lines.append(f"acc.class{i} = {_fmt(100 * report.acc[i])}")
    lines.append(f"miou = {_fmt(100 * report.miou)}")
    lines.append(f"macc = {_fmt(100 * report.macc)}")
    return "\n".join(lines) + "\n"


def corruption_table(scores: CorruptionScores) -> str:
    names = list(scores.ce)
    width = max([len(s) for s in names + ["mean"]])
    lines = [f"{'':{width}}  {'CE %':>8}  {'RR %':>8}"]
    for name in names:
        lines.append(f"{name:{width}}  {scores.ce[name]:8.2f}  {scores.rr[name]:8.2f}")
    lines.append(f"{'mean':{width}}  {scores.mce:8.2f}  {scores.mrr:8.2f}")
    return "\n".join(lines)


def corruption_kv(scores: CorruptionScores) -> str:
    lines = []
    for name in scores.ce:
        lines.append(f"ce.{name} = {_fmt(scores.ce[name])}")
    for name in scores.rr:
        lines.append(f"rr.{name} = {_fmt(scores.rr[name])}")
    lines.append(f"mce = {_fmt(scores.mce)}")
    lines.append(f"mrr = {_fmt(scores.mrr)}")
    return "\n".join(lines) + "\n"


def training_kv(losses: Sequence[float], miou: float, macc: float) -> str:
    lines = [f"epochs = {len(losses)}"]
    if losses:
        lines.append(f"first_loss = {_fmt(losses[0])}")
        lines.append(f"final_loss = {_fmt(losses[-1])}")
    lines.append(f"final_miou = {_fmt(100 * miou)}")
    lines.append(f"final_macc = {_fmt(100 * macc)}")
    return "\n".join(lines) + "\n"


def write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _save(fig, path: str | Path) -> None:
    # Empty metadata keeps the PNG bytes identical across runs.
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def save_iou_chart(report: MetricReport, path: str | Path,
                   class_names: Optional[Sequence[str]] = None) -> None:
    n = report.iou.shape[0]
    names = list(class_names) if class_names else [f"class {i}" for i in range(n)]
    xs = np.arange(n)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.8 * n + 2.0), 3.2))
    ax.bar(xs - 0.2, 100 * np.nan_to_num(report.iou), width=0.4, label="IoU")
    ax.bar(xs + 0.2, 100 * np.nan_to_num(report.acc), width=0.4, label="Acc")
    ax.axhline(100 * report.miou, color="gray", linestyle="--", linewidth=1,
               label=f"mIoU {100 * report.miou:.1f}")
    ax.set_xticks(xs, names, rotation=30, ha="right")
    ax.set_ylabel("percent")
    ax.set_ylim(0, 105)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def save_loss_chart(losses: Sequence[float], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.plot(np.arange(1, len(losses) + 1), losses, linewidth=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    fig.tight_layout()
    _save(fig, path)


def save_corruption_chart(scores: CorruptionScores, path: str | Path) -> None:
    names = list(scores.ce)
    xs = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(names) + 2.0), 3.2))
    ax.bar(xs - 0.2, [scores.ce[n] for n in names], width=0.4, label="CE")
    ax.bar(xs + 0.2, [scores.rr[n] for n in names], width=0.4, label="RR")
    ax.axhline(100.0, color="gray", linestyle="--", linewidth=1)
    ax.set_xticks(xs, names, rotation=30, ha="right")
    ax.set_ylabel("percent")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)
