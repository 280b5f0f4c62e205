"""SVG figures drawn only from report-bundle data; byte-stable across runs."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_RC = {"svg.hashsalt": "osslifecycle", "svg.fonttype": "none", "font.size": 9}


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def confusion_heatmap(counts: Sequence[Sequence[int]], classes: Sequence[str], path: str | Path) -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.6, 4.0))
        ax.imshow(counts, cmap="Blues")
        top = max(max(r) for r in counts) or 1
        for i, row in enumerate(counts):
            for j, v in enumerate(row):
                ax.text(j, i, str(v), ha="center", va="center", color="white" if v > top / 2 else "black")
        ax.set_xticks(range(len(classes)), classes)
        ax.set_yticks(range(len(classes)), classes)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        fig.tight_layout()
        return _save(fig, Path(path))


def category_heatmap(payload: Mapping[str, Any], path: str | Path) -> Path:
    cats, models, vals = payload["categories"], payload["models"], payload["values"]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(1.6 + 1.1 * len(models), 3.6))
        ax.imshow(vals, cmap="viridis", aspect="auto")
        for i, row in enumerate(vals):
            for j, v in enumerate(row):
                ax.text(j, i, f"{v:.2f}", ha="center", va="center", color="white")
        ax.set_xticks(range(len(models)), models)
        ax.set_yticks(range(len(cats)), cats)
        fig.tight_layout()
        return _save(fig, Path(path))


def category_bars(importance: Mapping[str, float], path: str | Path) -> Path:
    names = list(importance)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.0, 3.2))
        ax.barh(range(len(names)), [importance[n] for n in names], color="#4c72b0")
        ax.set_yticks(range(len(names)), names)
        ax.invert_yaxis()
        ax.set_xlabel("normalised importance")
        fig.tight_layout()
        return _save(fig, Path(path))


def monthly_curve(curve: Sequence[float], path: str | Path, label: str = "mean |attribution|") -> Path:
    n = len(curve)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.0, 3.0))
        ax.plot(range(-n + 1, 1), list(curve), marker="o", ms=3)
        ax.set_xlabel("month relative to window end")
        ax.set_ylabel(label)
        fig.tight_layout()
        return _save(fig, Path(path))


def render_plots(bundle: Mapping[str, Any], outdir: str | Path) -> tuple[list[Path], list[str]]:
    """Draw every figure the bundle has data for; returns (files, notes about skipped figures)."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    files, notes = [], []
    cm = bundle.get("confusion")
    if cm:
        files.append(confusion_heatmap(cm["counts"], cm["classes"], out / "confusion_matrix.svg"))
    else:
        notes.append("confusion heatmap skipped: no confusion matrix in the bundle")
    xai = bundle.get("attribution") or {}
    if xai.get("heatmap"):
        files.append(category_heatmap(xai["heatmap"], out / "category_heatmap.svg"))
    else:
        notes.append("category heatmap skipped: no attribution data")
    if xai.get("combined"):
        files.append(category_bars(xai["combined"], out / "category_importance.svg"))
    else:
        notes.append("category bar chart skipped: no attribution data")
    if xai.get("monthly"):
        files.append(monthly_curve(xai["monthly"], out / "temporal_attribution.svg"))
    else:
        notes.append("temporal curve skipped: no per-month attribution")
    return files, notes
