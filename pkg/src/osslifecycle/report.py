"""Report bundle: metric tables, routing statistics, attribution matrices and an HTML summary."""

from __future__ import annotations

import csv
import html
import json
from pathlib import Path
from typing import Any, Mapping, Sequence

from .evaluation import ConfusionMatrix, MetricReport
from .pipeline import ROUTES, DecisionTrace
from .plots import render_plots


def routing_table(traces: Sequence[DecisionTrace], errors: Mapping[str, str] | None = None) -> dict[str, int]:
    counts = {r: 0 for r in ROUTES}
    for t in traces:
        counts[t.route] += 1
    if errors:
        counts["error"] = len(errors)
    return counts


def _table(rows: Sequence[Sequence[Any]], header: Sequence[str]) -> str:
    head = "".join(f"<th>{html.escape(str(h))}</th>" for h in header)
    body = "".join("<tr>" + "".join(f"<td>{html.escape(str(c))}</td>" for c in r) + "</tr>" for r in rows)
    return f"<table><thead><tr>{head}</tr></thead><tbody>{body}</tbody></table>"


def _fmt(v: Any) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def _summary_html(bundle: Mapping[str, Any], svgs: Mapping[str, str], notes: Sequence[str]) -> str:
    m = bundle["metrics"]
    parts = ["<!DOCTYPE html><html><head><meta charset='utf-8'><title>Lifecycle stage report</title>",
             "<style>body{font-family:sans-serif;max-width:60em;margin:2em auto}"
             "table{border-collapse:collapse;margin:1em 0}td,th{border:1px solid #999;padding:2px 8px}</style>",
             "</head><body><h1>Lifecycle stage classification report</h1>", "<h2>Overall</h2>",
             _table([[k, _fmt(m[k])] for k in ("accuracy", "balanced_accuracy", "macro_f1", "weighted_f1", "ece")],
                    ["metric", "value"]),
             "<h2>Per class</h2>",
             _table([[c, _fmt(v["precision"]), _fmt(v["recall"]), _fmt(v["f1"]), v["support"]]
                     for c, v in m["per_class"].items()], ["class", "precision", "recall", "F1", "support"]),
             "<h2>Routing</h2>", _table(list(bundle["routing"].items()), ["route", "count"])]
    if "confusion_matrix.svg" in svgs:
        parts += ["<h2>Confusion matrix</h2>", svgs["confusion_matrix.svg"]]
    xai = bundle.get("attribution")
    if xai:
        parts += ["<h2>Category importance</h2>",
                  _table([[c, _fmt(v)] for c, v in xai["combined"].items()], ["category", "importance"])]
        for name in ("category_heatmap.svg", "category_importance.svg", "temporal_attribution.svg"):
            if name in svgs:
                parts.append(svgs[name])
        if xai.get("recency_ratio") is not None:
            parts.append(f"<p>Recency ratio (last 12 months vs months 18-24 before the window end): "
                         f"{xai['recency_ratio']:.3f}</p>")
    else:
        parts.append("<h2>Explainability</h2><p>No attribution results were available; section omitted.</p>")
    abl = bundle.get("ablation")
    if abl:
        parts += ["<h2>Category ablation</h2>",
                  _table([[c, _fmt(abl["accuracy"][c]), _fmt(abl["drop"][c])] for c in abl["accuracy"]],
                         ["category removed", "accuracy", "drop"])]
        if abl.get("spearman") is not None:
            parts.append(f"<p>Spearman rank correlation with attribution ranking: {abl['spearman']:.3f}</p>")
    if notes:
        parts.append("<h2>Notes</h2><ul>" + "".join(f"<li>{html.escape(n)}</li>" for n in notes) + "</ul>")
    parts.append("</body></html>\n")
    return "\n".join(parts)


def emit_report(report: MetricReport, confusion: ConfusionMatrix, traces: Sequence[DecisionTrace],
                outdir: str | Path, attribution: Mapping[str, Any] | None = None,
                ablation: Mapping[str, Any] | None = None, errors: Mapping[str, str] | None = None) -> dict[str, Any]:
    """Write the report bundle and summary page; returns the bundle dictionary."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "metrics.json", out / "metrics.csv")
    confusion.to_csv(out / "confusion_matrix.csv")
    routing = routing_table(traces, errors)
    with open(out / "routing.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["route", "count"])
        w.writerows(routing.items())
    bundle: dict[str, Any] = {
        "metrics": report.to_json(),
        "confusion": {"classes": list(confusion.classes), "counts": confusion.counts.tolist()},
        "routing": routing,
        "attribution": dict(attribution) if attribution else None,
        "ablation": dict(ablation) if ablation else None,
    }
    notes = [] if attribution else ["explainability section omitted: no attribution input"]
    if attribution:
        (out / "category_importance.json").write_text(
            json.dumps(attribution.get("heatmap"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "bundle.json").write_text(json.dumps(bundle, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    files, plot_notes = render_plots(bundle, out / "plots")
    svgs = {}
    for f in files:
        text = f.read_text(encoding="utf-8")
        svgs[f.name] = text[text.index("<svg"):]
    (out / "summary.html").write_text(_summary_html(bundle, svgs, notes + plot_notes), encoding="utf-8")
    return bundle
