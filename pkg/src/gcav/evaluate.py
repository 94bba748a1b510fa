"""TGCAV scoring, cross-layer stability statistics and report export."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .autoencoder import LayerAutoencoder
from .cav import GradientCache, ScoreTable, tcav_score
from .fusion import GlobalCav, decode_gcav
from .probe import TargetModel, World

REPORT_COLUMNS = ["class", "concept", "method", "mean", "std", "cv", "rr"]
METHODS = ("TCAV", "TGCAV")


def tgcav_score(model: TargetModel, layer: str, k: int, x_k, g: GlobalCav,
                autoencoders: Mapping[str, LayerAutoencoder],
                grads: Optional[np.ndarray] = None) -> float:
    """TCAV with the unit decode of ``g`` at ``layer`` standing in for the CAV."""
    if layer not in autoencoders:
        raise KeyError(f"no decoder for layer {layer!r}")
    v = decode_gcav(g, autoencoders, [layer])[layer].v_unit
    return tcav_score(model, layer, k, x_k, v, grads=grads)


def score_tgcav(gcavs: Sequence[GlobalCav], autoencoders: Mapping[str, LayerAutoencoder],
                world: World, grads: GradientCache, table: ScoreTable,
                method: str = "TGCAV") -> ScoreTable:
    for g in gcavs:
        for layer in table.layers:
            for k, cls in enumerate(world.class_ids):
                s = tgcav_score(grads.model, layer, k, None, g, autoencoders,
                                grads=grads.get(layer, k))
                table.set(g.concept_id, cls, layer, g.run_index, method, s)
    return table


# -- statistics ------------------------------------------------------------------

@dataclass
class LayerStats:
    """Mean, population std, CV and RR of one per-layer score series.

    ``cv`` and ``rr`` are None when the mean is zero.
    """

    mean: float
    std: float
    cv: Optional[float]
    rr: Optional[float]
    series: List[float]
    iqr: Optional[float] = None

    @property
    def defined(self) -> bool:
        return self.cv is not None and self.rr is not None


def layer_stats(series: Sequence[float], with_iqr: bool = False) -> LayerStats:
    s = np.asarray(series, dtype=np.float64)
    if s.ndim != 1 or len(s) < 2:
        raise ValueError("layer statistics need a series of >= 2 layers")
    mean = float(s.mean())
    std = float(s.std())
    if mean > 0:
        cv: Optional[float] = std / mean
        rr: Optional[float] = float(s.max() - s.min()) / mean
    elif mean == 0:
        cv = rr = None
    else:
        raise ValueError(f"negative mean score {mean}")
    iqr = None
    if with_iqr:
        q75, q25 = np.percentile(s, [75, 25])
        iqr = float(q75 - q25)
    return LayerStats(mean, std, cv, rr, [float(x) for x in s], iqr)


def cv_from_table(mean: float, std: float) -> float:
    if mean <= 0:
        raise ValueError("CV needs a positive mean")
    return std / mean


def cv_bounds(mean: float, std: float, decimals: int = 3) -> tuple:
    """Range of std/mean consistent with ``mean`` and ``std`` printed to ``decimals`` places."""
    half = 0.5 * 10.0 ** -decimals
    if mean - half <= 0:
        raise ValueError("CV bounds need a mean clear of zero")
    return max(std - half, 0.0) / (mean + half), (std + half) / (mean - half)


def pct_change(before: float, after: float) -> float:
    """Percent change from unrounded values; zero baselines are rejected."""
    if before == 0:
        raise ZeroDivisionError("percent change from a zero baseline")
    return (after - before) / before * 100.0


def strictly_more_stable(new: LayerStats, old: LayerStats) -> bool:
    """Std, CV and RR of ``new`` all strictly below ``old``; undefined CV/RR fails."""
    if not new.defined or not old.defined:
        return False
    return new.std < old.std and new.cv < old.cv and new.rr < old.rr


# -- report ------------------------------------------------------------------------

@dataclass
class ComparisonRow:
    cls: str
    concept: str
    relevant: Optional[bool]
    stats: Dict[str, LayerStats]

    @property
    def std_reduction(self) -> Optional[float]:
        old, new = self.stats["TCAV"], self.stats["TGCAV"]
        if old.std == 0:
            return None
        return 1.0 - new.std / old.std

    @property
    def improved(self) -> bool:
        return strictly_more_stable(self.stats["TGCAV"], self.stats["TCAV"])


@dataclass
class ComparisonReport:
    model: str
    layers: List[str]
    rows: List[ComparisonRow] = field(default_factory=list)

    def row(self, cls: str, concept: str) -> ComparisonRow:
        for r in self.rows:
            if r.cls == cls and r.concept == concept:
                return r
        raise KeyError((cls, concept))

    def improved_fraction(self) -> float:
        return sum(r.improved for r in self.rows) / len(self.rows)

    def median_std_reduction(self) -> float:
        vals = [r.std_reduction for r in self.rows if r.std_reduction is not None]
        return float(np.median(vals)) if vals else float("nan")

    def relevance_preserved(self, method: str = "TGCAV") -> bool:
        """Every class ranks each relevant concept's mean above every irrelevant one."""
        for cls in dict.fromkeys(r.cls for r in self.rows):
            rows = [r for r in self.rows if r.cls == cls and r.relevant is not None]
            rel = [r.stats[method].mean for r in rows if r.relevant]
            irr = [r.stats[method].mean for r in rows if not r.relevant]
            if rel and irr and min(rel) <= max(irr):
                return False
        return True

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "layers": list(self.layers),
            "rows": [{"class": r.cls, "concept": r.concept, "relevant": r.relevant,
                      "stats": {m: asdict(s) for m, s in r.stats.items()}}
                     for r in self.rows],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ComparisonReport":
        rows = [ComparisonRow(r["class"], r["concept"], r["relevant"],
                              {m: LayerStats(**s) for m, s in r["stats"].items()})
                for r in d["rows"]]
        return cls(d["model"], list(d["layers"]), rows)


def build_report(baseline: ScoreTable, tgcav: ScoreTable, world: Optional[World] = None,
                 model: str = "target", with_iqr: bool = False) -> ComparisonReport:
    grid = (baseline.concepts, baseline.classes, baseline.layers, baseline.runs)
    if grid != (tgcav.concepts, tgcav.classes, tgcav.layers, tgcav.runs):
        raise ValueError("TCAV and TGCAV tables cover different grids")
    for table, method in ((baseline, "TCAV"), (tgcav, "TGCAV")):
        if not table.is_complete(method):
            raise ValueError(f"{method} score grid is incomplete")
    report = ComparisonReport(model, list(baseline.layers))
    for cls in baseline.classes:
        for concept in baseline.concepts:
            relevant = world.concept(concept).relevance[cls] if world is not None else None
            stats = {
                "TCAV": layer_stats(baseline.layer_series(concept, cls, "TCAV"), with_iqr),
                "TGCAV": layer_stats(tgcav.layer_series(concept, cls, "TGCAV"), with_iqr),
            }
            report.rows.append(ComparisonRow(cls, concept, relevant, stats))
    return report


# -- export ------------------------------------------------------------------------

def _fmt(x: Optional[float]) -> str:
    return "undefined" if x is None else repr(float(x))


def report_csv(report: ComparisonReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in report.rows:
        for m in METHODS:
            s = r.stats[m]
            w.writerow([r.cls, r.concept, m, _fmt(s.mean), _fmt(s.std), _fmt(s.cv), _fmt(s.rr)])
    return buf.getvalue()


def per_run_csv(table: ScoreTable, methods: Sequence[str] = METHODS) -> str:
    """Layer statistics of every single run, for variance-of-variance inspection."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "concept", "method", "run"] + REPORT_COLUMNS[3:])
    for m in methods:
        for cls in table.classes:
            for c in table.concepts:
                for run in range(table.runs):
                    s = layer_stats([table.get(c, cls, l, run, m) for l in table.layers])
                    w.writerow([cls, c, m, run, _fmt(s.mean), _fmt(s.std), _fmt(s.cv), _fmt(s.rr)])
    return buf.getvalue()


def report_json(report: ComparisonReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


_PALETTE = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7"]


def report_svg(report: ComparisonReport, method: str) -> str:
    """Grouped bars: one panel per class, concepts on the x axis, one bar per layer."""
    classes = list(dict.fromkeys(r.cls for r in report.rows))
    concepts = list(dict.fromkeys(r.concept for r in report.rows))
    n_layers = len(report.layers)
    bar, gap, panel_h, plot_h, left = 10, 14, 170, 120, 40
    group_w = n_layers * bar + gap
    width = left + len(concepts) * group_w + 20
    height = len(classes) * panel_h + 40
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="10">',
           f'<text x="{left}" y="14" font-size="12">{method} scores per layer</text>']
    for i, l in enumerate(report.layers):
        out.append(f'<rect x="{width - 60}" y="{4 + 11 * i}" width="8" height="8" '
                   f'fill="{_PALETTE[i % len(_PALETTE)]}"/><text x="{width - 48}" y="{11 + 11 * i}">{l}</text>')
    for ci, cls in enumerate(classes):
        top = 30 + ci * panel_h
        base = top + plot_h
        out.append(f'<text x="4" y="{top + 10}">{cls}</text>')
        out.append(f'<line x1="{left}" y1="{base}" x2="{width - 20}" y2="{base}" stroke="#333"/>')
        for gi, concept in enumerate(concepts):
            series = report.row(cls, concept).stats[method].series
            x0 = left + gi * group_w
            for li, v in enumerate(series):
                h = round(v * plot_h, 2)
                out.append(f'<rect x="{x0 + li * bar}" y="{round(base - h, 2)}" width="{bar - 1}" '
                           f'height="{h}" fill="{_PALETTE[li % len(_PALETTE)]}"/>')
            out.append(f'<text x="{x0}" y="{base + 12}">{concept}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def report_filename(model: str, timestamp: str, ext: str) -> str:
    return f"report_{model}_{timestamp}.{ext}"


def export(report: ComparisonReport, out_dir: Path, formats: Sequence[str] = ("csv", "json", "svg"),
           timestamp: str = "stable") -> List[Path]:
    """Write the report in each requested format; returns the written paths."""
    out_dir = Path(out_dir)
    unknown = set(formats) - {"csv", "json", "svg"}
    if unknown:
        raise ValueError(f"unknown report formats {sorted(unknown)}")
    written = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        if "csv" in formats:
            p = out_dir / report_filename(report.model, timestamp, "csv")
            p.write_text(report_csv(report))
            written.append(p)
        if "json" in formats:
            p = out_dir / report_filename(report.model, timestamp, "json")
            p.write_text(report_json(report))
            written.append(p)
        if "svg" in formats:
            for m in METHODS:
                p = out_dir / report_filename(f"{report.model}_{m.lower()}", timestamp, "svg")
                p.write_text(report_svg(report, m))
                written.append(p)
    except OSError as e:
        raise OSError(f"writing report under {out_dir}: {e}") from e
    return written


def is_finite_report(report: ComparisonReport) -> bool:
    return all(math.isfinite(s.mean) and math.isfinite(s.std)
               for r in report.rows for s in r.stats.values())
