"""Static SVG figures from run CSVs.

Figures are built on a bare ``Figure`` (no pyplot global state), with a fixed
canvas, a fixed SVG hash salt and no date stamp, so identical CSVs render to
identical bytes.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
from matplotlib.backends.backend_svg import FigureCanvasSVG  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

MATRIX_CSV = "matrix.csv"
PROBE_CSV = "probe.csv"
ATTRIBUTION_CSV = "attribution.csv"
INPUTS = (MATRIX_CSV, PROBE_CSV, ATTRIBUTION_CSV)

HEADERS = {
    MATRIX_CSV: ("stage", "task", "accuracy"),
    PROBE_CSV: ("step", "ntb"),
    ATTRIBUTION_CSV: ("step", "layer", "pathway", "value"),
}

FIGSIZE = (5.0, 3.4)
RC = {
    "svg.hashsalt": "dlab-report",
    "svg.fonttype": "path",
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.4,
    "lines.markersize": 4,
}


class ReportError(ValueError):
    """A required report input is absent or has no data rows."""

    def __init__(self, files, run_dir):
        self.files = list(files)
        super().__init__(f"missing or empty report input in {run_dir}: {', '.join(self.files)}")


def read_rows(path: Path, name: str) -> list[dict[str, str]]:
    """Rows of a CSV whose header must include the expected columns (``series`` is optional)."""
    text = path.read_text()
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        return []
    missing = [c for c in HEADERS[name] if c not in reader.fieldnames]
    if missing:
        raise ValueError(f"{name} lacks columns {missing}")
    return list(reader)


def _save(fig: Figure, path: Path) -> None:
    buf = io.BytesIO()
    with matplotlib.rc_context(RC):
        FigureCanvasSVG(fig).print_svg(buf, metadata={"Date": None})
    path.write_bytes(buf.getvalue())


def _new_figure() -> tuple[Figure, object]:
    with matplotlib.rc_context(RC):
        fig = Figure(figsize=FIGSIZE)
        ax = fig.add_subplot()
    return fig, ax


def plot_probe(rows: list[dict[str, str]], path: Path) -> Path:
    """NTB against tuning step on a log axis, one line per series."""
    series: dict[str, list[tuple[int, float]]] = defaultdict(list)
    for r in rows:
        if int(r["step"]) > 0:  # step 0 (the base model) has no place on a log axis
            series[r.get("series") or "ntb"].append((int(r["step"]), float(r["ntb"])))
    with matplotlib.rc_context(RC):
        fig, ax = _new_figure()
        steps = sorted({s for pts in series.values() for s, _ in pts})
        for name in sorted(series):
            pts = sorted(series[name])
            ax.plot([s for s, _ in pts], [v for _, v in pts], marker="o", label=name)
        ax.set_xscale("log")
        ax.set_xticks(steps)
        ax.set_xticklabels([str(s) for s in steps])
        ax.minorticks_off()
        ax.set_xlabel("tuning step")
        ax.set_ylabel("number-token bias")
        if len(series) > 1:
            ax.legend(frameon=False)
        fig.tight_layout()
    _save(fig, path)
    return path


def plot_matrix(rows: list[dict[str, str]], path: Path, held_out: str = "held_out") -> Path:
    """Accuracy per task against stage; the held-out aggregate is drawn heavier."""
    series: dict[str, list[tuple[int, float]]] = defaultdict(list)
    for r in rows:
        series[r["task"]].append((int(r["stage"]), float(r["accuracy"])))
    with matplotlib.rc_context(RC):
        fig, ax = _new_figure()
        for name in sorted(series, key=lambda t: (t == held_out, t)):
            pts = sorted(series[name])
            style = dict(color="k", linewidth=2.4) if name == held_out else dict(alpha=0.7)
            ax.plot([k for k, _ in pts], [v for _, v in pts], marker="o", label=name, **style)
        stages = sorted({k for pts in series.values() for k, _ in pts})
        ax.set_xticks(stages)
        ax.set_xlabel("stage")
        ax.set_ylabel("accuracy (%)")
        ax.set_ylim(-2, 102)
        ax.legend(frameon=False, fontsize=7, ncol=2)
        fig.tight_layout()
    _save(fig, path)
    return path


def plot_attribution(rows: list[dict[str, str]], path: Path) -> Path:
    """Grouped bars of per-layer attention vs MLP logit deltas at the latest step."""
    def step_of(r):
        return int(r["step"]) if r["step"] not in ("", "None") else -1

    last = max(step_of(r) for r in rows)
    vals: dict[str, dict[int, float]] = defaultdict(dict)
    for r in rows:
        if step_of(r) == last:
            vals[r["pathway"]][int(r["layer"])] = float(r["value"])
    layers = sorted({l for d in vals.values() for l in d})
    width = 0.8 / max(len(vals), 1)
    with matplotlib.rc_context(RC):
        fig, ax = _new_figure()
        for i, pathway in enumerate(sorted(vals)):
            xs = [l + (i - (len(vals) - 1) / 2) * width for l in layers]
            ax.bar(xs, [vals[pathway].get(l, 0.0) for l in layers], width=width, label=pathway.upper())
        ax.set_xticks(layers)
        ax.set_xlabel("layer")
        ax.set_ylabel("RMS logit delta")
        if last >= 0:
            ax.set_title(f"step {last}", fontsize=9)
        ax.legend(frameon=False)
        fig.tight_layout()
    _save(fig, path)
    return path


PLOTTERS = {
    MATRIX_CSV: (plot_matrix, "heldout_vs_stage.svg"),
    PROBE_CSV: (plot_probe, "ntb_vs_step.svg"),
    ATTRIBUTION_CSV: (plot_attribution, "attribution_by_layer.svg"),
}


def emit_report(run_dir, require: tuple[str, ...] | None = None) -> list[Path]:
    """Render every available input CSV in ``run_dir`` to SVG.

    ``require`` names inputs that must be present and nonempty; by default at
    least one of the three inputs must be.
    """
    run_dir = Path(run_dir)
    present = {}
    bad = []
    for name in INPUTS:
        p = run_dir / name
        if p.is_file():
            rows = read_rows(p, name)
            if rows:
                present[name] = rows
            elif require is None or name in require:
                bad.append(name)
    if require is not None:
        bad += [n for n in require if n not in present and n not in bad]
    elif not present and not bad:
        bad = list(INPUTS)
    if bad:
        raise ReportError(bad, run_dir)
    written = []
    for name, rows in present.items():
        fn, out = PLOTTERS[name]
        written.append(fn(rows, run_dir / out))
    return written
