"""Plot-ready CSV plus small static SVG renderings of run artifacts.

Output is deterministic: no timestamps, fixed float formatting, stable ordering.
"""

from __future__ import annotations

import math
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np

from .errors import InvalidArgument
from .geometry import TWO_PI

FIGURES = ("passage_circle", "torus3d", "grid_panels", "generalization_curves", "rl_curves")

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")

W, H = 360, 300
MARGIN = 44


def _f(x) -> str:
    return f"{x:.3f}"


def _read(path: Path) -> List[dict]:
    from .runner import read_csv

    if not path.exists():
        raise FileNotFoundError(f"{path.name} not found in {path.parent} (needed for this figure)")
    return read_csv(path)


class Panel:
    """One set of axes inside an SVG document."""

    def __init__(self, x0, y0, title, xlabel, ylabel, xlim, ylim):
        self.x0, self.y0 = x0, y0
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.xlim = _pad(xlim)
        self.ylim = _pad(ylim)
        self.items: List[str] = []
        self.legend: List[Tuple[str, str, bool]] = []

    def sx(self, x):
        lo, hi = self.xlim
        return self.x0 + MARGIN + (x - lo) / (hi - lo) * (W - 2 * MARGIN)

    def sy(self, y):
        lo, hi = self.ylim
        return self.y0 + H - MARGIN - (y - lo) / (hi - lo) * (H - 2 * MARGIN)

    def point(self, x, y, label=None, color=PALETTE[0]):
        self.items.append(f'<circle cx="{_f(self.sx(x))}" cy="{_f(self.sy(y))}" r="3.5" fill="{color}"/>')
        if label is not None:
            self.items.append(
                f'<text x="{_f(self.sx(x) + 5)}" y="{_f(self.sy(y) - 5)}" font-size="9">{escape(str(label))}</text>'
            )

    def line(self, xs, ys, color=PALETTE[0], label=None, dash=False):
        pts = " ".join(f"{_f(self.sx(x))},{_f(self.sy(y))}" for x, y in zip(xs, ys))
        extra = ' stroke-dasharray="4,3"' if dash else ""
        self.items.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"{extra}/>')
        if label is not None:
            self.legend.append((label, color, dash))

    def render(self) -> str:
        x0, y0 = self.x0, self.y0
        left, right = x0 + MARGIN, x0 + W - MARGIN
        top, bottom = y0 + MARGIN, y0 + H - MARGIN
        out = [
            f'<rect x="{left}" y="{top}" width="{W - 2 * MARGIN}" height="{H - 2 * MARGIN}" fill="none" stroke="#333"/>',
            f'<text x="{x0 + W / 2}" y="{y0 + 18}" font-size="12" text-anchor="middle">{escape(self.title)}</text>',
            f'<text x="{x0 + W / 2}" y="{y0 + H - 8}" font-size="10" text-anchor="middle">{escape(self.xlabel)}</text>',
            f'<text x="{x0 + 12}" y="{y0 + H / 2}" font-size="10" text-anchor="middle" '
            f'transform="rotate(-90 {x0 + 12} {y0 + H / 2})">{escape(self.ylabel)}</text>',
        ]
        for v in self.xlim:
            out.append(f'<text x="{_f(self.sx(v))}" y="{bottom + 12}" font-size="8" text-anchor="middle">{v:.3g}</text>')
        for v in self.ylim:
            out.append(f'<text x="{left - 4}" y="{_f(self.sy(v) + 3)}" font-size="8" text-anchor="end">{v:.3g}</text>')
        out.extend(self.items)
        for i, (label, color, dash) in enumerate(self.legend):
            y = top + 10 + 12 * i
            extra = ' stroke-dasharray="4,3"' if dash else ""
            out.append(f'<line x1="{right - 70}" y1="{y}" x2="{right - 56}" y2="{y}" stroke="{color}"{extra}/>')
            out.append(f'<text x="{right - 52}" y="{y + 3}" font-size="8">{escape(label)}</text>')
        return "\n".join(out)


def _pad(lim):
    lo, hi = float(lim[0]), float(lim[1])
    if not (math.isfinite(lo) and math.isfinite(hi)):
        return (0.0, 1.0)
    if hi - lo < 1e-12:
        return (lo - 1.0, hi + 1.0)
    pad = 0.05 * (hi - lo)
    return (lo - pad, hi + pad)


def _panel(x0, title, xlabel, ylabel, xs, ys):
    return Panel(x0, 0, title, xlabel, ylabel, (min(xs), max(xs)), (min(ys), max(ys)))


def _svg(panels: Sequence[Panel]) -> str:
    width = W * len(panels)
    body = "\n".join(p.render() for p in panels)
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{H}" '
        f'viewBox="0 0 {width} {H}" font-family="sans-serif">\n'
        f'<rect width="{width}" height="{H}" fill="white"/>\n{body}\n</svg>\n'
    )


def _write(cell: Path, kind: str, columns, rows, panels) -> Dict[str, Path]:
    from .runner import write_csv

    csv_path = cell / f"{kind}.csv"
    svg_path = cell / f"{kind}.svg"
    write_csv(csv_path, columns, rows)
    svg_path.write_text(_svg(panels))
    return {"csv": csv_path, "svg": svg_path}


# ------------------------------------------------------------------ figures


def _passage_circle(cell: Path):
    rows = _read(cell / "latents.csv")
    if "z0" not in rows[0] or "pos" not in rows[0]:
        raise InvalidArgument("passage_circle needs a passage cell with latent column z0")
    out = []
    for r in rows:
        z = float(r["z0"])
        out.append({"state": int(r["state"]), "pos": int(r["pos"]), "z0": z, "x": math.cos(z), "y": math.sin(z)})
    p = _panel(0, "Passage latents on the circle", "cos z0", "sin z0", [-1.0, 1.0], [-1.0, 1.0])
    ts = np.linspace(0.0, TWO_PI, 97)
    p.line(np.cos(ts), np.sin(ts), color="#bbbbbb")
    for r in out:
        p.point(r["x"], r["y"], label=r["pos"])
    return ("state", "pos", "z0", "x", "y"), out, [p]


def _torus3d(cell: Path):
    rows = _read(cell / "latents.csv")
    if "ex" not in rows[0]:
        raise InvalidArgument("torus3d needs a cell whose latent space is two circles")
    out = [
        {"state": int(r["state"]), "row": int(r["row"]), "col": int(r["col"]),
         "z0": float(r["z0"]), "z1": float(r["z1"]),
         "ex": float(r["ex"]), "ey": float(r["ey"]), "ez": float(r["ez"])}
        for r in rows
    ]
    ex = [r["ex"] for r in out]
    ey = [r["ey"] for r in out]
    ez = [r["ez"] for r in out]
    p1 = _panel(0, "Torus embedding (top view)", "x", "y", ex, ey)
    p2 = _panel(W, "Torus embedding (side view)", "x", "z", ex, ez)
    for r in out:
        lab = f"{r['row']},{r['col']}"
        p1.point(r["ex"], r["ey"], lab, PALETTE[r["row"] % len(PALETTE)])
        p2.point(r["ex"], r["ez"], lab, PALETTE[r["row"] % len(PALETTE)])
    return ("state", "row", "col", "z0", "z1", "ex", "ey", "ez"), out, [p1, p2]


def _grid_panels(cell: Path):
    rows = _read(cell / "latents.csv")
    need = {"x", "y", "orient", "z0", "z1", "z2"}
    if not need <= set(rows[0]):
        raise InvalidArgument("grid_panels needs a grid_orient cell with three latent coordinates")
    out = [
        {"state": int(r["state"]), "x": int(r["x"]), "y": int(r["y"]), "orient": int(r["orient"]),
         "z0": float(r["z0"]), "z1": float(r["z1"]), "z2": float(r["z2"])}
        for r in rows
    ]
    p1 = _panel(0, "Orientation coordinate", "cos z0", "sin z0", [-1.0, 1.0], [-1.0, 1.0])
    for r in out:
        p1.point(math.cos(r["z0"]), math.sin(r["z0"]), None, PALETTE[r["orient"]])
    for o in range(4):
        zs = [r["z0"] for r in out if r["orient"] == o]
        if zs:
            m = math.atan2(np.mean(np.sin(zs)), np.mean(np.cos(zs)))
            p1.point(math.cos(m), math.sin(m), "NESW"[o], PALETTE[o])
    p2 = _panel(W, "Position coordinates", "z1", "z2", [r["z1"] for r in out], [r["z2"] for r in out])
    for r in out:
        p2.point(r["z1"], r["z2"], f"{r['x']},{r['y']}" if r["orient"] == 0 else None, PALETTE[r["orient"]])
    return ("state", "x", "y", "orient", "z0", "z1", "z2"), out, [p1, p2]


def _generalization_curves(cell: Path):
    rows = _read(cell / "metrics.csv")
    if not rows:
        raise InvalidArgument("metrics.csv has no rows")
    out = [{"step": int(r["step"]), "split": r["split"], "H@1": float(r["H@1"]), "MRR": float(r["MRR"])} for r in rows]
    steps = [r["step"] for r in out]
    panels = []
    for i, metric in enumerate(("MRR", "H@1")):
        p = _panel(i * W, f"{metric} on seen and unseen transitions", "step", f"{metric} (x100)", steps, [0.0, 100.0])
        for j, split in enumerate(("train", "test")):
            pts = [(r["step"], r[metric]) for r in out if r["split"] == split]
            if pts:
                p.line([a for a, _ in pts], [b for _, b in pts], PALETTE[j], split, dash=split == "test")
        panels.append(p)
    return ("step", "split", "H@1", "MRR"), out, panels


def _rl_curves(cell: Path):
    files = sorted(cell.rglob("rl_returns.csv"))
    if not files:
        raise FileNotFoundError(f"no rl_returns.csv under {cell}")
    groups: Dict[str, List[Path]] = defaultdict(list)
    for f in files:
        rel = f.parent.relative_to(cell)
        # .../<agent>/seed_<k>/rl_returns.csv -> agent; a bare seed dir -> "agent"
        parts = rel.parts
        agent = parts[-2] if len(parts) >= 2 else (parts[0] if parts and not parts[0].startswith("seed_") else "agent")
        groups[agent].append(f)
    out = []
    curves = {}
    for agent in sorted(groups):
        per_step = defaultdict(list)
        for f in groups[agent]:
            for r in _read(f):
                per_step[int(r["step"])].append(float(r["running_avg"]))
        steps = sorted(per_step)
        means = [float(np.mean(per_step[s])) for s in steps]
        curves[agent] = (steps, means)
        out.extend({"agent": agent, "step": s, "running_avg_mean": m, "n_seeds": len(per_step[s])} for s, m in zip(steps, means))
    all_steps = [r["step"] for r in out]
    all_vals = [r["running_avg_mean"] for r in out]
    p = _panel(0, "Return (running average)", "training step", "return", all_steps, all_vals)
    for i, agent in enumerate(sorted(curves)):
        p.line(curves[agent][0], curves[agent][1], PALETTE[i % len(PALETTE)], agent)
    return ("agent", "step", "running_avg_mean", "n_seeds"), out, [p]


_BUILDERS = {
    "passage_circle": _passage_circle,
    "torus3d": _torus3d,
    "grid_panels": _grid_panels,
    "generalization_curves": _generalization_curves,
    "rl_curves": _rl_curves,
}


def emit_figure_data(cell_dir, figure: str) -> Dict[str, Path]:
    """Write ``<figure>.csv`` and ``<figure>.svg`` into ``cell_dir``."""
    if figure not in _BUILDERS:
        raise InvalidArgument(f"unknown figure {figure!r}; choose from {', '.join(FIGURES)}")
    cell = Path(cell_dir)
    if not cell.is_dir():
        raise FileNotFoundError(f"cell directory {cell} does not exist")
    columns, rows, panels = _BUILDERS[figure](cell)
    return _write(cell, figure, columns, rows, panels)
