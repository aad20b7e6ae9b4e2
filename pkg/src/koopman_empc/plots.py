"""Minimal SVG line charts for closed-loop trajectories.

Output chart: red band below each pasteurization minimum, orange band for the
soft 0.5 degC margin above it. Input chart: dashed hard bounds per channel.
"""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .empc import EmpcConfig

WIDTH, PANEL_H = 720, 200
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 60, 20, 28, 30
COLORS = ("#1f77b4", "#2ca02c", "#9467bd")


class _Panel:
    def __init__(self, top, t, lo, hi, title, unit):
        self.top, self.t0, self.t1 = top, float(t[0]), float(t[-1]) if len(t) > 1 else float(t[0]) + 1
        pad = 0.05 * (hi - lo) or 1.0
        self.lo, self.hi = lo - pad, hi + pad
        self.title, self.unit = title, unit
        self.w = WIDTH - MARGIN_L - MARGIN_R
        self.h = PANEL_H - MARGIN_T - MARGIN_B

    def x(self, t):
        return MARGIN_L + (np.asarray(t, float) - self.t0) / (self.t1 - self.t0) * self.w

    def y(self, v):
        v = np.clip(np.asarray(v, float), self.lo, self.hi)
        return self.top + MARGIN_T + (self.hi - v) / (self.hi - self.lo) * self.h

    def frame(self):
        out = [f'<rect x="{MARGIN_L}" y="{self.top + MARGIN_T}" width="{self.w}" height="{self.h}" '
               'fill="none" stroke="#444"/>',
               f'<text x="{MARGIN_L}" y="{self.top + MARGIN_T - 8}" font-size="13">{escape(self.title)}</text>']
        for v in np.linspace(self.lo, self.hi, 5):
            yy = self.y(v)
            out.append(f'<text x="{MARGIN_L - 6}" y="{yy + 4:.1f}" font-size="10" text-anchor="end">{v:.1f}</text>')
        for tv in np.linspace(self.t0, self.t1, 5):
            xx = self.x(tv)
            out.append(f'<text x="{xx:.1f}" y="{self.top + PANEL_H - 12}" font-size="10" '
                       f'text-anchor="middle">{tv / 3600:.2f} h</text>')
        out.append(f'<text x="14" y="{self.top + MARGIN_T + self.h / 2:.1f}" font-size="10" '
                   f'transform="rotate(-90 14 {self.top + MARGIN_T + self.h / 2:.1f})">{escape(self.unit)}</text>')
        return out

    def band(self, v_lo, v_hi, color):
        y0, y1 = self.y(v_hi), self.y(v_lo)
        if y1 - y0 <= 0:
            return []
        return [f'<rect x="{MARGIN_L}" y="{y0:.2f}" width="{self.w}" height="{y1 - y0:.2f}" '
                f'fill="{color}" fill-opacity="0.25" stroke="none"/>']

    def hline(self, v, color="#333", dashed=True):
        yy = self.y(v)
        dash = ' stroke-dasharray="6,4"' if dashed else ""
        return [f'<line x1="{MARGIN_L}" x2="{MARGIN_L + self.w}" y1="{yy:.2f}" y2="{yy:.2f}" '
                f'stroke="{color}"{dash}/>']

    def label(self, v, text, color="#d62728"):
        return [f'<text x="{MARGIN_L + self.w - 4}" y="{self.y(v) - 3:.2f}" font-size="10" '
                f'text-anchor="end" fill="{color}">{escape(text)}</text>']

    def line(self, t, v, color):
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(self.x(t), self.y(v)))
        return [f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.3"/>']


def _document(panels_svg, n_panels, title):
    height = n_panels * PANEL_H + 20
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" '
            f'viewBox="0 0 {WIDTH} {height}" font-family="sans-serif">')
    return "\n".join([head, f"<title>{escape(title)}</title>",
                      '<rect width="100%" height="100%" fill="white"/>', *panels_svg, "</svg>\n"])


def outputs_svg(t, Y, cfg: EmpcConfig | None = None, title="Outputs"):
    """Temperatures with the infeasible (red) and soft (orange) bands."""
    cfg = cfg or EmpcConfig()
    Y = np.asarray(Y, float)
    names = ("T1 holding-tube outlet", "T2 heating tank", "T3 exchanger outlet")
    parts = []
    for i in range(3):
        lo = min(Y[:, i].min(), cfg.y_min[i] - 1.0 if i != 1 else Y[:, i].min())
        hi = max(Y[:, i].max(), cfg.y_min[i] + 1.0 if i != 1 else Y[:, i].max())
        panel = _Panel(i * PANEL_H, t, lo, hi, names[i], "degC")
        parts += panel.frame()
        if i != 1:
            parts += panel.band(panel.lo, cfg.y_min[i], "#d62728")
            parts += panel.band(cfg.y_min[i], cfg.y_min[i] + cfg.eps_soft_max, "#ff7f0e")
            parts += panel.hline(cfg.y_min[i], "#d62728")
            parts += panel.label(cfg.y_min[i], f"min {cfg.y_min[i]:g} degC")
        parts += panel.line(t, Y[:, i], COLORS[i])
    return _document(parts, 3, title)


def inputs_svg(t, U, cfg: EmpcConfig | None = None, title="Inputs"):
    """Applied inputs with dashed hard bounds (and the soft u1 range)."""
    cfg = cfg or EmpcConfig()
    U = np.asarray(U, float)
    names = ("u1 feed pump flow", "u2 heating pump flow", "u3 heater power")
    units = ("cm3/s", "cm3/s", "kW")
    lo_b, hi_b = cfg.u_lower, cfg.u_upper
    parts = []
    for i in range(3):
        panel = _Panel(i * PANEL_H, t, min(U[:, i].min(), lo_b[i]), max(U[:, i].max(), hi_b[i]), names[i], units[i])
        parts += panel.frame()
        parts += panel.hline(lo_b[i])
        parts += panel.hline(hi_b[i])
        if i == 0:
            parts += panel.hline(cfg.u1_soft[0], "#ff7f0e")
            parts += panel.hline(cfg.u1_soft[1], "#ff7f0e")
        parts += panel.line(t, U[:, i], COLORS[i])
    return _document(parts, 3, title)


def write_trajectory_plots(traj, out_dir, cfg: EmpcConfig | None = None, label=""):
    out_dir = Path(out_dir)
    t = traj.array("t")
    suffix = f" ({label})" if label else ""
    (out_dir / "outputs.svg").write_text(outputs_svg(t, traj.array("y"), cfg, "Outputs" + suffix))
    (out_dir / "inputs.svg").write_text(inputs_svg(t, traj.array("u_app"), cfg, "Inputs" + suffix))
    return out_dir / "outputs.svg", out_dir / "inputs.svg"
