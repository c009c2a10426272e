"""Standalone SVG rendering of an episode log."""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#ff7f0e")
VEHICLE = "#d62728"


class PlotError(ValueError):
    pass


def _fmt(x: float) -> str:
    s = f"{x:.2f}"
    return "0.00" if s == "-0.00" else s


def _frames(log: dict):
    try:
        frames = [log["initial"]] + list(log["steps"])
        agents = log["agents"]
        for f in frames:
            if len(f["positions"]) != len(agents):
                raise PlotError("frame agent count does not match the agent list")
        return frames, agents, float(log["dt"])
    except (KeyError, TypeError) as exc:
        raise PlotError(f"malformed episode log: {exc!r}") from exc


def render_svg(log: dict, px_per_m: float = 50.0, marker_every: float = 2.0) -> str:
    """Trajectories of all agents with discs and time labels every ``marker_every`` seconds.

    The vehicle is drawn in red; pedestrians are numbered from 1. Output is a
    pure function of the log, so the same log always gives identical bytes.
    """
    frames, agents, dt = _frames(log)
    xs = [p[0] for f in frames for p in f["positions"]] + [a["goal"][0] for a in agents]
    ys = [p[1] for f in frames for p in f["positions"]] + [a["goal"][1] for a in agents]
    pad = 1.0
    x0, x1 = min(xs) - pad, max(xs) + pad
    y0, y1 = min(ys) - pad, max(ys) + pad
    width, height = (x1 - x0) * px_per_m, (y1 - y0) * px_per_m

    def X(x):
        return _fmt((x - x0) * px_per_m)

    def Y(y):
        return _fmt((y1 - y) * px_per_m)

    every = max(1, int(round(marker_every / dt)))
    marks = list(range(0, len(frames), every))
    if marks[-1] != len(frames) - 1:
        marks.append(len(frames) - 1)

    out = [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{_fmt(width)}" height="{_fmt(height)}" '
        f'viewBox="0 0 {_fmt(width)} {_fmt(height)}">',
        f"<title>{escape(str(log.get('policy', 'episode')))} seed {escape(str(log.get('seed', '')))}: "
        f"{escape(str(log.get('status', '')))}</title>",
        f'<rect x="0" y="0" width="{_fmt(width)}" height="{_fmt(height)}" fill="white"/>',
    ]
    # pedestrians first so the vehicle stays on top
    order = list(range(1, len(agents))) + [0]
    for i in order:
        a = agents[i]
        color = VEHICLE if i == 0 else PALETTE[(i - 1) % len(PALETTE)]
        pts = " ".join(f"{X(f['positions'][i][0])},{Y(f['positions'][i][1])}" for f in frames)
        out.append(f'<g id="agent{i}">')
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{1.5 if i else 2.5}"/>')
        gx, gy = a["goal"]
        out.append(f'<circle cx="{X(gx)}" cy="{Y(gy)}" r="3" fill="{color}"/>')
        r = _fmt(float(a["radius"]) * px_per_m)
        for k in marks:
            px, py = frames[k]["positions"][i]
            opacity = _fmt(0.25 + 0.75 * k / max(1, len(frames) - 1))
            out.append(f'<circle cx="{X(px)}" cy="{Y(py)}" r="{r}" fill="none" stroke="{color}" '
                       f'stroke-opacity="{opacity}" stroke-width="1"/>')
            label = f"{k * dt:.1f}s" if i == 0 else str(i)
            out.append(f'<text x="{X(px)}" y="{Y(py)}" font-size="9" text-anchor="middle" '
                       f'dominant-baseline="central" fill="{color}">{label}</text>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def check_svg(text: str) -> None:
    """Structural check: well-formed XML whose root is an SVG 1.1 element with known children."""
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise PlotError(f"not well-formed XML: {exc}") from exc
    ns = "{http://www.w3.org/2000/svg}"
    if root.tag != f"{ns}svg" or root.get("version") != "1.1":
        raise PlotError("root element is not an SVG 1.1 document")
    allowed = {"svg", "g", "title", "rect", "circle", "polyline", "text"}
    for el in root.iter():
        tag = el.tag.replace(ns, "")
        if tag not in allowed:
            raise PlotError(f"unexpected element {tag}")
        for attr in ("width", "height", "cx", "cy", "r", "x", "y"):
            v = el.get(attr)
            if v is not None and not math.isfinite(float(v)):
                raise PlotError(f"non-finite {attr} on {tag}")
