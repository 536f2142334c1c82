"""Minimal SVG line charts (axes, polylines, optional vertical markers)."""

from __future__ import annotations

import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Mapping, Sequence

COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def line_chart(series: Mapping[str, tuple[Sequence[float], Sequence[float]]], *,
               title: str = "", xlabel: str = "", ylabel: str = "",
               vlines: Sequence[float] = (), width: int = 640, height: int = 400) -> str:
    left, right, top, bottom = 70, 150, 40, 50
    xs = [float(x) for pts in series.values() for x in pts[0]] + [float(v) for v in vlines]
    ys = [float(y) for pts in series.values() for y in pts[1]]
    if not xs or not ys:
        raise ValueError("line_chart needs at least one point")
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (float(x) - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1 - (float(y) - y0) / (y1 - y0)) * ph

    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(width),
                     height=str(height), viewBox=f"0 0 {width} {height}")
    ET.SubElement(svg, "rect", x="0", y="0", width=str(width), height=str(height), fill="white")
    ET.SubElement(svg, "text", x=str(width / 2), y="22", attrib={"text-anchor": "middle",
                  "font-size": "15", "font-family": "sans-serif"}).text = title
    axis = dict(stroke="black", attrib={"stroke-width": "1"})
    ET.SubElement(svg, "line", x1=str(left), y1=str(top + ph), x2=str(left + pw), y2=str(top + ph), **axis)
    ET.SubElement(svg, "line", x1=str(left), y1=str(top), x2=str(left), y2=str(top + ph), **axis)
    small = {"font-size": "11", "font-family": "sans-serif"}
    for t in _ticks(x0, x1):
        ET.SubElement(svg, "text", x=f"{px(t):.1f}", y=str(top + ph + 16),
                      attrib={"text-anchor": "middle", **small}).text = f"{t:g}"
    for t in _ticks(y0, y1):
        ET.SubElement(svg, "text", x=str(left - 6), y=f"{py(t) + 4:.1f}",
                      attrib={"text-anchor": "end", **small}).text = f"{t:.3g}"
    ET.SubElement(svg, "text", x=str(left + pw / 2), y=str(height - 10),
                  attrib={"text-anchor": "middle", **small}).text = xlabel
    ET.SubElement(svg, "text", x="14", y=str(top + ph / 2),
                  attrib={"text-anchor": "middle", "transform": f"rotate(-90 14 {top + ph / 2})",
                          **small}).text = ylabel
    for v in vlines:
        ET.SubElement(svg, "line", x1=f"{px(v):.1f}", y1=str(top), x2=f"{px(v):.1f}", y2=str(top + ph),
                      stroke="gray", attrib={"stroke-dasharray": "4 3"})
    for i, (name, (sx, sy)) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(sx, sy))
        ET.SubElement(svg, "polyline", points=pts, fill="none", stroke=color,
                      attrib={"stroke-width": "1.5"})
        if len(sx) <= 30:
            for x, y in zip(sx, sy):
                ET.SubElement(svg, "circle", cx=f"{px(x):.1f}", cy=f"{py(y):.1f}", r="3", fill=color)
        ly = top + 14 + 18 * i
        ET.SubElement(svg, "line", x1=str(left + pw + 12), y1=str(ly), x2=str(left + pw + 32), y2=str(ly),
                      stroke=color, attrib={"stroke-width": "2"})
        ET.SubElement(svg, "text", x=str(left + pw + 36), y=str(ly + 4), attrib=small).text = name
    return ET.tostring(svg, encoding="unicode")


def write_chart(path, series, **kwargs) -> Path:
    path = Path(path)
    path.write_text('<?xml version="1.0" encoding="UTF-8"?>\n' + line_chart(series, **kwargs) + "\n")
    return path
