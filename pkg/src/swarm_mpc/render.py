"""Static SVG figures: trajectory plots and attention-score matrices.

Everything here is a pure function of an episode record (the parsed JSON
from an episodes file); no model, RNG or file-system state is consulted.
"""

from __future__ import annotations

import math
from typing import Sequence

# first five trajectory colors follow the usual multi-vehicle figure palette
PALETTE = ["black", "red", "green", "blue", "olive", "purple", "orange", "teal"]

VEHICLE_LENGTH = 2.4  # m, drawn footprint
VEHICLE_WIDTH = 1.2   # m


def _color(i: int) -> str:
    return PALETTE[i % len(PALETTE)]


class _Canvas:
    """Minimal world-to-pixel SVG assembler (y axis flipped to point up)."""

    def __init__(self, half_extent: float, size_px: int = 640, pad_px: int = 20) -> None:
        self.h = half_extent
        self.s = (size_px - 2 * pad_px) / (2 * half_extent)
        self.pad = pad_px
        self.size = size_px
        self.parts: list[str] = []

    def pt(self, x: float, y: float) -> tuple[float, float]:
        return (self.pad + (x + self.h) * self.s, self.pad + (self.h - y) * self.s)

    def px(self, d: float) -> float:
        return d * self.s

    def add(self, fragment: str) -> None:
        self.parts.append(fragment)

    def polygon(self, pts_world, stroke: str, fill: str = "none", dash: str | None = None, width: float = 1.5) -> None:
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in (self.pt(*p) for p in pts_world))
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        self.add(f'<polygon points="{pts}" fill="{fill}" stroke="{stroke}" stroke-width="{width}"{dash_attr} />')

    def polyline(self, pts_world, stroke: str, width: float = 1.5) -> None:
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in (self.pt(*p) for p in pts_world))
        self.add(f'<polyline points="{pts}" fill="none" stroke="{stroke}" stroke-width="{width}" />')

    def circle(self, cx: float, cy: float, r_world: float, stroke: str, fill: str, cls: str = "") -> None:
        x, y = self.pt(cx, cy)
        cls_attr = f' class="{cls}"' if cls else ""
        self.add(
            f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{self.px(r_world):.2f}" '
            f'stroke="{stroke}" fill="{fill}"{cls_attr} />'
        )

    def line(self, a, b, stroke: str, width: float = 1.5) -> None:
        x1, y1 = self.pt(*a)
        x2, y2 = self.pt(*b)
        self.add(f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" stroke="{stroke}" stroke-width="{width}" />')

    def svg(self) -> str:
        body = "\n".join(self.parts)
        return (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.size}" height="{self.size}" '
            f'viewBox="0 0 {self.size} {self.size}">\n'
            f'<rect width="{self.size}" height="{self.size}" fill="white" />\n'
            f"{body}\n</svg>\n"
        )


def _footprint(x: float, y: float, theta: float) -> list[tuple[float, float]]:
    c, s = math.cos(theta), math.sin(theta)
    hl, hw = VEHICLE_LENGTH / 2.0, VEHICLE_WIDTH / 2.0
    return [
        (x + c * dx - s * dy, y + s * dx + c * dy)
        for dx, dy in ((hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw))
    ]


def _heading_tick(x: float, y: float, theta: float) -> tuple[tuple[float, float], tuple[float, float]]:
    return (x, y), (x + math.cos(theta) * VEHICLE_LENGTH / 2.0, y + math.sin(theta) * VEHICLE_LENGTH / 2.0)


def episode_svg(record: dict) -> str:
    """One episode: solid start boxes, dashed target boxes, per-vehicle
    trajectories, obstacle discs and a red dot per collision event."""
    scenario = record["scenario"]
    states = record["states"]            # [t][vehicle] -> [x, y, theta, v]
    half_extent = float(scenario["world_half_extent"])
    canvas = _Canvas(half_extent)

    for ob in scenario["obstacles"]:
        canvas.circle(ob["x"], ob["y"], ob["r"], stroke="dimgray", fill="lightgray")

    vehicles = scenario["vehicles"]
    for i, veh in enumerate(vehicles):
        color = _color(i)
        canvas.polygon(_footprint(veh["x"], veh["y"], veh["theta"]), stroke=color)
        canvas.line(*_heading_tick(veh["x"], veh["y"], veh["theta"]), stroke=color)
        canvas.polygon(
            _footprint(veh["tx"], veh["ty"], veh["ttheta"]), stroke=color, dash="6,4"
        )
        canvas.line(*_heading_tick(veh["tx"], veh["ty"], veh["ttheta"]), stroke=color)
        canvas.polyline([(row[i][0], row[i][1]) for row in states], stroke=color)

    for ev in record.get("collisions", []):
        row = states[min(ev["step"], len(states) - 1)]
        x, y = row[ev["a"]][0], row[ev["a"]][1]
        canvas.circle(x, y, 0.45, stroke="red", fill="red", cls="collision")

    return canvas.svg()


def _gray(level: float) -> str:
    g = int(round(255 * min(1.0, max(0.0, level))))
    return f"rgb({g},{g},{g})"


def attention_svg(matrix: Sequence[Sequence[float | None]], lo: float, hi: float) -> str:
    """Grayscale score matrix: row i shows how much node i attends to each
    column; low scores are dark, high are light, absent entries neutral gray."""
    n = len(matrix)
    cell = 28
    pad = 24
    size = n * cell + 2 * pad
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white" />',
    ]
    span = hi - lo
    for i in range(n):
        for j in range(n):
            val = matrix[i][j]
            if val is None or i == j:
                fill = _gray(0.5)
            elif span <= 0.0:
                fill = _gray(0.5)
            else:
                fill = _gray((float(val) - lo) / span)
            parts.append(
                f'<rect x="{pad + j * cell}" y="{pad + i * cell}" width="{cell}" height="{cell}" '
                f'fill="{fill}" stroke="gray" stroke-width="0.5" />'
            )
    for k in range(n):
        parts.append(
            f'<text x="{pad + k * cell + cell / 2:.1f}" y="{pad - 6}" font-size="10" '
            f'text-anchor="middle">{k}</text>'
        )
        parts.append(
            f'<text x="{pad - 6}" y="{pad + k * cell + cell / 2 + 3:.1f}" font-size="10" '
            f'text-anchor="end">{k}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def attention_bounds(steps: Sequence[Sequence[Sequence[float | None]]]) -> tuple[float, float]:
    """Min/max over all finite entries of an episode's attention matrices, so
    every frame shares one gray scale."""
    values = [
        float(v)
        for mat in steps
        for row in mat
        for v in row
        if v is not None and math.isfinite(float(v))
    ]
    if not values:
        return 0.0, 1.0
    return min(values), max(values)
