"""Minimal deterministic SVG emission.

Hand-rolled on purpose: plots must be byte-identical across reruns, so no
plotting library is involved.  Every figure also gets a CSV companion from
the CLI, which is the authoritative data artifact.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np


def _f(v: float) -> str:
    return f"{v:.4f}".rstrip("0").rstrip(".")


class SvgCanvas:
    """Fixed-size canvas mapping data coordinates to pixels."""

    def __init__(
        self,
        xlim: tuple[float, float],
        ylim: tuple[float, float],
        size: int = 480,
        margin: int = 40,
        title: str = "",
    ):
        self.xlim = xlim
        self.ylim = ylim
        self.size = size
        self.margin = margin
        self.parts: list[str] = []
        if title:
            self.parts.append(
                f'<text x="{size // 2}" y="{margin // 2}" text-anchor="middle" '
                f'font-family="monospace" font-size="13">{title}</text>'
            )

    def _px(self, x: float) -> float:
        lo, hi = self.xlim
        return self.margin + (x - lo) / (hi - lo) * (self.size - 2 * self.margin)

    def _py(self, y: float) -> float:
        lo, hi = self.ylim
        return self.size - self.margin - (y - lo) / (hi - lo) * (self.size - 2 * self.margin)

    def frame(self) -> None:
        m, s = self.margin, self.size
        self.parts.append(
            f'<rect x="{m}" y="{m}" width="{s - 2 * m}" height="{s - 2 * m}" '
            'fill="none" stroke="black" stroke-width="1"/>'
        )
        for t in (0.0, 0.5, 1.0):
            x = self.xlim[0] + t * (self.xlim[1] - self.xlim[0])
            y = self.ylim[0] + t * (self.ylim[1] - self.ylim[0])
            self.parts.append(
                f'<text x="{_f(self._px(x))}" y="{s - m + 16}" text-anchor="middle" '
                f'font-family="monospace" font-size="10">{_f(x)}</text>'
            )
            self.parts.append(
                f'<text x="{m - 6}" y="{_f(self._py(y) + 3)}" text-anchor="end" '
                f'font-family="monospace" font-size="10">{_f(y)}</text>'
            )

    def heatmap(self, values: np.ndarray, extent: tuple[float, float, float, float]) -> None:
        """Grayscale cells for ``values[ix, iy]`` over extent (x0, x1, y0, y1)."""
        nx, ny = values.shape
        x0, x1, y0, y1 = extent
        vmin = float(values.min())
        vmax = float(values.max())
        span = vmax - vmin if vmax > vmin else 1.0
        dx = (x1 - x0) / nx
        dy = (y1 - y0) / ny
        w = _f(abs(self._px(x0 + dx) - self._px(x0)) + 0.5)
        h = _f(abs(self._py(y0 + dy) - self._py(y0)) + 0.5)
        for ix in range(nx):
            px = _f(self._px(x0 + ix * dx))
            for iy in range(ny):
                level = int(round(255 * (values[ix, iy] - vmin) / span))
                py = _f(self._py(y0 + (iy + 1) * dy))
                self.parts.append(
                    f'<rect x="{px}" y="{py}" width="{w}" height="{h}" '
                    f'fill="rgb({level},{level},{level})"/>'
                )

    def polyline(self, xs, ys, color: str = "black", width: float = 1.5, dash: str = "") -> None:
        pts = " ".join(f"{_f(self._px(x))},{_f(self._py(y))}" for x, y in zip(xs, ys))
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" '
            f'stroke-width="{width}"{dash_attr}/>'
        )

    def polygon(self, xs, ys, fill: str, opacity: float = 0.35) -> None:
        pts = " ".join(f"{_f(self._px(x))},{_f(self._py(y))}" for x, y in zip(xs, ys))
        self.parts.append(f'<polygon points="{pts}" fill="{fill}" fill-opacity="{opacity}" stroke="none"/>')

    def marker(self, x: float, y: float, color: str = "black") -> None:
        px, py = self._px(x), self._py(y)
        for ddx, ddy in ((-4, -4, ), (4, -4)):
            self.parts.append(
                f'<line x1="{_f(px + ddx)}" y1="{_f(py + ddy)}" x2="{_f(px - ddx)}" '
                f'y2="{_f(py - ddy)}" stroke="{color}" stroke-width="1.5"/>'
            )

    def render(self) -> str:
        body = "\n".join(self.parts)
        return (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.size}" '
            f'height="{self.size}" viewBox="0 0 {self.size} {self.size}">\n'
            f'<rect width="{self.size}" height="{self.size}" fill="white"/>\n'
            f"{body}\n</svg>\n"
        )

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.render())


def annulus_band(canvas: SvgCanvas, center, angles, lower, upper, color: str = "steelblue") -> None:
    """Filled band between two radial curves around ``center``."""
    ang = np.concatenate((angles, angles[:1]))
    lo = np.concatenate((lower, lower[:1]))
    hi = np.concatenate((upper, upper[:1]))
    xs = np.concatenate((center[0] + hi * np.cos(ang), center[0] + lo[::-1] * np.cos(ang[::-1])))
    ys = np.concatenate((center[1] + hi * np.sin(ang), center[1] + lo[::-1] * np.sin(ang[::-1])))
    canvas.polygon(xs, ys, fill=color)
