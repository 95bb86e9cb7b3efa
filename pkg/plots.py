"""
Static SVG figures written as plain markup: energy histograms, ROC curves, loss curves.
"""

from typing import Dict, Sequence, Tuple, List
from xml.sax.saxutils import escape

import numpy as np

WIDTH = 480
HEIGHT = 320
MARGIN = 40
PALETTE = ['#1f77b4', '#d62728', '#2ca02c', '#ff7f0e', '#9467bd']


def _frame(title: str, body: List[str], x_range: Tuple[float, float], y_range: Tuple[float, float]) -> str:
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<text x="{MARGIN}" y="{HEIGHT - MARGIN + 14}" text-anchor="middle">{x_range[0]:.3g}</text>',
        f'<text x="{WIDTH - MARGIN}" y="{HEIGHT - MARGIN + 14}" text-anchor="middle">{x_range[1]:.3g}</text>',
        f'<text x="{MARGIN - 4}" y="{HEIGHT - MARGIN}" text-anchor="end">{y_range[0]:.3g}</text>',
        f'<text x="{MARGIN - 4}" y="{MARGIN + 4}" text-anchor="end">{y_range[1]:.3g}</text>',
    ]
    lines.extend(body)
    lines.append('</svg>')
    return '\n'.join(lines) + '\n'


def _scale(values, low, high, out_low, out_high):
    span = high - low if high > low else 1.0
    return out_low + (np.asarray(values, dtype=np.float64) - low) / span * (out_high - out_low)


def _legend(names: Sequence[str]) -> List[str]:
    items = []
    for i, name in enumerate(names):
        y = MARGIN + 4 + 14 * i
        color = PALETTE[i % len(PALETTE)]
        items.append(f'<rect x="{WIDTH - MARGIN - 110}" y="{y - 8}" width="10" height="10" fill="{color}"/>')
        items.append(f'<text x="{WIDTH - MARGIN - 96}" y="{y + 1}">{escape(name)}</text>')
    return items


def histogram_svg(groups: Dict[str, Sequence[float]], title: str, bins: int = 30) -> str:
    """Overlaid normalized histograms of several value groups on shared bins."""
    present = {name: np.asarray(v, dtype=np.float64) for name, v in groups.items() if len(v)}
    if not present:
        return _frame(title, ['<text x="240" y="160" text-anchor="middle">no data</text>'], (0, 1), (0, 1))
    values = np.concatenate(list(present.values()))
    low, high = float(values.min()), float(values.max())
    if high <= low:
        high = low + 1.0
    edges = np.linspace(low, high, bins + 1)
    densities = {name: np.histogram(v, bins=edges)[0] / len(v) for name, v in present.items()}
    top = max(float(d.max()) for d in densities.values()) or 1.0

    body = []
    x_edges = _scale(edges, low, high, MARGIN, WIDTH - MARGIN)
    for i, name in enumerate(groups):
        if name not in densities:
            continue
        color = PALETTE[i % len(PALETTE)]
        heights = _scale(densities[name], 0.0, top, 0.0, HEIGHT - 2 * MARGIN)
        for b in range(bins):
            if heights[b] <= 0:
                continue
            body.append(
                f'<rect x="{x_edges[b]:.2f}" y="{HEIGHT - MARGIN - heights[b]:.2f}" '
                f'width="{x_edges[b + 1] - x_edges[b]:.2f}" height="{heights[b]:.2f}" '
                f'fill="{color}" fill-opacity="0.45"/>'
            )
    body.extend(_legend(list(groups)))
    return _frame(title, body, (low, high), (0.0, top))


def polyline_svg(series: Dict[str, np.ndarray], title: str,
                 x_range: Tuple[float, float] = None, y_range: Tuple[float, float] = None,
                 diagonal: bool = False) -> str:
    """One polyline per named (k, 2) point array."""
    present = {name: np.asarray(p, dtype=np.float64).reshape(-1, 2) for name, p in series.items() if len(p)}
    if not present:
        return _frame(title, [], (0, 1), (0, 1))
    points = np.concatenate(list(present.values()))
    finite = points[np.all(np.isfinite(points), axis=1)]
    x_range = x_range or (float(finite[:, 0].min()), float(finite[:, 0].max()))
    y_range = y_range or (float(finite[:, 1].min()), float(finite[:, 1].max()))

    body = []
    if diagonal:
        body.append(f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" y2="{MARGIN}" '
                    f'stroke="gray" stroke-dasharray="4 3"/>')
    for i, name in enumerate(series):
        if name not in present:
            continue
        p = present[name]
        p = p[np.all(np.isfinite(p), axis=1)]
        xs = _scale(p[:, 0], *x_range, MARGIN, WIDTH - MARGIN)
        ys = _scale(p[:, 1], *y_range, HEIGHT - MARGIN, MARGIN)
        coordinates = ' '.join(f'{x:.2f},{y:.2f}' for x, y in zip(xs, ys))
        body.append(f'<polyline points="{coordinates}" fill="none" stroke="{PALETTE[i % len(PALETTE)]}" '
                    f'stroke-width="1.5"/>')
    body.extend(_legend(list(series)))
    return _frame(title, body, x_range, y_range)


def roc_svg(points: np.ndarray, title: str) -> str:
    return polyline_svg({'ROC': points}, title, (0.0, 1.0), (0.0, 1.0), diagonal=True)


def loss_svg(trace: Sequence[Tuple[int, float]], title: str, smoothed: np.ndarray = None) -> str:
    """Raw training loss and an optional smoothed curve aligned to the trace end."""
    trace = np.asarray(trace, dtype=np.float64).reshape(-1, 2)
    series = {'loss': trace}
    if smoothed is not None and len(smoothed):
        xs = trace[len(trace) - len(smoothed):, 0]
        series['smoothed'] = np.column_stack([xs, smoothed])
    return polyline_svg(series, title)
