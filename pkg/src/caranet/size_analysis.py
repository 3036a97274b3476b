"""Small-object analysis: size ratios, interval-averaged performance curves,
curve differencing with red/blue sums, the stability watershed, and the
small-sample filter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import MetricReport

__all__ = [
    "SizePoint",
    "SizeCurve",
    "size_ratio",
    "interval_average",
    "compare_curves",
    "CurveComparison",
    "watershed",
    "filter_small",
    "EmptyFilterError",
    "curve_csv",
    "comparison_csv",
    "curves_svg",
]


@dataclass(frozen=True)
class SizePoint:
    id: str
    size_ratio: float
    dice: float


@dataclass
class SizeCurve:
    """Equal-width consecutive intervals; empty intervals carry mean None
    (absent), never zero."""
    edges: np.ndarray            # n_intervals + 1 ascending edges
    means: list[float | None]
    counts: list[int]
    dropped: int = 0

    @property
    def n_intervals(self) -> int:
        return len(self.counts)

    def nonempty(self) -> list[tuple[int, float]]:
        return [(i, m) for i, m in enumerate(self.means) if m is not None]


def size_ratio(mask: np.ndarray) -> float:
    """Foreground pixels over total pixels; an empty mask gives 0."""
    m = np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise ValueError("size_ratio: mask must be binary")
    return float(m.sum()) / m.size


def interval_average(points: list[SizePoint], lo: float, hi: float,
                     n_intervals: int) -> SizeCurve:
    """Assign each point to floor((r - lo)/width); the right edge is inclusive
    in the last interval. Points outside [lo, hi] are dropped and counted."""
    if n_intervals < 1:
        raise ValueError("n_intervals must be >= 1")
    if not hi > lo:
        raise ValueError(f"need hi > lo, got [{lo}, {hi}]")
    width = (hi - lo) / n_intervals
    sums = np.zeros(n_intervals)
    counts = np.zeros(n_intervals, dtype=np.int64)
    dropped = 0
    for p in points:
        if p.size_ratio < lo or p.size_ratio > hi:
            dropped += 1
            continue
        idx = min(int((p.size_ratio - lo) / width), n_intervals - 1)
        sums[idx] += p.dice
        counts[idx] += 1
    means: list[float | None] = [float(sums[i] / counts[i]) if counts[i] else None
                                 for i in range(n_intervals)]
    edges = lo + width * np.arange(n_intervals + 1)
    edges[-1] = hi
    return SizeCurve(edges, means, [int(c) for c in counts], dropped)


@dataclass(frozen=True)
class CurveComparison:
    edges: np.ndarray
    diffs: list[float | None]    # a - b on intervals nonempty in both
    sum_positive: float          # "red": intervals where a beats b
    sum_negative: float          # "blue": intervals where b beats a


def compare_curves(a: SizeCurve, b: SizeCurve) -> CurveComparison:
    if a.n_intervals != b.n_intervals or not np.allclose(a.edges, b.edges, rtol=0, atol=0):
        raise ValueError("compare_curves: interval edges differ")
    diffs: list[float | None] = []
    pos = neg = 0.0
    for ma, mb in zip(a.means, b.means):
        if ma is None or mb is None:
            diffs.append(None)
            continue
        d = ma - mb
        diffs.append(d)
        pos += max(d, 0.0)
        neg += min(d, 0.0)
    return CurveComparison(a.edges.copy(), diffs, pos, neg)


def watershed(curve: SizeCurve, window: int = 5, stability_tol: float = 0.05) -> float | None:
    """Left edge of the first nonempty interval after which the rolling
    standard deviation over `window` nonempty intervals stays below the
    tolerance for the rest of the curve; None if it never stabilizes."""
    filled = curve.nonempty()
    if len(filled) < window:
        raise ValueError(f"need at least {window} nonempty intervals, have {len(filled)}")
    means = np.array([m for _, m in filled])
    n = len(means)
    stds = np.array([means[j:j + window].std() for j in range(n - window + 1)])
    stable = stds < stability_tol
    for j in range(len(stable)):
        if stable[j:].all():
            return float(curve.edges[filled[j][0]])
    return None


class EmptyFilterError(ValueError):
    """No samples fall below the requested cutoff."""


def filter_small(report: MetricReport, cutoff: float) -> MetricReport:
    """Restrict a report to rows with size_ratio <= cutoff."""
    if not 0.0 < cutoff <= 1.0:
        raise ValueError(f"cutoff must be in (0, 1], got {cutoff}")
    rows = [r for r in report.rows if r.size_ratio <= cutoff]
    if not rows:
        raise EmptyFilterError(f"no samples with size ratio <= {cutoff}")
    return MetricReport(rows)


# ---------------------------------------------------------------------------
# serialization and plotting


def curve_csv(curve: SizeCurve) -> str:
    """CSV rows for populated intervals only."""
    lines = ["interval_lo,interval_hi,mean_dice,count"]
    for i, m in curve.nonempty():
        lines.append(f"{curve.edges[i]!r},{curve.edges[i + 1]!r},{m:.6f},{curve.counts[i]}")
    return "\n".join(lines) + "\n"


def comparison_csv(a: SizeCurve, b: SizeCurve, cmp: CurveComparison) -> str:
    lines = ["interval_lo,interval_hi,mean_dice_a,mean_dice_b,diff"]
    for i, d in enumerate(cmp.diffs):
        if d is None:
            continue
        lines.append(f"{cmp.edges[i]!r},{cmp.edges[i + 1]!r},"
                     f"{a.means[i]:.6f},{b.means[i]:.6f},{d:.6f}")
    lines.append(f"sum_positive,,,,{cmp.sum_positive:.6f}")
    lines.append(f"sum_negative,,,,{cmp.sum_negative:.6f}")
    return "\n".join(lines) + "\n"


_W, _H = 720, 480
_ML, _MR, _MT, _MB = 64, 24, 28, 48
_COLORS = ("#1f6fb4", "#e07b28")


def _sx(r: float, lo: float, hi: float) -> float:
    return _ML + (r - lo) / (hi - lo) * (_W - _ML - _MR)


def _sy(v: float) -> float:
    return _MT + (1.0 - v) * (_H - _MT - _MB)


def curves_svg(named_curves: list[tuple[str, SizeCurve]],
               shade_diff: bool = False) -> str:
    """Self-contained SVG: one polyline per curve through interval midpoints
    (x in ratio %, y = mean dice), optional red/blue shading between the
    first two series where both are populated."""
    if not named_curves:
        raise ValueError("curves_svg: nothing to plot")
    lo = float(min(c.edges[0] for _, c in named_curves)) * 100.0
    hi = float(max(c.edges[-1] for _, c in named_curves)) * 100.0
    if hi <= lo:
        hi = lo + 1.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
    ]
    if shade_diff and len(named_curves) >= 2:
        ca, cb = named_curves[0][1], named_curves[1][1]
        for i, (ma, mb) in enumerate(zip(ca.means, cb.means)):
            if ma is None or mb is None or ma == mb:
                continue
            xm = (float(ca.edges[i]) + float(ca.edges[i + 1])) / 2.0 * 100.0
            color = "#d94545" if ma > mb else "#4576d9"
            x0, x1 = _sx(xm, lo, hi) - 4, _sx(xm, lo, hi) + 4
            y0, y1 = _sy(max(ma, mb)), _sy(min(ma, mb))
            parts.append(f'<rect x="{x0:.2f}" y="{y0:.2f}" width="{x1 - x0:.2f}" '
                         f'height="{y1 - y0:.2f}" fill="{color}" fill-opacity="0.35"/>')
    # axes
    parts.append(f'<line x1="{_ML}" y1="{_sy(0)}" x2="{_W - _MR}" y2="{_sy(0)}" '
                 f'stroke="black" stroke-width="1"/>')
    parts.append(f'<line x1="{_ML}" y1="{_sy(0)}" x2="{_ML}" y2="{_sy(1)}" '
                 f'stroke="black" stroke-width="1"/>')
    for k in range(6):
        v = k / 5.0
        parts.append(f'<text x="{_ML - 8}" y="{_sy(v) + 4:.2f}" text-anchor="end" '
                     f'font-size="11">{v:.1f}</text>')
        r = lo + (hi - lo) * v
        parts.append(f'<text x="{_sx(r, lo, hi):.2f}" y="{_sy(0) + 16:.2f}" '
                     f'text-anchor="middle" font-size="11">{r:.2f}</text>')
    parts.append(f'<text x="{(_ML + _W - _MR) // 2}" y="{_H - 10}" text-anchor="middle" '
                 f'font-size="12">size ratio (%)</text>')
    parts.append(f'<text x="14" y="{(_MT + _H - _MB) // 2}" text-anchor="middle" '
                 f'font-size="12" transform="rotate(-90 14 {(_MT + _H - _MB) // 2})">mean dice</text>')
    for idx, (name, curve) in enumerate(named_curves):
        pts = [f"{_sx((float(curve.edges[i]) + float(curve.edges[i + 1])) / 2 * 100, lo, hi):.2f},"
               f"{_sy(m):.2f}" for i, m in curve.nonempty()]
        color = _COLORS[idx % len(_COLORS)]
        if pts:
            parts.append(f'<polyline points="{" ".join(pts)}" fill="none" '
                         f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{_W - _MR - 8}" y="{_MT + 16 + 16 * idx}" text-anchor="end" '
                     f'font-size="12" fill="{color}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
