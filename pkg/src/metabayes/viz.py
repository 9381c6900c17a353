"""Publication-style SVG figures: forest plot and dose-response plot.

Plain SVG 1.1 text is emitted directly (no rasterisation); every figure
parses as XML.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from .data import Dataset, Endpoint
from .diagnostics import DoseCurveBands

_LIGHT_BLUE = "#9ecae1"
_DARK_BLUE = "#3182bd"
_POINT_GREY = "#55555588"

_Z975 = 1.959963984540054  # 97.5% standard normal quantile


class PlotError(ValueError):
    """Invalid plotting input."""


# ---------------------------------------------------------------------------
# Per-study estimates
# ---------------------------------------------------------------------------


def per_study_estimates(dataset: Dataset) -> list[tuple[float, float, float]]:
    """Empirical effect and Wald 95% interval per two-arm study.

    Binary studies yield log odds ratios with SE sqrt(sum of reciprocal
    cells), adding a 0.5 continuity correction to all four cells when any
    cell is zero; continuous studies yield mean differences; count
    studies yield log rate ratios (0.5 added to both counts when one is
    zero).
    """
    out = []
    for s in range(1, dataset.n_studies + 1):
        arms = dataset.study_arms(s)
        if len(arms) != 2:
            raise PlotError(
                f"study {s} has {len(arms)} arms; per-study intervals need "
                "two-arm studies (use the dose-response plot instead)"
            )
        control, treatment = arms
        if dataset.endpoint is Endpoint.BINARY:
            a = float(treatment.responders)
            b = float(treatment.sample_size - treatment.responders)
            c = float(control.responders)
            d = float(control.sample_size - control.responders)
            if min(a, b, c, d) == 0.0:
                a, b, c, d = a + 0.5, b + 0.5, c + 0.5, d + 0.5
            est = math.log(a * d / (b * c))
            se = math.sqrt(1 / a + 1 / b + 1 / c + 1 / d)
        elif dataset.endpoint is Endpoint.CONTINUOUS:
            est = treatment.mean - control.mean
            se = math.sqrt(treatment.std_err**2 + control.std_err**2)
        else:
            yt, yc = float(treatment.events), float(control.events)
            if min(yt, yc) == 0.0:
                yt, yc = yt + 0.5, yc + 0.5
            est = math.log((yt / treatment.exposure) / (yc / control.exposure))
            se = math.sqrt(1 / yt + 1 / yc)
        out.append((est, est - _Z975 * se, est + _Z975 * se))
    return out


# ---------------------------------------------------------------------------
# Plot inputs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ForestPlotInput:
    """Rows of a forest plot: studies, the pooled effect and the prediction.

    Estimates are (point, low, high) triples on the model's effect scale;
    ``heterogeneity`` is the (median, 2.5%, 97.5%) of tau for the caption.
    """

    labels: tuple[str, ...]
    estimates: tuple[tuple[float, float, float], ...]
    pooled: tuple[float, float, float]
    prediction: tuple[float, float, float]
    heterogeneity: tuple[float, float, float]

    def __post_init__(self) -> None:
        if len(self.labels) != len(self.estimates):
            raise PlotError("need exactly one label per study estimate")
        for point, low, high in (*self.estimates, self.pooled, self.prediction):
            if not low <= point <= high:
                raise PlotError(f"interval not ordered: {(point, low, high)}")


@dataclass(frozen=True)
class DosePlotInput:
    """Dose-response bands plus observed per-arm points (dose, rate, n)."""

    bands: DoseCurveBands
    points: tuple[tuple[float, float, float], ...]

    def __post_init__(self) -> None:
        if len(self.bands.dose) == 0:
            raise PlotError("dose grid must be non-empty")


# ---------------------------------------------------------------------------
# SVG helpers
# ---------------------------------------------------------------------------


def _svg_header(width: int, height: int) -> str:
    return (
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{width}" height="{height}" viewBox="0 0 {width} {height}">\n'
        f'<rect width="{width}" height="{height}" fill="white"/>\n'
    )


def _fmt(v: float) -> str:
    return format(v, ".6g")


class _Scale:
    """Affine map from data to pixel coordinates."""

    def __init__(self, lo: float, hi: float, px_lo: float, px_hi: float):
        if hi == lo:
            lo, hi = lo - 1.0, hi + 1.0
        self.lo, self.hi, self.px_lo, self.px_hi = lo, hi, px_lo, px_hi

    def __call__(self, v: float) -> float:
        frac = (v - self.lo) / (self.hi - self.lo)
        return self.px_lo + frac * (self.px_hi - self.px_lo)

    def ticks(self, n: int = 5) -> list[float]:
        raw = np.linspace(self.lo, self.hi, n)
        return [float(round(t, 6)) for t in raw]


def _x_axis(scale: _Scale, y: float, label: str) -> str:
    parts = [
        f'<line x1="{_fmt(scale.px_lo)}" y1="{_fmt(y)}" x2="{_fmt(scale.px_hi)}" '
        f'y2="{_fmt(y)}" stroke="black"/>'
    ]
    for t in scale.ticks():
        x = scale(t)
        parts.append(
            f'<line x1="{_fmt(x)}" y1="{_fmt(y)}" x2="{_fmt(x)}" y2="{_fmt(y + 5)}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{_fmt(x)}" y="{_fmt(y + 18)}" font-size="11" '
            f'text-anchor="middle">{_fmt(round(t, 3))}</text>'
        )
    mid = 0.5 * (scale.px_lo + scale.px_hi)
    parts.append(
        f'<text x="{_fmt(mid)}" y="{_fmt(y + 36)}" font-size="13" '
        f'text-anchor="middle">{escape(label)}</text>'
    )
    return "\n".join(parts)


# ---------------------------------------------------------------------------
# Forest plot
# ---------------------------------------------------------------------------


def forest_plot_svg(
    plot_input: ForestPlotInput,
    xlab: str = "Effect",
    point_color: str = "black",
    summary_color: str = _DARK_BLUE,
    prediction_color: str = _LIGHT_BLUE,
) -> str:
    """Forest plot: one row per study, a pooled row and a prediction row.

    The caption line reports the heterogeneity as
    ``Heterogeneity (tau): <median> [<2.5%>, <97.5%>]``.
    """
    n_rows = len(plot_input.estimates) + 2
    width, height = 800, 60 * n_rows + 120
    rows = list(zip(plot_input.labels, plot_input.estimates))
    rows.append(("Pooled effect (theta)", plot_input.pooled))
    rows.append(("Prediction (theta*)", plot_input.prediction))

    values = [v for _, (p, lo, hi) in rows for v in (p, lo, hi)] + [0.0]
    span = max(values) - min(values) or 1.0
    scale = _Scale(min(values) - 0.05 * span, max(values) + 0.05 * span, 230, 770)

    parts = [_svg_header(width, height)]
    axis_y = 60 * n_rows + 50
    zero_x = scale(0.0)
    parts.append(
        f'<line x1="{_fmt(zero_x)}" y1="30" x2="{_fmt(zero_x)}" y2="{_fmt(axis_y)}" '
        'stroke="#999999" stroke-dasharray="4 3"/>'
    )
    for i, (label, (point, low, high)) in enumerate(rows):
        y = 40 + 60 * i + 20
        is_summary = i >= len(plot_input.estimates)
        parts.append(
            f'<text x="20" y="{_fmt(y + 4)}" font-size="12" class="row-label">'
            f"{escape(str(label))}</text>"
        )
        x_lo, x_hi, x_pt = scale(low), scale(high), scale(point)
        parts.append(
            f'<line x1="{_fmt(x_lo)}" y1="{_fmt(y)}" x2="{_fmt(x_hi)}" y2="{_fmt(y)}" '
            f'stroke="black" class="row-interval"/>'
        )
        for x_end in (x_lo, x_hi):
            parts.append(
                f'<line x1="{_fmt(x_end)}" y1="{_fmt(y - 4)}" x2="{_fmt(x_end)}" '
                f'y2="{_fmt(y + 4)}" stroke="black"/>'
            )
        if is_summary:
            color = summary_color if i == len(plot_input.estimates) else prediction_color
            parts.append(
                f'<polygon points="{_fmt(x_pt - 8)},{_fmt(y)} {_fmt(x_pt)},{_fmt(y - 8)} '
                f'{_fmt(x_pt + 8)},{_fmt(y)} {_fmt(x_pt)},{_fmt(y + 8)}" '
                f'fill="{color}" class="row-marker"/>'
            )
        else:
            parts.append(
                f'<rect x="{_fmt(x_pt - 5)}" y="{_fmt(y - 5)}" width="10" height="10" '
                f'fill="{point_color}" class="row-marker"/>'
            )
    parts.append(_x_axis(scale, axis_y, xlab))
    med, lo, hi = plot_input.heterogeneity
    caption = f"Heterogeneity (tau): {med:.2f} [{lo:.2f}, {hi:.2f}]"
    parts.append(
        f'<text x="20" y="{_fmt(height - 20)}" font-size="13" class="caption">'
        f"{escape(caption)}</text>"
    )
    parts.append("</svg>\n")
    return "\n".join(parts)


# ---------------------------------------------------------------------------
# Dose-response plot
# ---------------------------------------------------------------------------


def _polyline(xs, ys) -> str:
    return " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in zip(xs, ys))


def dose_plot_svg(
    plot_input: DosePlotInput,
    xlab: str = "Dose",
    ylab: str = "Response",
    band_colors: tuple[str, str] = (_LIGHT_BLUE, _DARK_BLUE),
) -> str:
    """Dose-response plot: median curve, nested 95%/50% bands, observed points.

    Observed points are drawn with radius proportional to the square root
    of the arm sample size.
    """
    bands = plot_input.bands
    width, height = 800, 500
    x_scale = _Scale(float(np.min(bands.dose)), float(np.max(bands.dose)), 70, 770)
    y_values = np.concatenate(
        [bands.q2_5, bands.q97_5, [p[1] for p in plot_input.points] or [0.0, 1.0]]
    )
    y_span = float(np.max(y_values) - np.min(y_values)) or 1.0
    y_scale = _Scale(
        float(np.min(y_values)) - 0.08 * y_span,
        float(np.max(y_values)) + 0.08 * y_span,
        440,
        40,
    )

    parts = [_svg_header(width, height)]
    xs = [x_scale(d) for d in bands.dose]

    def band(lo, hi, color, name):
        pts = _polyline(xs, [y_scale(v) for v in hi]) + " " + _polyline(
            xs[::-1], [y_scale(v) for v in lo[::-1]]
        )
        return f'<polygon points="{pts}" fill="{color}" stroke="none" class="{name}"/>'

    parts.append(band(bands.q2_5, bands.q97_5, band_colors[0], "band-95"))
    parts.append(band(bands.q25, bands.q75, band_colors[1], "band-50"))
    parts.append(
        f'<polyline points="{_polyline(xs, [y_scale(v) for v in bands.q50])}" '
        'fill="none" stroke="#08306b" stroke-width="2" class="median-curve"/>'
    )
    if plot_input.points:
        n_max = max(p[2] for p in plot_input.points)
        for dose, rate, n in plot_input.points:
            r = 3.0 + 9.0 * math.sqrt(n / n_max)
            parts.append(
                f'<circle cx="{_fmt(x_scale(dose))}" cy="{_fmt(y_scale(rate))}" '
                f'r="{_fmt(r)}" fill="{_POINT_GREY}" class="observed-point"/>'
            )
    parts.append(_x_axis(x_scale, 450, xlab))
    # y axis
    parts.append('<line x1="70" y1="40" x2="70" y2="440" stroke="black"/>')
    for t in y_scale.ticks():
        y = y_scale(t)
        parts.append(f'<line x1="65" y1="{_fmt(y)}" x2="70" y2="{_fmt(y)}" stroke="black"/>')
        parts.append(
            f'<text x="60" y="{_fmt(y + 4)}" font-size="11" text-anchor="end">'
            f"{_fmt(round(t, 3))}</text>"
        )
    parts.append(
        f'<text x="18" y="240" font-size="13" text-anchor="middle" '
        f'transform="rotate(-90 18 240)">{escape(ylab)}</text>'
    )
    parts.append("</svg>\n")
    return "\n".join(parts)


def observed_points(dataset: Dataset) -> tuple[tuple[float, float, float], ...]:
    """(dose, observed rate, sample size) per arm for the dose plot."""
    if not dataset.has_doses:
        raise PlotError("dataset has no doses")
    pts = []
    for a in sorted(dataset.arms, key=lambda a: (a.study, a.arm)):
        if dataset.endpoint is Endpoint.BINARY:
            pts.append((a.dose, a.responders / a.sample_size, float(a.sample_size)))
        elif dataset.endpoint is Endpoint.CONTINUOUS:
            pts.append((a.dose, a.mean, 1.0 / a.std_err**2))
        else:
            pts.append((a.dose, a.events / a.exposure, a.exposure))
    return tuple(pts)
