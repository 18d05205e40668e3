"""Minimal self-contained SVG plots.

Line plots with axes, ticks, labels and a legend, written as plain SVG
text. Output is deterministic: same data, byte-identical file.
"""

import math


class PlotError(ValueError):
    pass


PALETTE = ("#1f6fb2", "#c23b22", "#2e8b57", "#8a2be2", "#b8860b", "#444444")

WIDTH, HEIGHT = 640, 420
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 64, 20, 36, 48


def _nice_ticks(lo, hi, n=5):
    """Round tick positions covering [lo, hi]."""
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo
    raw = span / max(n - 1, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        step = mult * mag
        if step >= raw:
            break
    start = math.floor(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 0.5 * step:
        ticks.append(round(t, 10))
        t += step
    return ticks


def _fmt(v):
    if v == int(v) and abs(v) < 1e6:
        return str(int(v))
    return f"{v:.4g}"


def line_plot(path, series, title="", x_label="", y_label=""):
    """series: list of (name, xs, ys); writes an SVG line chart.

    Points are drawn as small circles on top of each polyline so single
    point series remain visible.
    """
    series = [(str(name), [float(x) for x in xs], [float(y) for y in ys])
              for name, xs, ys in series]
    if not series or any(len(xs) != len(ys) or not xs for _, xs, ys in series):
        raise PlotError("each series needs equally many xs and ys, at least one")
    all_x = [x for _, xs, _ in series for x in xs]
    all_y = [y for _, _, ys in series for y in ys]
    xt = _nice_ticks(min(all_x), max(all_x))
    yt = _nice_ticks(min(all_y), max(all_y))
    x0, x1 = xt[0], xt[-1]
    y0, y1 = yt[0], yt[-1]
    iw = WIDTH - MARGIN_L - MARGIN_R
    ih = HEIGHT - MARGIN_T - MARGIN_B

    def sx(x):
        return MARGIN_L + (x - x0) / (x1 - x0) * iw

    def sy(y):
        return MARGIN_T + ih - (y - y0) / (y1 - y0) * ih

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
           f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>']
    if title:
        out.append(f'<text x="{WIDTH / 2:.1f}" y="20" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="14">{title}</text>')
    # frame and ticks
    out.append(f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{iw}" height="{ih}" '
               f'fill="none" stroke="#333" stroke-width="1"/>')
    for t in xt:
        px = sx(t)
        out.append(f'<line x1="{px:.1f}" y1="{MARGIN_T + ih}" x2="{px:.1f}" '
                   f'y2="{MARGIN_T + ih + 4}" stroke="#333"/>')
        out.append(f'<text x="{px:.1f}" y="{MARGIN_T + ih + 18}" '
                   f'text-anchor="middle" font-family="sans-serif" '
                   f'font-size="11">{_fmt(t)}</text>')
    for t in yt:
        py = sy(t)
        out.append(f'<line x1="{MARGIN_L - 4}" y1="{py:.1f}" x2="{MARGIN_L}" '
                   f'y2="{py:.1f}" stroke="#333"/>')
        out.append(f'<text x="{MARGIN_L - 8}" y="{py + 4:.1f}" '
                   f'text-anchor="end" font-family="sans-serif" '
                   f'font-size="11">{_fmt(t)}</text>')
        out.append(f'<line x1="{MARGIN_L}" y1="{py:.1f}" '
                   f'x2="{MARGIN_L + iw}" y2="{py:.1f}" stroke="#ddd" '
                   f'stroke-width="0.5"/>')
    if x_label:
        out.append(f'<text x="{MARGIN_L + iw / 2:.1f}" y="{HEIGHT - 10}" '
                   f'text-anchor="middle" font-family="sans-serif" '
                   f'font-size="12">{x_label}</text>')
    if y_label:
        cy = MARGIN_T + ih / 2
        out.append(f'<text x="16" y="{cy:.1f}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="12" '
                   f'transform="rotate(-90 16 {cy:.1f})">{y_label}</text>')
    # series
    for i, (name, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                   f'stroke-width="1.5"/>')
        for x, y in zip(xs, ys):
            out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" '
                       f'fill="{color}"/>')
        ly = MARGIN_T + 14 + 16 * i
        lx = MARGIN_L + iw - 150
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 22}" '
                   f'y2="{ly - 4}" stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{lx + 28}" y="{ly}" font-family="sans-serif" '
                   f'font-size="11">{name}</text>')
    out.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(out) + "\n")


def read_plot_points(path):
    """Returns the number of data points per series in a line_plot file."""
    counts = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line.startswith("<polyline"):
                pts = line.split('points="', 1)[1].split('"', 1)[0]
                counts.append(len(pts.split()))
    return counts
