"""Ground-plane grids, pinhole cameras, polylines and their metrics.

World frame: x forward, y left, z up, units are meters, the ground is the
z = 0 plane. A BEV grid views the world from above with row 0 at the far
left edge (largest y) and column 0 at the rear (smallest x):

    row = floor((y_max - y) / cell_y)      col = floor((x - x_min) / cell_x)

Cells are half-open along both axes, so a point exactly on the high-x or
low-y outer edge falls outside the grid.

Camera frame: x right, y down, z forward (right-handed). A camera is
placed by yaw about world z, then pitched downward; projection is
u = cx + f * x/z, v = cy + f * y/z with z > 0, and the image rectangle is
half-open: 0 <= u < width, 0 <= v < height.
"""

from __future__ import annotations

import math

import numpy as np

CLASS_NAMES = ("ped_crossing", "divider", "boundary")
N_CLASSES = len(CLASS_NAMES)


class GeometryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# BEV grid
# ---------------------------------------------------------------------------

class BevGrid:
    """Axis-aligned ground-plane grid of rows x cols rectangular cells."""

    def __init__(self, x_min, x_max, y_min, y_max, rows, cols):
        if not (x_max > x_min and y_max > y_min and rows > 0 and cols > 0):
            raise GeometryError("degenerate grid extents")
        self.x_min = float(x_min)
        self.x_max = float(x_max)
        self.y_min = float(y_min)
        self.y_max = float(y_max)
        self.rows = int(rows)
        self.cols = int(cols)
        self.cell_x = (self.x_max - self.x_min) / self.cols
        self.cell_y = (self.y_max - self.y_min) / self.rows

    def cell_of(self, x, y):
        """(row, col) containing the point, or None when outside the grid."""
        col = math.floor((x - self.x_min) / self.cell_x)
        row = math.floor((self.y_max - y) / self.cell_y)
        if 0 <= row < self.rows and 0 <= col < self.cols:
            return row, col
        return None

    def cells_of(self, pts):
        """Vectorized cell_of: (N,2) xy -> (rows (N,), cols (N,), inside (N,))."""
        pts = np.asarray(pts, dtype=np.float64)
        cols = np.floor((pts[:, 0] - self.x_min) / self.cell_x).astype(np.int64)
        rows = np.floor((self.y_max - pts[:, 1]) / self.cell_y).astype(np.int64)
        inside = (rows >= 0) & (rows < self.rows) & (cols >= 0) & (cols < self.cols)
        return rows, cols, inside

    def cell_center(self, row, col):
        x = self.x_min + (np.asarray(col) + 0.5) * self.cell_x
        y = self.y_max - (np.asarray(row) + 0.5) * self.cell_y
        return x, y

    def cell_centers(self):
        """(rows, cols, 2) array of cell center xy coordinates."""
        r = np.arange(self.rows)
        c = np.arange(self.cols)
        x, y = self.cell_center(r[:, None], c[None, :])
        return np.stack([np.broadcast_to(x, (self.rows, self.cols)),
                         np.broadcast_to(y, (self.rows, self.cols))], axis=-1)

    def contains(self, x, y):
        return self.cell_of(x, y) is not None

    @property
    def half_extent_x(self):
        return 0.5 * (self.x_max - self.x_min)

    @property
    def half_extent_y(self):
        return 0.5 * (self.y_max - self.y_min)

    def __repr__(self):
        return (f"BevGrid(x=[{self.x_min},{self.x_max}], y=[{self.y_min},{self.y_max}], "
                f"{self.rows}x{self.cols})")


def standard_grid(rows=24, cols=48):
    """60 x 30 m region of interest centered on the rig."""
    return BevGrid(-30.0, 30.0, -15.0, 15.0, rows, cols)


def extended_grid(rows=24, cols=48):
    """100 x 50 m region of interest centered on the rig."""
    return BevGrid(-50.0, 50.0, -25.0, 25.0, rows, cols)


# ---------------------------------------------------------------------------
# pinhole camera
# ---------------------------------------------------------------------------

class Camera:
    """Pinhole camera posed by position, yaw about world z, and downward pitch."""

    def __init__(self, position, yaw, pitch, focal, width, height, cx=None, cy=None):
        self.position = np.asarray(position, dtype=np.float64)
        self.yaw = float(yaw)
        self.pitch = float(pitch)
        self.focal = float(focal)
        self.width = int(width)
        self.height = int(height)
        self.cx = float(width) / 2.0 if cx is None else float(cx)
        self.cy = float(height) / 2.0 if cy is None else float(cy)
        cy_, sy_ = math.cos(self.yaw), math.sin(self.yaw)
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        forward = np.array([cp * cy_, cp * sy_, -sp])
        right = np.array([sy_, -cy_, 0.0])
        down = np.cross(forward, right)
        # rows transform world deltas into (right, down, forward) coordinates
        self.rot = np.stack([right, down, forward])

    def project(self, pts):
        """World points (N,3) -> (uv (N,2), depth (N,), valid (N,) bool).

        valid requires positive depth and the pixel inside the half-open
        image rectangle.
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        cam = (pts - self.position) @ self.rot.T
        z = cam[:, 2]
        safe = np.where(z > 0, z, 1.0)
        u = self.cx + self.focal * cam[:, 0] / safe
        v = self.cy + self.focal * cam[:, 1] / safe
        valid = (z > 1e-9) & (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)
        return np.stack([u, v], axis=1), z, valid

    def pixel_dirs(self):
        """(height, width, 3) world-frame ray directions through pixel centers."""
        u = (np.arange(self.width) + 0.5 - self.cx) / self.focal
        v = (np.arange(self.height) + 0.5 - self.cy) / self.focal
        du, dv = np.meshgrid(u, v)
        cam_dirs = np.stack([du, dv, np.ones_like(du)], axis=-1)
        return cam_dirs @ self.rot  # (R^T d) for each pixel

    def pixel_to_ground(self, u, v):
        """Intersect the ray through pixel (u, v) with z = 0; None if skyward."""
        d_cam = np.array([(u - self.cx) / self.focal, (v - self.cy) / self.focal, 1.0])
        d = self.rot.T @ d_cam
        if d[2] >= -1e-12:
            return None
        t = -self.position[2] / d[2]
        p = self.position + t * d
        return float(p[0]), float(p[1])


def default_rig(height=1.6, pitch=0.12, focal=48.0, width=96, img_height=64):
    """Four cameras at the rig origin, 90 degree yaw spacing.

    With focal = width/2 each camera spans exactly 90 degrees of azimuth,
    so the four half-open image planes tile the full horizon once.
    """
    return [Camera((0.0, 0.0, height), k * math.pi / 2.0, pitch, focal, width, img_height)
            for k in range(4)]


# ---------------------------------------------------------------------------
# polyline rasterization (supercover traversal)
# ---------------------------------------------------------------------------

def rasterize_polyline(grid: BevGrid, pts, canvas=None, value=1):
    """Mark every grid cell a polyline passes through.

    Uses exact cell-boundary traversal, so a segment never skips a crossed
    cell and never marks diagonal neighbours it does not touch. Returns the
    canvas (created as zeros((rows, cols), int64) when not supplied).
    """
    if canvas is None:
        canvas = np.zeros((grid.rows, grid.cols), dtype=np.int64)
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise GeometryError("polyline must be (K, 2)")
    # continuous cell coordinates: gx along columns, gy along rows
    gx = (pts[:, 0] - grid.x_min) / grid.cell_x
    gy = (grid.y_max - pts[:, 1]) / grid.cell_y

    def mark(cx, cy):
        if 0 <= cy < grid.rows and 0 <= cx < grid.cols:
            canvas[cy, cx] = value

    for i in range(len(pts) - 1):
        _traverse(gx[i], gy[i], gx[i + 1], gy[i + 1], mark)
    if len(pts) == 1:
        mark(math.floor(gx[0]), math.floor(gy[0]))
    return canvas


def _traverse(x0, y0, x1, y1, visit):
    """Amanatides-Woo traversal of the unit grid from (x0,y0) to (x1,y1)."""
    cx, cy = math.floor(x0), math.floor(y0)
    ex, ey = math.floor(x1), math.floor(y1)
    dx, dy = x1 - x0, y1 - y0
    step_x = 1 if dx > 0 else -1
    step_y = 1 if dy > 0 else -1
    if dx != 0:
        t_max_x = ((cx + (step_x > 0)) - x0) / dx
        t_dx = abs(1.0 / dx)
    else:
        t_max_x, t_dx = math.inf, math.inf
    if dy != 0:
        t_max_y = ((cy + (step_y > 0)) - y0) / dy
        t_dy = abs(1.0 / dy)
    else:
        t_max_y, t_dy = math.inf, math.inf
    visit(cx, cy)
    guard = 0
    while (cx, cy) != (ex, ey):
        if t_max_x <= t_max_y:
            if t_max_x > 1.0 + 1e-12:
                break
            cx += step_x
            t_max_x += t_dx
        else:
            if t_max_y > 1.0 + 1e-12:
                break
            cy += step_y
            t_max_y += t_dy
        visit(cx, cy)
        guard += 1
        if guard > 4 * (abs(ex - math.floor(x0)) + abs(ey - math.floor(y0)) + 4):
            break  # numerical corner case; never triggered by sane inputs


# ---------------------------------------------------------------------------
# resampling and chamfer distance
# ---------------------------------------------------------------------------

def resample_polyline(pts, step=0.1):
    """Uniform arc-length resample with spacing <= step, endpoints included."""
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
        raise GeometryError("polyline must be non-empty (K, 2)")
    if len(pts) == 1:
        return pts.copy()
    seg = np.diff(pts, axis=0)
    lens = np.sqrt((seg * seg).sum(axis=1))
    total = float(lens.sum())
    if total == 0.0:
        return pts[:1].copy()
    n = max(1, int(math.ceil(total / step)))
    targets = np.arange(n + 1) * (total / n)
    cum = np.concatenate([[0.0], np.cumsum(lens)])
    idx = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, len(lens) - 1)
    safe = np.where(lens[idx] > 0, lens[idx], 1.0)
    frac = np.clip((targets - cum[idx]) / safe, 0.0, 1.0)
    return pts[idx] + frac[:, None] * seg[idx]


def _segments(pts):
    pts = np.asarray(pts, dtype=np.float64)
    if len(pts) == 1:
        return np.stack([pts, pts], axis=1)
    return np.stack([pts[:-1], pts[1:]], axis=1)


def point_segment_distances(points, segs):
    """points (N,2), segs (S,2,2) -> (N,S) euclidean point-segment distances."""
    a = segs[:, 0][None, :, :]
    ab = (segs[:, 1] - segs[:, 0])[None, :, :]
    denom = (ab * ab).sum(-1)
    ap = points[:, None, :] - a
    t = (ap * ab).sum(-1) / np.where(denom > 0, denom, 1.0)
    t = np.clip(np.where(denom > 0, t, 0.0), 0.0, 1.0)
    d = ap - t[..., None] * ab
    return np.sqrt((d * d).sum(-1))


def chamfer_distance(a, b, step=0.1):
    """Symmetric chamfer between polylines: both are resampled at `step`
    spacing, each sample measures distance to the other polyline's segments,
    and all samples pool into one mean. Exactly symmetric in its arguments.
    """
    sa = resample_polyline(a, step)
    sb = resample_polyline(b, step)
    d_ab = point_segment_distances(sa, _segments(b)).min(axis=1)
    d_ba = point_segment_distances(sb, _segments(a)).min(axis=1)
    return float((d_ab.sum() + d_ba.sum()) / (d_ab.size + d_ba.size))


# ---------------------------------------------------------------------------
# polyline text files:  class_id score x0 y0 x1 y1 ...
# ---------------------------------------------------------------------------

def format_polyline(class_id, score, pts):
    pts = np.asarray(pts, dtype=np.float64)
    coords = " ".join(f"{v:.6f}" for v in pts.reshape(-1))
    return f"{int(class_id)} {score:.6f} {coords}"


def parse_polyline(line, where="<string>"):
    parts = line.split()
    if len(parts) < 4 or (len(parts) - 2) % 2 != 0:
        raise GeometryError(f"{where}: malformed polyline line: {line!r}")
    try:
        class_id = int(parts[0])
        score = float(parts[1])
        vals = np.array([float(p) for p in parts[2:]], dtype=np.float64)
    except ValueError as e:
        raise GeometryError(f"{where}: {e}") from None
    if not (0 <= class_id < N_CLASSES):
        raise GeometryError(f"{where}: class id {class_id} out of range")
    return class_id, score, vals.reshape(-1, 2)


def write_polylines(path, items):
    """items: iterable of (class_id, score, pts)."""
    with open(path, "w") as f:
        for class_id, score, pts in items:
            f.write(format_polyline(class_id, score, pts) + "\n")


def read_polylines(path):
    items = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            items.append(parse_polyline(line, where=f"{path}:{ln}"))
    return items
