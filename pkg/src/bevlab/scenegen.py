"""Procedural cross-view scene generation and rendering.

A scene is a small road network (curved centerlines with lane structure)
expressed as vector ground truth: two boundary polylines per road, a
divider per interior lane edge, and optional pedestrian crossings, plus a
set of box occluders that exist only for the perspective cameras.

Ground colors are quantized to BEV grid cells: the overhead raster assigns
one color per cell, and camera rays that hit a cell's ground patch return
exactly that color. This makes the two views pixel-consistent wherever the
ground is unoccluded, which the tests exploit as an exact oracle. The
overhead render ignores occluders entirely (its privilege); cameras see
occluder faces in front of the ground they hide.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import (BevGrid, default_rig, extended_grid, point_segment_distances,
                       rasterize_polyline, read_polylines, write_polylines, _segments)
from .tensors import read_ten, write_ten

LANE_WIDTH = 3.2
ROAD_COLOR = (0.45, 0.45, 0.47)
CLASS_COLORS = {
    0: (0.80, 0.85, 0.90),  # ped_crossing
    1: (0.85, 0.75, 0.20),  # divider
    2: (0.92, 0.92, 0.95),  # boundary
}
SKY_COLOR = (0.60, 0.72, 0.90)
MIN_ROAD_INSIDE = 25.0  # meters of centerline required inside the extended RoI


class SceneGenError(RuntimeError):
    pass


class SceneParams:
    """Generation knobs; `seed` fully determines the scene."""

    def __init__(self, seed, road_count=(1, 2), lane_count=(2, 4), curvature=0.025,
                 curvature_band=(0.0, 1.0), crossing_probability=0.9,
                 occluder_count=(2, 5), occluder_size=(1.0, 3.0)):
        self.seed = int(seed)
        self.road_count = (int(road_count[0]), int(road_count[1]))
        self.lane_count = (int(lane_count[0]), int(lane_count[1]))
        self.curvature = float(curvature)
        self.curvature_band = (float(curvature_band[0]), float(curvature_band[1]))
        self.crossing_probability = float(crossing_probability)
        self.occluder_count = (int(occluder_count[0]), int(occluder_count[1]))
        self.occluder_size = (float(occluder_size[0]), float(occluder_size[1]))
        if self.road_count[0] > self.road_count[1] or self.road_count[0] < 1:
            raise SceneGenError("empty road_count range")
        if self.lane_count[0] > self.lane_count[1] or self.lane_count[0] < 1:
            raise SceneGenError("empty lane_count range")
        if self.curvature < 0 or not (0 <= self.crossing_probability <= 1):
            raise SceneGenError("invalid curvature or crossing_probability")


class Road:
    def __init__(self, centerline, half_width):
        self.centerline = np.asarray(centerline, dtype=np.float64)
        self.half_width = float(half_width)


class Scene:
    """Vector ground truth plus camera-only occluders.

    ground_truth: list of (class_id, score, pts); occluders: list of
    (x0, x1, y0, y1, height) boxes standing on the ground plane.
    """

    def __init__(self, seed, texture_seed, roads, ground_truth, occluders,
                 ego_pose=(0.0, 0.0, 0.0)):
        self.seed = int(seed)
        self.texture_seed = int(texture_seed)
        self.roads = list(roads)
        self.ground_truth = list(ground_truth)
        self.occluders = [tuple(float(v) for v in o) for o in occluders]
        self.ego_pose = tuple(float(v) for v in ego_pose)

    def serialize(self) -> str:
        # repr(float(v)) gives the shortest exact round-trip decimal
        def fmt(vals):
            return " ".join(repr(float(v)) for v in vals)

        lines = [f"seed {self.seed}", f"texture_seed {self.texture_seed}",
                 "ego_pose " + fmt(self.ego_pose)]
        for road in self.roads:
            lines.append(f"road {float(road.half_width)!r} {fmt(road.centerline.reshape(-1))}")
        for box in self.occluders:
            lines.append("occluder " + fmt(box))
        for class_id, score, pts in self.ground_truth:
            lines.append(f"gt {int(class_id)} {float(score)!r} {fmt(np.asarray(pts).reshape(-1))}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def deserialize(text: str) -> "Scene":
        seed = texture_seed = None
        ego = (0.0, 0.0, 0.0)
        roads, gt, occluders = [], [], []
        for line in text.splitlines():
            parts = line.split()
            if not parts:
                continue
            key = parts[0]
            if key == "seed":
                seed = int(parts[1])
            elif key == "texture_seed":
                texture_seed = int(parts[1])
            elif key == "ego_pose":
                ego = tuple(float(v) for v in parts[1:4])
            elif key == "road":
                hw = float(parts[1])
                pts = np.array([float(v) for v in parts[2:]]).reshape(-1, 2)
                roads.append(Road(pts, hw))
            elif key == "occluder":
                occluders.append(tuple(float(v) for v in parts[1:6]))
            elif key == "gt":
                pts = np.array([float(v) for v in parts[3:]]).reshape(-1, 2)
                gt.append((int(parts[1]), float(parts[2]), pts))
            else:
                raise SceneGenError(f"unknown scene line {key!r}")
        if seed is None or texture_seed is None:
            raise SceneGenError("scene text missing seed fields")
        return Scene(seed, texture_seed, roads, gt, occluders, ego)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _march_centerline(anchor, heading, kappa, length=150.0, step=2.0):
    """Constant-curvature march centered on the anchor point."""
    half_steps = int(length / (2 * step))
    anchor = np.asarray(anchor, dtype=np.float64)
    fwd = [anchor]
    h = heading
    for _ in range(half_steps):
        fwd.append(fwd[-1] + step * np.array([math.cos(h), math.sin(h)]))
        h += kappa * step
    bwd = []
    h = heading
    cur = anchor
    for _ in range(half_steps):
        h -= kappa * step
        cur = cur - step * np.array([math.cos(h), math.sin(h)])
        bwd.append(cur)
    return np.array(list(reversed(bwd)) + fwd)


def _vertex_normals(pts):
    """Unit left-normals at each vertex (averaged segment directions)."""
    seg = np.diff(pts, axis=0)
    seg = seg / np.linalg.norm(seg, axis=1, keepdims=True)
    dirs = np.vstack([seg[:1], 0.5 * (seg[:-1] + seg[1:]), seg[-1:]])
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    return np.stack([-dirs[:, 1], dirs[:, 0]], axis=1)


def _offset_polyline(pts, normals, d):
    return pts + d * normals


def _inside_length(pts, grid: BevGrid):
    seg = np.diff(pts, axis=0)
    lens = np.sqrt((seg ** 2).sum(axis=1))
    mids = 0.5 * (pts[:-1] + pts[1:])
    _, _, inside = grid.cells_of(mids)
    return float(lens[inside].sum())


def generate_scene(params: SceneParams) -> Scene:
    """Deterministic scene from params.seed; raises SceneGenError when the
    layout constraints cannot be met within the retry budget."""
    rng = np.random.default_rng(params.seed)
    texture_seed = int(rng.integers(0, 2 ** 62))
    ext = extended_grid()
    n_roads = int(rng.integers(params.road_count[0], params.road_count[1] + 1))
    roads = []
    gt = []
    for _ in range(n_roads):
        for attempt in range(60):
            anchor = rng.uniform([-30.0, -15.0], [30.0, 15.0])
            heading = rng.uniform(0.0, 2.0 * math.pi)
            band_lo, band_hi = params.curvature_band
            kappa = rng.uniform(band_lo, band_hi) * params.curvature
            kappa *= -1.0 if rng.random() < 0.5 else 1.0
            lanes = int(rng.integers(params.lane_count[0], params.lane_count[1] + 1))
            half_width = lanes * LANE_WIDTH / 2.0
            if kappa != 0.0 and 1.0 / abs(kappa) <= half_width + LANE_WIDTH:
                continue  # offsets would fold over the curvature radius
            centerline = _march_centerline(anchor, heading, kappa)
            if _inside_length(centerline, ext) < MIN_ROAD_INSIDE:
                continue
            normals = _vertex_normals(centerline)
            edges = [_offset_polyline(centerline, normals, half_width),
                     _offset_polyline(centerline, normals, -half_width)]
            lanes_gt = [_offset_polyline(centerline, normals, -half_width + k * LANE_WIDTH)
                        for k in range(1, lanes)]
            if all(_inside_length(p, ext) >= 10.0 for p in edges + lanes_gt):
                break
        else:
            raise SceneGenError(
                f"seed {params.seed}: no valid road after 60 attempts (over-constrained)")
        roads.append(Road(centerline, half_width))
        gt.append((2, 1.0, edges[0]))
        gt.append((2, 1.0, edges[1]))
        for divider in lanes_gt:
            gt.append((1, 1.0, divider))
        if rng.random() < params.crossing_probability:
            # perpendicular stripe across the road at an in-RoI interior vertex
            interior = [i for i in range(1, len(centerline) - 1)
                        if ext.contains(centerline[i][0], centerline[i][1])]
            if interior:
                i = interior[int(rng.integers(0, len(interior)))]
                n = normals[i]
                c = centerline[i]
                reach = half_width + 0.5
                gt.append((0, 1.0, np.array([c - reach * n, c + reach * n])))
    occluders = []
    n_occ = int(rng.integers(params.occluder_count[0], params.occluder_count[1] + 1))
    for _ in range(n_occ):
        road = roads[int(rng.integers(0, len(roads)))]
        i = int(rng.integers(0, len(road.centerline)))
        n = _vertex_normals(road.centerline)[i]
        side = -1.0 if rng.random() < 0.5 else 1.0
        size = rng.uniform(*params.occluder_size)
        gap = rng.uniform(0.5, 2.0)
        center = road.centerline[i] + side * (road.half_width + gap + size / 2.0) * n
        height = rng.uniform(1.5, 2.5)
        occluders.append((center[0] - size / 2.0, center[0] + size / 2.0,
                          center[1] - size / 2.0, center[1] + size / 2.0, height))
    return Scene(params.seed, texture_seed, roads, gt, occluders)


# ---------------------------------------------------------------------------
# coloring
# ---------------------------------------------------------------------------

_SM_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM_M1 = np.uint64(0xBF58476D1CE4E5B9)
_SM_M2 = np.uint64(0x94D049BB133111EB)


def splitmix64(x):
    """Vectorized splitmix64 finalizer over uint64 arrays."""
    z = (np.asarray(x).astype(np.uint64) + _SM_GAMMA)
    z = (z ^ (z >> np.uint64(30))) * _SM_M1
    z = (z ^ (z >> np.uint64(27))) * _SM_M2
    return z ^ (z >> np.uint64(31))


def background_color(texture_seed, rows, cols):
    """(3, ...) background colors for (possibly out-of-grid) cell indices."""
    rows = np.asarray(rows, dtype=np.int64).astype(np.uint64)
    cols = np.asarray(cols, dtype=np.int64).astype(np.uint64)
    base = splitmix64(rows * np.uint64(0x9E3779B1) ^ splitmix64(cols))
    h = splitmix64(base ^ np.uint64(texture_seed))
    out = np.empty((3,) + h.shape, dtype=np.float64)
    for c in range(3):
        byte = ((h >> np.uint64(8 * c)) & np.uint64(0xFF)).astype(np.float64) / 255.0
        out[c] = 0.30 + 0.10 * byte
    return out


def render_overhead(scene: Scene, grid: BevGrid, channels: int = 3) -> np.ndarray:
    """Cell-quantized top view: background hash, road fill, class markings.

    Occluders never appear here. Values lie in [0, 1].
    """
    if channels != 3:
        raise SceneGenError("overhead renderer is 3-channel")
    rr, cc = np.meshgrid(np.arange(grid.rows), np.arange(grid.cols), indexing="ij")
    img = background_color(scene.texture_seed, rr, cc)
    centers = grid.cell_centers().reshape(-1, 2)
    road_mask = np.zeros(centers.shape[0], dtype=bool)
    for road in scene.roads:
        d = point_segment_distances(centers, _segments(road.centerline)).min(axis=1)
        road_mask |= d <= road.half_width
    img.reshape(3, -1)[:, road_mask] = np.array(ROAD_COLOR)[:, None]
    # markings paint over the road; boundary > divider > crossing priority
    for class_id in (0, 1, 2):
        color = np.array(CLASS_COLORS[class_id])
        canvas = np.zeros((grid.rows, grid.cols), dtype=np.int64)
        for cid, _, pts in scene.ground_truth:
            if cid == class_id:
                rasterize_polyline(grid, pts, canvas)
        mask = canvas.astype(bool)
        img[:, mask] = color[:, None]
    return img


def _ray_box_hits(origin, dirs, box):
    """Slab test of rays against one occluder; returns (t_entry, hit mask)."""
    x0, x1, y0, y1, h = box
    lo = np.array([x0, y0, 0.0])
    hi = np.array([x1, y1, h])
    t_near = np.full(dirs.shape[:-1], -np.inf)
    t_far = np.full(dirs.shape[:-1], np.inf)
    for ax in range(3):
        d = dirs[..., ax]
        o = origin[ax]
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (lo[ax] - o) / d
            tb = (hi[ax] - o) / d
        axial = d == 0.0
        inside = (o >= lo[ax]) & (o <= hi[ax])
        a_lo = np.where(axial, np.where(inside, -np.inf, np.inf), np.minimum(ta, tb))
        a_hi = np.where(axial, np.where(inside, np.inf, -np.inf), np.maximum(ta, tb))
        t_near = np.maximum(t_near, a_lo)
        t_far = np.minimum(t_far, a_hi)
    hit = (t_near <= t_far) & (t_far > 1e-9)
    entry = np.maximum(t_near, 0.0)
    return np.where(hit, entry, np.inf), hit


def occluder_color(texture_seed, index):
    # mix in python ints to avoid numpy scalar overflow warnings
    key = (int(texture_seed) ^ (int(index) * 0xD1B54A32D192ED03)) % (1 << 64)
    h = int(splitmix64(np.array([key], dtype=np.uint64))[0])
    u = float(h & 0xFFFF) / 65535.0
    return np.array([0.50 + 0.15 * u, 0.33 + 0.10 * u, 0.24 + 0.08 * u])


def render_cameras(scene: Scene, rig, grid: BevGrid, overhead=None):
    """Perspective views of the quantized ground, with occluder shadowing.

    Where a camera ray reaches unoccluded ground inside the grid, the pixel
    is bitwise equal to that cell's overhead color.
    """
    if overhead is None:
        overhead = render_overhead(scene, grid, 3)
    images = []
    for cam in rig:
        dirs = cam.pixel_dirs()
        dz = dirs[..., 2]
        ground = dz < -1e-12
        t_ground = np.where(ground, -cam.position[2] / np.where(ground, dz, -1.0), np.inf)
        # nearest occluder along each ray
        t_occ = np.full(t_ground.shape, np.inf)
        occ_id = np.full(t_ground.shape, -1, dtype=np.int64)
        for bi, box in enumerate(scene.occluders):
            entry, hit = _ray_box_hits(cam.position, dirs, box)
            closer = hit & (entry < t_occ)
            t_occ = np.where(closer, entry, t_occ)
            occ_id = np.where(closer, bi, occ_id)
        img = np.empty((3,) + t_ground.shape, dtype=np.float64)
        img[:] = np.array(SKY_COLOR)[:, None, None]
        ground_vis = ground & (t_ground <= t_occ)
        t_safe = np.where(ground_vis, t_ground, 0.0)
        px = cam.position[0] + t_safe * dirs[..., 0]
        py = cam.position[1] + t_safe * dirs[..., 1]
        cols = np.floor((px - grid.x_min) / grid.cell_x).astype(np.int64)
        rows = np.floor((grid.y_max - py) / grid.cell_y).astype(np.int64)
        in_grid = ground_vis & (rows >= 0) & (rows < grid.rows) & (cols >= 0) & (cols < grid.cols)
        out_grid = ground_vis & ~in_grid
        rr = np.clip(rows, 0, grid.rows - 1)
        cc = np.clip(cols, 0, grid.cols - 1)
        grid_colors = overhead[:, rr, cc]
        img = np.where(in_grid[None], grid_colors, img)
        if np.any(out_grid):
            bg = background_color(scene.texture_seed, rows, cols)
            img = np.where(out_grid[None], bg, img)
        occluded = t_occ < np.where(ground, t_ground, np.inf)
        for bi in range(len(scene.occluders)):
            mask = occluded & (occ_id == bi)
            if np.any(mask):
                img = np.where(mask[None], occluder_color(scene.texture_seed, bi)[:, None, None], img)
        images.append(img)
    return images


def cell_visibility(scene: Scene, rig, grid: BevGrid) -> np.ndarray:
    """(n_cams, rows, cols) bools: cell center projects into the camera and
    the sight line to it clears every occluder."""
    centers = grid.cell_centers().reshape(-1, 2)
    pts3 = np.concatenate([centers, np.zeros((len(centers), 1))], axis=1)
    vis = np.zeros((len(rig), grid.rows, grid.cols), dtype=bool)
    for k, cam in enumerate(rig):
        _, _, valid = cam.project(pts3)
        seg = pts3 - cam.position
        blocked = np.zeros(len(pts3), dtype=bool)
        for box in scene.occluders:
            entry, hit = _ray_box_hits(cam.position, seg, box)
            blocked |= hit & (entry < 1.0)
        vis[k] = (valid & ~blocked).reshape(grid.rows, grid.cols)
    return vis


# ---------------------------------------------------------------------------
# dataset export / load
# ---------------------------------------------------------------------------

def export_dataset(path, n_train=256, n_val=64, base_params=None, rig=None,
                   grid=None, channels=3):
    """Generate, render and write a dataset directory; returns manifest rows.

    Train and validation draw disjoint seed ranges AND disjoint curvature
    bands (validation roads curve more), so validation layouts form a
    family never seen in training.
    """
    import os

    if rig is None:
        rig = default_rig()
    if grid is None:
        grid = extended_grid()
    os.makedirs(path, exist_ok=True)
    rows = []
    for idx in range(n_train + n_val):
        split = "train" if idx < n_train else "val"
        seed = idx
        band = (0.0, 0.75) if split == "train" else (0.78, 1.0)
        params = _params_with(base_params, seed, band)
        scene = generate_scene(params)
        sid = f"scene_{idx:04d}"
        sdir = os.path.join(path, sid)
        os.makedirs(sdir, exist_ok=True)
        overhead = render_overhead(scene, grid, channels)
        write_ten(os.path.join(sdir, "overhead.ten"), overhead)
        for k, img in enumerate(render_cameras(scene, rig, grid, overhead)):
            write_ten(os.path.join(sdir, f"cam_{k}.ten"), img)
        write_polylines(os.path.join(sdir, "gt.txt"), scene.ground_truth)
        with open(os.path.join(sdir, "meta.txt"), "w") as f:
            f.write(scene.serialize())
        rows.append((sid, split, seed))
    with open(os.path.join(path, "manifest.txt"), "w") as f:
        for sid, split, seed in rows:
            f.write(f"{sid} {split} {seed}\n")
    return rows


def _params_with(base: SceneParams, seed, band):
    if base is None:
        return SceneParams(seed, curvature_band=band)
    return SceneParams(seed, road_count=base.road_count, lane_count=base.lane_count,
                       curvature=base.curvature, curvature_band=band,
                       crossing_probability=base.crossing_probability,
                       occluder_count=base.occluder_count,
                       occluder_size=base.occluder_size)


class Sample:
    """One loaded scene: tensors, gt elements, and the scene description."""

    def __init__(self, scene_id, split, seed, overhead, cams, gt, scene):
        self.scene_id = scene_id
        self.split = split
        self.seed = seed
        self.overhead = overhead
        self.cams = cams
        self.gt = gt
        self.scene = scene


def read_manifest(path):
    import os
    rows = []
    with open(os.path.join(path, "manifest.txt")) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise SceneGenError(f"manifest line malformed: {line!r}")
            rows.append((parts[0], parts[1], int(parts[2])))
    return rows


def load_dataset(path, split=None):
    """Yields Sample objects in manifest order; errors name the scene id."""
    import os

    for sid, sp, seed in read_manifest(path):
        if split is not None and sp != split:
            continue
        sdir = os.path.join(path, sid)
        try:
            overhead = read_ten(os.path.join(sdir, "overhead.ten"))
            cams = []
            k = 0
            while os.path.exists(os.path.join(sdir, f"cam_{k}.ten")):
                cams.append(read_ten(os.path.join(sdir, f"cam_{k}.ten")))
                k += 1
            if not cams:
                raise SceneGenError("no camera tensors found")
            gt = read_polylines(os.path.join(sdir, "gt.txt"))
            with open(os.path.join(sdir, "meta.txt")) as f:
                scene = Scene.deserialize(f.read())
        except Exception as e:
            raise SceneGenError(f"{sid}: {e}") from e
        yield Sample(sid, sp, seed, overhead, cams, gt, scene)
