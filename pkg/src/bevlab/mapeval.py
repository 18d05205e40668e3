"""Instance-level map evaluation: chamfer-thresholded AP over two RoIs.

Map elements are (class_id, score, points) triples. Matching is greedy in
score order: each prediction claims the nearest still-unmatched ground
truth of its class within the chamfer threshold (one-to-one). Precision /
recall integrate exactly (all-point), with predictions pooled across the
whole evaluation split. Degenerate conventions, applied per (class,
threshold) cell: no gts and no preds gives AP 1; gts but no true positive
gives 0; preds against an empty gt set give 0.
"""

from __future__ import annotations

import numpy as np

from .geometry import CLASS_NAMES, N_CLASSES, BevGrid, chamfer_distance, standard_grid, extended_grid


class EvalError(ValueError):
    pass


STANDARD_THRESHOLDS = (0.5, 1.0, 1.5)
EXTENDED_THRESHOLDS = (1.0, 1.5, 2.0)

MIN_FRAGMENT_LEN = 0.5  # meters; clipped slivers below this are dropped


class EvalConfig:
    """RoI name, its grid rectangle, and the matching thresholds."""

    def __init__(self, roi: str, thresholds=None, grid: BevGrid = None):
        if roi not in ("standard", "extended"):
            raise EvalError(f"unknown roi {roi!r}")
        self.roi = roi
        if grid is None:
            grid = standard_grid() if roi == "standard" else extended_grid()
        self.grid = grid
        if thresholds is None:
            thresholds = STANDARD_THRESHOLDS if roi == "standard" else EXTENDED_THRESHOLDS
        thresholds = tuple(float(t) for t in thresholds)
        if not all(t > 0 for t in thresholds) or list(thresholds) != sorted(set(thresholds)):
            raise EvalError("thresholds must be positive and strictly increasing")
        self.thresholds = thresholds


class EvalResult:
    """AP per (class, threshold), per-class threshold means, and mAP."""

    def __init__(self, ap_cells: dict, thresholds):
        self.ap = dict(ap_cells)  # (class_id, threshold) -> ap
        self.thresholds = tuple(thresholds)
        self.class_ap = {}
        for c in range(N_CLASSES):
            vals = [self.ap[(c, t)] for t in self.thresholds]
            self.class_ap[c] = float(np.mean(vals))
        self.map = float(np.mean([self.class_ap[c] for c in range(N_CLASSES)]))


# ---------------------------------------------------------------------------
# clipping
# ---------------------------------------------------------------------------

def _clip_segment(p, q, grid: BevGrid):
    """Liang-Barsky: returns (t0, t1) of the inside portion, or None."""
    d = q - p
    t0, t1 = 0.0, 1.0
    for delta, low, high in ((d[0], grid.x_min - p[0], grid.x_max - p[0]),
                             (d[1], grid.y_min - p[1], grid.y_max - p[1])):
        if delta == 0.0:
            if low > 0.0 or high < 0.0:
                return None
            continue
        ta, tb = low / delta, high / delta
        if ta > tb:
            ta, tb = tb, ta
        t0, t1 = max(t0, ta), min(t1, tb)
        if t0 > t1:
            return None
    return t0, t1


def clip_to_roi(elements, grid: BevGrid):
    """Clip each element's polyline to the RoI rectangle.

    Boundary crossings split a polyline into separate fragments; fragments
    shorter than MIN_FRAGMENT_LEN are dropped. Returns new elements.
    """
    out = []
    for class_id, score, pts in elements:
        pts = np.asarray(pts, dtype=np.float64)
        fragments = []
        current = []
        for i in range(len(pts) - 1):
            p, q = pts[i], pts[i + 1]
            hit = _clip_segment(p, q, grid)
            if hit is None:
                if len(current) >= 2:
                    fragments.append(np.array(current))
                current = []
                continue
            t0, t1 = hit
            a = p if t0 == 0.0 else p + t0 * (q - p)
            b = q if t1 == 1.0 else p + t1 * (q - p)
            if current and np.allclose(current[-1], a, atol=1e-12):
                current.append(b)
            else:
                if len(current) >= 2:
                    fragments.append(np.array(current))
                current = [a, b]
            if t1 < 1.0:  # exits the RoI: close the fragment here
                fragments.append(np.array(current))
                current = []
        if len(current) >= 2:
            fragments.append(np.array(current))
        for frag in fragments:
            length = float(np.sqrt((np.diff(frag, axis=0) ** 2).sum(axis=1)).sum())
            if length >= MIN_FRAGMENT_LEN:
                out.append((class_id, score, frag))
    return out


# ---------------------------------------------------------------------------
# matching and AP
# ---------------------------------------------------------------------------

def match_instances(preds, gts, threshold: float):
    """Greedy one-to-one matching; returns TP flags in original pred order.

    Predictions are visited by descending score (ties keep input order);
    each takes the nearest unmatched gt with chamfer <= threshold (distance
    ties resolve to the lowest gt index).
    """
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][1], i))
    taken = [False] * len(gts)
    flags = [False] * len(preds)
    for i in order:
        best_j, best_d = -1, np.inf
        for j, (_, _, gpts) in enumerate(gts):
            if taken[j]:
                continue
            d = chamfer_distance(preds[i][2], gpts)
            if d <= threshold and d < best_d:
                best_j, best_d = j, d
        if best_j >= 0:
            taken[best_j] = True
            flags[i] = True
    return flags


def _integrate_ap(scores, flags, n_pos):
    """All-point PR integration over score-ranked (score, tp) pairs."""
    if n_pos == 0:
        return 1.0 if len(scores) == 0 else 0.0
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    tp = 0
    fp = 0
    ap = 0.0
    prev_recall = 0.0
    for i in order:
        if flags[i]:
            tp += 1
        else:
            fp += 1
        recall = tp / n_pos
        ap += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
    return ap


def average_precision(preds, gts, class_id: int, threshold: float):
    """AP of one class at one threshold over a single pooled collection."""
    p = [e for e in preds if e[0] == class_id]
    g = [e for e in gts if e[0] == class_id]
    flags = match_instances(p, g, threshold)
    return _integrate_ap([e[1] for e in p], flags, len(g))


def evaluate(preds_by_scene: dict, gts_by_scene: dict, cfg: EvalConfig) -> EvalResult:
    """Full protocol: clip both sides, match per scene, pool AP per cell."""
    if sorted(preds_by_scene) != sorted(gts_by_scene):
        raise EvalError("prediction and ground-truth scene ids differ")
    scene_ids = sorted(gts_by_scene)
    clipped_p = {s: clip_to_roi(preds_by_scene[s], cfg.grid) for s in scene_ids}
    clipped_g = {s: clip_to_roi(gts_by_scene[s], cfg.grid) for s in scene_ids}
    cells = {}
    for c in range(N_CLASSES):
        per_scene_p = {s: [e for e in clipped_p[s] if e[0] == c] for s in scene_ids}
        per_scene_g = {s: [e for e in clipped_g[s] if e[0] == c] for s in scene_ids}
        n_pos = sum(len(per_scene_g[s]) for s in scene_ids)
        for t in cfg.thresholds:
            scores = []
            flags = []
            for s in scene_ids:
                f = match_instances(per_scene_p[s], per_scene_g[s], t)
                scores.extend(e[1] for e in per_scene_p[s])
                flags.extend(f)
            cells[(c, t)] = _integrate_ap(scores, flags, n_pos)
    return EvalResult(cells, cfg.thresholds)


# ---------------------------------------------------------------------------
# eval result files
# ---------------------------------------------------------------------------

def write_eval_file(path, result: EvalResult) -> None:
    """Lines: `class threshold ap` per cell, `class ap_mean` per class,
    then `mAP value`."""
    with open(path, "w") as f:
        for c in range(N_CLASSES):
            for t in result.thresholds:
                f.write(f"{CLASS_NAMES[c]} {t:.1f} {result.ap[(c, t)]:.6f}\n")
        for c in range(N_CLASSES):
            f.write(f"{CLASS_NAMES[c]} {result.class_ap[c]:.6f}\n")
        f.write(f"mAP {result.map:.6f}\n")


def read_eval_file(path):
    """Returns (cells dict keyed (class_name, threshold), class_means, map)."""
    cells = {}
    class_means = {}
    map_value = None
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "mAP" and len(parts) == 2:
                map_value = float(parts[1])
            elif len(parts) == 3:
                cells[(parts[0], float(parts[1]))] = float(parts[2])
            elif len(parts) == 2:
                class_means[parts[0]] = float(parts[1])
            else:
                raise EvalError(f"{path}:{ln}: malformed eval line {line!r}")
    if map_value is None:
        raise EvalError(f"{path}: missing mAP line")
    return cells, class_means, map_value
