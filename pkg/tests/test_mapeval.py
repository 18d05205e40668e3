"""Clipping, greedy matching, AP integration, and the full eval protocol."""

import numpy as np
import pytest

import oracles
from bevlab import geometry as G
from bevlab import mapeval as ME


def line(x0, y0, x1, y1):
    return np.array([[x0, y0], [x1, y1]], dtype=np.float64)


# ---------------------------------------------------------------------------
# clip_to_roi
# ---------------------------------------------------------------------------

def test_clip_fully_inside_unchanged():
    grid = G.standard_grid()
    pts = np.array([[0.0, 0.0], [5.0, 2.0], [10.0, -3.0]])
    out = ME.clip_to_roi([(1, 0.9, pts)], grid)
    assert len(out) == 1
    cid, score, got = out[0]
    assert cid == 1 and score == 0.9
    assert np.array_equal(got, pts)


def test_clip_fully_outside_removed():
    grid = G.standard_grid()
    out = ME.clip_to_roi([(0, 1.0, line(40, 20, 50, 25))], grid)
    assert out == []


def test_clip_crossing_endpoint_on_edge():
    grid = G.standard_grid()
    out = ME.clip_to_roi([(0, 1.0, line(0, 0, 40, 0))], grid)
    assert len(out) == 1
    got = out[0][2]
    assert abs(got[-1][0] - grid.x_max) < 1e-9
    assert abs(got[-1][1] - 0.0) < 1e-9
    assert abs(got[0][0] - 0.0) < 1e-12  # untouched endpoint preserved


def test_clip_splits_into_fragments():
    grid = G.standard_grid()
    # enters, exits through the top, re-enters: y = 15 is the boundary
    pts = np.array([[-10.0, 10.0], [-5.0, 20.0], [0.0, 20.0], [5.0, 10.0]])
    out = ME.clip_to_roi([(2, 0.5, pts)], grid)
    assert len(out) == 2
    for _, _, frag in out:
        assert np.all(frag[:, 1] <= grid.y_max + 1e-9)


def test_clip_drops_short_fragments():
    grid = G.standard_grid()
    # only 0.2 m of this segment lies inside
    out = ME.clip_to_roi([(0, 1.0, line(29.8, 0, 35, 0))], grid)
    assert out == []


# ---------------------------------------------------------------------------
# match_instances
# ---------------------------------------------------------------------------

def test_match_exact_copies_all_tp():
    gts = [(0, 1.0, line(0, 0, 5, 0)), (0, 1.0, line(0, 5, 5, 5))]
    preds = [(0, 0.9, g[2].copy()) for g in gts]
    assert ME.match_instances(preds, gts, 0.5) == [True, True]


def test_match_far_displacement_all_fp():
    gts = [(0, 1.0, line(0, 0, 5, 0))]
    preds = [(0, 0.9, line(0, 3.0, 5, 3.0))]  # 3 m away, threshold 1.5
    assert ME.match_instances(preds, gts, 1.5) == [False]


def test_match_greedy_equals_exhaustive_on_constructed_case():
    # 3 preds, 2 gts; a unique optimal assignment that greedy also finds
    gts = [(0, 1.0, line(0, 0, 5, 0)), (0, 1.0, line(0, 4, 5, 4))]
    preds = [
        (0, 0.9, line(0, 0.2, 5, 0.2)),   # near gt0
        (0, 0.8, line(0, 4.3, 5, 4.3)),   # near gt1
        (0, 0.7, line(0, 0.4, 5, 0.4)),   # near gt0 only, arrives too late
    ]
    flags = ME.match_instances(preds, gts, 1.0)
    assert flags == [True, True, False]
    best = oracles.exhaustive_match_oracle(preds, gts, 1.0, G.chamfer_distance)
    assert sum(flags) == best


def test_match_prefers_nearest_gt():
    gts = [(0, 1.0, line(0, 1.0, 5, 1.0)), (0, 1.0, line(0, 0.2, 5, 0.2))]
    preds = [(0, 0.9, line(0, 0, 5, 0))]
    flags = ME.match_instances(preds, gts, 2.0)
    assert flags == [True]
    # the nearer gt (index 1) must be consumed: a second identical pred
    # can still match gt0
    preds2 = preds + [(0, 0.8, line(0, 0, 5, 0))]
    assert ME.match_instances(preds2, gts, 2.0) == [True, True]


# ---------------------------------------------------------------------------
# average precision
# ---------------------------------------------------------------------------

def test_ap_perfect_predictions():
    gts = [(1, 1.0, line(0, 0, 5, 0)), (1, 1.0, line(0, 5, 5, 5))]
    preds = [(1, 0.9, g[2].copy()) for g in gts]
    assert ME.average_precision(preds, gts, 1, 0.5) == 1.0


def test_ap_no_predictions():
    gts = [(0, 1.0, line(0, 0, 5, 0))]
    assert ME.average_precision([], gts, 0, 1.0) == 0.0


def test_ap_empty_vs_empty_is_one():
    assert ME.average_precision([], [], 2, 1.0) == 1.0


def test_ap_five_prediction_hand_table():
    # ranked TP,FP,TP,TP,FP with 4 positives: AP = (1 + 2/3 + 3/4)/4
    scores = [0.9, 0.8, 0.7, 0.6, 0.5]
    flags = [True, False, True, True, False]
    got = ME._integrate_ap(scores, flags, 4)
    want = 0.25 * (1.0 + 2.0 / 3.0 + 3.0 / 4.0)
    assert abs(got - want) < 1e-15
    assert abs(got - oracles.average_precision_oracle(scores, flags, 4)) < 1e-15


def test_ap_integration_matches_oracle_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 12))
        scores = rng.random(n).tolist()
        flags = (rng.random(n) < 0.5).tolist()
        n_pos = int(sum(flags) + rng.integers(0, 4))
        if n_pos == 0:
            continue
        got = ME._integrate_ap(scores, flags, n_pos)
        want = oracles.average_precision_oracle(scores, flags, n_pos)
        assert abs(got - want) < 1e-12


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def perfect_corpus():
    gts = {
        "a": [(0, 1.0, line(-10, 0, 10, 0)), (1, 1.0, line(-10, 5, 10, 5))],
        "b": [(2, 1.0, line(-10, -5, 10, -5))],
    }
    preds = {s: [(c, 0.9, p.copy()) for c, _, p in els] for s, els in gts.items()}
    return preds, gts


def test_evaluate_perfect_gives_map_one():
    preds, gts = perfect_corpus()
    cfg = ME.EvalConfig("standard")
    res = ME.evaluate(preds, gts, cfg)
    assert res.map == 1.0
    assert all(v == 1.0 for v in res.ap.values())


def test_evaluate_single_class_uses_empty_rule():
    gts = {"a": [(0, 1.0, line(-10, 0, 10, 0))]}
    preds = {"a": [(0, 0.9, line(-10, 0.1, 10, 0.1))]}
    res = ME.evaluate(preds, gts, ME.EvalConfig("standard"))
    assert res.class_ap[1] == 1.0 and res.class_ap[2] == 1.0
    assert res.class_ap[0] == 1.0  # 0.1 m offset within every threshold
    assert res.map == 1.0


def test_evaluate_scene_mismatch_raises():
    preds, gts = perfect_corpus()
    del preds["b"]
    with pytest.raises(ME.EvalError):
        ME.evaluate(preds, gts, ME.EvalConfig("standard"))


def test_evaluate_matches_reordered_loop_oracle():
    rng = np.random.default_rng(1)
    preds, gts = oracles.random_eval_corpus(rng, n_scenes=3)
    cfg = ME.EvalConfig("standard")
    res = ME.evaluate(preds, gts, cfg)
    scene_ids = sorted(gts)
    cp = {s: ME.clip_to_roi(preds[s], cfg.grid) for s in scene_ids}
    cg = {s: ME.clip_to_roi(gts[s], cfg.grid) for s in scene_ids}
    # opposite loop order: thresholds outer, classes inner, oracle integration
    for t in reversed(cfg.thresholds):
        for c in reversed(range(3)):
            scores, flags, n_pos = [], [], 0
            for s in scene_ids:
                p = [e for e in cp[s] if e[0] == c]
                g = [e for e in cg[s] if e[0] == c]
                n_pos += len(g)
                scores.extend(e[1] for e in p)
                flags.extend(ME.match_instances(p, g, t))
            if n_pos == 0:
                want = 1.0 if not scores else 0.0
            else:
                want = oracles.average_precision_oracle(scores, flags, n_pos)
            assert abs(res.ap[(c, t)] - want) < 1e-12


# ---------------------------------------------------------------------------
# protocol properties on random corpora
# ---------------------------------------------------------------------------

def test_threshold_monotonicity_random():
    rng = np.random.default_rng(2)
    for _ in range(20):
        preds, gts = oracles.random_eval_corpus(rng)
        cfg = ME.EvalConfig("standard")
        res = ME.evaluate(preds, gts, cfg)
        for c in range(3):
            aps = [res.ap[(c, t)] for t in cfg.thresholds]
            assert all(b >= a - 1e-12 for a, b in zip(aps, aps[1:]))


def test_score_scaling_invariance_random():
    rng = np.random.default_rng(3)
    for _ in range(10):
        preds, gts = oracles.random_eval_corpus(rng)
        scaled = {s: [(c, sc * 7.5, p) for c, sc, p in els] for s, els in preds.items()}
        cfg = ME.EvalConfig("extended")
        r1 = ME.evaluate(preds, gts, cfg)
        r2 = ME.evaluate(scaled, gts, cfg)
        assert r1.ap == r2.ap


def test_duplicate_penalty_random():
    rng = np.random.default_rng(4)
    for _ in range(10):
        preds, gts = oracles.random_eval_corpus(rng)
        doubled = {s: els + [(c, sc, p.copy()) for c, sc, p in els]
                   for s, els in preds.items()}
        cfg = ME.EvalConfig("standard")
        r1 = ME.evaluate(preds, gts, cfg)
        r2 = ME.evaluate(doubled, gts, cfg)
        for key in r1.ap:
            assert r2.ap[key] <= r1.ap[key] + 1e-12


# ---------------------------------------------------------------------------
# result files
# ---------------------------------------------------------------------------

def test_eval_file_round_trip(tmp_path):
    preds, gts = perfect_corpus()
    res = ME.evaluate(preds, gts, ME.EvalConfig("extended"))
    path = tmp_path / "eval_extended.txt"
    ME.write_eval_file(path, res)
    cells, means, map_value = ME.read_eval_file(path)
    assert map_value == 1.0
    assert cells[("ped_crossing", 1.0)] == 1.0
    assert means["boundary"] == 1.0
    text = path.read_text()
    assert text.splitlines()[-1].startswith("mAP ")
