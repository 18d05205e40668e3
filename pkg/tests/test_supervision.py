"""Alignment loss variants, query matching, and the student training loop."""

import itertools

import numpy as np
import pytest

from bevlab import encoders as E
from bevlab import geometry as G
from bevlab import scenegen as S
from bevlab import supervision as SV
from bevlab import tensors as T

RNG = np.random.default_rng


def fmap_pair(seed, grid=None, requires_grad=False):
    grid = grid or G.standard_grid()
    rng = RNG(seed)
    s = T.parameter(rng.normal(size=(6, grid.rows, grid.cols)))
    t = rng.normal(size=(6, grid.rows, grid.cols))
    t = T.parameter(t) if requires_grad else T.tensor(t)
    return (E.FeatureMap(s, grid, "student"),
            E.FeatureMap(t, grid, "teacher"))


@pytest.fixture(scope="module")
def corpus():
    grid = G.standard_grid()
    rig = G.default_rig()
    samples = []
    for seed in (50, 51, 52):
        scene = S.generate_scene(S.SceneParams(seed))
        overhead = S.render_overhead(scene, grid)
        cams = S.render_cameras(scene, rig, grid, overhead)
        samples.append(S.Sample(f"s{seed}", "train", seed, overhead, cams,
                                scene.ground_truth, scene))
    return grid, rig, samples


def frozen_teacher(seed=0):
    teacher = E.TeacherEncoder(RNG(seed))
    teacher.freeze()
    return teacher


# ---------------------------------------------------------------------------
# config and adapter
# ---------------------------------------------------------------------------

def test_variant_flags():
    assert SV.VARIANTS == ("baseline", "raw", "norm_only", "norm_adapter")
    cfg = SV.SupervisionConfig("baseline", lambda_bev=3.0)
    assert cfg.lambda_bev == 0.0 and not cfg.normalize and not cfg.use_adapter
    cfg = SV.SupervisionConfig("raw", lambda_bev=2.0)
    assert cfg.lambda_bev == 2.0 and not cfg.normalize and not cfg.use_adapter
    cfg = SV.SupervisionConfig("norm_only")
    assert cfg.normalize and not cfg.use_adapter
    cfg = SV.SupervisionConfig("norm_adapter")
    assert cfg.normalize and cfg.use_adapter


def test_config_rejects_bad_inputs():
    with pytest.raises(SV.SupervisionError):
        SV.SupervisionConfig("normadapter")
    with pytest.raises(SV.SupervisionError):
        SV.SupervisionConfig("raw", lambda_bev=-0.1)


def test_adapter_identity_at_init_bitwise():
    rng = RNG(1)
    x = rng.normal(size=(5, 3, 4))
    adapter = SV.AffineAdapter(5)
    assert np.array_equal(adapter.apply(T.tensor(x)).data, x)
    assert all(p.requires_grad for p in adapter.params.values())


def test_adapter_applies_per_channel_affine():
    rng = RNG(2)
    x = rng.normal(size=(3, 2, 2))
    adapter = SV.AffineAdapter(3)
    adapter.params["gamma"].data[:] = [2.0, -1.0, 0.5]
    adapter.params["beta"].data[:] = [0.1, 0.0, -0.3]
    got = adapter.apply(T.tensor(x)).data
    want = x * np.array([2.0, -1.0, 0.5])[:, None, None] \
        + np.array([0.1, 0.0, -0.3])[:, None, None]
    assert np.allclose(got, want, atol=1e-15)


# ---------------------------------------------------------------------------
# alignment loss
# ---------------------------------------------------------------------------

def test_alignment_zero_for_identical_maps():
    grid = G.standard_grid()
    x = RNG(3).normal(size=(6, grid.rows, grid.cols))
    adapter = SV.AffineAdapter(6)
    for variant in ("raw", "norm_only", "norm_adapter"):
        cfg = SV.SupervisionConfig(variant)
        a = E.FeatureMap(T.parameter(x.copy()), grid, "student")
        b = E.FeatureMap(T.tensor(x.copy()), grid, "teacher")
        loss = SV.bev_alignment_loss(a, b, adapter, cfg)
        assert loss.item() == 0.0, variant


def test_alignment_raw_matches_hand_loop():
    f_cam, f_aer = fmap_pair(4)
    loss = SV.bev_alignment_loss(f_cam, f_aer, SV.AffineAdapter(6),
                                 SV.SupervisionConfig("raw"))
    diff = f_cam.tensor.data - f_aer.tensor.data
    want = float(np.sum(diff * diff) / diff.size)
    assert abs(loss.item() - want) < 1e-12


def test_alignment_adapter_at_init_equals_norm_only():
    f_cam, f_aer = fmap_pair(5)
    a = SV.bev_alignment_loss(f_cam, f_aer, SV.AffineAdapter(6),
                              SV.SupervisionConfig("norm_adapter"))
    b = SV.bev_alignment_loss(f_cam, f_aer, SV.AffineAdapter(6),
                              SV.SupervisionConfig("norm_only"))
    assert a.item() == b.item()


def test_alignment_gradient_reaches_student_only():
    f_cam, f_aer = fmap_pair(6)
    adapter = SV.AffineAdapter(6)
    loss = SV.bev_alignment_loss(f_cam, f_aer, adapter,
                                 SV.SupervisionConfig("norm_adapter"))
    T.backward(loss)
    assert f_cam.tensor.grad is not None
    assert np.abs(f_cam.tensor.grad).max() > 0
    assert f_aer.tensor.grad is None
    assert adapter.params["gamma"].grad is not None


def test_alignment_rejects_trainable_target():
    f_cam, f_aer = fmap_pair(7, requires_grad=True)
    with pytest.raises(SV.SupervisionError, match="frozen"):
        SV.bev_alignment_loss(f_cam, f_aer, SV.AffineAdapter(6),
                              SV.SupervisionConfig("raw"))


def test_alignment_rejects_shape_and_grid_mismatch():
    grid = G.standard_grid()
    adapter = SV.AffineAdapter(6)
    cfg = SV.SupervisionConfig("raw")
    a = E.FeatureMap(T.tensor(np.zeros((6, grid.rows, grid.cols))), grid, "s")
    b = E.FeatureMap(T.tensor(np.zeros((5, grid.rows, grid.cols))), grid, "t")
    with pytest.raises(SV.SupervisionError, match="shape"):
        SV.bev_alignment_loss(a, b, adapter, cfg)
    ext = G.extended_grid()
    c = E.FeatureMap(T.tensor(np.zeros((6, ext.rows, ext.cols))), ext, "t")
    with pytest.raises(SV.SupervisionError, match="grid"):
        SV.bev_alignment_loss(a, c, adapter, cfg)


# ---------------------------------------------------------------------------
# polyline resampling and matching
# ---------------------------------------------------------------------------

def test_polyline_points_straight_line_uniform():
    pts = np.array([[0.0, 0.0], [10.0, 0.0]])
    out = SV.polyline_points(pts, 5)
    assert np.allclose(out, np.stack([np.linspace(0, 10, 5), np.zeros(5)], axis=1))


def test_polyline_points_preserves_endpoints_and_arclength_spacing():
    rng = RNG(8)
    pts = np.cumsum(rng.normal(size=(7, 2)), axis=0)
    out = SV.polyline_points(pts, 9)
    assert np.allclose(out[0], pts[0]) and np.allclose(out[-1], pts[-1])
    # consecutive resampled points are equally spaced along the curve
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    total = seg.sum()
    d = np.linalg.norm(np.diff(out, axis=0), axis=1)
    assert d.max() <= total / 8.0 + 1e-9


def confident_logits(classes, n_q):
    z = np.full((n_q, G.N_CLASSES + 1), -5.0)
    for q in range(n_q):
        if q < len(classes):
            z[q, classes[q]] = 5.0
        else:
            z[q, G.N_CLASSES] = 5.0
    return z


def test_match_queries_exact_overlap_is_identity():
    rng = RNG(9)
    gts = [(0, 1.0, np.array([[0.0, 0.0], [4.0, 0.0]])),
           (1, 1.0, np.array([[1.0, 5.0], [9.0, 5.0]])),
           (2, 1.0, np.array([[-8.0, -2.0], [-8.0, 6.0]]))]
    pts = np.stack([SV.polyline_points(e[2], 4) for e in gts]
                   + [rng.normal(size=(4, 2)) + 40.0])
    logits = confident_logits([0, 1, 2], 4)
    targets, pairs = SV.match_queries(logits, pts, gts)
    assert list(targets) == [0, 1, 2, G.N_CLASSES]
    assert sorted(q for q, _ in pairs) == [0, 1, 2]
    for q, gt_pts in pairs:
        assert np.allclose(gt_pts, pts[q])


def test_match_queries_gt_reversal_changes_nothing():
    rng = RNG(10)
    pts = rng.normal(size=(5, 4, 2)) * 5.0
    logits = rng.normal(size=(5, G.N_CLASSES + 1))
    gts = [(1, 1.0, rng.normal(size=(6, 2)) * 5.0) for _ in range(3)]
    flipped = [(c, s, p[::-1].copy()) for c, s, p in gts]
    ta, pa = SV.match_queries(logits, pts, gts)
    tb, pb = SV.match_queries(logits, pts, flipped)
    assert np.array_equal(ta, tb)
    assert [q for q, _ in pa] == [q for q, _ in pb]


def match_cost_oracle(logits, pts, gts, penalty=5.0):
    """Cheapest total assignment cost by trying every permutation."""
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    n_q, n_k = pts.shape[0], pts.shape[1]
    best = np.inf
    for perm in itertools.permutations(range(n_q), len(gts)):
        total = 0.0
        for j, q in enumerate(perm):
            cid, _, raw = gts[j]
            g = SV.polyline_points(raw, n_k)
            d = min(np.mean(np.abs(pts[q] - g)), np.mean(np.abs(pts[q] - g[::-1])))
            total += d + penalty * (1.0 - p[q, cid])
        best = min(best, total)
    return best


def test_match_queries_cost_matches_exhaustive_oracle():
    rng = RNG(11)
    for trial in range(10):
        n_q = int(rng.integers(2, 5))
        n_gt = int(rng.integers(1, n_q + 1))
        pts = rng.normal(size=(n_q, 3, 2)) * 4.0
        logits = rng.normal(size=(n_q, G.N_CLASSES + 1))
        gts = [(int(rng.integers(0, G.N_CLASSES)), 1.0,
                rng.normal(size=(4, 2)) * 4.0) for _ in range(n_gt)]
        targets, pairs = SV.match_queries(logits, pts, gts)
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        got = 0.0
        matched = {q: g for q, g in pairs}
        for q, cid in enumerate(targets):
            if cid == G.N_CLASSES:
                continue
            g = matched[q]
            d = min(np.mean(np.abs(pts[q] - g)), np.mean(np.abs(pts[q] - g[::-1])))
            got += d + 5.0 * (1.0 - p[q, cid])
        assert abs(got - match_cost_oracle(logits, pts, gts)) < 1e-9, trial


def test_match_queries_empty_and_overfull():
    rng = RNG(12)
    pts = rng.normal(size=(3, 4, 2))
    logits = rng.normal(size=(3, G.N_CLASSES + 1))
    targets, pairs = SV.match_queries(logits, pts, [])
    assert list(targets) == [G.N_CLASSES] * 3 and pairs == []
    gts = [(0, 1.0, rng.normal(size=(3, 2))) for _ in range(4)]
    with pytest.raises(SV.SupervisionError, match="exceed"):
        SV.match_queries(logits, pts, gts)


# ---------------------------------------------------------------------------
# clipped targets and detection loss
# ---------------------------------------------------------------------------

def test_clipped_targets_stay_inside_grid(corpus):
    grid, _, samples = corpus
    out = SV.clipped_targets(samples, grid, 99)
    assert set(out) == {s.scene_id for s in samples}
    for elems in out.values():
        for _, _, pts in elems:
            pts = np.asarray(pts)
            assert pts[:, 0].min() >= grid.x_min - 1e-9
            assert pts[:, 0].max() <= grid.x_max + 1e-9
            assert abs(pts[:, 1]).max() <= grid.y_max + 1e-9


def test_clipped_targets_keep_longest_fragments(corpus):
    grid, _, samples = corpus
    def arclen(e):
        pts = np.asarray(e[2])
        return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))
    full = SV.clipped_targets(samples, grid, 99)
    for s in samples:
        n = len(full[s.scene_id])
        if n < 3:
            continue
        kept = SV.clipped_targets([s], grid, n - 1)[s.scene_id]
        assert len(kept) == n - 1
        dropped = min(arclen(e) for e in full[s.scene_id])
        assert all(arclen(e) >= dropped for e in kept)


def test_detection_loss_no_elements_is_pure_classification():
    rng = RNG(13)
    logits = T.parameter(rng.normal(size=(4, G.N_CLASSES + 1)))
    points = T.parameter(rng.normal(size=(4, 3, 2)))
    l_cls, l_reg = SV.detection_loss(logits, points, [])
    assert l_reg.item() == 0.0
    bg = np.full(4, G.N_CLASSES)
    want = T.focal_loss(T.tensor(logits.data), bg, 0.25, 2.0).item()
    assert abs(l_cls.item() - want) < 1e-12


def test_detection_loss_reg_scales_with_weight():
    rng = RNG(14)
    logits = T.parameter(rng.normal(size=(3, G.N_CLASSES + 1)))
    points = T.parameter(rng.normal(size=(3, 4, 2)))
    gts = [(0, 1.0, rng.normal(size=(5, 2))), (1, 1.0, rng.normal(size=(4, 2)))]
    _, r1 = SV.detection_loss(logits, points, gts, reg_weight=0.1)
    _, r2 = SV.detection_loss(logits, points, gts, reg_weight=0.4)
    assert abs(r2.item() - 4.0 * r1.item()) < 1e-12


# ---------------------------------------------------------------------------
# student training loop
# ---------------------------------------------------------------------------

def student_decoder_checksum(student, decoder):
    params = {"student." + k: v for k, v in student.params.items()}
    params.update(("decoder." + k, v) for k, v in decoder.params.items())
    return E.params_checksum(params)


def test_train_student_smoke_and_determinism(corpus, tmp_path):
    grid, rig, samples = corpus
    teacher = frozen_teacher()
    cfg = SV.SupervisionConfig("norm_adapter", lambda_bev=0.5)
    log = tmp_path / "steps.log"
    st1, dec1, ad1, bks = SV.train_student(samples, teacher, cfg, seed=5,
                                           grid=grid, rig=rig, steps=6,
                                           log_path=str(log),
                                           check_contracts=True)
    assert len(bks) == 6
    assert all(np.isfinite([b.l_cls, b.l_reg, b.l_bev, b.l_total]).all()
               for b in bks)
    lines = log.read_text().strip().splitlines()
    assert len(lines) == 6
    # logged floats round-trip and reconstruct the total
    step, lr, cls, reg, bev, total = lines[-1].split()
    assert float(total) == float(cls) + float(reg) + cfg.lambda_bev * float(bev)
    assert bks[-1].l_total == float(total)

    st2, dec2, _, _ = SV.train_student(samples, teacher, cfg, seed=5,
                                       grid=grid, rig=rig, steps=6)
    assert student_decoder_checksum(st1, dec1) == student_decoder_checksum(st2, dec2)
    st3, dec3, _, _ = SV.train_student(samples, teacher, cfg, seed=6,
                                       grid=grid, rig=rig, steps=6)
    assert student_decoder_checksum(st1, dec1) != student_decoder_checksum(st3, dec3)


def test_train_student_baseline_never_touches_teacher(corpus):
    grid, rig, samples = corpus
    teacher = frozen_teacher()
    # a poisoned teacher would blow up on any forward pass
    for p in teacher.params.values():
        p.data[:] = np.nan
    cfg = SV.SupervisionConfig("baseline")
    _, _, _, bks = SV.train_student(samples, teacher, cfg, seed=1, grid=grid,
                                    rig=rig, steps=3, check_contracts=True)
    assert all(b.l_bev == 0.0 for b in bks)
    assert all(np.isfinite(b.l_total) for b in bks)


def test_train_student_lambda_zero_walks_the_baseline_trajectory(corpus):
    grid, rig, samples = corpus
    teacher = frozen_teacher()
    base = SV.train_student(samples, teacher, SV.SupervisionConfig("baseline"),
                            seed=7, grid=grid, rig=rig, steps=5)
    gated = SV.train_student(samples, teacher,
                             SV.SupervisionConfig("norm_adapter", lambda_bev=0.0),
                             seed=7, grid=grid, rig=rig, steps=5)
    assert student_decoder_checksum(base[0], base[1]) == \
        student_decoder_checksum(gated[0], gated[1])
    for a, b in zip(base[3], gated[3]):
        assert a.l_cls == b.l_cls and a.l_reg == b.l_reg
        assert b.l_bev > 0.0 and a.l_bev == 0.0
        assert a.l_total == b.l_total


def test_train_student_teacher_stays_isolated(corpus):
    grid, rig, samples = corpus
    teacher = frozen_teacher()
    before = E.params_checksum(teacher.params)
    SV.train_student(samples, teacher, SV.SupervisionConfig("raw"), seed=2,
                     grid=grid, rig=rig, steps=4, check_contracts=True)
    assert E.params_checksum(teacher.params) == before
    assert all(p.grad is None for p in teacher.params.values())


def test_train_student_requires_frozen_teacher(corpus):
    grid, rig, samples = corpus
    teacher = E.TeacherEncoder(RNG(0))
    with pytest.raises(SV.SupervisionError, match="frozen"):
        SV.train_student(samples, teacher, SV.SupervisionConfig("raw"),
                         seed=0, grid=grid, rig=rig, steps=1)
    with pytest.raises(SV.SupervisionError, match="empty"):
        SV.train_student([], frozen_teacher(), SV.SupervisionConfig("raw"),
                         seed=0, grid=grid, rig=rig, steps=1)


@pytest.mark.filterwarnings("ignore:divide by zero", "ignore:invalid value",
                            "ignore:overflow")
def test_train_student_divergence_names_the_step(corpus):
    grid, rig, samples = corpus
    with pytest.raises(SV.SupervisionError, match="step"):
        SV.train_student(samples, frozen_teacher(),
                         SV.SupervisionConfig("norm_only"), seed=3, grid=grid,
                         rig=rig, steps=30, base_lr=1e8)
