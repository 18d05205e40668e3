import numpy as np
import pytest

from bevlab.config import DEFAULTS, ConfigError, RunConfig
from bevlab.geometry import BevGrid
from bevlab.scenegen import SceneParams


def test_defaults_round_trip_through_dump_and_parse():
    cfg = RunConfig()
    again = RunConfig.parse(cfg.dump())
    for name, _ in DEFAULTS:
        assert getattr(again, name) == getattr(cfg, name), name
    assert again.config_hash() == cfg.config_hash()


def test_parse_overrides_types_and_comments():
    text = "steps 12\nlambda_bev 0.5  # tuned down\n\nseeds 4 5 6\n"
    cfg = RunConfig.parse(text)
    assert cfg.steps == 12 and isinstance(cfg.steps, int)
    assert cfg.lambda_bev == 0.5
    assert cfg.seeds == (4, 5, 6)


def test_parse_rejects_unknown_duplicate_and_malformed_keys():
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.parse("not_a_key 3\n")
    with pytest.raises(ConfigError, match="duplicate"):
        RunConfig.parse("steps 5\nsteps 6\n")
    with pytest.raises(ConfigError, match="expected 3 values"):
        RunConfig.parse("seeds 1 2\n")


def test_validation_rejects_bad_fields():
    for overrides in ({"variant": "nope"}, {"roi": "huge"},
                      {"n_train": 0}, {"steps": 0}, {"lambda_bev": -1.0},
                      {"image_width": 97}):
        with pytest.raises(ConfigError):
            RunConfig(overrides)


def test_with_overrides_keeps_original_untouched():
    cfg = RunConfig()
    other = cfg.with_overrides(variant="raw", seed=7)
    assert other.variant == "raw" and other.seed == 7
    assert cfg.variant == "norm_adapter" and cfg.seed == 1
    assert other.config_hash() != cfg.config_hash()


def test_hashes_scope_their_fields():
    cfg = RunConfig()
    lam = cfg.with_overrides(lambda_bev=0.25)
    # supervision weight touches neither the dataset nor the teacher
    assert lam.dataset_hash() == cfg.dataset_hash()
    assert lam.teacher_hash() == cfg.teacher_hash()
    assert lam.config_hash() != cfg.config_hash()
    deeper = cfg.with_overrides(teacher_steps=50)
    assert deeper.teacher_hash() != cfg.teacher_hash()
    assert deeper.dataset_hash() == cfg.dataset_hash()
    wider = cfg.with_overrides(image_width=48)
    assert wider.dataset_hash() != cfg.dataset_hash()


def test_derived_objects_match_fields():
    cfg = RunConfig({"roi": "standard", "cameras": 3, "cam_focal": 40.0})
    grid = cfg.grid()
    assert isinstance(grid, BevGrid)
    assert (grid.x_min, grid.x_max, grid.y_min, grid.y_max) == (-30.0, 30.0, -15.0, 15.0)
    rig = cfg.rig()
    assert len(rig) == 3
    yaws = sorted(cam.yaw for cam in rig)
    assert np.allclose(np.diff(yaws), 2.0 * np.pi / 3)
    params = cfg.scene_params(seed=5)
    assert isinstance(params, SceneParams)
    assert params.seed == 5
    sup = cfg.supervision("raw", 0.5)
    assert sup.variant == "raw" and sup.lambda_bev == 0.5
    # baseline gates the weight off no matter what the config says
    assert cfg.supervision("baseline").lambda_bev == 0.0
