"""Plain-text run configuration.

One flat `key value` file drives every experiment. Parsing is typed off
the defaults table, dumps always write the full table (so a run directory
records exactly what it ran with, defaults included), and sub-object
constructors hand the typed fields to scenegen/geometry/supervision.
"""

import hashlib
import math

from .geometry import BevGrid, Camera
from .scenegen import SceneParams
from .supervision import VARIANTS, SupervisionConfig


class ConfigError(RuntimeError):
    pass


# (name, default) pairs; the default's python type pins the parser.
# Tuples parse as fixed-arity space-separated lists.
DEFAULTS = (
    # corpus
    ("n_train", 256),
    ("n_val", 64),
    ("road_count", (1, 2)),
    ("lane_count", (2, 4)),
    ("curvature", 0.025),
    ("crossing_probability", 0.9),
    ("occluder_count", (2, 5)),
    ("occluder_size", (1.0, 3.0)),
    # rig
    ("cameras", 4),
    ("cam_height", 1.6),
    ("cam_pitch", 0.12),
    ("cam_focal", 48.0),
    ("image_width", 96),
    ("image_height", 64),
    # BEV grid the models run on (evaluation always scores both RoIs)
    ("roi", "extended"),
    ("grid_rows", 24),
    ("grid_cols", 48),
    # encoder sizes
    ("c_feat", 16),
    ("teacher_widths", (12, 16, 24)),
    ("teacher_feature_layer", "final"),
    ("student_width", 12),
    ("downsample", 2),
    ("n_queries", 12),
    ("n_points", 8),
    ("decoder_hidden", 8),
    # supervision
    ("variant", "norm_adapter"),
    ("lambda_bev", 1.0),
    # optimization
    ("steps", 2000),
    ("batch", 4),
    ("base_lr", 4e-3),
    ("min_lr", 1e-5),
    ("weight_decay", 1e-4),
    ("reg_weight", 0.05),
    ("teacher_steps", 2500),
    ("teacher_seed", 0),
    # study layout
    ("seed", 1),
    ("seeds", (1, 2, 3)),
    ("lambda_factors", (0.0, 0.25, 0.5, 1.0, 2.0, 4.0)),
)

_DEFAULTS = dict(DEFAULTS)

# fields that feed the frozen teacher; anything else may change without
# invalidating a cached teacher checkpoint
TEACHER_FIELDS = ("n_train", "n_val", "road_count", "lane_count", "curvature",
                  "crossing_probability", "occluder_count", "occluder_size",
                  "roi", "grid_rows", "grid_cols", "c_feat", "teacher_widths",
                  "teacher_feature_layer", "n_queries", "n_points",
                  "decoder_hidden", "batch", "base_lr", "min_lr",
                  "weight_decay", "reg_weight", "teacher_steps", "teacher_seed")

DATASET_FIELDS = ("n_train", "n_val", "road_count", "lane_count", "curvature",
                  "crossing_probability", "occluder_count", "occluder_size",
                  "cameras", "cam_height", "cam_pitch", "cam_focal",
                  "image_width", "image_height", "roi", "grid_rows",
                  "grid_cols")


# tuple keys where the element count is part of the meaning (ranges and
# fixed pipeline depths); everything else (seeds, lambda_factors) is a list
_FIXED_ARITY = ("road_count", "lane_count", "occluder_count", "occluder_size",
                "teacher_widths")


def _parse_one(name, default, text):
    if isinstance(default, tuple):
        parts = text.split()
        if not parts:
            raise ConfigError(f"{name}: expected at least one value")
        if name in _FIXED_ARITY and len(parts) != len(default):
            raise ConfigError(f"{name}: expected {len(default)} values, "
                              f"got {len(parts)}")
        kind = type(default[0])
        return tuple(kind(p) for p in parts)
    if isinstance(default, bool):
        if text not in ("0", "1"):
            raise ConfigError(f"{name}: expected 0 or 1, got {text!r}")
        return text == "1"
    return type(default)(text)


def _format_one(value):
    if isinstance(value, tuple):
        return " ".join(repr(v) if isinstance(v, float) else str(v)
                        for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Typed view over the key-value table; unknown keys are errors."""

    def __init__(self, overrides=None):
        for name, default in DEFAULTS:
            setattr(self, name, default)
        for name, value in (overrides or {}).items():
            if name not in _DEFAULTS:
                raise ConfigError(f"unknown config key {name!r}")
            setattr(self, name, value)
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.roi not in ("standard", "extended"):
            raise ConfigError(f"unknown roi {self.roi!r}")
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigError("corpus splits must be non-empty")
        if self.steps < 1 or self.teacher_steps < 1 or self.batch < 1:
            raise ConfigError("step and batch counts must be positive")
        if self.lambda_bev < 0:
            raise ConfigError("lambda_bev must be nonnegative")
        if min(self.lambda_factors) < 0:
            raise ConfigError("lambda_factors must be nonnegative")
        if self.image_width % self.downsample or self.image_height % self.downsample:
            raise ConfigError("image size must divide by the downsample")

    # -- file round trip ----------------------------------------------------

    def dump(self) -> str:
        lines = [f"{name} {_format_one(getattr(self, name))}"
                 for name, _ in DEFAULTS]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text):
        overrides = {}
        for ln, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            name, _, rest = line.partition(" ")
            if name not in _DEFAULTS:
                raise ConfigError(f"line {ln}: unknown config key {name!r}")
            if name in overrides:
                raise ConfigError(f"line {ln}: duplicate key {name!r}")
            overrides[name] = _parse_one(name, _DEFAULTS[name], rest.strip())
        return cls(overrides)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.parse(f.read())

    def with_overrides(self, **kw):
        """New config with the given fields replaced."""
        values = {name: getattr(self, name) for name, _ in DEFAULTS}
        values.update(kw)
        return RunConfig(values)

    # -- derived objects ----------------------------------------------------

    def scene_params(self, seed=0) -> SceneParams:
        return SceneParams(seed, road_count=self.road_count,
                           lane_count=self.lane_count,
                           curvature=self.curvature,
                           crossing_probability=self.crossing_probability,
                           occluder_count=self.occluder_count,
                           occluder_size=self.occluder_size)

    def rig(self):
        return [Camera((0.0, 0.0, self.cam_height), k * 2.0 * math.pi / self.cameras,
                       self.cam_pitch, self.cam_focal, self.image_width,
                       self.image_height)
                for k in range(self.cameras)]

    def grid(self) -> BevGrid:
        if self.roi == "standard":
            return BevGrid(-30.0, 30.0, -15.0, 15.0, self.grid_rows, self.grid_cols)
        return BevGrid(-50.0, 50.0, -25.0, 25.0, self.grid_rows, self.grid_cols)

    def supervision(self, variant=None, lambda_bev=None) -> SupervisionConfig:
        return SupervisionConfig(variant or self.variant,
                                 self.lambda_bev if lambda_bev is None else lambda_bev)

    # -- cache keys ----------------------------------------------------------

    def _digest(self, fields) -> str:
        h = hashlib.sha256()
        for name in fields:
            h.update(f"{name} {_format_one(getattr(self, name))}\n".encode())
        return h.hexdigest()[:16]

    def config_hash(self) -> str:
        return self._digest([name for name, _ in DEFAULTS])

    def teacher_hash(self) -> str:
        return self._digest(TEACHER_FIELDS)

    def dataset_hash(self) -> str:
        return self._digest(DATASET_FIELDS)
