"""Run configuration: a flat ``key = value`` file plus command-line overrides.

Precedence is command line > file > defaults.  Keys that carry a physical
unit say so in their name (``_px``, ``_deg``, ``_frac``).  Lines starting
with ``#`` are comments.  ``seed`` has no default and must come from the
file or the command line.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

from .detect import CHAR_MARGIN, PLATE_MARGIN
from .errors import ConfigError
from .pipeline import DEFAULT_THETA_GRID, PipelineConfig
from .scoring import DEFAULT_TRANSFORMS, TransformSpec, parse_transforms

_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    data_dir: Optional[str] = None
    models_dir: Optional[str] = None
    out_dir: Optional[str] = None
    predictions_dir: Optional[str] = None
    pairs_csv: Optional[str] = None
    # synthetic data
    n_images: int = 200
    layout_sampling: str = "mix"
    class_sampling: str = "uniform"
    noise_std_frac: float = 0.0
    rotation_max_deg: float = 0.0
    distractor_prob_frac: float = 0.3
    spurious_chars: int = 1
    detector_jitter_px: float = 0.5
    # pipeline
    margin_plate_frac: float = PLATE_MARGIN
    margin_char_frac: float = CHAR_MARGIN
    theta_plate: float = 0.1
    theta_char: float = 0.1
    theta_grid: Tuple[float, ...] = DEFAULT_THETA_GRID
    score_mode: str = "standardized"
    transforms: Tuple[TransformSpec, ...] = DEFAULT_TRANSFORMS
    confusion_swap: bool = True
    iou_match_frac: float = 0.5
    # training
    flow_layers: int = 4
    flow_hidden: int = 32
    flow_steps: int = 4000
    batch_size: int = 64
    label_smoothing_eps: float = 0.1
    classifier_steps: int = 600
    box_jitter_px: float = 1.0
    jitter_copies: int = 2
    feature_noise_std: float = 0.1
    scale_holdout_frac: float = 0.2
    # which manifest split each command reads ("all" for everything)
    train_split: str = "train"
    calibrate_split: str = "validation"
    run_split: str = "test"

    def __post_init__(self):
        if not 0.0 <= self.margin_plate_frac <= 1.0 or not 0.0 <= self.margin_char_frac <= 1.0:
            raise ConfigError("margins must lie in [0, 1]")
        if self.score_mode not in ("standardized", "raw"):
            raise ConfigError(f"score_mode must be 'standardized' or 'raw', got {self.score_mode!r}")
        if self.score_mode == "standardized":
            for name in ("theta_plate", "theta_char"):
                v = getattr(self, name)
                if not 0.0 < v <= 1.0:
                    raise ConfigError(f"{name} must lie in (0, 1] for standardized scores, got {v}")
            if any(not 0.0 < t <= 1.0 for t in self.theta_grid):
                raise ConfigError("theta_grid values must lie in (0, 1] for standardized scores")
        if not self.theta_grid:
            raise ConfigError("theta_grid is empty")
        for name in ("n_images", "spurious_chars", "flow_layers", "flow_hidden", "flow_steps", "batch_size",
                     "classifier_steps", "jitter_copies"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.flow_layers < 1 or self.flow_hidden < 1 or self.batch_size < 1:
            raise ConfigError("flow_layers, flow_hidden and batch_size must be positive")
        if not 0.0 <= self.label_smoothing_eps < 0.5:
            raise ConfigError("label_smoothing_eps must lie in [0, 0.5)")

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(
            margin_plate=self.margin_plate_frac, margin_char=self.margin_char_frac,
            theta_plate=self.theta_plate, theta_char=self.theta_char, score_mode=self.score_mode,
            transforms=self.transforms, flow_layers=self.flow_layers, flow_hidden=self.flow_hidden,
            flow_steps=self.flow_steps, batch_size=self.batch_size, epsilon=self.label_smoothing_eps,
            classifier_steps=self.classifier_steps, swap=self.confusion_swap, box_jitter=self.box_jitter_px,
            jitter_copies=self.jitter_copies, feature_noise=self.feature_noise_std,
            scale_holdout=self.scale_holdout_frac, seed=self.seed,
        )

    def require(self, *names: str, exist: bool = True) -> None:
        """Check that path keys are set and, optionally, exist."""
        for name in names:
            value = getattr(self, name)
            if value is None:
                raise ConfigError(f"{name} is not set")
            if exist and not Path(value).exists():
                raise ConfigError(f"{name} {value!r} does not exist")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            lines.append(f"{f.name} = {_format(v)}")
        return "\n".join(lines) + "\n"


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(t.name if isinstance(t, TransformSpec) else repr(t) for t in v)
    return str(v)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(key: str, text: str):
    f = _FIELDS[key]
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    text = text.strip()
    try:
        if key == "transforms":
            return parse_transforms(text)
        if key == "theta_grid":
            return tuple(float(t) for t in text.split(",") if t.strip())
        if "Optional[str]" in kind or kind == "str":
            return text
        if kind == "bool":
            if text.lower() not in _BOOL:
                raise ValueError(f"not a boolean: {text!r}")
            return _BOOL[text.lower()]
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc
    raise ConfigError(f"unsupported key type for {key}")


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def build_config(path: Optional[str] = None, overrides: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Merge defaults, the config file at ``path`` and string ``overrides``."""
    raw: Dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path!r} does not exist")
        raw.update(parse_config_text(p.read_text(), source=p.name))
    for k, v in (overrides or {}).items():
        if k not in _FIELDS:
            raise ConfigError(f"unknown key {k!r}")
        if v is not None:
            raw[k] = str(v)
    if "seed" not in raw:
        raise ConfigError("seed is mandatory (set it in the config file or pass --seed)")
    values = {k: _convert(k, v) for k, v in raw.items()}
    return RunConfig(**values)
