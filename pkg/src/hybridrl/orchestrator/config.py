"""Run configuration: typed dataclasses, a strict YAML loader and dotted overrides.

Every field of every stage is spelled out in the shipped default config, so
one file (plus the overrides recorded alongside it) reproduces a run.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from hybridrl.dapo import ClipConfig
from hybridrl.errors import ConfigError
from hybridrl.rewards import LengthPenaltyConfig, StageId
from hybridrl.scorer import ScorerSettings
from hybridrl.template import TemplateConfig

log = logging.getLogger(__name__)

KEEP_RULES = ("correct_with_thought", "correct", "well_formed")


@dataclass(frozen=True)
class TaskConfig:
    seed: int = 20240601
    feature_dim: int = 8
    n_train: int = 512
    n_heldout: int = 128
    radius: float = 1.0

    def __post_init__(self):
        if self.n_train < 4 or self.n_heldout < 0:
            raise ConfigError("need n_train >= 4 and n_heldout >= 0")
        if self.feature_dim < 1 or not self.radius > 0:
            raise ConfigError("feature_dim must be positive and radius > 0")


@dataclass(frozen=True)
class PolicyConfig:
    seed: int = 7
    hidden: int = 32
    embed_dim: int = 8
    init_scale: float = 0.1
    max_len: int = 64

    def __post_init__(self):
        if min(self.hidden, self.embed_dim, self.max_len) < 1 or not self.init_scale > 0:
            raise ConfigError("policy dimensions, max_len and init_scale must be positive")


@dataclass(frozen=True)
class BasePriorConfig:
    """Format prior applied before Stage 1 (filler thoughts, letters independent of the input)."""

    steps: int = 300
    batch_size: int = 32
    lr: float = 1e-2
    min_thought: int = 2
    max_thought: int = 12
    seed: int = 5

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("base prior needs steps >= 0, batch_size >= 1, lr > 0")
        if not 1 <= self.min_thought <= self.max_thought:
            raise ConfigError("need 1 <= min_thought <= max_thought")


@dataclass(frozen=True)
class StageConfig:
    stage: StageId
    steps: int = 0
    batch_prompts: int = 16
    G: int = 8
    lr: float = 1e-3
    clip: ClipConfig = ClipConfig()
    len_cfg: LengthPenaltyConfig = LengthPenaltyConfig()
    mode_mix: float = 1.0
    scorer: ScorerSettings = ScorerSettings()
    seed: int = 0
    max_resamples: int = 3
    updates_per_batch: int = 1
    max_grad_norm: float | None = None
    # Stage 2 only
    epochs: int = 0
    batch_size: int = 64
    sft_pairs: int = 256
    keep_rule: str = "correct_with_thought"
    sample_budget: int = 16384

    def __post_init__(self):
        object.__setattr__(self, "stage", StageId.parse(self.stage))
        if self.stage is StageId.STAGE1 and self.mode_mix != 1.0:
            log.warning("stage1 always uses /think prompts; ignoring mode_mix=%s", self.mode_mix)
            object.__setattr__(self, "mode_mix", 1.0)
        if not 0.0 <= self.mode_mix <= 1.0:
            raise ConfigError(f"mode_mix must lie in [0, 1], got {self.mode_mix}")
        if self.steps < 0 or self.epochs < 0:
            raise ConfigError("steps and epochs must be non-negative")
        if self.G < 2 or self.batch_prompts < 1:
            raise ConfigError("need G >= 2 and batch_prompts >= 1")
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise ConfigError(f"lr must be a positive finite number, got {self.lr}")
        if self.max_resamples < 0 or self.updates_per_batch < 1:
            raise ConfigError("need max_resamples >= 0 and updates_per_batch >= 1")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise ConfigError("max_grad_norm must be positive when set")
        if self.batch_size < 1 or self.sft_pairs < 1 or self.sample_budget < 1:
            raise ConfigError("batch_size, sft_pairs and sample_budget must be positive")
        if self.keep_rule not in KEEP_RULES:
            raise ConfigError(f"keep_rule must be one of {KEEP_RULES}, got {self.keep_rule!r}")


# tuned toy defaults; the bundled default_config.yaml spells out the same values
DEFAULT_STAGES = {
    StageId.STAGE1: StageConfig(StageId.STAGE1, steps=500, lr=3e-3, seed=11),
    StageId.STAGE2: StageConfig(StageId.STAGE2, lr=1e-2, seed=12, epochs=100),
    StageId.STAGE3: StageConfig(StageId.STAGE3, steps=300, lr=1e-3, mode_mix=0.5, seed=13, updates_per_batch=4),
}


@dataclass(frozen=True)
class EvalConfig:
    seed: int = 99
    samples_per_prompt: int = 4

    def __post_init__(self):
        if self.samples_per_prompt < 1:
            raise ConfigError("samples_per_prompt must be at least 1")


@dataclass(frozen=True)
class RunConfig:
    run_id: str = "toy"
    task: TaskConfig = TaskConfig()
    policy: PolicyConfig = PolicyConfig()
    template: TemplateConfig = TemplateConfig()
    base_prior: BasePriorConfig = BasePriorConfig()
    stage1: StageConfig = field(default_factory=lambda: DEFAULT_STAGES[StageId.STAGE1])
    stage2: StageConfig = field(default_factory=lambda: DEFAULT_STAGES[StageId.STAGE2])
    stage3: StageConfig = field(default_factory=lambda: DEFAULT_STAGES[StageId.STAGE3])
    eval: EvalConfig = EvalConfig()

    def __post_init__(self):
        for name, want in (("stage1", StageId.STAGE1), ("stage2", StageId.STAGE2), ("stage3", StageId.STAGE3)):
            if getattr(self, name).stage is not want:
                raise ConfigError(f"section {name} declares stage {getattr(self, name).stage.value}")

    def stage(self, stage: StageId | str | int) -> StageConfig:
        return getattr(self, StageId.parse(stage).value)


# -- (de)serialization -------------------------------------------------------------


def to_dict(obj: Any) -> Any:
    """Plain-data view of a config tree (enums become their values)."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, StageId):
        return obj.value
    if isinstance(obj, tuple):
        return [to_dict(v) for v in obj]
    return obj


def _coerce(value: Any, current: Any, where: str) -> Any:
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, str):
            # YAML 1.1 reads "3e-3" (no dot) as a string
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, str) and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    return value


def _build(cls, data: Mapping[str, Any], default: Any, where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join((where + '.' if where else '') + k for k in unknown)}")
    kwargs = {}
    for name in names:
        current = getattr(default, name)
        path = f"{where}.{name}" if where else name
        if name not in data:
            kwargs[name] = current
            continue
        value = data[name]
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, current, path)
        elif isinstance(current, StageId):
            kwargs[name] = StageId.parse(value)
        elif current is None or name == "max_grad_norm":
            kwargs[name] = None if value is None else _coerce(value, 0.0, path)
        else:
            kwargs[name] = _coerce(value, current, path)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def from_dict(data: Mapping[str, Any]) -> RunConfig:
    return _build(RunConfig, data, RunConfig(), "")


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"override {text!r} has an empty key segment")
    return parts, yaml.safe_load(raw) if raw.strip() else ""


def apply_overrides(data: Mapping[str, Any], overrides: Sequence[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; keys must already exist in ``data``."""
    out = copy.deepcopy(dict(data))
    for text in overrides:
        parts, value = parse_override(text)
        node = out
        for i, part in enumerate(parts):
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config key {'.'.join(parts[: i + 1])!r} in override {text!r}")
            if i == len(parts) - 1:
                node[part] = value
            else:
                node = node[part]
    return out


def default_config_text() -> str:
    return (resources.files("hybridrl") / "assets" / "default_config.yaml").read_text(encoding="utf-8")


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Load a run config (the bundled default when ``path`` is None) and apply overrides.

    The file is first merged over the full default tree, so overrides may name
    any known key even when the file leaves it out.
    """
    base = to_dict(RunConfig())
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    else:
        text = default_config_text()
    try:
        loaded = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if not isinstance(loaded, dict):
        raise ConfigError("config root must be a mapping")
    # validate the file on its own first so unknown keys are reported against it
    from_dict(loaded)
    merged = _merge(base, loaded)
    return from_dict(apply_overrides(merged, overrides))


def _merge(base: dict, update: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)
