"""Reward components and their per-stage composition.

Stage 1 sums format, soft-overlong and accuracy; stage 3 adds the hybrid
thinking penalty and the gated thinking-quality score on top.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from hybridrl.errors import ConfigError
from hybridrl.scorer import ThinkingScore
from hybridrl.template import ChatMode, Compliance, ParsedResponse, mode_compliance


class StageId(str, enum.Enum):
    STAGE1 = "stage1"
    STAGE2 = "stage2"
    STAGE3 = "stage3"

    @classmethod
    def parse(cls, value) -> StageId:
        if isinstance(value, cls):
            return value
        text = str(value).lower().replace("-", "").replace("_", "")
        if text in {"1", "2", "3"}:
            text = "stage" + text
        try:
            return cls(text)
        except ValueError:
            raise ConfigError(f"unknown stage {value!r}") from None


@dataclass(frozen=True)
class LengthPenaltyConfig:
    L_max: int = 48
    L_cache: int = 16

    def __post_init__(self):
        if not 0 < self.L_cache < self.L_max:
            raise ConfigError(f"need 0 < L_cache < L_max, got L_cache={self.L_cache}, L_max={self.L_max}")


@dataclass(frozen=True)
class RewardBreakdown:
    fmt: float
    overlong: float
    acc: float
    hybrid: float = 0.0
    think: float = 0.0
    total: float = 0.0


def format_reward(resp: ParsedResponse) -> float:
    return 0.0 if resp.well_formed else -1.0


def soft_overlong(L_gen: int, cfg: LengthPenaltyConfig) -> float:
    if not isinstance(cfg, LengthPenaltyConfig):
        raise ConfigError("soft_overlong needs a LengthPenaltyConfig")
    if L_gen < 0:
        raise ConfigError("generated length must be non-negative")
    onset = cfg.L_max - cfg.L_cache
    if L_gen <= onset:
        return 0.0
    if L_gen <= cfg.L_max:
        return (onset - L_gen) / cfg.L_cache
    return -1.0


def accuracy_reward(pred: str | None, gold: str) -> float:
    return 1.0 if pred is not None and pred == gold else 0.0


def hybrid_reward(resp: ParsedResponse, mode: ChatMode) -> float:
    # malformed text is already charged by format_reward
    verdict = mode_compliance(resp, mode)
    if verdict in (Compliance.SKIPPED_THINKING, Compliance.UNEXPECTED_THINKING):
        return -1.0
    return 0.0


def thinking_reward(mode: ChatMode, acc: float, score: ThinkingScore) -> float:
    if mode is ChatMode.NON_THINKING:
        return 0.0
    return min(acc, score.value)


def compose_stage_reward(stage: StageId, parts: RewardBreakdown) -> float:
    stage = StageId.parse(stage)
    base = parts.fmt + parts.overlong + parts.acc
    if stage is StageId.STAGE1:
        return base
    if stage is StageId.STAGE3:
        return base + parts.hybrid + parts.think
    raise ConfigError(f"{stage.value} is not an RL stage")


def reward_breakdown(
    stage: StageId,
    resp: ParsedResponse,
    mode: ChatMode,
    pred: str | None,
    gold: str,
    length: int,
    len_cfg: LengthPenaltyConfig,
    score: ThinkingScore | None = None,
) -> RewardBreakdown:
    """All components for one response, with ``total`` composed for ``stage``."""
    stage = StageId.parse(stage)
    fmt = format_reward(resp)
    overlong = soft_overlong(length, len_cfg)
    acc = accuracy_reward(pred, gold)
    hybrid = think = 0.0
    if stage is StageId.STAGE3:
        hybrid = hybrid_reward(resp, mode)
        think = thinking_reward(mode, acc, score) if score is not None else 0.0
    parts = RewardBreakdown(fmt, overlong, acc, hybrid, think)
    return RewardBreakdown(fmt, overlong, acc, hybrid, think, compose_stage_reward(stage, parts))
