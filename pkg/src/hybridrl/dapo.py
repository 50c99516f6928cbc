"""Group rollouts, dynamic sampling, group-normalized advantages and the
clipped token-level objective.

The objective for a batch of accepted groups is

    J = 1/sum_i |o_i| * sum_i sum_t min(r_it * A_i, clip(r_it, 1-eps_low, 1+eps_high) * A_i)

with ``r_it = pi_theta(o_it) / pi_old(o_it)`` and ``A_i`` the reward of
trajectory ``i`` standardized within its group. There is no KL term.
"""

from __future__ import annotations

import enum
import math
import zlib
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Sequence

import numpy as np

from hybridrl.errors import InvalidInputError, NumericFault
from hybridrl.policy import PolicyParams, Trajectory, batch_log_probs, encode_prompt, sample_batch, weighted_logprob_grad
from hybridrl.rewards import LengthPenaltyConfig, RewardBreakdown, StageId, reward_breakdown
from hybridrl.scorer import ThinkingScore
from hybridrl.template import ChatMode, ParsedResponse, extract_answer_letter


@dataclass(frozen=True)
class PromptInstance:
    id: str
    query: str
    features: np.ndarray
    gold: str
    mode: ChatMode = ChatMode.THINKING
    modality: str = "image"

    def __post_init__(self):
        if self.gold not in ("A", "B"):
            raise InvalidInputError(f"gold answer must be A or B, got {self.gold!r}")

    def with_mode(self, mode: ChatMode) -> PromptInstance:
        return replace(self, mode=mode)

    @property
    def policy_input(self) -> np.ndarray:
        return encode_prompt(self.features, self.mode)


@dataclass(frozen=True)
class ClipConfig:
    eps_low: float = 0.2
    eps_high: float = 0.28
    eps_std: float = 1e-8

    def __post_init__(self):
        if not (self.eps_low > 0 and self.eps_high > 0 and self.eps_std > 0):
            raise InvalidInputError("clip epsilons must be positive")


@dataclass
class RolloutGroup:
    prompt: PromptInstance
    trajectories: list[Trajectory]
    old_logprobs: list[np.ndarray]
    rewards: np.ndarray | None = None
    breakdowns: list[RewardBreakdown] | None = None
    attempt: int = 0

    def __post_init__(self):
        if len(self.trajectories) < 2:
            raise InvalidInputError("a group needs at least two trajectories")
        if len(self.old_logprobs) != len(self.trajectories) or any(
            len(lp) != t.length for lp, t in zip(self.old_logprobs, self.trajectories)
        ):
            raise InvalidInputError("old_logprobs must match trajectory shapes")

    @property
    def G(self) -> int:
        return len(self.trajectories)

    @property
    def n_correct(self) -> int:
        if self.breakdowns is None:
            raise InvalidInputError("rewards not attached")
        return int(sum(b.acc == 1.0 for b in self.breakdowns))


@dataclass(frozen=True)
class AdvantageSet:
    group_mean: float
    group_std: float
    advantages: np.ndarray
    degenerate: bool


class FilterVerdict(str, enum.Enum):
    ACCEPT = "accept"
    RESAMPLE = "resample"


def derive_seed(run_seed: int, prompt_id: str, index: int, attempt: int = 0) -> int:
    """Independent stream seed for trajectory ``index`` of ``prompt_id``."""
    ss = np.random.SeedSequence([run_seed & 0xFFFFFFFF, zlib.crc32(prompt_id.encode()), index, attempt])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def collect_groups(
    old_params: PolicyParams,
    prompts: Sequence[PromptInstance],
    G: int,
    max_len: int,
    seed: int,
    eos_id: int = 0,
    attempt: int = 0,
) -> list[RolloutGroup]:
    """Sample ``G`` trajectories per prompt in a single batched pass."""
    if G < 2:
        raise InvalidInputError("G must be at least 2")
    if not prompts:
        return []
    X = np.repeat(np.stack([p.policy_input for p in prompts]), G, axis=0)
    seeds = [derive_seed(seed, p.id, i, attempt) for p in prompts for i in range(G)]
    draws = sample_batch(old_params, X, seeds, max_len, eos_id)
    groups = []
    for k, p in enumerate(prompts):
        trajs = []
        for i in range(G):
            toks, lps = draws[k * G + i]
            trajs.append(Trajectory(p.id, p.mode, toks, lps, seed=seeds[k * G + i]))
        groups.append(RolloutGroup(p, trajs, [t.token_logprobs.copy() for t in trajs], attempt=attempt))
    return groups


def collect_group(
    old_params: PolicyParams, prompt: PromptInstance, G: int, max_len: int, seed: int, eos_id: int = 0, attempt: int = 0
) -> RolloutGroup:
    return collect_groups(old_params, [prompt], G, max_len, seed, eos_id, attempt)[0]


def attach_rewards(
    group: RolloutGroup,
    stage: StageId,
    parsed: Sequence[ParsedResponse],
    scores: Sequence[ThinkingScore | None],
    len_cfg: LengthPenaltyConfig,
) -> RolloutGroup:
    if len(parsed) != group.G or len(scores) != group.G:
        raise InvalidInputError("parsed responses and scores must have one entry per trajectory")
    breakdowns = [
        reward_breakdown(
            stage,
            resp,
            group.prompt.mode,
            extract_answer_letter(resp),
            group.prompt.gold,
            traj.length,
            len_cfg,
            score,
        )
        for traj, resp, score in zip(group.trajectories, parsed, scores)
    ]
    totals = np.array([b.total for b in breakdowns], dtype=np.float64)
    return replace(group, rewards=totals, breakdowns=breakdowns)


def dynamic_filter(group: RolloutGroup) -> FilterVerdict:
    return FilterVerdict.ACCEPT if 0 < group.n_correct < group.G else FilterVerdict.RESAMPLE


def compute_advantages(rewards: Sequence[float], cfg: ClipConfig = ClipConfig()) -> AdvantageSet:
    """Standardize within the group (population std).

    Centering is done in exact rational arithmetic, so the result depends
    only on reward differences: adding an exactly representable constant to
    every reward leaves the advantages bit-identical.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise InvalidInputError("advantages need at least two rewards")
    if not np.isfinite(r).all():
        raise NumericFault("non-finite reward in group")
    q = [Fraction(float(v)) for v in r]
    mean = sum(q, Fraction(0)) / len(q)
    dev = [v - mean for v in q]
    std = math.sqrt(sum((d * d for d in dev), Fraction(0)) / len(q))
    if std < cfg.eps_std:
        return AdvantageSet(float(mean), std, np.zeros_like(r), True)
    return AdvantageSet(float(mean), std, np.array([float(d) for d in dev]) / std, False)


def _flatten(groups: Sequence[RolloutGroup], cfg: ClipConfig):
    X, toks, old, adv, owners = [], [], [], [], []
    for g in groups:
        if g.rewards is None:
            raise InvalidInputError(f"group for prompt {g.prompt.id} has no rewards attached")
        a = compute_advantages(g.rewards, cfg).advantages
        for i, t in enumerate(g.trajectories):
            X.append(g.prompt.policy_input)
            toks.append(t.tokens)
            old.append(g.old_logprobs[i])
            adv.append(a[i])
            owners.append((g.prompt.id, i))
    return X, toks, old, adv, owners


def dapo_objective_and_grad(
    groups: Sequence[RolloutGroup], params: PolicyParams, cfg: ClipConfig = ClipConfig(), eos_id: int = 0
) -> tuple[float, PolicyParams]:
    """Clipped token-level objective and its exact gradient.

    Where the clipped branch is strictly smaller (so selected by the min), the
    token contributes a constant and its gradient is zero.
    """
    X, toks, old, adv, owners = _flatten(groups, cfg)
    n_tokens = sum(len(t) for t in toks)
    if n_tokens == 0:
        return 0.0, params.zeros_like()
    X = np.stack(X)
    new = batch_log_probs(params, X, toks, eos_id)
    value = 0.0
    weights = []
    lo, hi = 1.0 - cfg.eps_low, 1.0 + cfg.eps_high
    for lp_new, lp_old, a, owner in zip(new, old, adv, owners):
        with np.errstate(over="ignore"):
            ratio = np.exp(lp_new - lp_old)
        if not np.isfinite(ratio).all():
            raise NumericFault(f"non-finite importance ratio for prompt {owner[0]} trajectory {owner[1]}")
        unclipped = ratio * a
        clipped = np.clip(ratio, lo, hi) * a
        value += float(np.minimum(unclipped, clipped).sum())
        weights.append(np.where(unclipped <= clipped, a * ratio, 0.0) / n_tokens)
    _, grad = weighted_logprob_grad(params, X, toks, weights, eos_id)
    return value / n_tokens, grad


# -- optimizer -------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise InvalidInputError(f"unknown optimizer {self.kind!r}")


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, params: PolicyParams) -> OptimizerState:
        n = params.to_vector().size
        return cls(np.zeros(n), np.zeros(n), 0)

    def copy(self) -> OptimizerState:
        return OptimizerState(self.m.copy(), self.v.copy(), self.t)


def update_step(
    params: PolicyParams, grad: PolicyParams, state: OptimizerState, cfg: OptimizerConfig = OptimizerConfig()
) -> tuple[PolicyParams, OptimizerState]:
    """One ascent step (the objective is maximized)."""
    g = grad.to_vector()
    if not np.isfinite(g).all():
        raise NumericFault("non-finite gradient")
    if g.size != state.m.size:
        raise InvalidInputError("gradient and optimizer state shapes differ")
    if cfg.max_grad_norm is not None:
        norm = float(np.linalg.norm(g))
        if norm > cfg.max_grad_norm:
            g = g * (cfg.max_grad_norm / norm)
    p = params.to_vector()
    if cfg.kind == "sgd":
        return params.with_vector(p + cfg.lr * g), OptimizerState(state.m.copy(), state.v.copy(), state.t + 1)
    t = state.t + 1
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1 - cfg.beta2) * g * g
    m_hat = m / (1 - cfg.beta1**t)
    v_hat = v / (1 - cfg.beta2**t)
    p_new = p + cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return params.with_vector(p_new), OptimizerState(m, v, t)
