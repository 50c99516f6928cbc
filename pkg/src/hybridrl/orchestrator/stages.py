"""Training stages: format prior, Stage-1 RL, SFT set construction, Stage-2 SFT
and Stage-3 RL with the hybrid and thinking rewards.

Each stage takes parameters in and returns a :class:`StageResult`; files and
lineage are handled by :mod:`hybridrl.orchestrator.pipeline`.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from hybridrl.dapo import (
    FilterVerdict,
    OptimizerConfig,
    OptimizerState,
    PromptInstance,
    RolloutGroup,
    attach_rewards,
    collect_groups,
    dapo_objective_and_grad,
    dynamic_filter,
    update_step,
)
from hybridrl.errors import ConfigError, InsufficientDataError, InvalidInputError, NumericFault
from hybridrl.evalkit import Modality, PredictionRecord, gold_label, label_for_letter
from hybridrl.orchestrator.config import BasePriorConfig, StageConfig
from hybridrl.orchestrator.task import ToyTask, draw_features
from hybridrl.policy import PolicyParams, Vocab, encode_prompt, sample_batch, save_checkpoint, sft_loss_and_grad
from hybridrl.rewards import StageId
from hybridrl.scorer import Scorer, ThinkingScore
from hybridrl.template import (
    DEFAULT_TEMPLATE,
    ChatMode,
    Compliance,
    TemplateConfig,
    count_tokens,
    extract_answer_letter,
    mode_compliance,
    parse_response,
    render_response,
)

log = logging.getLogger(__name__)

COMPONENTS = ("fmt", "overlong", "acc", "hybrid", "think")


@dataclass
class StageResult:
    params: PolicyParams
    logs: list[dict]
    summary: dict = field(default_factory=dict)


def step_seed(run_seed: int, step: int) -> int:
    return int(np.random.SeedSequence([run_seed & 0xFFFFFFFF, step]).generate_state(1, dtype=np.uint64)[0] >> 1)


def _descend(grad: PolicyParams) -> PolicyParams:
    # update_step ascends, so negate loss gradients
    return grad.with_vector(-grad.to_vector())


class _JsonlSink:
    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def write(self, record: dict) -> None:
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")


def _abort(params: PolicyParams, vocab: Vocab, fault_path, stage: str, step: int, exc: Exception):
    if fault_path is not None:
        save_checkpoint(fault_path, params, vocab, {"stage": stage, "aborted": True, "step": step, "error": str(exc)})
    log.error("%s aborted at step %d: %s; last good parameters kept", stage, step, exc)


# -- format prior ------------------------------------------------------------------


def pretrain_base_prior(
    params: PolicyParams,
    vocab: Vocab,
    cfg: BasePriorConfig,
    task: ToyTask,
    fillers: Sequence[str],
    template: TemplateConfig = DEFAULT_TEMPLATE,
) -> StageResult:
    """Teach the response layout only: filler thoughts and a letter drawn independently of the input."""
    rng = np.random.default_rng(cfg.seed)
    filler_ids = [vocab.index(f) for f in fillers]
    radius = float(np.linalg.norm(task.prompts[0].features)) if task.prompts else 1.0
    state = OptimizerState.zeros(params)
    opt = OptimizerConfig(lr=cfg.lr)
    logs = []
    for step in range(cfg.steps):
        X = draw_features(rng, cfg.batch_size, task.feature_dim, radius)
        batch = []
        for x in X:
            n = int(rng.integers(cfg.min_thought, cfg.max_thought + 1))
            thought = " ".join(vocab.tokens[i] for i in rng.choice(filler_ids, n))
            letter = "AB"[int(rng.integers(2))]
            batch.append((encode_prompt(x, ChatMode.THINKING), vocab.encode(render_response(thought, letter, ChatMode.THINKING, template))))
        loss, grad = sft_loss_and_grad(params, batch, vocab.eos_id)
        params, state = update_step(params, _descend(grad), state, opt)
        logs.append({"step": step, "stage": "stage0", "loss": loss})
    return StageResult(params, logs, {"final_loss": logs[-1]["loss"] if logs else None})


# -- RL stages ----------------------------------------------------------------------


def _score_group(group: RolloutGroup, texts, parsed, scorer: Scorer | None, stage: StageId):
    """Thinking scores for one group; only Stage 3 Thinking-mode responses that can earn them are sent."""
    scores: list[ThinkingScore | None] = [None] * group.G
    if stage is not StageId.STAGE3 or scorer is None or group.prompt.mode is not ChatMode.THINKING:
        return scores, []
    # min(acc, score) is 0 whenever the answer is wrong, so those need no call
    want = [i for i, p in enumerate(parsed) if extract_answer_letter(p) == group.prompt.gold]
    return scores, [(i, texts[i]) for i in want]


def _sample_step(params, prompts, cfg: StageConfig, vocab, scorer, seed, max_len, template):
    """Collect groups with up to ``max_resamples`` fresh draws per filtered prompt."""
    accepted: list[RolloutGroup] = []
    seen: list[tuple[RolloutGroup, list]] = []
    filtered = skipped = 0
    pending = list(prompts)
    scorer_calls = 0
    for attempt in range(cfg.max_resamples + 1):
        if not pending:
            break
        groups = collect_groups(params, pending, cfg.G, max_len, seed, vocab.eos_id, attempt)
        batch_texts, staged = [], []
        for g in groups:
            texts = [vocab.decode(t.tokens) for t in g.trajectories]
            parsed = [parse_response(tx, template, n_tokens=t.length) for tx, t in zip(texts, g.trajectories)]
            scores, requests = _score_group(g, texts, parsed, scorer, cfg.stage)
            staged.append((g, parsed, scores, requests))
            batch_texts.extend(tx for _, tx in requests)
        if batch_texts:
            results = scorer.score_many(batch_texts)
            scorer_calls += len(batch_texts)
            it = iter(results)
            for _, _, scores, requests in staged:
                for i, _ in requests:
                    scores[i] = next(it)
        pending = []
        for g, parsed, scores, _ in staged:
            g = attach_rewards(g, cfg.stage, parsed, scores, cfg.len_cfg)
            seen.append((g, parsed))
            if dynamic_filter(g) is FilterVerdict.ACCEPT:
                accepted.append(g)
            else:
                filtered += 1
                if attempt < cfg.max_resamples:
                    pending.append(g.prompt)
                else:
                    skipped += 1
    return accepted, seen, filtered, skipped, scorer_calls


def _step_metrics(seen: list[tuple[RolloutGroup, list]], template: TemplateConfig = DEFAULT_TEMPLATE) -> dict:
    parts = [b for g, _ in seen for b in g.breakdowns]
    totals = [b.total for b in parts]
    violations = 0
    think_lengths = []
    n = 0
    for g, parsed in seen:
        for p in parsed:
            n += 1
            verdict = mode_compliance(p, g.prompt.mode)
            violations += verdict in (Compliance.SKIPPED_THINKING, Compliance.UNEXPECTED_THINKING)
            if g.prompt.mode is ChatMode.THINKING and p.well_formed:
                think_lengths.append(count_tokens(p.thinking_content, template))
    out = {
        "n_trajectories": n,
        "mean_reward": float(np.mean(totals)) if totals else None,
        "hybrid_violation_rate": violations / n if n else None,
        "hybrid_violations": int(violations),
        "mean_cot_length": float(np.mean(think_lengths)) if think_lengths else None,
        "n_thinking": len(think_lengths),
    }
    for name in COMPONENTS:
        out[f"mean_{name}"] = float(np.mean([getattr(b, name) for b in parts])) if parts else None
    return out


def run_rl_stage(
    params: PolicyParams,
    cfg: StageConfig,
    task: ToyTask,
    vocab: Vocab,
    *,
    scorer: Scorer | None = None,
    max_len: int = 64,
    log_path: str | Path | None = None,
    fault_path: str | Path | None = None,
    on_step: Callable[[dict], None] | None = None,
    template: TemplateConfig = DEFAULT_TEMPLATE,
) -> StageResult:
    if cfg.stage is StageId.STAGE2:
        raise ConfigError("stage2 is supervised; use run_stage2_sft")
    if cfg.stage is StageId.STAGE1 and scorer is not None:
        raise ConfigError("stage1 must not be given a thinking scorer")
    if cfg.stage is StageId.STAGE3 and scorer is None:
        raise ConfigError("stage3 needs a thinking scorer")
    opt = OptimizerConfig(lr=cfg.lr, max_grad_norm=cfg.max_grad_norm)
    state = OptimizerState.zeros(params)
    sink = _JsonlSink(log_path)
    logs = []
    pool = task.prompts
    total_calls = 0
    for step in range(cfg.steps):
        seed = step_seed(cfg.seed, step)
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(pool), size=min(cfg.batch_prompts, len(pool)), replace=False)
        if cfg.stage is StageId.STAGE1:
            modes = [ChatMode.THINKING] * len(idx)
        else:
            modes = [ChatMode.THINKING if u < cfg.mode_mix else ChatMode.NON_THINKING for u in rng.random(len(idx))]
        prompts = [pool[i].with_mode(m) for i, m in zip(idx, modes)]
        accepted, seen, filtered, skipped, calls = _sample_step(params, prompts, cfg, vocab, scorer, seed, max_len, template)
        total_calls += calls
        J = grad_norm = None
        good = params
        try:
            for k in range(cfg.updates_per_batch if accepted else 0):
                value, grad = dapo_objective_and_grad(accepted, params, cfg.clip, vocab.eos_id)
                if k == 0:
                    J, grad_norm = value, float(np.linalg.norm(grad.to_vector()))
                params, state = update_step(params, grad, state, opt)
            if not params.all_finite():
                raise NumericFault(f"non-finite parameters after step {step}")
        except NumericFault as exc:
            _abort(good, vocab, fault_path, cfg.stage.value, step, exc)
            raise
        record = {
            "step": step,
            "stage": cfg.stage.value,
            "seed": seed,
            "J": J,
            "grad_norm": grad_norm,
            "accepted_groups": len(accepted),
            "accepted_correct_counts": [g.n_correct for g in accepted],
            "G": cfg.G,
            "filtered_group_count": filtered,
            "skipped_prompts": skipped,
            "scorer_calls": calls,
            "think_prompts": sum(m is ChatMode.THINKING for m in modes),
            **_step_metrics(seen, template),
        }
        logs.append(record)
        sink.write(record)
        if on_step is not None:
            on_step(record)
    return StageResult(params, logs, {"scorer_calls": total_calls, "steps": cfg.steps})


def run_stage1(params, cfg: StageConfig, task: ToyTask, vocab: Vocab, **kw) -> StageResult:
    """Stage 1: format, overlong and accuracy rewards only; the scorer is never consulted."""
    if cfg.stage is not StageId.STAGE1:
        raise ConfigError(f"run_stage1 needs a stage1 config, got {cfg.stage.value}")
    return run_rl_stage(params, cfg, task, vocab, scorer=None, **kw)


def run_stage3(params, cfg: StageConfig, task: ToyTask, vocab: Vocab, scorer: Scorer, **kw) -> StageResult:
    """Stage 3: adds the hybrid penalty and the gated thinking score, over a /think and /no_think mix."""
    if cfg.stage is not StageId.STAGE3:
        raise ConfigError(f"run_stage3 needs a stage3 config, got {cfg.stage.value}")
    return run_rl_stage(params, cfg, task, vocab, scorer=scorer, **kw)


# -- Stage 2 ------------------------------------------------------------------------


@dataclass(frozen=True)
class SftExample:
    prompt_id: str
    features: np.ndarray
    mode: ChatMode
    target: tuple[int, ...]
    gold: str

    @property
    def policy_input(self) -> np.ndarray:
        return encode_prompt(self.features, self.mode)


def _keep(rule: str, parsed, gold: str) -> bool:
    if not parsed.well_formed:
        return False
    if rule == "well_formed":
        return True
    if extract_answer_letter(parsed) != gold:
        return False
    return rule == "correct" or bool(parsed.thinking_content.strip())


def build_sft_set(
    params: PolicyParams,
    vocab: Vocab,
    task: ToyTask,
    n: int,
    keep_rule: str = "correct_with_thought",
    *,
    seed: int = 0,
    budget: int = 16384,
    max_len: int = 64,
    template: TemplateConfig = DEFAULT_TEMPLATE,
) -> list[SftExample]:
    """Distil ``n`` Thinking-mode samples from ``params`` and pair each with its NonThinking twin.

    Prompts are visited in a seeded order, cycling until ``n`` samples are
    kept or ``budget`` responses have been drawn. The result has ``2 n``
    examples, alternating Thinking and NonThinking.
    """
    if n < 1:
        raise InvalidInputError("n must be at least 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(task.prompts))
    kept: list[tuple[PromptInstance, str, str]] = []
    drawn = 0
    cursor = 0
    while len(kept) < n and drawn < budget:
        chunk = min(len(order), budget - drawn)
        prompts = [task.prompts[order[(cursor + i) % len(order)]].with_mode(ChatMode.THINKING) for i in range(chunk)]
        cursor += chunk
        seeds = [int(s) for s in rng.integers(0, 2**63 - 1, size=chunk)]
        draws = sample_batch(params, np.stack([p.policy_input for p in prompts]), seeds, max_len, vocab.eos_id)
        drawn += chunk
        for p, (toks, _) in zip(prompts, draws):
            parsed = parse_response(vocab.decode(toks), template, n_tokens=len(toks))
            if _keep(keep_rule, parsed, p.gold):
                answer = p.gold if keep_rule != "well_formed" else " ".join(parsed.answer_content.split())
                kept.append((p, " ".join(parsed.thinking_content.split()), answer))
                if len(kept) == n:
                    break
    if len(kept) < n:
        raise InsufficientDataError(
            f"only {len(kept)} of {n} samples qualified under {keep_rule!r} after {drawn} draws"
            f" (yield {len(kept) / max(drawn, 1):.4f})",
            found=len(kept),
            wanted=n,
            attempts=drawn,
        )
    out = []
    for p, thought, answer in kept:
        for mode, text in ((ChatMode.THINKING, thought), (ChatMode.NON_THINKING, "")):
            target = vocab.encode(render_response(text, answer, mode, template))
            out.append(SftExample(p.id, p.features, mode, tuple(target), p.gold))
    return out


def sft_loss(params: PolicyParams, sft: Sequence[SftExample], eos_id: int = 0) -> float:
    loss, _ = sft_loss_and_grad(params, [(e.policy_input, e.target) for e in sft], eos_id)
    return loss


def run_stage2_sft(
    params: PolicyParams,
    sft: Sequence[SftExample],
    cfg: StageConfig,
    vocab: Vocab,
    *,
    log_path: str | Path | None = None,
    fault_path: str | Path | None = None,
) -> StageResult:
    """Minibatch Adam on the mean NLL of the SFT targets, one log line per epoch."""
    if cfg.stage is not StageId.STAGE2:
        raise ConfigError(f"run_stage2_sft needs a stage2 config, got {cfg.stage.value}")
    if not sft:
        raise InvalidInputError("the SFT set is empty")
    rng = np.random.default_rng(cfg.seed)
    pairs = [(e.policy_input, e.target) for e in sft]
    state = OptimizerState.zeros(params)
    opt = OptimizerConfig(lr=cfg.lr, max_grad_norm=cfg.max_grad_norm)
    sink = _JsonlSink(log_path)
    initial = sft_loss(params, sft, vocab.eos_id)
    logs = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(pairs))
        good = params
        try:
            for start in range(0, len(pairs), cfg.batch_size):
                batch = [pairs[i] for i in perm[start : start + cfg.batch_size]]
                _, grad = sft_loss_and_grad(params, batch, vocab.eos_id)
                params, state = update_step(params, _descend(grad), state, opt)
            loss = sft_loss(params, sft, vocab.eos_id)
            if not np.isfinite(loss):
                raise NumericFault(f"non-finite SFT loss after epoch {epoch}")
        except NumericFault as exc:
            _abort(good, vocab, fault_path, "stage2", epoch, exc)
            raise
        record = {"epoch": epoch, "step": epoch, "stage": "stage2", "loss": loss, "seed": cfg.seed}
        logs.append(record)
        sink.write(record)
    return StageResult(params, logs, {"initial_loss": initial, "final_loss": logs[-1]["loss"] if logs else initial})


# -- measurement ------------------------------------------------------------------


@dataclass(frozen=True)
class RolloutReport:
    mean_acc: float
    mean_fmt: float
    compliance_rate: float
    mean_cot_length: float | None
    records: tuple[PredictionRecord, ...]


def evaluate_policy(
    params: PolicyParams,
    vocab: Vocab,
    prompts: Sequence[PromptInstance],
    mode: ChatMode,
    *,
    samples_per_prompt: int = 4,
    seed: int = 0,
    max_len: int = 64,
    template: TemplateConfig = DEFAULT_TEMPLATE,
) -> RolloutReport:
    """Sample each prompt ``samples_per_prompt`` times; records hold the first sample per prompt."""
    if not prompts:
        raise InvalidInputError("no prompts to evaluate")
    rng = np.random.default_rng(seed)
    X = np.stack([p.with_mode(mode).policy_input for p in prompts for _ in range(samples_per_prompt)])
    seeds = [int(s) for s in rng.integers(0, 2**63 - 1, size=len(X))]
    draws = sample_batch(params, X, seeds, max_len, vocab.eos_id)
    acc, fmt, compliant, lengths, records = [], [], [], [], []
    for k, (toks, _) in enumerate(draws):
        p = prompts[k // samples_per_prompt]
        parsed = parse_response(vocab.decode(toks), template, n_tokens=len(toks))
        letter = extract_answer_letter(parsed)
        acc.append(float(letter == p.gold))
        fmt.append(0.0 if parsed.well_formed else -1.0)
        compliant.append(mode_compliance(parsed, mode) is Compliance.COMPLIANT)
        if parsed.well_formed and mode is ChatMode.THINKING:
            lengths.append(count_tokens(parsed.thinking_content, template))
        if k % samples_per_prompt == 0:
            records.append(
                PredictionRecord(
                    id=p.id,
                    modality=Modality(p.modality),
                    gold=gold_label(p.gold),
                    predicted=label_for_letter(letter),
                    mode=mode,
                    well_formed=parsed.well_formed,
                )
            )
    return RolloutReport(
        mean_acc=float(np.mean(acc)),
        mean_fmt=float(np.mean(fmt)),
        compliance_rate=float(np.mean(compliant)),
        mean_cot_length=float(np.mean(lengths)) if lengths else None,
        records=tuple(records),
    )


@dataclass(frozen=True)
class CotLengthSummary:
    steps: tuple[int, ...]
    lengths: tuple[float, ...]
    quartile_medians: tuple[float | None, float | None, float | None, float | None]

    @property
    def first_quartile_median(self) -> float | None:
        return self.quartile_medians[0]

    @property
    def last_quartile_median(self) -> float | None:
        return self.quartile_medians[3]


def track_cot_length(logs: Sequence[dict]) -> CotLengthSummary:
    """Per-step mean think length (Thinking-mode trajectories only) and medians of its four quarters."""
    if not logs:
        raise InvalidInputError("no step logs given")
    pts = [(r["step"], float(r["mean_cot_length"])) for r in logs if r.get("mean_cot_length") is not None]
    steps = tuple(s for s, _ in pts)
    lengths = tuple(v for _, v in pts)
    chunks = np.array_split(np.asarray(lengths, dtype=np.float64), 4)
    medians = tuple(float(np.median(c)) if c.size else None for c in chunks)
    return CotLengthSummary(steps, lengths, medians)
