import json

import numpy as np
import pytest

from conftest import SMALL
from hybridrl.errors import ConfigError, InsufficientDataError, InvalidInputError, NumericFault
from hybridrl.orchestrator import stages
from hybridrl.orchestrator.config import load_config
from hybridrl.orchestrator.pipeline import build_task, final_window_violation_rate, fresh_params
from hybridrl.orchestrator.stages import (
    build_sft_set,
    evaluate_policy,
    pretrain_base_prior,
    run_rl_stage,
    run_stage1,
    run_stage2_sft,
    run_stage3,
    step_seed,
    track_cot_length,
)
from hybridrl.policy import DEFAULT_FILLERS, Vocab, load_checkpoint
from hybridrl.rewards import StageId
from hybridrl.scorer import StubScorer
from hybridrl.dapo import RolloutGroup
from hybridrl.policy import Trajectory
from hybridrl.template import ChatMode, extract_answer_letter, parse_response, render_response


class CountingScorer(StubScorer):
    def __init__(self):
        super().__init__()
        self.texts = []

    def score(self, text):
        self.texts.append(text)
        return super().score(text)


@pytest.fixture(scope="module")
def setup():
    cfg = load_config(overrides=SMALL)
    vocab = Vocab.default(cfg.template)
    task = build_task(cfg)
    prior = pretrain_base_prior(fresh_params(cfg, vocab), vocab, cfg.base_prior, task, DEFAULT_FILLERS, cfg.template)
    return cfg, vocab, task, prior.params


def test_base_prior_learns_layout(setup):
    cfg, vocab, task, params = setup
    rep = evaluate_policy(params, vocab, task.heldout, ChatMode.THINKING, samples_per_prompt=2, seed=0)
    assert rep.mean_fmt > -0.5
    assert len(rep.records) == len(task.heldout)


def test_step_seed_deterministic():
    assert step_seed(1, 2) == step_seed(1, 2) != step_seed(1, 3)


def test_stage1_logs(setup, tmp_path):
    cfg, vocab, task, params = setup
    path = tmp_path / "s1.jsonl"
    seen = []
    res = run_stage1(params, cfg.stage1, task, vocab, log_path=path, on_step=seen.append)
    lines = [json.loads(x) for x in path.read_text().splitlines()]
    assert lines == res.logs == seen and len(lines) == cfg.stage1.steps
    for r in lines:
        assert r["scorer_calls"] == 0 and r["stage"] == "stage1"
        assert r["think_prompts"] == cfg.stage1.batch_prompts
        assert all(0 < c < r["G"] for c in r["accepted_correct_counts"])
        assert r["accepted_groups"] == len(r["accepted_correct_counts"])
        assert r["mean_hybrid"] == 0.0 and r["mean_think"] == 0.0
        for key in ("filtered_group_count", "skipped_prompts", "J", "grad_norm", "mean_reward", "mean_cot_length"):
            assert key in r
    assert res.summary == {"scorer_calls": 0, "steps": cfg.stage1.steps}


def test_stage1_deterministic(setup):
    cfg, vocab, task, params = setup
    a = run_stage1(params, cfg.stage1, task, vocab)
    b = run_stage1(params, cfg.stage1, task, vocab)
    assert a.logs == b.logs and a.params.equals(b.params)


def test_stage_guards(setup):
    cfg, vocab, task, params = setup
    with pytest.raises(ConfigError):
        run_stage1(params, cfg.stage3, task, vocab)
    with pytest.raises(ConfigError):
        run_rl_stage(params, cfg.stage1, task, vocab, scorer=StubScorer())
    with pytest.raises(ConfigError):
        run_rl_stage(params, cfg.stage3, task, vocab)
    with pytest.raises(ConfigError):
        run_rl_stage(params, cfg.stage2, task, vocab)
    with pytest.raises(ConfigError):
        run_stage3(params, cfg.stage1, task, vocab, StubScorer())


def test_stage3_scorer_accounting(setup):
    cfg, vocab, task, params = setup
    scorer = CountingScorer()
    res = run_stage3(params, cfg.stage3, task, vocab, scorer)
    assert len(scorer.texts) == res.summary["scorer_calls"] == sum(r["scorer_calls"] for r in res.logs)
    for text in scorer.texts:
        assert extract_answer_letter(parse_response(text)) in ("A", "B")
    for r in res.logs:
        assert 0 <= r["think_prompts"] <= cfg.stage3.batch_prompts
        assert r["hybrid_violations"] <= r["n_trajectories"]


@pytest.mark.parametrize("stage,mode,calls", [("stage3", "think", [0]), ("stage3", "no_think", []), ("stage1", "think", [])])
def test_only_correct_thinking_responses_are_scored(setup, stage, mode, calls):
    cfg, vocab, task, params = setup
    prompt = task.prompts[0].with_mode(ChatMode(mode))
    other = "A" if prompt.gold == "B" else "B"
    thought = "hmm" if prompt.mode is ChatMode.THINKING else ""
    texts = [
        render_response(thought, prompt.gold, prompt.mode),
        render_response(thought, other, prompt.mode),
        render_response(thought, other, prompt.mode),
        "<think> hmm </think>",
    ]
    toks = [vocab.encode(t) for t in texts]
    trajs = [Trajectory(prompt.id, prompt.mode, t, np.zeros(len(t))) for t in toks]
    group = RolloutGroup(prompt, trajs, [np.zeros(len(t)) for t in toks])
    parsed = [parse_response(t) for t in texts]
    _, requests = stages._score_group(group, texts, parsed, StubScorer(), StageId(stage))
    assert [i for i, _ in requests] == calls


def test_resample_budget_and_skips(setup):
    cfg, vocab, task, params = setup
    s1 = cfg.stage1.__class__(StageId.STAGE1, steps=2, batch_prompts=4, max_resamples=0, seed=3)
    res = run_stage1(params, s1, task, vocab)
    for r in res.logs:
        assert r["accepted_groups"] + r["skipped_prompts"] == 4
        assert r["filtered_group_count"] == r["skipped_prompts"]


def test_numeric_fault_keeps_last_good_checkpoint(setup, tmp_path, monkeypatch):
    cfg, vocab, task, params = setup

    def boom(*args, **kwargs):
        raise NumericFault("non-finite importance ratio")

    monkeypatch.setattr(stages, "dapo_objective_and_grad", boom)
    s1 = cfg.stage1.__class__(StageId.STAGE1, steps=3, batch_prompts=16, seed=3)
    fault = tmp_path / "fault.json"
    with pytest.raises(NumericFault):
        run_stage1(params, s1, task, vocab, fault_path=fault)
    p, _, meta = load_checkpoint(fault)
    assert meta["aborted"] is True and meta["stage"] == "stage1"
    assert p.equals(params)


def test_sft_set_pairs_and_keep_rule(setup):
    cfg, vocab, task, params = setup
    sft = build_sft_set(params, vocab, task, 6, seed=1)
    assert len(sft) == 12
    for think, plain in zip(sft[::2], sft[1::2]):
        assert think.mode is ChatMode.THINKING and plain.mode is ChatMode.NON_THINKING
        assert think.prompt_id == plain.prompt_id
        pt, pn = parse_response(vocab.decode(think.target)), parse_response(vocab.decode(plain.target))
        assert pt.thinking_content.strip() and not pn.thinking_content.strip()
        assert pt.answer_content.strip() == pn.answer_content.strip() == think.gold
    again = build_sft_set(params, vocab, task, 6, seed=1)
    assert [e.target for e in again] == [e.target for e in sft]


def test_sft_set_budget_exhaustion(setup):
    cfg, vocab, task, params = setup
    with pytest.raises(InsufficientDataError) as info:
        build_sft_set(params, vocab, task, 50, seed=1, budget=10)
    assert info.value.attempts == 10 and info.value.wanted == 50
    with pytest.raises(InvalidInputError):
        build_sft_set(params, vocab, task, 0)


def test_stage2_reduces_loss(setup, tmp_path):
    cfg, vocab, task, params = setup
    sft = build_sft_set(params, vocab, task, 8, seed=1)
    s2 = cfg.stage2.__class__(StageId.STAGE2, lr=1e-2, epochs=20, batch_size=8, seed=2)
    res = run_stage2_sft(params, sft, s2, vocab, log_path=tmp_path / "s2.jsonl")
    assert res.summary["final_loss"] < res.summary["initial_loss"]
    assert len(res.logs) == 20
    after = evaluate_policy(res.params, vocab, task.heldout, ChatMode.NON_THINKING, samples_per_prompt=2)
    before = evaluate_policy(params, vocab, task.heldout, ChatMode.NON_THINKING, samples_per_prompt=2)
    assert after.compliance_rate > before.compliance_rate
    with pytest.raises(InvalidInputError):
        run_stage2_sft(params, [], s2, vocab)
    with pytest.raises(ConfigError):
        run_stage2_sft(params, sft, cfg.stage1, vocab)


def test_track_cot_length():
    logs = [{"step": i, "mean_cot_length": float(i)} for i in range(8)] + [{"step": 8, "mean_cot_length": None}]
    s = track_cot_length(logs)
    assert s.steps == tuple(range(8))
    assert s.quartile_medians == (0.5, 2.5, 4.5, 6.5)
    assert s.first_quartile_median == 0.5 and s.last_quartile_median == 6.5
    with pytest.raises(InvalidInputError):
        track_cot_length([])


def test_final_window_violation_rate():
    logs = [{"n_trajectories": 10, "hybrid_violations": 1}] * 18 + [{"n_trajectories": 10, "hybrid_violations": 0}] * 2
    assert final_window_violation_rate(logs) == 0.0
    logs[-1] = {"n_trajectories": 10, "hybrid_violations": 3}
    assert final_window_violation_rate(logs) == pytest.approx(3 / 20)
    assert final_window_violation_rate(logs[:3]) == pytest.approx(1 / 10)
    with pytest.raises(ConfigError):
        final_window_violation_rate([])


def test_evaluate_policy_validation(setup):
    cfg, vocab, task, params = setup
    with pytest.raises(InvalidInputError):
        evaluate_policy(params, vocab, [], ChatMode.THINKING)
    rep = evaluate_policy(params, vocab, task.heldout, ChatMode.NON_THINKING, samples_per_prompt=1)
    assert rep.mean_cot_length is None
    assert np.isfinite(rep.mean_acc)
