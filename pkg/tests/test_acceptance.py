"""Acceptance suite: one test and one PASS/FAIL summary line per criterion."""

import re
import time

import numpy as np
import pytest

from _oracles import brute_force_metrics, soft_overlong_reference, synthetic_records
from conftest import SMALL, read_jsonl
from hybridrl.cli import main
from hybridrl.dapo import ClipConfig, PromptInstance, RolloutGroup, compute_advantages, dapo_objective_and_grad
from hybridrl.evalkit import evaluate
from hybridrl.orchestrator.config import load_config
from hybridrl.orchestrator.pipeline import train_stage1, train_stage2, train_stage3
from hybridrl.policy import DEFAULT_FILLERS, Trajectory, batch_log_probs, init_params
from hybridrl.rewards import LengthPenaltyConfig, RewardBreakdown, soft_overlong
from hybridrl.scorer import RemoteScorer, StubScorer, make_stub_server, serve_in_thread
from hybridrl.template import ChatMode, extract_answer_letter, parse_response, render_response


def test_criterion_01_reward_exactness(criterion):
    t0 = time.perf_counter()
    cfg = LengthPenaltyConfig(L_max=100, L_cache=20)
    errs = [abs(soft_overlong(L, cfg) - want) for L, want in ((80, 0.0), (90, -0.5), (100, -1.0))]
    errs += [abs(soft_overlong(L, cfg) - soft_overlong_reference(L, 100, 20)) for L in range(0, 200)]
    # continuity: values just either side of each breakpoint approach the breakpoint value
    cont = []
    for b in (80, 100):
        for d in (1e-3, 1e-6, 1e-9):
            cont.append(abs(soft_overlong(b - d, cfg) - soft_overlong(b, cfg)) <= d / 20 + 1e-12)
            cont.append(abs(soft_overlong(b + d, cfg) - soft_overlong(b, cfg)) <= d / 20 + 1e-12)
    elapsed = time.perf_counter() - t0
    ok = max(errs) <= 1e-12 and all(cont) and elapsed < 1.0
    criterion(1, ok, f"max err {max(errs):.1e}, continuity probes {sum(cont)}/{len(cont)}, {elapsed:.3f}s")
    assert ok


def test_criterion_02_advantage_invariants(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_mean = worst_std = 0.0
    shift_ok = degenerate_ok = True
    n_degenerate = 0
    for _ in range(1000):
        G = int(rng.integers(2, 17))
        if rng.random() < 0.1:
            r = np.full(G, float(rng.integers(-64, 64)) / 16)
        else:
            # dyadic rewards, so that shifting by a dyadic constant is exact
            r = rng.integers(-256, 257, size=G) / 64.0
        shift = float(rng.integers(-64, 65)) / 8
        a = compute_advantages(r)
        b = compute_advantages(r + shift)
        shift_ok &= bool(np.array_equal(a.advantages, b.advantages)) and a.degenerate == b.degenerate
        if a.degenerate:
            n_degenerate += 1
            degenerate_ok &= bool(np.all(a.advantages == 0.0))
            continue
        worst_mean = max(worst_mean, abs(float(a.advantages.mean())))
        worst_std = max(worst_std, abs(float(a.advantages.std()) - 1.0))
    elapsed = time.perf_counter() - t0
    ok = worst_mean <= 1e-9 and worst_std <= 1e-6 and shift_ok and degenerate_ok and n_degenerate > 0 and elapsed < 5
    criterion(
        2,
        ok,
        f"|mean|<={worst_mean:.1e} |std-1|<={worst_std:.1e} shift-exact={shift_ok} "
        f"degenerate={n_degenerate} zeroed={degenerate_ok} {elapsed:.2f}s",
    )
    assert ok


def test_criterion_03_gradient_correctness(criterion, capsys):
    # the default policy shape, every coordinate, three random parameter draws
    t0 = time.perf_counter()
    code = main(["gradcheck", "--trials", "3", "--max-coords", "0"])
    elapsed = time.perf_counter() - t0
    errors = {}
    for line in capsys.readouterr().out.splitlines():
        m = re.match(r"(\S+)\s+max_rel_err=(\S+)", line)
        if m:
            errors[m.group(1)] = float(m.group(2))
    ok = code == 0 and set(errors) == {"grad_log_prob", "sft", "dapo"} and max(errors.values()) < 1e-4 and elapsed < 30
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    criterion(3, ok, f"{detail} (all coordinates, 3 trials, {elapsed:.1f}s)")
    assert ok


def _random_batch(rng, params, old, n_groups):
    groups = []
    for g in range(n_groups):
        G = int(rng.integers(2, 9))
        prompt = PromptInstance(f"p{g}", "q", rng.normal(size=params.input_dim - 1), "A", ChatMode.THINKING)
        toks = [list(rng.integers(1, params.vocab_size, size=int(rng.integers(1, 10)))) + [0] for _ in range(G)]
        X = np.repeat(prompt.policy_input[None, :], G, axis=0)
        lps = batch_log_probs(old, X, toks)
        trajs = [Trajectory(prompt.id, prompt.mode, t, lp) for t, lp in zip(toks, lps)]
        r = rng.normal(size=G)
        groups.append(RolloutGroup(prompt, trajs, list(lps), r, [RewardBreakdown(0, 0, 0, total=float(v)) for v in r]))
    return groups


def test_criterion_04_objective_identity(criterion):
    rng = np.random.default_rng(4)
    worst_id = worst_inf = 0.0
    for trial in range(20):
        params = init_params(trial, 9, 8, 4, 13, scale=0.5)
        groups = _random_batch(rng, params, params, int(rng.integers(1, 5)))
        J, _ = dapo_objective_and_grad(groups, params)
        num = sum(t.length * a for g in groups for t, a in zip(g.trajectories, compute_advantages(g.rewards).advantages))
        den = sum(t.length for g in groups for t in g.trajectories)
        worst_id = max(worst_id, abs(J - num / den))

        old = params.with_vector(params.to_vector() + rng.normal(scale=0.3, size=params.to_vector().size))
        groups = _random_batch(rng, params, old, int(rng.integers(1, 5)))
        J_inf, _ = dapo_objective_and_grad(groups, params, ClipConfig(eps_low=np.inf, eps_high=np.inf))
        num = 0.0
        for g in groups:
            X = np.repeat(g.prompt.policy_input[None, :], g.G, axis=0)
            new = batch_log_probs(params, X, [t.tokens for t in g.trajectories])
            for lp, lp_old, a in zip(new, g.old_logprobs, compute_advantages(g.rewards).advantages):
                num += float(np.sum(np.exp(lp - lp_old) * a))
        den = sum(t.length for g in groups for t in g.trajectories)
        worst_inf = max(worst_inf, abs(J_inf - num / den))
    ok = worst_id <= 1e-10 and worst_inf <= 1e-10
    criterion(4, ok, f"theta=theta_old gap {worst_id:.1e}, infinite-clip gap {worst_inf:.1e} over 20 batches")
    assert ok


def test_criterion_05_dynamic_sampling(criterion, default_run):
    logs = read_jsonl(default_run["root"] / "stage1" / "steps.jsonl")
    counts = [(c, r["G"]) for r in logs for c in r["accepted_correct_counts"]]
    bad = [c for c, G in counts if not 0 < c < G]
    logged = all(isinstance(r.get("filtered_group_count"), int) for r in logs)
    filtered = sum(r["filtered_group_count"] for r in logs)
    ok = len(logs) == default_run["cfg"].stage1.steps and counts and not bad and logged
    criterion(5, ok, f"{len(counts)} accepted groups over {len(logs)} steps, {len(bad)} violate 0<#correct<G, {filtered} filtered")
    assert ok


def test_criterion_06_toy_convergence(criterion, default_run):
    m = default_run["manifest"]
    acc = m.stages["stage1"].metrics["heldout"]["think"]["mean_acc"]
    elapsed = default_run["elapsed"]
    ok = acc >= 0.9 and elapsed < 300
    criterion(6, ok, f"stage1 held-out accuracy reward {acc:.4f} (>=0.9), pipeline {elapsed:.1f}s (<300s)")
    assert ok


def test_criterion_07_stage3_behavior(criterion, default_run):
    m = default_run["manifest"]
    s3 = m.stages["stage3"].metrics
    rate = s3["final_window_violation_rate"]
    q1, _, _, q4 = s3["cot_quartile_medians"]
    s1_logs = read_jsonl(default_run["root"] / "stage1" / "steps.jsonl")
    s1_calls = m.stages["stage1"].metrics["scorer_calls"] + sum(r["scorer_calls"] for r in s1_logs)
    parts = {"violations": rate == 0.0, "think-length": q4 >= q1, "stage1-scorer": s1_calls == 0}
    ok = all(parts.values())
    criterion(
        7,
        ok,
        f"final-10% violation rate {rate:.4f} (need 0), think-length medians q1 {q1:.3f} q4 {q4:.3f}, "
        f"stage1 scorer calls {s1_calls}",
    )
    assert parts["stage1-scorer"], "Stage 1 consulted the scorer"
    assert parts["think-length"], f"last-quartile think length {q4} < first-quartile {q1}"
    assert parts["violations"], f"hybrid violations persist in the final window (rate {rate})"


def test_criterion_08_template(criterion, reference_responses):
    rng = np.random.default_rng(8)
    words = list(DEFAULT_FILLERS) + ["Let's", "analyze", "real?", "\n", "A)", "B)", "é"]
    ok_trips = 0
    for _ in range(1000):
        mode = ChatMode.THINKING if rng.random() < 0.5 else ChatMode.NON_THINKING
        n = int(rng.integers(1, 30)) if mode is ChatMode.THINKING else 0
        thought = " ".join(rng.choice(words, n)) if n else ""
        letter = "AB"[int(rng.integers(2))]
        p = parse_response(render_response(thought, letter, mode))
        if p.well_formed and p.thinking_content == thought and extract_answer_letter(p) == letter:
            ok_trips += 1
    letters = [extract_answer_letter(parse_response(r["text"])) for r in reference_responses]
    expected = ["B" if r["title"].startswith("FAKE") else "A" for r in reference_responses]
    ok = ok_trips == 1000 and letters[:6] == ["B", "A", "B", "A", "B", "A"] and letters == expected
    criterion(8, ok, f"{ok_trips}/1000 round-trips, reference letters {''.join(str(x) for x in letters)}")
    assert ok
    assert not any("<" in w for w in words)


def test_criterion_09_metric_oracle(criterion):
    worst = 0.0
    for seed in range(5):
        records = synthetic_records(100, seed)
        rep = evaluate(records)
        want = brute_force_metrics(records)
        got = {**{f"acc_{k}": v for k, v in rep.cell_accuracies().items()}, "overall_acc": rep.overall_acc, "f1": rep.f1}
        worst = max(worst, max(abs(got[k] - v) for k, v in want.items()))
    ok = worst <= 1e-12
    criterion(9, ok, f"max gap to brute-force confusion matrix {worst:.1e} over 5 sets of 100 records")
    assert ok


def test_criterion_10_scorer_loopback(criterion, tmp_path):
    server = make_stub_server("127.0.0.1", 0)
    serve_in_thread(server)
    host, port = server.server_address[:2]
    endpoint = f"http://{host}:{port}/score"
    rng = np.random.default_rng(10)
    texts = [render_response(" ".join(rng.choice(DEFAULT_FILLERS, int(rng.integers(0, 30)))), "AB"[i % 2], ChatMode.THINKING) for i in range(40)]
    texts += ["", "no markers at all", "<think></think><answer>A</answer>"]
    remote = RemoteScorer(endpoint).score_many(texts)
    local = [StubScorer().score(t) for t in texts]
    exact = all(r.value == s.value for r, s in zip(remote, local))
    server.shutdown()
    server.server_close()

    # the server is gone; a lenient client falls back and Stage 3 still completes
    cfg = load_config(overrides=SMALL)
    train_stage1(cfg, tmp_path)
    train_stage2(cfg, tmp_path)
    dead = RemoteScorer(endpoint, timeout=1.0, strict=False)
    m = train_stage3(cfg, tmp_path, scorer=dead)
    s3 = m.stages["stage3"]
    logs = read_jsonl(tmp_path / s3.logs)
    ok = exact and dead.calls > 0 and dead.fallbacks == dead.calls and len(logs) == cfg.stage3.steps
    criterion(
        10,
        ok,
        f"{len(texts)} loopback scores identical={exact}; dead server: {dead.fallbacks}/{dead.calls} fallbacks, "
        f"stage3 {len(logs)}/{cfg.stage3.steps} steps",
    )
    assert ok
    assert s3.metrics["scorer_fallbacks"] == dead.fallbacks
