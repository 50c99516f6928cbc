"""File-backed driver for the three training stages and held-out evaluation."""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from hybridrl.errors import ConfigError, LineageError
from hybridrl.evalkit import emit_predictions, emit_report, evaluate
from hybridrl.orchestrator.config import RunConfig, from_dict, to_dict
from hybridrl.orchestrator.manifest import (
    PARENTS,
    RunManifest,
    StageRecord,
    load_manifest,
    require_parent,
    sha256_file,
    verify_record,
)
from hybridrl.orchestrator.stages import (
    SftExample,
    build_sft_set,
    evaluate_policy,
    pretrain_base_prior,
    run_stage1,
    run_stage2_sft,
    run_stage3,
    track_cot_length,
)
from hybridrl.orchestrator.task import ToyTask, make_toy_task
from hybridrl.policy import DEFAULT_FILLERS, PolicyParams, Vocab, init_params, load_checkpoint, save_checkpoint
from hybridrl.rewards import StageId
from hybridrl.scorer import Scorer, build_scorer
from hybridrl.template import ChatMode

log = logging.getLogger(__name__)

# config sections that shape each stage's checkpoint, ancestors included
SECTIONS = {
    "stage0": ("task", "policy", "template", "base_prior"),
    "stage1": ("task", "policy", "template", "base_prior", "stage1"),
    "stage2": ("task", "policy", "template", "base_prior", "stage1", "stage2"),
    "stage3": ("task", "policy", "template", "base_prior", "stage1", "stage2", "stage3"),
}


def build_task(cfg: RunConfig) -> ToyTask:
    t = cfg.task
    return make_toy_task(t.seed, t.feature_dim, t.n_train, t.n_heldout, t.radius)


def fresh_params(cfg: RunConfig, vocab: Vocab) -> PolicyParams:
    p = cfg.policy
    return init_params(p.seed, cfg.task.feature_dim + 1, p.hidden, p.embed_dim, len(vocab), p.init_scale)


def heldout_metrics(cfg: RunConfig, params: PolicyParams, vocab: Vocab, task: ToyTask) -> dict:
    prompts = task.heldout or task.prompts
    out = {}
    for mode in ChatMode:
        rep = evaluate_policy(
            params,
            vocab,
            prompts,
            mode,
            samples_per_prompt=cfg.eval.samples_per_prompt,
            seed=cfg.eval.seed,
            max_len=cfg.policy.max_len,
            template=cfg.template,
        )
        out[mode.value] = {
            "mean_acc": rep.mean_acc,
            "mean_fmt": rep.mean_fmt,
            "compliance_rate": rep.compliance_rate,
            "mean_cot_length": rep.mean_cot_length,
        }
    return out


def _rel(root: Path, path: Path) -> str:
    return path.relative_to(root).as_posix()


def check_consistent(manifest: RunManifest, cfg: RunConfig, parent: str) -> None:
    recorded = from_dict(manifest.config)
    diffs = [s for s in SECTIONS[parent] if to_dict(getattr(recorded, s)) != to_dict(getattr(cfg, s))]
    if diffs:
        raise LineageError(
            f"config section(s) {', '.join(diffs)} differ from the run that produced {parent}; "
            "retrain from the earliest changed stage"
        )


def _load_start(root: Path, rec: StageRecord, resume: str | Path | None, stage: str, run_id: str):
    """Parameters to start from: the parent checkpoint, or a resume checkpoint of the same run."""
    if resume is None:
        params, vocab, _ = load_checkpoint(verify_record(root, rec))
        return params, vocab, None
    params, vocab, meta = load_checkpoint(resume)
    if meta.get("run_id") != run_id or meta.get("stage") not in (stage, *PARENTS[stage]):
        raise LineageError(f"resume checkpoint {resume} does not belong to {stage} of run {run_id!r}")
    return params, vocab, sha256_file(resume)


def _save_stage(root: Path, name: str, params, vocab, run_id: str, parent: StageRecord | None) -> StageRecord:
    ckpt = root / name / "checkpoint.json"
    meta = {"stage": name, "run_id": run_id, "parent_sha256": parent.sha256 if parent else None}
    digest = save_checkpoint(ckpt, params, vocab, meta)
    return StageRecord(
        name=name,
        checkpoint=_rel(root, ckpt),
        sha256=digest,
        parent=parent.name if parent else None,
        parent_sha256=parent.sha256 if parent else None,
    )


def train_stage1(cfg: RunConfig, root: str | Path, *, overrides: Sequence[str] = (), resume=None) -> RunManifest:
    root = Path(root)
    vocab = Vocab.default(cfg.template)
    task = build_task(cfg)
    manifest = RunManifest(run_id=cfg.run_id, config=to_dict(cfg), overrides=list(overrides))

    if resume is not None:
        # resuming keeps the recorded format prior; it must match this config
        old = load_manifest(root)
        check_consistent(old, cfg, "stage0")
        prior = old.stages.get("stage0")
        if prior is None:
            raise LineageError("cannot resume stage1 without a recorded format prior")
        params, vocab, resumed = _load_start(root, prior, resume, "stage1", cfg.run_id)
        manifest.stages["stage0"] = prior
    else:
        t0 = time.perf_counter()
        result = pretrain_base_prior(
            fresh_params(cfg, vocab), vocab, cfg.base_prior, task, DEFAULT_FILLERS, cfg.template
        )
        prior = _save_stage(root, "stage0", result.params, vocab, cfg.run_id, None)
        prior.logs = _write_logs(root, "stage0", result.logs)
        prior.wall_clock_s = time.perf_counter() - t0
        prior.metrics = {"final_loss": result.summary["final_loss"]}
        manifest.stages["stage0"] = prior
        params, resumed = result.params, None

    t0 = time.perf_counter()
    log_path = root / "stage1" / "steps.jsonl"
    result = run_stage1(
        params,
        cfg.stage1,
        task,
        vocab,
        max_len=cfg.policy.max_len,
        template=cfg.template,
        log_path=log_path,
        fault_path=root / "stage1" / "checkpoint.json",
    )
    rec = _save_stage(root, "stage1", result.params, vocab, cfg.run_id, prior)
    rec.logs = _rel(root, log_path)
    rec.wall_clock_s = time.perf_counter() - t0
    rec.metrics = {
        "scorer_calls": result.summary["scorer_calls"],
        "heldout": heldout_metrics(cfg, result.params, vocab, task),
        "resumed_from": resumed,
        "overrides": list(overrides),
    }
    manifest.stages["stage1"] = rec
    manifest.write(root)
    return manifest


def _write_logs(root: Path, name: str, logs: list[dict]) -> str:
    path = root / name / "steps.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in logs), encoding="utf-8")
    return _rel(root, path)


def write_sft_set(path: Path, sft: Sequence[SftExample], vocab: Vocab) -> None:
    lines = [
        json.dumps({"prompt_id": e.prompt_id, "mode": e.mode.value, "gold": e.gold, "target": vocab.decode(e.target)})
        for e in sft
    ]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def sft_set_for(cfg: RunConfig, params: PolicyParams, vocab: Vocab, task: ToyTask) -> list[SftExample]:
    s2 = cfg.stage2
    return build_sft_set(
        params,
        vocab,
        task,
        s2.sft_pairs,
        s2.keep_rule,
        seed=s2.seed,
        budget=s2.sample_budget,
        max_len=cfg.policy.max_len,
        template=cfg.template,
    )


def train_stage2(cfg: RunConfig, root: str | Path, *, overrides: Sequence[str] = (), resume=None) -> RunManifest:
    root = Path(root)
    manifest = load_manifest(root)
    parent = require_parent(root, manifest, "stage2")
    check_consistent(manifest, cfg, parent.name)
    params, vocab, resumed = _load_start(root, parent, resume, "stage2", cfg.run_id)
    task = build_task(cfg)

    t0 = time.perf_counter()
    # the SFT set is always distilled from the Stage-1 parent, even when resuming
    parent_params, _, _ = load_checkpoint(root / parent.checkpoint)
    sft = sft_set_for(cfg, parent_params, vocab, task)
    sft_path = root / "stage2" / "sft_set.jsonl"
    write_sft_set(sft_path, sft, vocab)
    before = heldout_metrics(cfg, params, vocab, task)
    log_path = root / "stage2" / "steps.jsonl"
    result = run_stage2_sft(params, sft, cfg.stage2, vocab, log_path=log_path, fault_path=root / "stage2" / "checkpoint.json")
    rec = _save_stage(root, "stage2", result.params, vocab, cfg.run_id, parent)
    rec.logs = _rel(root, log_path)
    rec.files = {"sft_set": _rel(root, sft_path)}
    rec.wall_clock_s = time.perf_counter() - t0
    rec.metrics = {
        "sft_examples": len(sft),
        "initial_loss": result.summary["initial_loss"],
        "final_loss": result.summary["final_loss"],
        "heldout_before": before,
        "heldout": heldout_metrics(cfg, result.params, vocab, task),
        "resumed_from": resumed,
        "overrides": list(overrides),
    }
    manifest.drop_downstream("stage2")
    manifest.stages["stage2"] = rec
    manifest.config = to_dict(cfg)
    manifest.overrides = list(overrides)
    manifest.write(root)
    return manifest


def final_window_violation_rate(logs: Sequence[dict], fraction: float = 0.1) -> float:
    """Violation rate pooled over all trajectories sampled in the last ``fraction`` of steps."""
    if not logs:
        raise ConfigError("no step logs")
    k = max(1, int(np.ceil(len(logs) * fraction)))
    tail = logs[-k:]
    n = sum(r["n_trajectories"] for r in tail)
    return sum(r["hybrid_violations"] for r in tail) / n if n else 0.0


def train_stage3(
    cfg: RunConfig,
    root: str | Path,
    *,
    overrides: Sequence[str] = (),
    parent: str | None = None,
    resume=None,
    scorer: Scorer | None = None,
) -> RunManifest:
    root = Path(root)
    manifest = load_manifest(root)
    prec = require_parent(root, manifest, "stage3", parent)
    check_consistent(manifest, cfg, prec.name)
    params, vocab, resumed = _load_start(root, prec, resume, "stage3", cfg.run_id)
    task = build_task(cfg)
    scorer = scorer if scorer is not None else build_scorer(cfg.stage3.scorer, cfg.template)

    t0 = time.perf_counter()
    log_path = root / "stage3" / "steps.jsonl"
    result = run_stage3(
        params,
        cfg.stage3,
        task,
        vocab,
        scorer,
        max_len=cfg.policy.max_len,
        template=cfg.template,
        log_path=log_path,
        fault_path=root / "stage3" / "checkpoint.json",
    )
    rec = _save_stage(root, "stage3", result.params, vocab, cfg.run_id, prec)
    rec.logs = _rel(root, log_path)
    rec.wall_clock_s = time.perf_counter() - t0
    metrics = {
        "scorer_calls": result.summary["scorer_calls"],
        "scorer_fallbacks": getattr(scorer, "fallbacks", 0),
        "heldout": heldout_metrics(cfg, result.params, vocab, task),
        "resumed_from": resumed,
        "overrides": list(overrides),
    }
    if result.logs:
        cot = track_cot_length(result.logs)
        metrics["cot_quartile_medians"] = list(cot.quartile_medians)
        metrics["final_window_violation_rate"] = final_window_violation_rate(result.logs)
    rec.metrics = metrics
    manifest.drop_downstream("stage3")
    manifest.stages["stage3"] = rec
    manifest.config = to_dict(cfg)
    manifest.overrides = list(overrides)
    manifest.write(root)
    return manifest


def train(cfg: RunConfig, stage: StageId | str | int, root: str | Path, **kw) -> RunManifest:
    stage = StageId.parse(stage)
    if stage is StageId.STAGE1:
        kw.pop("parent", None)
        kw.pop("scorer", None)
        return train_stage1(cfg, root, **kw)
    if stage is StageId.STAGE2:
        kw.pop("parent", None)
        kw.pop("scorer", None)
        return train_stage2(cfg, root, **kw)
    return train_stage3(cfg, root, **kw)


def latest_stage(manifest: RunManifest) -> StageRecord:
    for name in ("stage3", "stage2", "stage1"):
        if name in manifest.stages:
            return manifest.stages[name]
    raise LineageError("the manifest holds no trained stage")


def evaluate_run(root: str | Path, stage: str | None = None, mode: ChatMode = ChatMode.THINKING) -> dict:
    """Score a recorded checkpoint on the held-out prompts and write eval/report.json."""
    root = Path(root)
    manifest = load_manifest(root)
    cfg = from_dict(manifest.config)
    rec = manifest.stages.get(stage) if stage else latest_stage(manifest)
    if rec is None:
        raise LineageError(f"{stage} is not recorded in the manifest")
    params, vocab, _ = load_checkpoint(verify_record(root, rec))
    task = build_task(cfg)
    rep = evaluate_policy(
        params,
        vocab,
        task.heldout or task.prompts,
        mode,
        samples_per_prompt=1,
        seed=cfg.eval.seed,
        max_len=cfg.policy.max_len,
        template=cfg.template,
    )
    report = evaluate(list(rep.records))
    meta = {"run_id": manifest.run_id, "stage": rec.name, "checkpoint_sha256": rec.sha256, "mode": mode.value}
    report_path = emit_report(report, root / "eval" / "report.json", meta)
    pred_path = emit_predictions(rep.records, root / "eval" / "predictions.jsonl")
    manifest.eval = {"report": _rel(root, report_path), "predictions": _rel(root, pred_path), **meta}
    manifest.write(root)
    return {"report": report, "path": report_path, "metadata": meta}


def run_pipeline(cfg: RunConfig, root: str | Path, *, overrides: Sequence[str] = (), scorer: Scorer | None = None) -> RunManifest:
    train_stage1(cfg, root, overrides=overrides)
    train_stage2(cfg, root, overrides=overrides)
    train_stage3(cfg, root, overrides=overrides, scorer=scorer)
    evaluate_run(root)
    return load_manifest(root)
