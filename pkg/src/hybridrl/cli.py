"""Command-line entry point.

Exit codes: 0 success, 1 other runtime failure, 2 config or usage error,
3 numeric fault, 4 threshold breach.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from hybridrl.errors import (
    ConfigError,
    HybridRLError,
    IngestionError,
    InsufficientDataError,
    InvalidInputError,
    NumericFault,
    ScorerError,
)

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_NUMERIC, EXIT_THRESHOLD = 0, 1, 2, 3, 4

log = logging.getLogger("hybridrl")


class UsageError(ConfigError):
    pass


def _print_json(doc) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def _config(args, run_dir: str | None = None):
    """Config from --config (or the bundled default) plus --set overrides.

    With ``run_dir`` and no --config, the snapshot recorded in that run's
    manifest is the base instead, so later stages inherit earlier overrides.
    """
    from hybridrl.orchestrator.config import apply_overrides, from_dict, load_config
    from hybridrl.orchestrator.manifest import MANIFEST_NAME, load_manifest

    if args.config is None and run_dir is not None and (Path(run_dir) / MANIFEST_NAME).is_file():
        return from_dict(apply_overrides(load_manifest(run_dir).config, args.set))
    return load_config(args.config, args.set)


# -- commands -------------------------------------------------------------------------


def cmd_train(args) -> int:
    from hybridrl.orchestrator.pipeline import evaluate_run, train

    cfg = _config(args, None if args.stage in ("1", "all") else args.out)
    stages = ["stage1", "stage2", "stage3"] if args.stage == "all" else [f"stage{args.stage}"]
    if args.stage == "all" and (args.parent or args.resume):
        raise UsageError("--parent and --resume apply to a single stage")
    manifest = None
    for stage in stages:
        kw = {"overrides": args.set, "resume": args.resume}
        if stage == "stage3":
            kw["parent"] = args.parent
        elif args.parent:
            raise UsageError("--parent only applies to --stage 3")
        manifest = train(cfg, stage, args.out, **kw)
        rec = manifest.stages[stage]
        print(f"{stage}: {rec.checkpoint} sha256={rec.sha256[:12]} ({rec.wall_clock_s:.1f}s)")
    if args.stage == "all" or args.eval:
        result = evaluate_run(args.out)
        print(f"eval: {result['path']}")
    return EXIT_OK


def cmd_sft_build(args) -> int:
    from hybridrl.orchestrator.manifest import load_manifest, require_parent
    from hybridrl.orchestrator.pipeline import build_task, check_consistent, sft_set_for, write_sft_set
    from hybridrl.policy import load_checkpoint

    cfg = _config(args, args.run)
    manifest = load_manifest(args.run)
    parent = require_parent(args.run, manifest, "stage2")
    check_consistent(manifest, cfg, parent.name)
    params, vocab, _ = load_checkpoint(Path(args.run) / parent.checkpoint)
    sft = sft_set_for(cfg, params, vocab, build_task(cfg))
    out = Path(args.output) if args.output else Path(args.run) / "stage2" / "sft_set.jsonl"
    write_sft_set(out, sft, vocab)
    print(f"wrote {len(sft)} examples ({len(sft) // 2} pairs) to {out}")
    return EXIT_OK


def _render_report(report) -> list[str]:
    from hybridrl.evalkit import report_to_dict

    display = report_to_dict(report)["display"]
    cells = ("acc_image_real", "acc_image_fake", "acc_video_real", "acc_video_fake", "overall_acc", "f1")
    width = max(len(c) for c in cells)
    return [f"{c:<{width}}  {display[c] if display[c] is not None else 'n/a'}" for c in cells]


def cmd_eval(args) -> int:
    from hybridrl.evalkit import emit_report, evaluate, ingest_predictions, read_report
    from hybridrl.orchestrator.pipeline import evaluate_run
    from hybridrl.template import ChatMode

    if bool(args.predictions) == bool(args.run):
        raise UsageError("give exactly one of --predictions or --run")
    if args.predictions:
        report = evaluate(ingest_predictions(args.predictions))
        if args.out:
            emit_report(report, args.out, {"predictions": str(args.predictions)})
    else:
        result = evaluate_run(args.run, args.stage, ChatMode(args.mode))
        report = read_report(result["path"])
    for line in _render_report(report):
        print(line)
    breaches = []
    if args.min_acc is not None and report.overall_acc < args.min_acc:
        breaches.append(f"overall_acc {report.overall_acc:.4f} < {args.min_acc}")
    if args.min_f1 is not None and (report.f1 is None or report.f1 < args.min_f1):
        breaches.append(f"f1 {report.f1} < {args.min_f1}")
    if breaches:
        print("threshold breach: " + "; ".join(breaches), file=sys.stderr)
        return EXIT_THRESHOLD
    return EXIT_OK


def validate_response(text: str, cfg, stage: str = "stage3", gold: str = "A") -> dict:
    """Parse verdict, letter, mode compliance and reward components for one response."""
    from dataclasses import asdict

    from hybridrl.rewards import StageId, reward_breakdown
    from hybridrl.scorer import build_scorer
    from hybridrl.template import ChatMode, count_tokens, extract_answer_letter, mode_compliance, parse_response

    stage_id = StageId.parse(stage)
    if stage_id is StageId.STAGE2:
        raise UsageError("stage2 has no rewards; use --stage 1 or 3")
    if gold not in ("A", "B"):
        raise UsageError("--gold must be A or B")
    tcfg = cfg.template
    parsed = parse_response(text, tcfg)
    letter = extract_answer_letter(parsed)
    length = count_tokens(text, tcfg)
    stage_cfg = cfg.stage(stage_id)
    score = None
    if stage_id is StageId.STAGE3:
        score = build_scorer(stage_cfg.scorer, tcfg).score(text)
    rewards = {}
    for mode in ChatMode:
        parts = reward_breakdown(stage_id, parsed, mode, letter, gold, length, stage_cfg.len_cfg, score)
        rewards[mode.value] = asdict(parts)
    return {
        "well_formed": parsed.well_formed,
        "letter": letter,
        "thinking_content": parsed.thinking_content,
        "answer_content": parsed.answer_content,
        "n_tokens": length,
        "compliance": {m.value: mode_compliance(parsed, m).value for m in ChatMode},
        "stage": stage_id.value,
        "gold": gold,
        "thinking_score": score.value if score is not None else None,
        "rewards": rewards,
    }


def cmd_validate_response(args) -> int:
    cfg = _config(args)
    if args.file in (None, "-"):
        text = sys.stdin.read()
    else:
        try:
            text = Path(args.file).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read {args.file}: {exc}") from exc
    _print_json(validate_response(text, cfg, f"stage{args.stage}", args.gold))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from hybridrl.gradcheck import run_gradcheck
    from hybridrl.policy import Vocab

    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    cfg = _config(args)
    report = run_gradcheck(
        args.trials,
        args.seed,
        input_dim=cfg.task.feature_dim + 1,
        hidden=cfg.policy.hidden,
        embed_dim=cfg.policy.embed_dim,
        vocab_size=len(Vocab.default(cfg.template)),
        max_coords=args.max_coords,
    )
    for name, err in report.errors.items():
        print(f"{name:<14} max_rel_err={err:.3e}  {'ok' if err < report.tol else 'FAIL'}")
    return EXIT_OK if report.passed else EXIT_THRESHOLD


def cmd_scorer_stub_serve(args) -> int:
    from hybridrl.scorer import StubScorer, make_stub_server

    cfg = _config(args)
    try:
        server = make_stub_server(args.host, args.port, StubScorer(cfg.stage3.scorer.stub, cfg.template))
    except OSError as exc:
        raise UsageError(f"cannot bind {args.host}:{args.port}: {exc}") from exc
    host, port = server.server_address[:2]
    print(f"stub scorer listening on http://{host}:{port}/score", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config YAML (default: bundled default config)")
    p.add_argument(
        "--set",
        "--override",
        dest="set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted config override, e.g. stage1.lr=3e-3 (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridrl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one stage, or all three, into an artifacts directory")
    _add_config(p)
    p.add_argument("--stage", required=True, choices=["1", "2", "3", "all"])
    p.add_argument("--out", default="artifacts", help="artifacts directory")
    p.add_argument("--parent", choices=["stage1", "stage2"], help="stage-3 parent (default: stage2 if present)")
    p.add_argument("--resume", help="checkpoint of this run to continue from")
    p.add_argument("--eval", action="store_true", help="write eval/report.json after training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sft-build", help="distil the SFT set from a run's stage-1 checkpoint")
    _add_config(p)
    p.add_argument("--run", required=True, help="artifacts directory holding stage1")
    p.add_argument("--output", help="output JSONL (default: RUN/stage2/sft_set.jsonl)")
    p.set_defaults(func=cmd_sft_build)

    p = sub.add_parser("eval", help="subcategory accuracy and F1")
    p.add_argument("--predictions", help="JSONL prediction file")
    p.add_argument("--run", help="artifacts directory to evaluate on held-out prompts")
    p.add_argument("--stage", choices=["stage1", "stage2", "stage3"], help="checkpoint to evaluate (default: latest)")
    p.add_argument("--mode", choices=["think", "no_think"], default="think")
    p.add_argument("--out", help="write the report JSON here (with --predictions)")
    p.add_argument("--min-acc", type=float, help="fail with exit 4 below this overall accuracy (percent)")
    p.add_argument("--min-f1", type=float, help="fail with exit 4 below this F1 (percent)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("validate-response", help="parse a response and show its rewards")
    _add_config(p)
    p.add_argument("file", nargs="?", help="response text file ('-' or omitted: stdin)")
    p.add_argument("--stage", choices=["1", "3"], default="3")
    p.add_argument("--gold", default="A", help="gold letter for the accuracy reward")
    p.set_defaults(func=cmd_validate_response)

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    _add_config(p)
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-coords", type=int, default=256, help="coordinates checked per trial (0: all)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("scorer-stub-serve", help="serve the stub thinking scorer over HTTP")
    _add_config(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.set_defaults(func=cmd_scorer_stub_serve)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "max_coords", None) == 0:
        args.max_coords = None
    try:
        return args.func(args)
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, InvalidInputError, IngestionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InsufficientDataError, ScorerError, HybridRLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
