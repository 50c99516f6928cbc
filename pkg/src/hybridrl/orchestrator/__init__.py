"""Three-stage training pipeline on the toy detection task."""

from hybridrl.orchestrator.config import RunConfig, StageConfig, load_config
from hybridrl.orchestrator.pipeline import evaluate_run, run_pipeline, train
from hybridrl.orchestrator.stages import build_sft_set, run_stage1, run_stage2_sft, run_stage3, track_cot_length
from hybridrl.orchestrator.task import ToyTask, make_toy_task

__all__ = [
    "RunConfig",
    "StageConfig",
    "ToyTask",
    "build_sft_set",
    "evaluate_run",
    "load_config",
    "make_toy_task",
    "run_pipeline",
    "run_stage1",
    "run_stage2_sft",
    "run_stage3",
    "track_cot_length",
    "train",
]
