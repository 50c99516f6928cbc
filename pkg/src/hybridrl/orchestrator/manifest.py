"""Run manifest: config snapshot, per-stage checkpoints, logs and lineage.

Layout under the artifacts directory::

    manifest.json
    stage0/checkpoint.json      format prior
    stageN/checkpoint.json      stageN/steps.jsonl
    eval/report.json            eval/predictions.jsonl

All paths inside the manifest are relative to the artifacts directory.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from hybridrl.errors import ConfigError, LineageError
from hybridrl.policy import atomic_write_bytes

MANIFEST_NAME = "manifest.json"
FORMAT = "hybridrl-manifest/1"
# which recorded stages may serve as the parent of each stage, in order of preference
PARENTS = {"stage1": ("stage0",), "stage2": ("stage1",), "stage3": ("stage2", "stage1")}
DOWNSTREAM = {"stage0": ("stage1", "stage2", "stage3"), "stage1": ("stage2", "stage3"), "stage2": ("stage3",), "stage3": ()}


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class StageRecord:
    name: str
    checkpoint: str
    sha256: str
    parent: str | None = None
    parent_sha256: str | None = None
    logs: str | None = None
    wall_clock_s: float = 0.0
    metrics: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)


@dataclass
class RunManifest:
    run_id: str
    config: dict
    overrides: list[str] = field(default_factory=list)
    stages: dict[str, StageRecord] = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    def referenced_files(self) -> list[str]:
        out = []
        for rec in self.stages.values():
            out.append(rec.checkpoint)
            if rec.logs:
                out.append(rec.logs)
            out.extend(rec.files.values())
        out.extend(v for k, v in self.eval.items() if k in ("report", "predictions"))
        return out

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "run_id": self.run_id,
            "config": self.config,
            "overrides": list(self.overrides),
            "stages": {k: asdict(v) for k, v in sorted(self.stages.items())},
            "eval": self.eval,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> RunManifest:
        if doc.get("format") != FORMAT:
            raise ConfigError(f"not a run manifest (format={doc.get('format')!r})")
        return cls(
            run_id=doc["run_id"],
            config=doc["config"],
            overrides=list(doc.get("overrides", [])),
            stages={k: StageRecord(**v) for k, v in doc.get("stages", {}).items()},
            eval=dict(doc.get("eval", {})),
        )

    def write(self, root: str | Path) -> Path:
        """Check every referenced file exists, then write atomically."""
        root = Path(root)
        missing = [p for p in self.referenced_files() if not (root / p).is_file()]
        if missing:
            raise ConfigError(f"manifest references missing file(s): {', '.join(missing)}")
        payload = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        path = root / MANIFEST_NAME
        atomic_write_bytes(path, payload.encode("utf-8"))
        return path

    def drop_downstream(self, stage: str) -> None:
        """Forget stages that descend from ``stage`` (they are stale once it is retrained)."""
        for name in DOWNSTREAM.get(stage, ()):
            self.stages.pop(name, None)
        self.eval = {}


def load_manifest(root: str | Path) -> RunManifest:
    path = Path(root) / MANIFEST_NAME
    if not path.is_file():
        raise LineageError(f"no manifest at {path}; run stage 1 first")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"manifest {path} is not valid JSON: {exc}") from exc
    return RunManifest.from_dict(doc)


def verify_record(root: str | Path, rec: StageRecord) -> Path:
    path = Path(root) / rec.checkpoint
    if not path.is_file():
        raise LineageError(f"{rec.name} checkpoint {path} is missing")
    digest = sha256_file(path)
    if digest != rec.sha256:
        raise LineageError(f"{rec.name} checkpoint {path} does not match its recorded checksum")
    return path


def verify_lineage(root: str | Path, manifest: RunManifest, name: str) -> list[str]:
    """Walk parent links from ``name`` back to the format prior, checking checksums on the way."""
    chain = []
    seen = set()
    current = manifest.stages.get(name)
    if current is None:
        raise LineageError(f"{name} is not recorded in the manifest")
    while current is not None:
        if current.name in seen:
            raise LineageError(f"lineage cycle at {current.name}")
        seen.add(current.name)
        verify_record(root, current)
        chain.append(current.name)
        if current.parent is None:
            break
        parent = manifest.stages.get(current.parent)
        if parent is None or parent.sha256 != current.parent_sha256:
            raise LineageError(f"{current.name} does not descend from the recorded {current.parent}")
        current = parent
    if chain[-1] != "stage0":
        raise LineageError(f"{name} does not trace back to a format prior")
    return chain


def require_parent(root: str | Path, manifest: RunManifest, stage: str, parent: str | None = None) -> StageRecord:
    """The recorded checkpoint ``stage`` should start from, with its lineage verified."""
    allowed = PARENTS.get(stage)
    if allowed is None:
        raise ConfigError(f"unknown stage {stage!r}")
    if parent is not None:
        if parent not in allowed:
            raise LineageError(f"{stage} cannot start from {parent}; allowed parents: {', '.join(allowed)}")
        candidates = (parent,)
    else:
        candidates = allowed
    for name in candidates:
        if name in manifest.stages:
            verify_lineage(root, manifest, name)
            return manifest.stages[name]
    raise LineageError(f"{stage} needs a parent checkpoint ({' or '.join(candidates)}) in the manifest lineage")
