"""Per-subcategory accuracy and binary F1 from prediction records.

Fake is the positive class. A record without a prediction counts as wrong
for accuracy and as a Real prediction for the confusion matrix. Display
values use one decimal place with half-up rounding, computed from exact
fractions so ties such as 12.25 always round up.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from hybridrl.errors import IngestionError, InvalidInputError
from hybridrl.policy import atomic_write_bytes
from hybridrl.template import ChatMode


class Modality(str, enum.Enum):
    IMAGE = "image"
    VIDEO = "video"


class Label(str, enum.Enum):
    REAL = "real"
    FAKE = "fake"


LETTER_TO_LABEL = {"A": Label.REAL, "B": Label.FAKE}
CELLS = (
    (Modality.IMAGE, Label.REAL),
    (Modality.IMAGE, Label.FAKE),
    (Modality.VIDEO, Label.REAL),
    (Modality.VIDEO, Label.FAKE),
)
RECORD_FIELDS = ("id", "modality", "gold", "predicted", "mode", "well_formed")


@dataclass(frozen=True)
class PredictionRecord:
    id: str
    modality: Modality
    gold: Label
    predicted: Label | None
    mode: ChatMode = ChatMode.THINKING
    well_formed: bool = True
    tag: str | None = None

    @property
    def correct(self) -> bool:
        return self.predicted is not None and self.predicted == self.gold


def label_for_letter(letter: str | None) -> Label | None:
    return LETTER_TO_LABEL.get(letter) if letter is not None else None


def gold_label(letter: str) -> Label:
    try:
        return LETTER_TO_LABEL[letter]
    except KeyError:
        raise InvalidInputError(f"gold letter must be A or B, got {letter!r}") from None


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def f1_fraction(self) -> Fraction | None:
        # 2PR/(P+R) simplifies to 2TP/(2TP+FP+FN); undefined with no positives at all
        denom = 2 * self.tp + self.fp + self.fn
        return Fraction(2 * self.tp, denom) if denom else None


@dataclass(frozen=True)
class SubcategoryReport:
    acc_image_real: float | None
    acc_image_fake: float | None
    acc_video_real: float | None
    acc_video_fake: float | None
    overall_acc: float
    f1: float | None
    counts: dict[str, tuple[int, int]]  # cell -> (correct, total)
    confusion: Confusion
    per_modality: dict[str, dict[str, float | None]] = field(default_factory=dict)

    def cell_accuracies(self) -> dict[str, float | None]:
        return {
            "image_real": self.acc_image_real,
            "image_fake": self.acc_image_fake,
            "video_real": self.acc_video_real,
            "video_fake": self.acc_video_fake,
        }


def _cell_name(modality: Modality, label: Label) -> str:
    return f"{modality.value}_{label.value}"


def _confusion(records: Iterable[PredictionRecord]) -> Confusion:
    tp = fp = fn = tn = 0
    for r in records:
        pred_fake = r.predicted is Label.FAKE
        gold_fake = r.gold is Label.FAKE
        if gold_fake and pred_fake:
            tp += 1
        elif gold_fake:
            fn += 1
        elif pred_fake:
            fp += 1
        else:
            tn += 1
    return Confusion(tp, fp, fn, tn)


def _pct(frac: Fraction | None) -> float | None:
    return None if frac is None else float(frac * 100)


def evaluate(records: Sequence[PredictionRecord]) -> SubcategoryReport:
    if not records:
        raise InvalidInputError("evaluate needs at least one record")
    counts: dict[str, tuple[int, int]] = {}
    for modality, label in CELLS:
        cell = [r for r in records if r.modality is modality and r.gold is label]
        counts[_cell_name(modality, label)] = (sum(r.correct for r in cell), len(cell))
    acc = {name: (_pct(Fraction(c, n)) if n else None) for name, (c, n) in counts.items()}
    correct = sum(r.correct for r in records)
    confusion = _confusion(records)
    per_modality = {}
    for modality in Modality:
        subset = [r for r in records if r.modality is modality]
        if not subset:
            per_modality[modality.value] = {"acc": None, "f1": None, "n": 0}
            continue
        per_modality[modality.value] = {
            "acc": _pct(Fraction(sum(r.correct for r in subset), len(subset))),
            "f1": _pct(_confusion(subset).f1_fraction()),
            "n": len(subset),
        }
    return SubcategoryReport(
        acc_image_real=acc["image_real"],
        acc_image_fake=acc["image_fake"],
        acc_video_real=acc["video_real"],
        acc_video_fake=acc["video_fake"],
        overall_acc=_pct(Fraction(correct, len(records))),
        f1=_pct(confusion.f1_fraction()),
        counts=counts,
        confusion=confusion,
        per_modality=per_modality,
    )


# -- formatting -----------------------------------------------------------------


def format_percent(value: float | Fraction | Decimal | None) -> str | None:
    """One decimal place, half-up. Floats are read through their shortest repr."""
    if value is None:
        return None
    if isinstance(value, Fraction):
        d = Decimal(value.numerator) / Decimal(value.denominator)
    elif isinstance(value, Decimal):
        d = value
    else:
        d = Decimal(repr(float(value)))
    return str(d.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def format_rate(rate: float | Fraction) -> str:
    """Format a rate in [0, 1] as a one-decimal percentage, e.g. 0.7749 -> '77.5'."""
    if isinstance(rate, Fraction):
        return format_percent(rate * 100)
    return format_percent(Decimal(repr(float(rate))) * 100)


def _display(report: SubcategoryReport) -> dict[str, str | None]:
    # exact fractions from counts where possible so ties round the same way every time
    out = {}
    for name, (c, n) in report.counts.items():
        out[f"acc_{name}"] = format_percent(Fraction(100 * c, n)) if n else None
    total = sum(n for _, n in report.counts.values())
    correct = sum(c for c, _ in report.counts.values())
    out["overall_acc"] = format_percent(Fraction(100 * correct, total)) if total else None
    f1 = report.confusion.f1_fraction()
    out["f1"] = format_percent(f1 * 100) if f1 is not None else None
    return out


def report_to_dict(report: SubcategoryReport, metadata: dict | None = None) -> dict:
    c = report.confusion
    return {
        "format": "hybridrl-eval/1",
        "display": _display(report),
        "metrics": {
            "acc_image_real": report.acc_image_real,
            "acc_image_fake": report.acc_image_fake,
            "acc_video_real": report.acc_video_real,
            "acc_video_fake": report.acc_video_fake,
            "overall_acc": report.overall_acc,
            "f1": report.f1,
        },
        "counts": {k: {"correct": v[0], "total": v[1]} for k, v in report.counts.items()},
        "confusion": {"tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn},
        "per_modality": report.per_modality,
        "metadata": metadata or {},
    }


def report_from_dict(doc: dict) -> SubcategoryReport:
    m = doc["metrics"]
    return SubcategoryReport(
        acc_image_real=m["acc_image_real"],
        acc_image_fake=m["acc_image_fake"],
        acc_video_real=m["acc_video_real"],
        acc_video_fake=m["acc_video_fake"],
        overall_acc=m["overall_acc"],
        f1=m["f1"],
        counts={k: (v["correct"], v["total"]) for k, v in doc["counts"].items()},
        confusion=Confusion(**doc["confusion"]),
        per_modality=doc.get("per_modality", {}),
    )


def emit_report(report: SubcategoryReport, path: str | os.PathLike, metadata: dict | None = None) -> Path:
    payload = json.dumps(report_to_dict(report, metadata), indent=2, sort_keys=True) + "\n"
    atomic_write_bytes(path, payload.encode("utf-8"))
    return Path(path)


def read_report(path: str | os.PathLike) -> SubcategoryReport:
    return report_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -- prediction files -------------------------------------------------------------


def record_to_dict(r: PredictionRecord) -> dict:
    d = {
        "id": r.id,
        "modality": r.modality.value,
        "gold": r.gold.value,
        "predicted": r.predicted.value if r.predicted is not None else None,
        "mode": r.mode.value,
        "well_formed": r.well_formed,
    }
    if r.tag is not None:
        d["tag"] = r.tag
    return d


def _enum(cls, value, name):
    if not isinstance(value, str):
        raise ValueError(f"{name} must be a string, got {value!r}")
    try:
        return cls(value.strip().lower())
    except ValueError:
        raise ValueError(f"{name} has unknown value {value!r}") from None


def record_from_dict(d: dict) -> PredictionRecord:
    if not isinstance(d, dict):
        raise ValueError("line is not a JSON object")
    missing = [k for k in RECORD_FIELDS if k not in d]
    if missing:
        raise ValueError(f"missing field(s) {', '.join(missing)}")
    extra = sorted(set(d) - set(RECORD_FIELDS) - {"tag"})
    if extra:
        raise ValueError(f"unknown field(s) {', '.join(extra)}")
    if not isinstance(d["id"], str) or not d["id"]:
        raise ValueError("id must be a non-empty string")
    if not isinstance(d["well_formed"], bool):
        raise ValueError("well_formed must be a boolean")
    tag = d.get("tag")
    if tag is not None and not isinstance(tag, str):
        raise ValueError("tag must be a string")
    return PredictionRecord(
        id=d["id"],
        modality=_enum(Modality, d["modality"], "modality"),
        gold=_enum(Label, d["gold"], "gold"),
        predicted=None if d["predicted"] is None else _enum(Label, d["predicted"], "predicted"),
        mode=_enum(ChatMode, d["mode"], "mode"),
        well_formed=d["well_formed"],
        tag=tag,
    )


def emit_predictions(records: Sequence[PredictionRecord], path: str | os.PathLike) -> Path:
    text = "".join(json.dumps(record_to_dict(r), sort_keys=True) + "\n" for r in records)
    atomic_write_bytes(path, text.encode("utf-8"))
    return Path(path)


def ingest_predictions(path: str | os.PathLike) -> list[PredictionRecord]:
    """Parse a JSON-lines prediction file, collecting every bad line before failing."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}", [str(path)]) from exc
    records, problems, first_line = [], [], {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = record_from_dict(json.loads(line))
        except (json.JSONDecodeError, ValueError) as exc:
            problems.append(f"line {lineno}: {exc}")
            continue
        if rec.id in first_line:
            problems.append(f"line {lineno}: duplicate id {rec.id!r} (first seen on line {first_line[rec.id]})")
            continue
        first_line[rec.id] = lineno
        records.append(rec)
    if problems:
        raise IngestionError(f"{len(problems)} bad line(s) in {path}:\n  " + "\n  ".join(problems), problems)
    return records
