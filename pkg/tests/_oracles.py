"""Independent reference computations shared by the unit and acceptance tests."""

import numpy as np

from hybridrl.evalkit import Label, Modality, PredictionRecord
from hybridrl.template import ChatMode


def synthetic_records(n: int, seed: int, p_missing: float = 0.1) -> list[PredictionRecord]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        modality = Modality.IMAGE if rng.random() < 0.5 else Modality.VIDEO
        gold = Label.REAL if rng.random() < 0.5 else Label.FAKE
        u = rng.random()
        if u < p_missing:
            pred = None
        elif u < p_missing + 0.6:
            pred = gold
        else:
            pred = Label.FAKE if gold is Label.REAL else Label.REAL
        out.append(PredictionRecord(f"r{i}", modality, gold, pred, ChatMode.THINKING, pred is not None))
    return out


def brute_force_metrics(records) -> dict:
    """Confusion tensor indexed [modality, gold, predicted] with predicted 2 meaning no answer."""
    cube = np.zeros((2, 2, 3), dtype=np.int64)
    mi = {Modality.IMAGE: 0, Modality.VIDEO: 1}
    li = {Label.REAL: 0, Label.FAKE: 1, None: 2}
    for r in records:
        cube[mi[r.modality], li[r.gold], li[r.predicted]] += 1
    out = {}
    for m, mname in enumerate(("image", "video")):
        for g, gname in enumerate(("real", "fake")):
            total = cube[m, g].sum()
            out[f"acc_{mname}_{gname}"] = 100.0 * cube[m, g, g] / total if total else None
    flat = cube.sum(axis=0)
    out["overall_acc"] = 100.0 * (flat[0, 0] + flat[1, 1]) / flat.sum()
    tp = flat[1, 1]
    fn = flat[1, 0] + flat[1, 2]
    fp = flat[0, 1]
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    out["f1"] = 100.0 * 2 * precision * recall / (precision + recall) if precision + recall else (0.0 if tp + fp + fn else None)
    return out


def soft_overlong_reference(L_gen: int, L_max: int, L_cache: int) -> float:
    if L_gen <= L_max - L_cache:
        return 0.0
    if L_gen <= L_max:
        return ((L_max - L_cache) - L_gen) / L_cache
    return -1.0
