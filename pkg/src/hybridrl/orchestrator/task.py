"""Linear-threshold toy task standing in for real/fake detection.

Each prompt carries a feature vector ``x`` on a sphere of fixed radius; the
gold letter is ``B`` (fake) iff ``w* . x > 0``. Classes are balanced by
construction: candidates whose class is already full are discarded and redrawn.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hybridrl.dapo import PromptInstance
from hybridrl.errors import InvalidInputError
from hybridrl.template import canonical_prompts

MODALITIES = ("image", "video")


@dataclass(frozen=True)
class ToyTask:
    hidden_weights: np.ndarray
    prompts: tuple[PromptInstance, ...]
    heldout: tuple[PromptInstance, ...] = ()

    def label(self, features: np.ndarray) -> str:
        return "B" if float(self.hidden_weights @ features) > 0 else "A"

    @property
    def feature_dim(self) -> int:
        return self.hidden_weights.size


def draw_features(rng: np.random.Generator, n: int, dim: int, radius: float = 1.0) -> np.ndarray:
    """``n`` points drawn uniformly on the sphere of the given radius."""
    z = rng.normal(size=(n, dim))
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return radius * z / np.where(norms > 0, norms, 1.0)


def _balanced_split(rng, w, n, dim, radius, prefix):
    want = {"A": n // 2, "B": n - n // 2}
    got: dict[str, list[np.ndarray]] = {"A": [], "B": []}
    while len(got["A"]) < want["A"] or len(got["B"]) < want["B"]:
        for x in draw_features(rng, max(8, n), dim, radius):
            score = float(w @ x)
            if score == 0.0:
                continue
            letter = "B" if score > 0 else "A"
            if len(got[letter]) < want[letter]:
                got[letter].append(x)
    # interleave the classes in a seeded order so prefixes stay roughly balanced
    xs = got["A"] + got["B"]
    order = rng.permutation(len(xs))
    prompts = canonical_prompts()
    out = []
    for i, k in enumerate(order):
        x = xs[k]
        modality = MODALITIES[i % 2]
        out.append(
            PromptInstance(
                id=f"{prefix}-{i:04d}",
                query=prompts.user(modality),
                features=x,
                gold="B" if float(w @ x) > 0 else "A",
                modality=modality,
            )
        )
    return tuple(out)


def make_toy_task(seed: int, feature_dim: int, n_prompts: int, n_heldout: int = 0, radius: float = 1.0) -> ToyTask:
    if n_prompts < 4:
        raise InvalidInputError("the toy task needs at least 4 prompts")
    if n_heldout < 0 or feature_dim < 1:
        raise InvalidInputError("need feature_dim >= 1 and n_heldout >= 0")
    rng = np.random.default_rng(seed)
    w = rng.normal(size=feature_dim)
    train = _balanced_split(rng, w, n_prompts, feature_dim, radius, "train")
    held = _balanced_split(rng, w, n_heldout, feature_dim, radius, "heldout") if n_heldout else ()
    return ToyTask(hidden_weights=w, prompts=train, heldout=held)
