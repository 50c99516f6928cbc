"""Central-difference checks of the analytic policy gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from hybridrl.dapo import ClipConfig, PromptInstance, RolloutGroup, dapo_objective_and_grad
from hybridrl.errors import InvalidInputError
from hybridrl.policy import PolicyParams, Trajectory, batch_log_probs, grad_log_prob, init_params, sft_loss_and_grad
from hybridrl.rewards import RewardBreakdown
from hybridrl.template import ChatMode

BLOCKS = ("grad_log_prob", "sft", "dapo")
DEFAULT_TOL = 1e-4


@dataclass(frozen=True)
class GradcheckReport:
    errors: dict[str, float]  # block -> max relative error over trials
    trials: int
    tol: float

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.errors.values())


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest entrywise gap scaled by the largest gradient magnitude."""
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def numeric_grad(f: Callable[[PolicyParams], float], params: PolicyParams, coords: np.ndarray, h: float) -> np.ndarray:
    base = params.to_vector()
    out = np.empty(coords.size)
    for k, i in enumerate(coords):
        v = base.copy()
        v[i] += h
        up = f(params.with_vector(v))
        v[i] -= 2 * h
        down = f(params.with_vector(v))
        out[k] = (up - down) / (2 * h)
    return out


def _coords(rng: np.random.Generator, n: int, max_coords: int | None) -> np.ndarray:
    if max_coords is None or max_coords >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=max_coords, replace=False))


def _random_tokens(rng, vocab_size, n, lo=2, hi=9):
    return [list(rng.integers(1, vocab_size, size=int(rng.integers(lo, hi)))) + [0] for _ in range(n)]


def _dapo_groups(rng, params: PolicyParams, n_groups=2, G=4) -> list[RolloutGroup]:
    # old log-probs come from a perturbed copy so ratios spread across both clip edges
    old = params.with_vector(params.to_vector() + rng.normal(scale=0.3, size=params.to_vector().size))
    groups = []
    for g in range(n_groups):
        x = rng.normal(size=params.input_dim - 1)
        prompt = PromptInstance(f"p{g}", "", x, "A", ChatMode.THINKING)
        toks = _random_tokens(rng, params.vocab_size, G)
        X = np.repeat(prompt.policy_input[None, :], G, axis=0)
        lps = batch_log_probs(old, X, toks)
        trajs = [Trajectory(prompt.id, prompt.mode, t, lp) for t, lp in zip(toks, lps)]
        rewards = rng.normal(size=G)
        crumbs = [RewardBreakdown(0.0, 0.0, float(i % 2), 0.0, 0.0, float(r)) for i, r in enumerate(rewards)]
        groups.append(RolloutGroup(prompt, trajs, list(lps), rewards, crumbs))
    return groups


def run_gradcheck(
    trials: int = 3,
    seed: int = 0,
    *,
    input_dim: int = 9,
    hidden: int = 8,
    embed_dim: int = 4,
    vocab_size: int = 13,
    h: float = 1e-5,
    tol: float = DEFAULT_TOL,
    max_coords: int | None = None,
) -> GradcheckReport:
    """Compare analytic and central-difference gradients on ``trials`` random parameter draws."""
    if trials < 1:
        raise InvalidInputError("gradcheck needs at least one trial")
    rng = np.random.default_rng(seed)
    errors = {name: 0.0 for name in BLOCKS}
    clip = ClipConfig()
    for trial in range(trials):
        params = init_params(int(rng.integers(2**31)), input_dim, hidden, embed_dim, vocab_size, scale=0.5)
        coords = _coords(rng, params.to_vector().size, max_coords)

        x = rng.normal(size=input_dim)
        toks = _random_tokens(rng, vocab_size, 1)[0]
        g = grad_log_prob(params, x, toks).to_vector()[coords]
        n = numeric_grad(lambda p: float(batch_log_probs(p, x[None, :], [toks])[0].sum()), params, coords, h)
        errors["grad_log_prob"] = max(errors["grad_log_prob"], relative_error(g, n))

        batch = [(rng.normal(size=input_dim), t) for t in _random_tokens(rng, vocab_size, 4)]
        g = sft_loss_and_grad(params, batch)[1].to_vector()[coords]
        n = numeric_grad(lambda p: sft_loss_and_grad(p, batch)[0], params, coords, h)
        errors["sft"] = max(errors["sft"], relative_error(g, n))

        groups = _dapo_groups(rng, params)
        g = dapo_objective_and_grad(groups, params, clip)[1].to_vector()[coords]
        n = numeric_grad(lambda p: dapo_objective_and_grad(groups, p, clip)[0], params, coords, h)
        errors["dapo"] = max(errors["dapo"], relative_error(g, n))
    return GradcheckReport(errors, trials, tol)
