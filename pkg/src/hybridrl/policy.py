"""Reference autoregressive policy: a single-layer tanh RNN over a tiny vocabulary.

    h_t      = tanh(W_x x + W_h h_{t-1} + W_e E[o_{t-1}] + b)
    logits_t = W_o h_t

``o_0`` is the end-of-sequence token, which doubles as the start symbol.
Everything runs in float64 so finite-difference checks have headroom.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from hybridrl.errors import ConfigError, InvalidInputError
from hybridrl.template import DEFAULT_TEMPLATE, ChatMode, TemplateConfig

DEFAULT_FILLERS = ("hmm", "wait", "real", "fake", "so", ".")
BLOCKS = ("W_x", "W_h", "W_e", "E", "b", "W_o")


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    eos: str

    def __post_init__(self):
        if len(self.tokens) < 10:
            raise ConfigError("vocabulary needs at least 10 tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("vocabulary tokens must be unique")
        if self.tokens.count(self.eos) != 1:
            raise ConfigError("end-of-sequence token must appear exactly once")
        if any(not t or t != t.strip() or any(c.isspace() for c in t) for t in self.tokens):
            raise ConfigError("tokens must be non-empty and whitespace-free")

    @classmethod
    def default(cls, cfg: TemplateConfig = DEFAULT_TEMPLATE, fillers: Sequence[str] = DEFAULT_FILLERS) -> Vocab:
        markers = (cfg.think_open, cfg.think_close, cfg.answer_open, cfg.answer_close)
        return cls(tokens=(cfg.turn_close, *markers, "A", "B", *fillers), eos=cfg.turn_close)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def eos_id(self) -> int:
        return self.tokens.index(self.eos)

    def index(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise InvalidInputError(f"token {token!r} is not in the vocabulary") from None

    def decode(self, ids: Sequence[int]) -> str:
        """Space-joined text; the end-of-sequence marker attaches without a space."""
        out = ""
        for i in ids:
            tok = self.tokens[int(i)]
            if tok == self.eos or not out:
                out += tok
            else:
                out += " " + tok
        return out

    def encode(self, text: str) -> list[int]:
        specials = sorted((t for t in self.tokens if not t.isalnum()), key=len, reverse=True)
        pattern = "(" + "|".join(re.escape(t) for t in specials) + ")"
        ids: list[int] = []
        for i, piece in enumerate(re.split(pattern, text)):
            if i % 2:
                ids.append(self.index(piece))
            else:
                ids.extend(self.index(w) for w in piece.split())
        return ids


@dataclass
class PolicyParams:
    W_x: np.ndarray  # (hidden, input_dim)
    W_h: np.ndarray  # (hidden, hidden)
    W_e: np.ndarray  # (hidden, embed_dim)
    E: np.ndarray  # (vocab, embed_dim)
    b: np.ndarray  # (hidden,)
    W_o: np.ndarray  # (vocab, hidden)

    def __post_init__(self):
        for name in BLOCKS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        H, D = self.W_x.shape
        V, M = self.E.shape
        expected = {"W_h": (H, H), "W_e": (H, M), "b": (H,), "W_o": (V, H)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ConfigError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def input_dim(self) -> int:
        return self.W_x.shape[1]

    @property
    def hidden(self) -> int:
        return self.W_x.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.E.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.E.shape[0]

    def blocks(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in BLOCKS}

    def copy(self) -> PolicyParams:
        return PolicyParams(**{k: v.copy() for k, v in self.blocks().items()})

    def zeros_like(self) -> PolicyParams:
        return PolicyParams(**{k: np.zeros_like(v) for k, v in self.blocks().items()})

    def to_vector(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.blocks().values()])

    def with_vector(self, vec: np.ndarray) -> PolicyParams:
        if len(vec) != sum(v.size for v in self.blocks().values()):
            raise InvalidInputError("parameter vector has the wrong length")
        out, offset = {}, 0
        for name, v in self.blocks().items():
            out[name] = np.asarray(vec[offset : offset + v.size], dtype=np.float64).reshape(v.shape).copy()
            offset += v.size
        return PolicyParams(**out)

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.blocks().values())

    def equals(self, other: PolicyParams) -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.blocks().values(), other.blocks().values()))


def init_params(
    seed: int, input_dim: int, hidden: int = 16, embed_dim: int = 8, vocab_size: int = 13, scale: float = 0.1
) -> PolicyParams:
    rng = np.random.default_rng(seed)

    def u(*shape):
        return rng.uniform(-scale, scale, size=shape)

    return PolicyParams(
        W_x=u(hidden, input_dim),
        W_h=u(hidden, hidden),
        W_e=u(hidden, embed_dim),
        E=u(vocab_size, embed_dim),
        b=u(hidden),
        W_o=u(vocab_size, hidden),
    )


def encode_prompt(features: np.ndarray, mode: ChatMode) -> np.ndarray:
    """Append the mode indicator (1 = /think, 0 = /no_think) to the task features."""
    return np.append(np.asarray(features, dtype=np.float64), 1.0 if mode is ChatMode.THINKING else 0.0)


@dataclass
class Trajectory:
    prompt_id: str
    mode: ChatMode
    tokens: list[int]
    token_logprobs: np.ndarray
    seed: int | None = None
    length: int = field(init=False)

    def __post_init__(self):
        self.token_logprobs = np.asarray(self.token_logprobs, dtype=np.float64)
        if len(self.token_logprobs) != len(self.tokens):
            raise InvalidInputError("token_logprobs must align with tokens")
        self.length = len(self.tokens)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_features(params: PolicyParams, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != params.input_dim:
        raise ConfigError(f"features have dimension {X.shape[1]}, policy expects {params.input_dim}")
    return X


def _pad(params: PolicyParams, token_lists: Sequence[Sequence[int]], eos_id: int):
    B = len(token_lists)
    T = max((len(t) for t in token_lists), default=0)
    toks = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T), dtype=bool)
    for i, seq in enumerate(token_lists):
        seq = np.asarray(seq, dtype=np.int64)
        if seq.size and (seq.min() < 0 or seq.max() >= params.vocab_size):
            raise InvalidInputError(f"token index out of range in sequence {i}")
        toks[i, : len(seq)] = seq
        mask[i, : len(seq)] = True
    prev = np.full((B, T), eos_id, dtype=np.int64)
    if T > 1:
        prev[:, 1:] = toks[:, :-1]
    return toks, mask, prev


def _forward(params: PolicyParams, X: np.ndarray, prev: np.ndarray):
    B, T = prev.shape
    hs = np.zeros((T + 1, B, params.hidden))
    logp = np.zeros((T, B, params.vocab_size))
    static = X @ params.W_x.T + params.b
    for t in range(T):
        a = static + hs[t] @ params.W_h.T + params.E[prev[:, t]] @ params.W_e.T
        hs[t + 1] = np.tanh(a)
        logp[t] = _log_softmax(hs[t + 1] @ params.W_o.T)
    return hs, logp


def batch_log_probs(
    params: PolicyParams, X: np.ndarray, token_lists: Sequence[Sequence[int]], eos_id: int = 0
) -> list[np.ndarray]:
    """Teacher-forced per-token log-probabilities for a batch of sequences."""
    X = _check_features(params, X)
    toks, mask, prev = _pad(params, token_lists, eos_id)
    _, logp = _forward(params, X, prev)
    B, T = toks.shape
    sel = logp[np.arange(T)[:, None], np.arange(B)[None, :], toks.T].T if T else np.zeros((B, 0))
    return [sel[i, : len(seq)].copy() for i, seq in enumerate(token_lists)]


def weighted_logprob_grad(
    params: PolicyParams,
    X: np.ndarray,
    token_lists: Sequence[Sequence[int]],
    weights: Sequence[np.ndarray],
    eos_id: int = 0,
) -> tuple[float, PolicyParams]:
    """Value and exact gradient of ``sum_{i,t} weights[i][t] * log pi(o_{i,t})``.

    Reverse-mode through time over the padded batch; padded positions carry
    zero weight and therefore contribute nothing.
    """
    X = _check_features(params, X)
    toks, mask, prev = _pad(params, token_lists, eos_id)
    B, T = toks.shape
    c = np.zeros((B, T))
    for i, w in enumerate(weights):
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (len(token_lists[i]),):
            raise InvalidInputError(f"weights for sequence {i} do not match its length")
        c[i, : len(w)] = w
    grad = params.zeros_like()
    if T == 0:
        return 0.0, grad
    hs, logp = _forward(params, X, prev)
    rows = np.arange(B)
    value = 0.0
    dh_next = np.zeros((B, params.hidden))
    for t in range(T - 1, -1, -1):
        value += float(c[:, t] @ logp[t, rows, toks[:, t]])
        dlogits = -np.exp(logp[t]) * c[:, t, None]
        dlogits[rows, toks[:, t]] += c[:, t]
        h = hs[t + 1]
        grad.W_o += dlogits.T @ h
        dh = dlogits @ params.W_o + dh_next
        da = dh * (1.0 - h * h)
        grad.W_x += da.T @ X
        grad.W_h += da.T @ hs[t]
        grad.W_e += da.T @ params.E[prev[:, t]]
        np.add.at(grad.E, prev[:, t], da @ params.W_e)
        grad.b += da.sum(axis=0)
        dh_next = da @ params.W_h
    return value, grad


def sample_batch(
    params: PolicyParams, X: np.ndarray, seeds: Sequence[int], max_len: int, eos_id: int = 0
) -> list[tuple[list[int], np.ndarray]]:
    """Sample one sequence per row of ``X``, each from its own seeded stream."""
    if max_len < 1:
        raise InvalidInputError("max_len must be at least 1")
    X = _check_features(params, X)
    if len(seeds) != X.shape[0]:
        raise InvalidInputError("need one seed per feature row")
    B = X.shape[0]
    gens = [np.random.default_rng(s) for s in seeds]
    static = X @ params.W_x.T + params.b
    h = np.zeros((B, params.hidden))
    prev = np.full(B, eos_id, dtype=np.int64)
    alive = np.ones(B, dtype=bool)
    tokens = [[] for _ in range(B)]
    logps = [[] for _ in range(B)]
    for _ in range(max_len):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        h_new = np.tanh(static[idx] + h[idx] @ params.W_h.T + params.E[prev[idx]] @ params.W_e.T)
        h[idx] = h_new
        lp = _log_softmax(h_new @ params.W_o.T)
        cdf = np.cumsum(np.exp(lp), axis=1)
        u = np.array([gens[i].random() for i in idx]) * cdf[:, -1]
        choice = np.minimum((cdf <= u[:, None]).sum(axis=1), params.vocab_size - 1)
        for k, i in enumerate(idx):
            tok = int(choice[k])
            tokens[i].append(tok)
            logps[i].append(lp[k, tok])
        prev[idx] = choice
        alive[idx] = choice != eos_id
    return [(tokens[i], np.array(logps[i], dtype=np.float64)) for i in range(B)]


def sample(
    params: PolicyParams,
    prompt_features: np.ndarray,
    rng_seed: int,
    max_len: int,
    *,
    eos_id: int = 0,
    prompt_id: str = "",
    mode: ChatMode = ChatMode.THINKING,
) -> Trajectory:
    (toks, lps), = sample_batch(params, np.asarray(prompt_features)[None, :], [rng_seed], max_len, eos_id)
    return Trajectory(prompt_id=prompt_id, mode=mode, tokens=toks, token_logprobs=lps, seed=rng_seed)


def log_prob(params: PolicyParams, prompt_features: np.ndarray, tokens: Sequence[int], eos_id: int = 0) -> np.ndarray:
    return batch_log_probs(params, np.asarray(prompt_features)[None, :], [tokens], eos_id)[0]


def grad_log_prob(
    params: PolicyParams, prompt_features: np.ndarray, tokens: Sequence[int], eos_id: int = 0
) -> PolicyParams:
    _, grad = weighted_logprob_grad(
        params, np.asarray(prompt_features)[None, :], [tokens], [np.ones(len(tokens))], eos_id
    )
    return grad


def sft_loss_and_grad(
    params: PolicyParams, batch: Sequence[tuple[np.ndarray, Sequence[int]]], eos_id: int = 0
) -> tuple[float, PolicyParams]:
    """Mean summed NLL of the targets and its gradient (prompt is features only)."""
    if not batch:
        raise InvalidInputError("SFT batch must be non-empty")
    X = np.stack([np.asarray(f, dtype=np.float64) for f, _ in batch])
    targets = [list(t) for _, t in batch]
    scale = -1.0 / len(batch)
    value, grad = weighted_logprob_grad(params, X, targets, [np.full(len(t), scale) for t in targets], eos_id)
    return value, grad


# -- checkpoints -------------------------------------------------------------


def params_to_dict(params: PolicyParams) -> dict:
    return {name: v.tolist() for name, v in params.blocks().items()}


def params_from_dict(d: dict) -> PolicyParams:
    return PolicyParams(**{name: np.array(d[name], dtype=np.float64) for name in BLOCKS})


def save_checkpoint(path: str | os.PathLike, params: PolicyParams, vocab: Vocab, meta: dict | None = None) -> str:
    """Write a JSON checkpoint atomically and return its sha256 digest.

    Floats go through ``repr`` so reloading is bit-exact.
    """
    doc = {
        "format": "hybridrl-checkpoint/1",
        "dims": {
            "input_dim": params.input_dim,
            "hidden": params.hidden,
            "embed_dim": params.embed_dim,
            "vocab_size": params.vocab_size,
        },
        "vocab": {"tokens": list(vocab.tokens), "eos": vocab.eos},
        "meta": meta or {},
        "params": params_to_dict(params),
    }
    payload = json.dumps(doc, sort_keys=True).encode("utf-8")
    atomic_write_bytes(path, payload)
    return hashlib.sha256(payload).hexdigest()


def load_checkpoint(path: str | os.PathLike) -> tuple[PolicyParams, Vocab, dict]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    params = params_from_dict(doc["params"])
    vocab = Vocab(tokens=tuple(doc["vocab"]["tokens"]), eos=doc["vocab"]["eos"])
    if len(vocab) != params.vocab_size:
        raise ConfigError("checkpoint vocabulary does not match parameter shapes")
    return params, vocab, doc.get("meta", {})


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
