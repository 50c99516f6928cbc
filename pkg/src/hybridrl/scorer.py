"""Thinking-quality scorers and the stub scoring server.

Two interchangeable scorers sit behind ``score(text) -> ThinkingScore``: a
deterministic local heuristic (:class:`StubScorer`) and an HTTP client
(:class:`RemoteScorer`) speaking ``{"text": ...} -> {"score": ...}``.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import re
import threading
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Protocol, Sequence

from hybridrl.errors import ConfigError, ScorerError
from hybridrl.template import DEFAULT_TEMPLATE, TemplateConfig, count_tokens

log = logging.getLogger(__name__)


class ScoreSource(str, enum.Enum):
    STUB = "stub"
    REMOTE = "remote"
    FALLBACK_ZERO = "fallback_zero"


@dataclass(frozen=True)
class ThinkingScore:
    value: float
    source: ScoreSource

    def __post_init__(self):
        if not (0.0 <= self.value <= 1.0):
            raise ValueError(f"thinking score {self.value} outside [0, 1]")


class Scorer(Protocol):
    calls: int

    def score(self, response_text: str) -> ThinkingScore: ...

    def score_many(self, texts: Sequence[str]) -> list[ThinkingScore]: ...


@dataclass(frozen=True)
class StubConfig:
    w_has_think: float = 0.2
    w_sentences: float = 0.2
    w_length: float = 0.3
    w_options: float = 0.3
    sentence_target: int = 5
    target_len: int = 24
    option_words: tuple[str, ...] = ("real", "fake")


def _think_content(text: str, cfg: TemplateConfig) -> str:
    m = re.search(re.escape(cfg.think_open) + "(.*?)" + re.escape(cfg.think_close), text, re.DOTALL)
    return m.group(1) if m else ""


def stub_score_value(text: str, stub: StubConfig = StubConfig(), cfg: TemplateConfig = DEFAULT_TEMPLATE) -> float:
    thought = _think_content(text, cfg).strip()
    if not thought:
        return 0.0
    sentences = {" ".join(s.split()).casefold() for s in re.split(r"[.!?]+", thought)}
    sentences.discard("")
    words = {w.casefold() for w in re.findall(r"\w+", thought)}
    mentions_all = all(opt.casefold() in words for opt in stub.option_words)
    value = (
        stub.w_has_think
        + stub.w_sentences * min(1.0, len(sentences) / stub.sentence_target)
        + stub.w_length * min(1.0, count_tokens(thought, cfg) / stub.target_len)
        + stub.w_options * float(mentions_all)
    )
    return min(1.0, max(0.0, value))


class StubScorer:
    def __init__(self, stub: StubConfig = StubConfig(), cfg: TemplateConfig = DEFAULT_TEMPLATE):
        self.stub = stub
        self.cfg = cfg
        self.calls = 0

    def score(self, response_text: str) -> ThinkingScore:
        self.calls += 1
        return ThinkingScore(stub_score_value(response_text, self.stub, self.cfg), ScoreSource.STUB)

    def score_many(self, texts: Sequence[str]) -> list[ThinkingScore]:
        return [self.score(t) for t in texts]


class RemoteScorer:
    """HTTP client for an external scorer.

    ``strict=False`` turns every transport, timeout or body failure into
    a ``FALLBACK_ZERO`` score plus a logged warning.
    """

    def __init__(self, endpoint: str, timeout: float = 5.0, strict: bool = False, max_in_flight: int = 4):
        if max_in_flight < 1:
            raise ConfigError("max_in_flight must be at least 1")
        self.endpoint = endpoint
        self.timeout = timeout
        self.strict = strict
        self.max_in_flight = max_in_flight
        self.calls = 0
        self.fallbacks = 0
        self._lock = threading.Lock()

    def _request(self, text: str) -> float:
        body = json.dumps({"text": text}).encode("utf-8")
        req = urllib.request.Request(
            self.endpoint, data=body, headers={"Content-Type": "application/json"}, method="POST"
        )
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
        value = payload.get("score") if isinstance(payload, dict) else None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"malformed scorer body: {payload!r}")
        value = float(value)
        if not (math.isfinite(value) and 0.0 <= value <= 1.0):
            raise ValueError(f"scorer returned out-of-range score {value}")
        return value

    def score(self, response_text: str) -> ThinkingScore:
        with self._lock:
            self.calls += 1
        try:
            return ThinkingScore(self._request(response_text), ScoreSource.REMOTE)
        except (OSError, urllib.error.URLError, ValueError, TimeoutError) as exc:
            if self.strict:
                raise ScorerError(f"remote scorer at {self.endpoint} failed: {exc}") from exc
            with self._lock:
                self.fallbacks += 1
            log.warning("remote scorer failed (%s); using zero score", exc)
            return ThinkingScore(0.0, ScoreSource.FALLBACK_ZERO)

    def score_many(self, texts: Sequence[str]) -> list[ThinkingScore]:
        # map() keeps input order, so results line up with trajectories
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            return list(pool.map(self.score, texts))


@dataclass(frozen=True)
class ScorerSettings:
    kind: str = "stub"
    endpoint: str = "http://127.0.0.1:8765/score"
    timeout: float = 5.0
    strict: bool = False
    max_in_flight: int = 4
    stub: StubConfig = StubConfig()

    def __post_init__(self):
        if self.kind not in ("stub", "remote"):
            raise ConfigError(f"unknown scorer kind {self.kind!r}")
        if self.timeout <= 0:
            raise ConfigError("scorer timeout must be positive")


def build_scorer(settings: ScorerSettings, cfg: TemplateConfig = DEFAULT_TEMPLATE) -> Scorer:
    if settings.kind == "stub":
        return StubScorer(settings.stub, cfg)
    return RemoteScorer(settings.endpoint, settings.timeout, settings.strict, settings.max_in_flight)


# -- stub server ---------------------------------------------------------------


def _make_handler(stub: StubScorer):
    class Handler(BaseHTTPRequestHandler):
        server_version = "hybridrl-stub/1"

        def _send(self, status: int, payload: dict) -> None:
            body = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_POST(self):  # noqa: N802
            try:
                length = int(self.headers.get("Content-Length", "0"))
                doc = json.loads(self.rfile.read(length).decode("utf-8"))
            except (ValueError, UnicodeDecodeError):
                self._send(400, {"error": "body must be a JSON object"})
                return
            if not isinstance(doc, dict) or not isinstance(doc.get("text"), str):
                self._send(400, {"error": 'expected {"text": string}'})
                return
            self._send(200, {"score": stub.score(doc["text"]).value})

        def log_message(self, fmt, *args):
            log.debug("stub server: " + fmt, *args)

    return Handler


def make_stub_server(host: str = "127.0.0.1", port: int = 8765, stub: StubScorer | None = None) -> ThreadingHTTPServer:
    """Bind the stub scoring server; raises OSError if the port is taken."""
    return ThreadingHTTPServer((host, port), _make_handler(stub or StubScorer()))


def serve_in_thread(server: ThreadingHTTPServer) -> threading.Thread:
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return thread
