"""Hybrid thinking chat template: rendering, parsing and mode checks.

Thinking turns end their user message with ``/think``; non-thinking turns with
``/no_think`` and answer with an empty think block::

    <|im_start|>user
    {query} /think<|im_end|>
    <|im_start|>assistant
    <think>
    {thinking_content}
    </think>

    <answer>
    {response}
    </answer><|im_end|>
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, fields
from functools import lru_cache
from importlib import resources

from hybridrl.errors import ConfigError, InvalidInputError, ModeMismatchError


class ChatMode(str, enum.Enum):
    THINKING = "think"
    NON_THINKING = "no_think"


class Compliance(str, enum.Enum):
    COMPLIANT = "compliant"
    SKIPPED_THINKING = "skipped_thinking"
    UNEXPECTED_THINKING = "unexpected_thinking"
    MALFORMED = "malformed"


@dataclass(frozen=True)
class TemplateConfig:
    think_open: str = "<think>"
    think_close: str = "</think>"
    answer_open: str = "<answer>"
    answer_close: str = "</answer>"
    turn_open: str = "<|im_start|>"
    turn_close: str = "<|im_end|>"
    mode_suffix_think: str = "/think"
    mode_suffix_nothink: str = "/no_think"

    def __post_init__(self):
        values = [getattr(self, f.name) for f in fields(self)]
        if any(not isinstance(v, str) or not v for v in values):
            raise ConfigError("template markers must be non-empty strings")
        if len(set(values)) != len(values):
            raise ConfigError("template markers must be pairwise distinct")

    @property
    def block_markers(self) -> tuple[str, str, str, str]:
        return (self.think_open, self.think_close, self.answer_open, self.answer_close)

    def suffix(self, mode: ChatMode) -> str:
        return self.mode_suffix_think if mode is ChatMode.THINKING else self.mode_suffix_nothink


DEFAULT_TEMPLATE = TemplateConfig()


@dataclass(frozen=True)
class ParsedResponse:
    thinking_content: str
    answer_content: str
    well_formed: bool
    raw_length: int


@dataclass(frozen=True)
class CanonicalPrompts:
    system: str
    user_image: str
    user_video: str
    answer_options: tuple[tuple[str, str], ...] = (("A", "real"), ("B", "fake"))

    def user(self, modality: str) -> str:
        return self.user_video if modality.lower() == "video" else self.user_image


@lru_cache(maxsize=1)
def canonical_prompts() -> CanonicalPrompts:
    assets = resources.files("hybridrl") / "assets"

    def read(name: str) -> str:
        return (assets / name).read_text(encoding="utf-8").rstrip("\n")

    return CanonicalPrompts(
        system=read("system_prompt.txt"),
        user_image=read("user_prompt_image.txt"),
        user_video=read("user_prompt_video.txt"),
    )


def render_prompt(query: str, mode: ChatMode, cfg: TemplateConfig = DEFAULT_TEMPLATE) -> str:
    if not query:
        raise InvalidInputError("query must be non-empty")
    return (
        f"{cfg.turn_open}user\n{query} {cfg.suffix(mode)}{cfg.turn_close}\n"
        f"{cfg.turn_open}assistant\n"
    )


def render_response(
    thinking: str, answer: str, mode: ChatMode, cfg: TemplateConfig = DEFAULT_TEMPLATE
) -> str:
    if mode is ChatMode.NON_THINKING and thinking:
        raise ModeMismatchError("non-thinking responses must have empty thinking content")
    return (
        f"{cfg.think_open}\n{thinking}\n{cfg.think_close}\n\n"
        f"{cfg.answer_open}\n{answer}\n{cfg.answer_close}{cfg.turn_close}"
    )


@lru_cache(maxsize=32)
def _grammar(cfg: TemplateConfig) -> re.Pattern:
    e = re.escape
    return re.compile(
        rf"\s*{e(cfg.think_open)}(?P<think>.*?){e(cfg.think_close)}"
        rf"\s*{e(cfg.answer_open)}(?P<answer>.*?){e(cfg.answer_close)}"
        rf"\s*(?:{e(cfg.turn_close)}\s*)?",
        re.DOTALL,
    )


@lru_cache(maxsize=32)
def _marker_splitter(cfg: TemplateConfig) -> re.Pattern:
    markers = sorted(
        (getattr(cfg, f.name) for f in fields(cfg) if not f.name.startswith("mode_suffix")),
        key=len,
        reverse=True,
    )
    return re.compile("(" + "|".join(re.escape(m) for m in markers) + ")")


def count_tokens(text: str, cfg: TemplateConfig = DEFAULT_TEMPLATE) -> int:
    """Abstract token count: each marker is one token, other text splits on whitespace."""
    n = 0
    for i, piece in enumerate(_marker_splitter(cfg).split(text)):
        n += 1 if i % 2 else len(piece.split())
    return n


def _strip_framing(content: str) -> str:
    # the renderer wraps block contents in exactly one newline on each side
    if content.startswith("\n"):
        content = content[1:]
    if content.endswith("\n"):
        content = content[:-1]
    return content


def parse_response(
    text: str, cfg: TemplateConfig = DEFAULT_TEMPLATE, n_tokens: int | None = None
) -> ParsedResponse:
    """Parse an assistant response; malformed text yields ``well_formed=False``.

    A response is well formed when it holds exactly one think block followed by
    exactly one answer block, with only whitespace (and an optional trailing
    turn-close marker) outside them. Block contents may not contain any block
    marker, which rules out nesting, repeated blocks and reversed order.
    """
    raw_length = count_tokens(text, cfg) if n_tokens is None else n_tokens
    m = _grammar(cfg).fullmatch(text)
    if m is not None:
        think, answer = m.group("think"), m.group("answer")
        if not any(mk in think or mk in answer for mk in cfg.block_markers):
            return ParsedResponse(_strip_framing(think), _strip_framing(answer), True, raw_length)
    return ParsedResponse("", "", False, raw_length)


def extract_answer_letter(resp: ParsedResponse, options: tuple[str, ...] = ("A", "B")) -> str | None:
    if not resp.well_formed:
        return None
    candidate = resp.answer_content.strip().casefold()
    for letter in options:
        if candidate == letter.casefold():
            return letter
    return None


def mode_compliance(resp: ParsedResponse, mode: ChatMode) -> Compliance:
    if not resp.well_formed:
        return Compliance.MALFORMED
    has_thought = bool(resp.thinking_content.strip())
    if mode is ChatMode.THINKING and not has_thought:
        return Compliance.SKIPPED_THINKING
    if mode is ChatMode.NON_THINKING and has_thought:
        return Compliance.UNEXPECTED_THINKING
    return Compliance.COMPLIANT
