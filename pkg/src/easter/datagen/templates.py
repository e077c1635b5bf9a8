"""Pattern templates for synthetic transcripts.

A template pattern is a small regular-expression subset, so every pattern
is also a valid Python regex describing exactly the strings it can emit:

    literal characters      abc
    escapes                 \\d (any digit), \\. \\$ \\( ... (literal)
    character classes       [A-Z] [a-z0-9.-]
    groups / alternation    (St|Ave|Rd)
    repetition              {3}  {2,7}  ?
"""

from __future__ import annotations

import re
import string
from dataclasses import dataclass

import numpy as np

from ..ctc import Vocabulary
from ..errors import ConfigurationError

_SPECIAL = set("[](){}|?\\")


@dataclass(frozen=True)
class PatternTemplate:
    name: str
    pattern: str
    weight: float = 1.0

    def __post_init__(self):
        _parse(self.pattern)
        try:
            re.compile(self.pattern)
        except re.error as exc:
            raise ConfigurationError(f"template {self.name!r}: {exc}") from None

    @property
    def regex(self) -> re.Pattern:
        return re.compile(self.pattern)

    def alphabet(self) -> set[str]:
        return _alphabet(_parse(self.pattern))

    def sample(self, rng: np.random.Generator) -> str:
        return _sample(_parse(self.pattern), rng)


# AST nodes: ("chars", str) | ("seq", [node]) | ("alt", [node]) | ("rep", node, lo, hi)


class _Parser:
    def __init__(self, text: str):
        self.text, self.pos = text, 0

    def error(self, msg):
        return ConfigurationError(f"pattern {self.text!r} at {self.pos}: {msg}")

    def peek(self):
        return self.text[self.pos] if self.pos < len(self.text) else None

    def next(self):
        ch = self.peek()
        if ch is None:
            raise self.error("unexpected end")
        self.pos += 1
        return ch

    def alternation(self):
        options = [self.sequence()]
        while self.peek() == "|":
            self.pos += 1
            options.append(self.sequence())
        return options[0] if len(options) == 1 else ("alt", options)

    def sequence(self):
        items = []
        while self.peek() not in (None, "|", ")"):
            items.append(self.quantified())
        return ("seq", items)

    def quantified(self):
        atom = self.atom()
        ch = self.peek()
        if ch == "?":
            self.pos += 1
            return ("rep", atom, 0, 1)
        if ch == "{":
            self.pos += 1
            end = self.text.find("}", self.pos)
            if end < 0:
                raise self.error("unterminated repetition")
            body = self.text[self.pos:end]
            self.pos = end + 1
            m = re.fullmatch(r"(\d+)(?:,(\d+))?", body)
            if not m:
                raise self.error(f"bad repetition {{{body}}}")
            lo = int(m.group(1))
            hi = int(m.group(2)) if m.group(2) is not None else lo
            if hi < lo:
                raise self.error("repetition upper bound below lower bound")
            return ("rep", atom, lo, hi)
        return atom

    def atom(self):
        ch = self.next()
        if ch == "(":
            node = self.alternation()
            if self.next() != ")":
                raise self.error("expected ')'")
            return node
        if ch == "[":
            return ("chars", self.char_class())
        if ch == "\\":
            esc = self.next()
            if esc == "d":
                return ("chars", string.digits)
            if esc.isalnum():
                raise self.error(f"unsupported escape \\{esc}")
            return ("chars", esc)
        if ch in _SPECIAL:
            raise self.error(f"unexpected {ch!r}")
        if ch in ".*+^$":
            raise self.error(f"{ch!r} must be escaped")
        return ("chars", ch)

    def char_class(self):
        chars = []
        while True:
            ch = self.next()
            if ch == "]":
                break
            if ch == "\\":
                esc = self.next()
                chars.extend(string.digits if esc == "d" else esc)
                continue
            if self.peek() == "-" and self.pos + 1 < len(self.text) and self.text[self.pos + 1] != "]":
                self.pos += 1
                hi = self.next()
                if ord(hi) < ord(ch):
                    raise self.error(f"bad range {ch}-{hi}")
                chars.extend(chr(c) for c in range(ord(ch), ord(hi) + 1))
            else:
                chars.append(ch)
        if not chars:
            raise self.error("empty character class")
        return "".join(dict.fromkeys(chars))


_cache: dict = {}


def _parse(pattern: str):
    node = _cache.get(pattern)
    if node is None:
        p = _Parser(pattern)
        node = p.alternation()
        if p.pos != len(pattern):
            raise p.error("unbalanced ')'")
        _cache[pattern] = node
    return node


def _sample(node, rng) -> str:
    kind = node[0]
    if kind == "chars":
        chars = node[1]
        return chars[int(rng.integers(len(chars)))] if len(chars) > 1 else chars
    if kind == "seq":
        return "".join(_sample(n, rng) for n in node[1])
    if kind == "alt":
        return _sample(node[1][int(rng.integers(len(node[1])))], rng)
    _, child, lo, hi = node
    n = int(rng.integers(lo, hi + 1))
    return "".join(_sample(child, rng) for _ in range(n))


def _alphabet(node) -> set[str]:
    kind = node[0]
    if kind == "chars":
        return set(node[1])
    if kind in ("seq", "alt"):
        return set().union(*(_alphabet(n) for n in node[1])) if node[1] else set()
    return _alphabet(node[1]) if node[3] > 0 else set()


def check_templates(templates, vocab: Vocabulary | None = None) -> None:
    if not templates:
        raise ConfigurationError("no templates configured")
    total = sum(t.weight for t in templates)
    if any(t.weight < 0 for t in templates) or abs(total - 1.0) > 1e-6:
        raise ConfigurationError(f"template weights must be non-negative and sum to 1, got {total}")
    if vocab is not None:
        for t in templates:
            extra = t.alphabet() - set(vocab.chars)
            if extra:
                raise ConfigurationError(f"template {t.name!r} emits characters outside the vocabulary: {sorted(extra)}")


def sample_text(templates, rng: np.random.Generator, vocab: Vocabulary | None = None) -> str:
    """Pick a template by weight and draw a non-empty transcript from it."""
    check_templates(templates, vocab)
    weights = np.array([t.weight for t in templates], dtype=np.float64)
    for _ in range(100):
        t = templates[int(rng.choice(len(templates), p=weights / weights.sum()))]
        text = t.sample(rng)
        if text:
            return text
    raise ConfigurationError("templates keep producing empty text")


DEFAULT_TEMPLATES = (
    PatternTemplate("name", r"[A-Z][a-z]{2,7} [A-Z][a-z]{3,8}", 0.25),
    PatternTemplate("email", r"[a-z]{3,7}(\.[a-z]{2,5})?@(gmail|yahoo|outlook|example)\.(com|org|net)", 0.2),
    PatternTemplate("dollar", r"\$[1-9]\d{0,2}(,\d{3})?\.\d{2}", 0.2),
    PatternTemplate(
        "street",
        r"[1-9]\d{1,3} (Main|Oak|Pine|Maple|Cedar|Elm|Park|Lake|Hill|Sunset) (St|Ave|Rd|Blvd|Ln|Dr)",
        0.2,
    ),
    PatternTemplate("phone", r"\(\d{3}\) \d{3}-\d{4}", 0.15),
)

ALNUM_TEMPLATES = (
    PatternTemplate("word", r"[A-Za-z]{3,8}", 0.4),
    PatternTemplate("code", r"[A-Z0-9]{3,7}", 0.3),
    PatternTemplate("number", r"\d{3,8}", 0.3),
)
