"""Sign identification: response parsing, the lexicon scanner and the retry loop."""
from __future__ import annotations

import ast
import json
import logging
import re
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Protocol

from .corpus import AuthenticationError, ClinicalSummary, TransportError, preprocess
from .prompts import IDENTIFY

logger = logging.getLogger(__name__)


@dataclass(frozen=True, order=True)
class Sign:
    key: str = field(init=False, repr=False)
    text: str

    def __post_init__(self):
        if not self.text or preprocess(self.text) != self.text:
            raise ValueError(f"sign text must be non-empty and preprocessed: {self.text!r}")
        object.__setattr__(self, "key", self.text.lower())

    @classmethod
    def from_raw(cls, raw: str) -> "Sign | None":
        text = preprocess(raw)
        return cls(text) if text else None


def dedupe_signs(raw: Iterable[str]) -> list[Sign]:
    """Preprocess, drop empties, keep the first of each case-insensitive duplicate."""
    out, seen = [], set()
    for r in raw:
        s = Sign.from_raw(r)
        if s is not None and s.key not in seen:
            seen.add(s.key)
            out.append(s)
    return out


# --- response parsing ----------------------------------------------------------

class ParseError(ValueError):
    pass


class NoJsonObject(ParseError):
    pass


class MissingKey(ParseError):
    pass


class BadMember(ParseError):
    pass


def _balanced_object(raw: str) -> str | None:
    start = raw.find("{")
    if start < 0:
        return None
    depth = 0
    quote = None
    escaped = False
    for i in range(start, len(raw)):
        c = raw[i]
        if quote:
            if escaped:
                escaped = False
            elif c == "\\":
                escaped = True
            elif c == quote:
                quote = None
        elif c in "\"'":
            quote = c
        elif c == "{":
            depth += 1
        elif c == "}":
            depth -= 1
            if depth == 0:
                return raw[start : i + 1]
    return None


def extract_json_object(raw: str) -> tuple[dict, bool]:
    """First balanced ``{...}`` in ``raw`` as a dict, and whether single-quote relaxation was needed."""
    candidate = _balanced_object(raw)
    if candidate is None:
        raise NoJsonObject("no JSON object found in response")
    try:
        obj, relaxed = json.loads(candidate), False
    except json.JSONDecodeError:
        try:
            obj, relaxed = ast.literal_eval(candidate), True
        except (ValueError, SyntaxError, MemoryError, RecursionError):
            raise NoJsonObject("response contains no valid JSON object") from None
    if not isinstance(obj, dict):
        raise NoJsonObject("extracted value is not an object")
    return obj, relaxed


def _signs_from_object(obj: dict) -> list[Sign]:
    if "Signs" not in obj:
        raise MissingKey("missing key 'Signs'")
    members = obj["Signs"]
    if not isinstance(members, list):
        raise BadMember("'Signs' is not an array")
    for m in members:
        if not isinstance(m, str):
            raise BadMember(f"non-string member in 'Signs': {m!r}")
    return dedupe_signs(members)


def parse_sign_response(raw: str) -> list[Sign]:
    obj, _ = extract_json_object(raw)
    return _signs_from_object(obj)


# --- lexicon scanning -------------------------------------------------------------

_SENTENCE_RE = re.compile(r"\.+")


class Lexicon:
    """Preprocessed phrases indexed by first token, with optional category labels."""

    def __init__(self, phrases: Iterable[str], categories: dict[str, str] | None = None):
        self.phrases: list[str] = []
        self.categories: dict[str, str] = {}
        self._by_first: dict[str, list[tuple[str, ...]]] = {}
        self._text: dict[tuple[str, ...], str] = {}
        categories = {preprocess(k).lower(): v for k, v in (categories or {}).items()}
        for p in phrases:
            text = preprocess(p)
            tokens = tuple(text.lower().split())
            if not tokens or tokens in self._text:
                continue
            self._text[tokens] = text
            self.phrases.append(text)
            self._by_first.setdefault(tokens[0], []).append(tokens)
            if text.lower() in categories:
                self.categories[text.lower()] = categories[text.lower()]
        for cands in self._by_first.values():
            cands.sort(key=len, reverse=True)

    @classmethod
    def load(cls, path) -> "Lexicon":
        """One phrase per line; an optional tab-separated second column names its category."""
        phrases, cats = [], {}
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                phrase, _, cat = line.partition("\t")
                phrases.append(phrase)
                if cat.strip():
                    cats[phrase] = cat.strip()
        return cls(phrases, cats)

    def find(self, text: str) -> list[Sign]:
        matches = []  # (start, end, text) in global token positions
        pos = 0
        for sentence in _SENTENCE_RE.split(preprocess(text).lower()):
            tokens = sentence.split()
            for i, tok in enumerate(tokens):
                for cand in self._by_first.get(tok, ()):
                    if tuple(tokens[i : i + len(cand)]) == cand:
                        matches.append((pos + i, pos + i + len(cand), self._text[cand]))
            pos += len(tokens)
        # longest first, then leftmost; drop anything overlapping a kept match
        matches.sort(key=lambda m: (-(m[1] - m[0]), m[0]))
        taken: set[int] = set()
        kept = []
        for start, end, phrase in matches:
            span = range(start, end)
            if taken.isdisjoint(span):
                taken.update(span)
                kept.append((start, phrase))
        kept.sort()
        return dedupe_signs(p for _, p in kept)


def lexicon_extract(lexicon: Iterable[str] | Lexicon, text: str) -> list[Sign]:
    lex = lexicon if isinstance(lexicon, Lexicon) else Lexicon(lexicon)
    return lex.find(text)


# --- backend calls ------------------------------------------------------------

class Backend(Protocol):
    name: str
    deterministic: bool

    def complete(self, stage: str, key: str, messages: list[dict]) -> str: ...


class ExtractionFailure(RuntimeError):
    def __init__(self, key: str, stage: str, reason: str, attempts: int):
        super().__init__(f"{stage} failed for {key} after {attempts} attempt(s): {reason}")
        self.key = key
        self.stage = stage
        self.reason = reason
        self.attempts = attempts


@dataclass
class LlmExchange:
    stage: str
    key: str
    model: str
    temperature: float
    messages: list[dict]
    raw: str | None = None
    payload: Any = None
    attempts: int = 0
    latency: float = 0.0
    relaxed: bool = False
    error: str | None = None

    @property
    def parsed(self) -> bool:
        return self.payload is not None


def call_backend(
    backend: Backend,
    stage: str,
    key: str,
    messages: list[dict],
    parse: Callable[[dict], Any],
    *,
    max_attempts: int = 3,
    backoff: float = 0.0,
    exchanges: list | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> Any:
    """Call ``backend`` until its response parses, at most ``max_attempts`` times.

    Transport errors and parse errors both consume an attempt; authentication
    errors propagate immediately. Exhaustion raises ExtractionFailure.
    """
    ex = LlmExchange(stage, key, getattr(backend, "model", backend.name),
                     getattr(backend, "temperature", 0.0), messages)
    started = time.perf_counter()
    try:
        for attempt in range(1, max_attempts + 1):
            ex.attempts = attempt
            if attempt > 1 and backoff:
                sleep(backoff * 2 ** (attempt - 2))
            try:
                ex.raw = backend.complete(stage, key, messages)
                obj, ex.relaxed = extract_json_object(ex.raw)
                ex.payload = parse(obj)
                ex.error = None
                return ex.payload
            except AuthenticationError:
                raise
            except (TransportError, ParseError) as e:
                ex.error = f"{type(e).__name__}: {e}"
                logger.warning("%s %s attempt %d: %s", stage, key, attempt, ex.error)
        raise ExtractionFailure(key, stage, ex.error or "unknown", ex.attempts)
    finally:
        ex.latency = time.perf_counter() - started
        if exchanges is not None:
            exchanges.append(ex)


def identify_signs(
    backend: Backend,
    summary: ClinicalSummary,
    *,
    include_synopsis: bool = True,
    max_attempts: int = 3,
    backoff: float = 0.0,
    exchanges: list | None = None,
) -> list[Sign]:
    text = summary.text(include_synopsis)
    if not text.strip():
        raise ValueError(f"MIM {summary.mim}: summary has no text; filter with is_usable first")
    messages = IDENTIFY.render(text=text)
    return call_backend(backend, "identify", summary.mim, messages, _signs_from_object,
                        max_attempts=max_attempts, backoff=backoff, exchanges=exchanges)
