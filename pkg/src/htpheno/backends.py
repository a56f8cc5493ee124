"""Extraction backends: chat-completions HTTP, lexicon lookup, and fixture replay."""
from __future__ import annotations

import json
import os
from pathlib import Path

import requests

from .categories import UNCLASSIFIED
from .corpus import AuthenticationError, TokenBucket, TransportError
from .extraction import Lexicon


class BackendError(RuntimeError):
    pass


class UnsupportedStage(BackendError):
    pass


class ReplayBackend:
    """Serves raw responses from ``<key>.<stage>.json`` files.

    Later chunks of a chunked stage arrive with stage ``"<stage>.<n>"`` and are
    therefore looked up as ``<key>.<stage>.<n>.json``.
    """

    name = "replay"
    deterministic = True
    model = "replay"
    temperature = 0.0

    def __init__(self, directory: str | os.PathLike):
        self.directory = Path(directory)

    def path_for(self, stage: str, key: str) -> Path:
        return self.directory / f"{key}.{stage}.json"

    def complete(self, stage: str, key: str, messages: list[dict]) -> str:
        path = self.path_for(stage, key)
        if not path.exists():
            raise BackendError(f"no replay fixture {path.name}")
        return path.read_text(encoding="utf-8")

    def supports(self, stage: str) -> bool:
        return True


class LexiconBackend:
    """Deterministic phrase lookup; categories come from the lexicon's second column."""

    name = "lexicon"
    deterministic = True
    model = "lexicon"
    temperature = 0.0

    def __init__(self, lexicon: Lexicon):
        self.lexicon = lexicon

    @classmethod
    def from_file(cls, path) -> "LexiconBackend":
        return cls(Lexicon.load(path))

    def supports(self, stage: str) -> bool:
        return stage in ("identify", "categorize")

    def complete(self, stage: str, key: str, messages: list[dict]) -> str:
        content = messages[-1]["content"]
        stage = stage.partition(".")[0]
        if stage == "identify":
            return json.dumps({"Signs": [s.text for s in self.lexicon.find(content)]})
        if stage == "categorize":
            groups: dict[str, list[str]] = {}
            for sign in json.loads(content):
                cat = self.lexicon.categories.get(sign.lower(), UNCLASSIFIED)
                groups.setdefault(cat, []).append(sign)
            return json.dumps(groups)
        raise UnsupportedStage(f"lexicon backend does not support stage {stage!r}")


class ChatBackend:
    """POSTs to ``<base_url>/chat/completions`` using the common chat-completions schema."""

    name = "chat"
    deterministic = False

    def __init__(
        self,
        model: str,
        base_url: str | None = None,
        api_key: str | None = None,
        temperature: float = 0.0,
        timeout: float = 120.0,
        rate: float = 1.0,
        json_mode: bool = True,
        session: requests.Session | None = None,
    ):
        self.model = model
        self.base_url = (base_url or os.environ.get("LLM_BASE_URL") or "https://api.openai.com/v1").rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get("LLM_API_KEY")
        self.temperature = temperature
        self.timeout = timeout
        self.json_mode = json_mode
        self.session = session or requests.Session()
        self._limiter = TokenBucket(rate)

    def supports(self, stage: str) -> bool:
        return True

    def request_body(self, messages: list[dict]) -> dict:
        body = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": m["role"], "content": m["content"]} for m in messages],
        }
        if self.json_mode:
            body["response_format"] = {"type": "json_object"}
        return body

    def complete(self, stage: str, key: str, messages: list[dict]) -> str:
        if not self.api_key:
            raise AuthenticationError("LLM_API_KEY is not set")
        self._limiter.acquire()
        try:
            resp = self.session.post(
                f"{self.base_url}/chat/completions",
                json=self.request_body(messages),
                headers={"Authorization": f"Bearer {self.api_key}"},
                timeout=self.timeout,
            )
        except requests.RequestException as e:
            raise TransportError(f"{stage} {key}: {e}") from e
        if resp.status_code in (401, 403):
            raise AuthenticationError(f"chat API rejected credentials (HTTP {resp.status_code})")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"{stage} {key}: HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise BackendError(f"{stage} {key}: unexpected HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise TransportError(f"{stage} {key}: malformed completion body ({e!r})") from e


def make_backend(kind: str, *, model: str = "gpt-4", replay_dir=None, lexicon_path=None, rate: float = 1.0):
    if kind == "replay":
        if replay_dir is None:
            raise BackendError("replay backend needs a fixture directory")
        return ReplayBackend(replay_dir)
    if kind == "lexicon":
        if lexicon_path is None:
            from importlib.resources import files
            lexicon_path = files("htpheno") / "data" / "lexicon.tsv"
        return LexiconBackend.from_file(lexicon_path)
    if kind == "chat":
        return ChatBackend(model, rate=rate)
    raise BackendError(f"unknown backend {kind!r}")
