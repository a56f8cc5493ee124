"""Disease lists and clinical summaries from an OMIM-style API, with an on-disk cache.

The cache layout under ``cache_dir`` is::

    manifests/<series_id>.json   one SeriesManifest
    summaries/<mim>.json         raw API responses plus preprocessed text
"""
from __future__ import annotations

import json
import logging
import os
import re
import tempfile
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable

import requests

logger = logging.getLogger(__name__)

_MIM_RE = re.compile(r"\d{6}")
_SERIES_RE = re.compile(r"PS\d{6}")

# commas, hyphens, semicolons, single/double quotes, slashes; dash and curly-quote
# variants count as their ASCII counterparts
_PUNCT_RE = re.compile("[,;'\"/\\\\\\-‐‑‒–—―−‘’“”]")
_WS_RE = re.compile(r"\s+")


class CorpusError(Exception):
    pass


class ValidationError(CorpusError, ValueError):
    pass


class TransportError(CorpusError):
    """Network or server-side failure; safe to retry."""


class AuthenticationError(CorpusError):
    pass


class NotFoundError(CorpusError):
    pass


class ResponseParseError(CorpusError):
    pass


class OfflineCacheMiss(CorpusError):
    pass


def check_mim(value: str) -> str:
    if not isinstance(value, str) or not _MIM_RE.fullmatch(value):
        raise ValidationError(f"invalid MIM number: {value!r}")
    return value


def check_series_id(value: str) -> str:
    if not isinstance(value, str) or not _SERIES_RE.fullmatch(value):
        raise ValidationError(f"invalid phenotypic series id: {value!r}")
    return value


def preprocess(raw: str) -> str:
    """Normalize punctuation and whitespace; periods are kept as sentence boundaries."""
    text = _PUNCT_RE.sub(" ", raw)
    return _WS_RE.sub(" ", text).strip()


@dataclass(frozen=True)
class SeriesManifest:
    series_id: str
    name: str
    diseases: tuple[tuple[str, str], ...]

    def __post_init__(self):
        check_series_id(self.series_id)
        if not self.diseases:
            raise ValidationError(f"{self.series_id}: manifest has no diseases")
        mims = [check_mim(m) for m, _ in self.diseases]
        if len(set(mims)) != len(mims):
            raise ValidationError(f"{self.series_id}: duplicate MIM numbers in manifest")

    @property
    def mims(self) -> list[str]:
        return [m for m, _ in self.diseases]

    def to_dict(self) -> dict:
        return {
            "series_id": self.series_id,
            "name": self.name,
            "diseases": [{"mim": m, "name": n} for m, n in self.diseases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SeriesManifest":
        return cls(
            series_id=d["series_id"],
            name=d.get("name", ""),
            diseases=tuple((str(x["mim"]), x.get("name", "")) for x in d["diseases"]),
        )


def load_manifests(path: str | os.PathLike) -> list[SeriesManifest]:
    """Read a manifest file: a JSON array of ``{series_id, name, diseases: [{mim, name}]}``."""
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    if isinstance(data, dict):
        data = [data]
    return [SeriesManifest.from_dict(d) for d in data]


def write_manifests(manifests: Iterable[SeriesManifest], path: str | os.PathLike) -> None:
    _atomic_write(Path(path), _dumps([m.to_dict() for m in manifests]))


@dataclass(frozen=True)
class ClinicalSummary:
    mim: str
    description: str = ""
    clinical_features: str = ""
    clinical_synopsis: str = ""
    retrieved_at: str = ""

    def __post_init__(self):
        check_mim(self.mim)

    def text(self, include_synopsis: bool = True) -> str:
        """Combined text handed to sign identification."""
        parts = [self.description, self.clinical_features]
        if include_synopsis:
            parts.append(self.clinical_synopsis)
        return " ".join(p for p in parts if p)

    def word_count(self, include_synopsis: bool = True) -> int:
        return len(self.text(include_synopsis).split())


def is_usable(summary: ClinicalSummary, min_chars: int = 1) -> bool:
    combined = summary.description + summary.clinical_features
    return sum(1 for c in combined if not c.isspace()) >= min_chars


# --- OMIM response parsing -------------------------------------------------

_SYNOPSIS_CODE_RE = re.compile(r"\{[^{}]*\}")


def _entry(payload: Any, mim: str) -> dict | None:
    try:
        entries = payload["omim"]["entryList"]
    except (KeyError, TypeError) as e:
        raise ResponseParseError(f"MIM {mim}: unexpected response structure ({e!r})") from e
    if not entries:
        return None
    try:
        return entries[0]["entry"]
    except (KeyError, TypeError, IndexError) as e:
        raise ResponseParseError(f"MIM {mim}: unexpected entry structure ({e!r})") from e


def _text_sections(entry: dict) -> dict[str, str]:
    sections = {}
    for item in entry.get("textSectionList") or []:
        sec = item.get("textSection", {})
        sections[sec.get("textSectionName", "")] = sec.get("textSectionContent", "") or ""
    return sections


def _flatten_synopsis(synopsis: dict) -> str:
    parts = []
    for key in sorted(synopsis):
        value = synopsis[key]
        if key.endswith("Exists") or not isinstance(value, str) or key in ("mimNumber", "preferredTitle"):
            continue
        parts.append(_SYNOPSIS_CODE_RE.sub("", value))
    return " ".join(parts)


def summary_from_raw(mim: str, raw: dict, retrieved_at: str) -> ClinicalSummary:
    """Build a preprocessed summary from the two cached raw API payloads."""
    text_entry = _entry(raw["text"], mim) if raw.get("text") is not None else None
    syn_entry = _entry(raw["synopsis"], mim) if raw.get("synopsis") is not None else None
    if text_entry is None and syn_entry is None:
        raise NotFoundError(f"MIM {mim} not found")
    sections = _text_sections(text_entry) if text_entry else {}
    synopsis = (syn_entry or {}).get("clinicalSynopsis") or {}
    return ClinicalSummary(
        mim=mim,
        description=preprocess(sections.get("description", "")),
        clinical_features=preprocess(sections.get("clinicalFeatures", "")),
        clinical_synopsis=preprocess(_flatten_synopsis(synopsis)),
        retrieved_at=retrieved_at,
    )


def manifest_from_raw(series_id: str, payload: Any) -> SeriesManifest:
    try:
        series = payload["omim"]["phenotypicSeries"]
    except (KeyError, TypeError) as e:
        raise ResponseParseError(f"{series_id}: unexpected response structure ({e!r})") from e
    if not series:
        raise NotFoundError(f"phenotypic series {series_id} not found")
    diseases = []
    seen = set()
    for item in series.get("phenotypeMapList") or []:
        pm = item.get("phenotypeMap", {})
        mim = pm.get("phenotypeMimNumber")
        if mim is None:
            continue
        mim = f"{int(mim):06d}"
        if mim in seen:
            continue
        seen.add(mim)
        diseases.append((mim, pm.get("phenotype", "")))
    if not diseases:
        raise NotFoundError(f"phenotypic series {series_id} has no diseases")
    return SeriesManifest(series_id, series.get("phenotypicSeriesTitle", ""), tuple(diseases))


# --- cache, rate limiting, client -------------------------------------------

def _dumps(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


class DiskCache:
    """JSON files keyed by series id or MIM; writes are atomic renames."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def manifest_path(self, series_id: str) -> Path:
        return self.root / "manifests" / f"{series_id}.json"

    def summary_path(self, mim: str) -> Path:
        return self.root / "summaries" / f"{mim}.json"

    def get_manifest(self, series_id: str) -> SeriesManifest | None:
        p = self.manifest_path(series_id)
        if not p.exists():
            return None
        return SeriesManifest.from_dict(json.loads(p.read_text(encoding="utf-8")))

    def put_manifest(self, manifest: SeriesManifest) -> None:
        _atomic_write(self.manifest_path(manifest.series_id), _dumps(manifest.to_dict()))

    def get_summary(self, mim: str) -> ClinicalSummary | None:
        p = self.summary_path(mim)
        if not p.exists():
            return None
        rec = json.loads(p.read_text(encoding="utf-8"))
        # re-derive from raw so revised preprocessing applies without refetching
        return summary_from_raw(mim, rec["raw"], rec["retrieved_at"])

    def put_summary(self, mim: str, raw: dict, summary: ClinicalSummary) -> None:
        rec = {
            "mim": mim,
            "retrieved_at": summary.retrieved_at,
            "raw": raw,
            "description": summary.description,
            "clinical_features": summary.clinical_features,
            "clinical_synopsis": summary.clinical_synopsis,
        }
        _atomic_write(self.summary_path(mim), _dumps(rec))

    def cached_mims(self) -> list[str]:
        d = self.root / "summaries"
        if not d.is_dir():
            return []
        return sorted(p.stem for p in d.glob("*.json"))


class TokenBucket:
    """Thread-safe token bucket; ``rate`` tokens per second, burst of ``capacity``."""

    def __init__(self, rate: float, capacity: float | None = None, clock=time.monotonic, sleep=time.sleep):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.capacity = capacity if capacity is not None else max(1.0, rate)
        self._tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1:
                    self._tokens -= 1
                    return
                wait = (1 - self._tokens) / self.rate
            self._sleep(wait)


@dataclass
class ApiConfig:
    base_url: str = "https://api.omim.org"
    api_key: str | None = None
    timeout: float = 30.0
    max_retries: int = 3
    backoff: float = 1.0
    max_inflight: int = 4
    rate: float = 4.0
    offline: bool = False
    session: requests.Session | None = field(default=None, repr=False)

    @classmethod
    def from_env(cls, **kwargs) -> "ApiConfig":
        kwargs.setdefault("api_key", os.environ.get("OMIM_API_KEY"))
        return cls(**kwargs)


class OmimClient:
    """Cached, rate-limited access to the OMIM entry and phenotypic-series endpoints."""

    def __init__(self, config: ApiConfig, cache: DiskCache):
        self.config = config
        self.cache = cache
        self.session = config.session or requests.Session()
        self._limiter = TokenBucket(config.rate)
        self._inflight = threading.BoundedSemaphore(max(1, config.max_inflight))
        self.network_calls = 0

    def _get(self, path: str, params: dict, context: str) -> Any:
        if self.config.offline:
            raise OfflineCacheMiss(f"{context}: not cached and offline mode is on")
        if not self.config.api_key:
            raise AuthenticationError("OMIM_API_KEY is not set")
        url = self.config.base_url.rstrip("/") + path
        params = dict(params, format="json")
        headers = {"ApiKey": self.config.api_key}
        last: Exception | None = None
        for attempt in range(self.config.max_retries):
            if attempt:
                time.sleep(self.config.backoff * 2 ** (attempt - 1))
            self._limiter.acquire()
            with self._inflight:
                self.network_calls += 1
                try:
                    resp = self.session.get(url, params=params, headers=headers, timeout=self.config.timeout)
                except requests.RequestException as e:
                    last = TransportError(f"{context}: {e}")
                    continue
            if resp.status_code in (401, 403):
                raise AuthenticationError(f"{context}: HTTP {resp.status_code} (check OMIM_API_KEY)")
            if resp.status_code == 404:
                raise NotFoundError(f"{context} not found")
            if resp.status_code == 429 or resp.status_code >= 500:
                last = TransportError(f"{context}: HTTP {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise ResponseParseError(f"{context}: unexpected HTTP {resp.status_code}")
            try:
                return resp.json()
            except ValueError as e:
                raise ResponseParseError(f"{context}: malformed response body ({e})") from e
        assert last is not None
        raise last

    def fetch_series(self, series_id: str) -> SeriesManifest:
        check_series_id(series_id)
        cached = self.cache.get_manifest(series_id)
        if cached is not None:
            return cached
        payload = self._get(f"/api/phenotypicSeries/{series_id}", {}, f"series {series_id}")
        manifest = manifest_from_raw(series_id, payload)
        self.cache.put_manifest(manifest)
        return manifest

    def fetch_summary(self, mim: str) -> ClinicalSummary:
        check_mim(mim)
        cached = self.cache.get_summary(mim)
        if cached is not None:
            return cached
        raw = {
            "text": self._get("/api/entry", {"mimNumber": mim, "include": "text"}, f"MIM {mim}"),
            "synopsis": self._get("/api/entry", {"mimNumber": mim, "include": "clinicalSynopsis"}, f"MIM {mim}"),
        }
        retrieved_at = datetime.now(timezone.utc).isoformat(timespec="seconds")
        summary = summary_from_raw(mim, raw, retrieved_at)
        self.cache.put_summary(mim, raw, summary)
        return summary


def fetch_series(series_id: str, api_config: ApiConfig, cache: DiskCache) -> SeriesManifest:
    return OmimClient(api_config, cache).fetch_series(series_id)


def fetch_summary(mim: str, api_config: ApiConfig, cache: DiskCache) -> ClinicalSummary:
    return OmimClient(api_config, cache).fetch_summary(mim)


def make_raw(mim: str, description: str = "", clinical_features: str = "", synopsis: dict | None = None) -> dict:
    """Raw payload pair in the API's shape; used to seed caches from local text."""
    sections = []
    if description:
        sections.append({"textSection": {"textSectionName": "description", "textSectionContent": description}})
    if clinical_features:
        sections.append({"textSection": {"textSectionName": "clinicalFeatures", "textSectionContent": clinical_features}})
    entry = {"mimNumber": int(mim), "textSectionList": sections}
    return {
        "text": {"omim": {"entryList": [{"entry": entry}]}},
        "synopsis": {"omim": {"entryList": [{"entry": {"mimNumber": int(mim), "clinicalSynopsis": synopsis or {}}}]}},
    }
