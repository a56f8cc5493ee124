"""HPO term store loaded from ``hp.obo`` or ``hp.json``."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import string
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping

from .corpus import preprocess

logger = logging.getLogger(__name__)

HPO_ID_RE = re.compile(r"HP:\d{7}")
_URI_RE = re.compile(r"HP_(\d{7})$")
_SYNONYM_RE = re.compile(r'^"((?:[^"\\]|\\.)*)"')
_STRIP = string.punctuation + string.whitespace
MAX_MALFORMED_FRACTION = 0.01


class OntologyError(Exception):
    pass


class InvalidHpoId(OntologyError, ValueError):
    pass


def check_hpo_id(value: str) -> str:
    if not isinstance(value, str) or not HPO_ID_RE.fullmatch(value):
        raise InvalidHpoId(f"malformed HPO id: {value!r}")
    return value


def normalize_label(text: str) -> str:
    """Lowercase, corpus punctuation rules, collapsed whitespace, no surrounding punctuation."""
    return preprocess(text).lower().strip(_STRIP)


@dataclass(frozen=True)
class HpoTerm:
    id: str
    label: str
    synonyms: tuple[str, ...] = ()
    obsolete: bool = False
    parents: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        check_hpo_id(self.id)
        if not self.label:
            raise OntologyError(f"{self.id}: empty label")
        seen = {self.label.lower()}
        unique = []
        for s in self.synonyms:
            if s and s.lower() not in seen:
                seen.add(s.lower())
                unique.append(s)
        object.__setattr__(self, "synonyms", tuple(unique))

    @property
    def names(self) -> tuple[str, ...]:
        return (self.label,) + self.synonyms


class HpoIndex(Mapping):
    """Immutable id -> term mapping with a normalized label/synonym lookup."""

    def __init__(self, terms: Iterable[HpoTerm], checksum: str = ""):
        by_id: dict[str, HpoTerm] = {}
        for t in sorted(terms, key=lambda t: t.id):
            if t.id in by_id:
                logger.warning("duplicate term %s; keeping the later stanza", t.id)
            by_id[t.id] = t
        by_id = dict(sorted(by_id.items()))
        by_label: dict[str, str] = {}
        for t in by_id.values():
            if t.obsolete:
                continue
            for name in t.names:
                key = normalize_label(name)
                if not key:
                    continue
                owner = by_label.get(key)
                if owner is None:
                    by_label[key] = t.id
                elif owner != t.id:
                    # ascending-id iteration means the lowest id already holds the key
                    logger.info("label collision %r: %s kept over %s", key, owner, t.id)
        self._terms = MappingProxyType(by_id)
        self._labels = MappingProxyType(by_label)
        self.checksum = checksum

    def __getitem__(self, key: str) -> HpoTerm:
        return self._terms[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._terms)

    def __len__(self) -> int:
        return len(self._terms)

    @property
    def label_map(self) -> Mapping[str, str]:
        return self._labels

    def active_terms(self) -> Iterator[HpoTerm]:
        return (t for t in self._terms.values() if not t.obsolete)

    def lookup_by_id(self, hpo_id: str) -> HpoTerm | None:
        check_hpo_id(hpo_id)
        return self._terms.get(hpo_id)

    def lookup_by_label(self, label: str) -> HpoTerm | None:
        hpo_id = self._labels.get(normalize_label(label))
        return self._terms[hpo_id] if hpo_id else None


def lookup_by_id(index: HpoIndex, hpo_id: str) -> HpoTerm | None:
    return index.lookup_by_id(hpo_id)


def lookup_by_label(index: HpoIndex, label: str) -> HpoTerm | None:
    return index.lookup_by_label(label)


# --- parsers -----------------------------------------------------------------

def _unescape(s: str) -> str:
    return re.sub(r"\\(.)", r"\1", s)


def _strip_comment(value: str) -> str:
    # trailing "! comment" outside quotes
    m = re.search(r"\s!\s", value)
    return value[: m.start()] if m else value


def parse_obo(text: str) -> list[HpoTerm]:
    terms: list[HpoTerm] = []
    n_stanzas = 0
    malformed = 0
    stanza: list[tuple[int, str]] | None = None
    stanza_line = 0

    def finish():
        nonlocal malformed
        if stanza is None:
            return
        try:
            term = _obo_term(stanza)
        except OntologyError as e:
            malformed += 1
            logger.warning("line %d: skipping malformed stanza: %s", stanza_line, e)
            return
        if term is not None:
            terms.append(term)

    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            finish()
            if s == "[Term]":
                n_stanzas += 1
                stanza, stanza_line = [], lineno
            else:
                stanza = None
            continue
        if stanza is not None and s:
            stanza.append((lineno, s))
    finish()

    if n_stanzas and malformed / n_stanzas > MAX_MALFORMED_FRACTION:
        raise OntologyError(f"{malformed} of {n_stanzas} term stanzas are malformed")
    return terms


def _obo_term(lines: list[tuple[int, str]]) -> HpoTerm | None:
    tags: dict[str, list[str]] = {}
    for lineno, s in lines:
        if s.startswith("!"):
            continue
        tag, sep, value = s.partition(":")
        if not sep or not tag or " " in tag:
            raise OntologyError(f"line {lineno}: expected 'tag: value', got {s!r}")
        tags.setdefault(tag, []).append(value.strip())
    ids = tags.get("id")
    if not ids:
        raise OntologyError("stanza without id")
    term_id = ids[0]
    if not term_id.startswith("HP:"):
        return None
    if not HPO_ID_RE.fullmatch(term_id):
        raise OntologyError(f"malformed id {term_id!r}")
    names = tags.get("name")
    if not names or not names[0]:
        raise OntologyError(f"{term_id}: stanza without name")
    synonyms = []
    for raw in tags.get("synonym", []):
        m = _SYNONYM_RE.match(raw)
        if not m:
            raise OntologyError(f"{term_id}: unparseable synonym {raw!r}")
        synonyms.append(_unescape(m.group(1)))
    parents = tuple(_strip_comment(v).split()[0] for v in tags.get("is_a", []) if v)
    obsolete = any(v.lower() == "true" for v in tags.get("is_obsolete", []))
    return HpoTerm(term_id, _unescape(names[0]), tuple(synonyms), obsolete, parents)


def _json_id(node_id: str) -> str | None:
    if HPO_ID_RE.fullmatch(node_id):
        return node_id
    m = _URI_RE.search(node_id)
    return f"HP:{m.group(1)}" if m else None


def parse_json_graph(text: str) -> list[HpoTerm]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise OntologyError(f"line {e.lineno}: invalid JSON ({e.msg})") from e
    parents: dict[str, list[str]] = {}
    nodes = []
    for graph in doc.get("graphs", []):
        nodes.extend(graph.get("nodes", []))
        for edge in graph.get("edges", []):
            if edge.get("pred") in ("is_a", "http://www.w3.org/2000/01/rdf-schema#subClassOf"):
                sub, obj = _json_id(edge.get("sub", "")), _json_id(edge.get("obj", ""))
                if sub and obj:
                    parents.setdefault(sub, []).append(obj)
    terms = []
    n_class = malformed = 0
    for node in nodes:
        term_id = _json_id(node.get("id", ""))
        if term_id is None or node.get("type", "CLASS") != "CLASS":
            continue
        n_class += 1
        meta = node.get("meta") or {}
        label = node.get("lbl")
        if not label:
            malformed += 1
            logger.warning("node %s: skipping node without label", term_id)
            continue
        synonyms = tuple(s.get("val", "") for s in meta.get("synonyms", []) if s.get("val"))
        terms.append(HpoTerm(term_id, label, synonyms, bool(meta.get("deprecated")), tuple(parents.get(term_id, ()))))
    if n_class and malformed / n_class > MAX_MALFORMED_FRACTION:
        raise OntologyError(f"{malformed} of {n_class} term nodes are malformed")
    return terms


def load_ontology(path: str | os.PathLike) -> HpoIndex:
    """Load an HPO release; JSON-graph vs OBO is decided by the first non-blank byte."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise OntologyError(f"cannot read {path}: {e}") from e
    text = data.decode("utf-8")
    stripped = text.lstrip()
    terms = parse_json_graph(text) if stripped.startswith("{") else parse_obo(text)
    if not terms:
        raise OntologyError(f"{path}: no terms found")
    return HpoIndex(terms, checksum=hashlib.sha256(data).hexdigest())
