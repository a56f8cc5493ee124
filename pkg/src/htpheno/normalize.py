"""Sign -> HPO term mapping by embedding nearest neighbour or by backend, with ID verification."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .corpus import preprocess
from .embeddings import EmbeddingStore, cosine, embed_phrase
from .extraction import Backend, Sign, call_backend
from .ontology import HPO_ID_RE, HpoIndex, normalize_label
from .prompts import NORMALIZE, sign_list_payload

logger = logging.getLogger(__name__)

EXACT = "exact-label-match"
MISMATCH = "label-mismatch"
UNKNOWN = "unknown-id"
OBSOLETE = "obsolete-id"
NOT_APPLICABLE = "not-applicable"
NOT_MAPPABLE = "not-mappable"
DEFAULT_CHUNK = 50
# candidates within this of the vectorized maximum are rescored with the scalar cosine
_RESCORE_TOL = 1e-9


@dataclass(frozen=True)
class NormalizedSign:
    input: Sign
    strategy: str
    hpo_id: str | None = None
    hpo_label: str | None = None
    similarity: float | None = None
    id_verified: bool = False
    verification_note: str = NOT_APPLICABLE
    detail: str = ""

    @property
    def mapped(self) -> bool:
        return self.hpo_id is not None


def verify_mapping(index: HpoIndex, hpo_id: str, hpo_label: str) -> tuple[bool, str]:
    if not isinstance(hpo_id, str) or not HPO_ID_RE.fullmatch(hpo_id):
        return False, UNKNOWN
    term = index.get(hpo_id)
    if term is None:
        return False, UNKNOWN
    if term.obsolete:
        return False, OBSOLETE
    given = normalize_label(hpo_label or "")
    if given and any(given == normalize_label(n) for n in term.names):
        return True, EXACT
    return False, MISMATCH


class EmbeddingNormalizer(BaseEstimator):
    """Nearest HPO label or synonym by cosine similarity of averaged word vectors.

    ``fit`` takes an :class:`HpoIndex` and caches candidate phrase vectors;
    ``predict`` maps a sequence of signs to :class:`NormalizedSign` records.
    """

    def __init__(self, store: EmbeddingStore | None = None, min_similarity: float = 0.0, labels_only: bool = False):
        self.store = store
        self.min_similarity = min_similarity
        self.labels_only = labels_only

    def fit(self, index: HpoIndex, y=None):
        if self.store is None:
            raise ValueError("EmbeddingNormalizer needs an EmbeddingStore")
        if not 0.0 <= self.min_similarity <= 1.0:
            raise ValueError(f"min_similarity must be in [0, 1], got {self.min_similarity}")
        ids, names, rows = [], [], []
        for term in index.active_terms():
            for name in term.names[:1] if self.labels_only else term.names:
                pv = embed_phrase(self.store, preprocess(name))
                if pv is None or not np.any(pv.values):
                    continue
                ids.append(term.id)
                names.append(name)
                rows.append(pv.values)
        self.index_ = index
        self.candidate_ids_ = ids
        self.candidate_names_ = names
        self.candidates_ = np.asarray(rows, dtype=np.float64).reshape(len(rows), self.store.dimension)
        self.candidate_sq_norms_ = np.einsum("ij,ij->i", self.candidates_, self.candidates_)
        return self

    def _one(self, sign: Sign) -> NormalizedSign:
        pv = embed_phrase(self.store, sign.text)
        if pv is None or not np.any(pv.values):
            return NormalizedSign(sign, "embedding", detail="unembeddable sign")
        if not self.candidate_ids_:
            return NormalizedSign(sign, "embedding", detail="no embeddable candidates")
        v = pv.values
        approx = (self.candidates_ @ v) / np.sqrt(self.candidate_sq_norms_ * float(np.dot(v, v)))
        top = float(approx.max())
        best_i, best = -1, -math.inf
        # rows are ordered by (HPO id, label before synonyms): first maximum is the tie-break winner
        for i in np.flatnonzero(approx >= top - _RESCORE_TOL):
            score = cosine(v, self.candidates_[i])
            if score > best:
                best_i, best = int(i), score
        if best < self.min_similarity:
            return NormalizedSign(sign, "embedding", similarity=None,
                                  detail=f"best similarity {best:.6f} below {self.min_similarity}")
        term = self.index_[self.candidate_ids_[best_i]]
        verified, note = verify_mapping(self.index_, term.id, term.label)
        return NormalizedSign(sign, "embedding", term.id, term.label, best, verified, note,
                              detail=f"matched {self.candidate_names_[best_i]!r}")

    def predict(self, signs: Sequence[Sign]) -> list[NormalizedSign]:
        check_is_fitted(self, "candidates_")
        return [self._one(s) for s in signs]


def normalize_embedding(store: EmbeddingStore, index: HpoIndex, sign: Sign, min_similarity: float = 0.0,
                        labels_only: bool = False) -> NormalizedSign:
    return EmbeddingNormalizer(store, min_similarity, labels_only).fit(index).predict([sign])[0]


def _is_not_mappable(value) -> bool:
    return isinstance(value, str) and value.strip().strip(".,").lower() == NOT_MAPPABLE


def _parse_mapping_object(obj: Mapping) -> dict[str, tuple[object, object]]:
    """Sign key -> (HPO Term, HPO ID) from either a sign-keyed object or a single record."""
    if "input" in obj and "HPO ID" in obj:
        records = {obj["input"]: obj}
    else:
        records = obj
    out = {}
    for raw_sign, value in records.items():
        sign = Sign.from_raw(str(raw_sign))
        if sign is None or not isinstance(value, Mapping):
            logger.warning("ignoring malformed normalization entry %r", raw_sign)
            continue
        out.setdefault(sign.key, (value.get("HPO Term"), value.get("HPO ID")))
    return out


def _from_backend(index: HpoIndex, sign: Sign, entry) -> NormalizedSign:
    if entry is None:
        return NormalizedSign(sign, "backend", detail="no mapping returned")
    term, hpo_id = entry
    if _is_not_mappable(hpo_id) or _is_not_mappable(term):
        return NormalizedSign(sign, "backend", detail=NOT_MAPPABLE)
    hpo_id = str(hpo_id).strip() if hpo_id is not None else ""
    label = str(term).strip() if term is not None else ""
    if not HPO_ID_RE.fullmatch(hpo_id):
        return NormalizedSign(sign, "backend", hpo_label=label or None, verification_note=UNKNOWN,
                              detail=f"malformed HPO id {hpo_id!r}")
    verified, note = verify_mapping(index, hpo_id, label)
    return NormalizedSign(sign, "backend", hpo_id, label, None, verified, note)


def normalize_backend(
    backend: Backend,
    index: HpoIndex,
    signs: Sequence[Sign],
    *,
    key: str,
    chunk_size: int = DEFAULT_CHUNK,
    max_attempts: int = 3,
    backoff: float = 0.0,
    exchanges: list | None = None,
) -> list[NormalizedSign]:
    if not signs:
        raise ValueError("normalize_backend needs at least one sign")
    results = []
    for n, start in enumerate(range(0, len(signs), chunk_size)):
        chunk = list(signs[start : start + chunk_size])
        stage = "normalize" if n == 0 else f"normalize.{n}"
        messages = NORMALIZE.render(signs=sign_list_payload(chunk))
        mapping = call_backend(backend, stage, key, messages, _parse_mapping_object,
                               max_attempts=max_attempts, backoff=backoff, exchanges=exchanges)
        results.extend(_from_backend(index, s, mapping.get(s.key)) for s in chunk)
    return results


CSV_COLUMNS = ["input_sign", "strategy", "hpo_id", "hpo_label", "similarity", "id_verified", "verification_note"]


def normalized_to_csv(records: Sequence[NormalizedSign]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([
            r.input.text,
            r.strategy,
            r.hpo_id or NOT_MAPPABLE,
            r.hpo_label or (NOT_MAPPABLE if not r.mapped else ""),
            "" if r.similarity is None else f"{r.similarity:.6f}",
            "true" if r.id_verified else "false",
            r.verification_note,
        ])
    return buf.getvalue()


def normalized_from_csv(text: str) -> list[NormalizedSign]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        mapped = row["hpo_id"] != NOT_MAPPABLE
        out.append(NormalizedSign(
            Sign(row["input_sign"]),
            row["strategy"],
            row["hpo_id"] if mapped else None,
            (row["hpo_label"] or None) if mapped else None,
            float(row["similarity"]) if row["similarity"] else None,
            row["id_verified"] == "true",
            row["verification_note"],
        ))
    return out
