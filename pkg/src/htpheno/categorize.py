"""Sign categorization into the 30 categories, binarization and disease vectors."""
from __future__ import annotations

import csv
import io
import logging
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .categories import CATEGORIES, CATEGORY_INDEX, UNCLASSIFIED, canonical_category
from .corpus import check_mim
from .extraction import BadMember, Backend, Sign, call_backend
from .prompts import CATEGORIZE, sign_list_payload

logger = logging.getLogger(__name__)

CategorizedSigns = dict[str, list[Sign]]
DEFAULT_CHUNK = 150


def assign_categories(signs: Sequence[Sign], response: Mapping[str, object]) -> CategorizedSigns:
    """Reconcile a backend's category -> signs object with the signs that were sent.

    Unknown category names map to Unclassified, signs the backend invented are
    dropped, multiply-assigned signs keep the earliest category in canonical
    order, and omitted signs land in Unclassified.
    """
    by_key = {s.key: s for s in signs}
    choices: dict[str, list[str]] = {}
    for name, members in response.items():
        cat = canonical_category(name)
        if cat is None:
            logger.warning("unknown category %r; its signs go to %s", name, UNCLASSIFIED)
            cat = UNCLASSIFIED
        if isinstance(members, str):
            members = [members]
        if not isinstance(members, list):
            raise BadMember(f"category {name!r}: expected a list of signs")
        for m in members:
            if not isinstance(m, str):
                raise BadMember(f"category {name!r}: non-string member {m!r}")
            sign = Sign.from_raw(m)
            if sign is None or sign.key not in by_key:
                logger.warning("backend returned sign %r that was not submitted; ignored", m)
                continue
            choices.setdefault(sign.key, []).append(cat)
    result: dict[str, list[Sign]] = {}
    for sign in signs:
        cats = choices.get(sign.key)
        if not cats:
            logger.warning("sign %r omitted by backend; assigned %s", sign.text, UNCLASSIFIED)
            cat = UNCLASSIFIED
        else:
            cat = min(cats, key=CATEGORY_INDEX.__getitem__)
            if len(set(cats)) > 1:
                logger.info("sign %r assigned to %s; kept %s", sign.text, sorted(set(cats)), cat)
        result.setdefault(cat, []).append(sign)
    return {c: result[c] for c in CATEGORIES if c in result}


def categorize_signs(
    backend: Backend,
    signs: Sequence[Sign],
    *,
    key: str,
    chunk_size: int = DEFAULT_CHUNK,
    max_attempts: int = 3,
    backoff: float = 0.0,
    exchanges: list | None = None,
) -> CategorizedSigns:
    if not signs:
        raise ValueError("categorize_signs needs at least one sign")
    merged: dict[str, list[Sign]] = {}
    for n, start in enumerate(range(0, len(signs), chunk_size)):
        chunk = list(signs[start : start + chunk_size])
        stage = "categorize" if n == 0 else f"categorize.{n}"
        messages = CATEGORIZE.render(signs=sign_list_payload(chunk))
        part = call_backend(backend, stage, key, messages, lambda obj, c=chunk: assign_categories(c, obj),
                            max_attempts=max_attempts, backoff=backoff, exchanges=exchanges)
        for cat, members in part.items():
            merged.setdefault(cat, []).extend(members)
    return {c: merged[c] for c in CATEGORIES if c in merged}


def binarize(cat: Mapping[str, Sequence[Sign]]) -> np.ndarray:
    bits = np.zeros(len(CATEGORIES), dtype=np.int8)
    for name, members in cat.items():
        if members:
            bits[CATEGORY_INDEX[name]] = 1
    return bits


class DiseaseVectorizer(TransformerMixin, BaseEstimator):
    """Stateless transformer from categorized sign maps to 30-column presence bits."""

    def fit(self, X, y=None):
        self.n_features_out_ = len(CATEGORIES)
        return self

    def transform(self, X: Iterable[Mapping[str, Sequence[Sign]]]) -> np.ndarray:
        rows = [binarize(x) for x in X]
        if not rows:
            return np.zeros((0, len(CATEGORIES)), dtype=np.int8)
        return np.vstack(rows)

    def get_feature_names_out(self, input_features=None):
        return np.asarray(CATEGORIES, dtype=object)


class VectorTable:
    """Disease vectors in ascending-MIM row order and canonical column order."""

    def __init__(self, mims: Sequence[str], bits: np.ndarray):
        bits = np.asarray(bits, dtype=np.int8).reshape(len(mims), len(CATEGORIES))
        if len(set(mims)) != len(mims):
            raise ValueError("duplicate MIM numbers in vector table")
        order = sorted(range(len(mims)), key=lambda i: mims[i])
        self.mims = [check_mim(mims[i]) for i in order]
        self.bits = bits[order] if len(order) else bits
        self.bits.setflags(write=False)

    def __len__(self) -> int:
        return len(self.mims)

    def row(self, mim: str) -> np.ndarray:
        return self.bits[self.mims.index(mim)]

    def subset(self, mims: Iterable[str]) -> "VectorTable":
        wanted = set(mims)
        keep = [i for i, m in enumerate(self.mims) if m in wanted]
        return VectorTable([self.mims[i] for i in keep], self.bits[keep])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mim", *CATEGORIES])
        for mim, row in zip(self.mims, self.bits):
            w.writerow([mim, *(int(b) for b in row)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "VectorTable":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["mim", *CATEGORIES]:
            raise ValueError("vector CSV header must be 'mim' followed by the 30 categories in canonical order")
        mims = [r[0] for r in rows[1:]]
        bits = np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int8).reshape(len(mims), len(CATEGORIES))
        if not np.isin(bits, (0, 1)).all():
            raise ValueError("vector CSV cells must be 0 or 1")
        return cls(mims, bits)


def vectorize_corpus(diseases: Iterable[tuple[str, Mapping[str, Sequence[Sign]]]]) -> VectorTable:
    diseases = list(diseases)
    mims = [m for m, _ in diseases]
    seen = set()
    for m in mims:
        if m in seen:
            raise ValueError(f"duplicate MIM {m}")
        seen.add(m)
    bits = DiseaseVectorizer().fit_transform([c for _, c in diseases])
    return VectorTable(mims, bits)
