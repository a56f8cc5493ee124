"""Concordance and accuracy metrics against gold annotations, and run timing."""
from __future__ import annotations

import csv
import math
from collections import Counter
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

from .categories import CATEGORIES, UNCLASSIFIED, canonical_category
from .corpus import check_mim
from .embeddings import EmbeddingStore, cosine, embed_phrase
from .extraction import Sign
from .normalize import NOT_MAPPABLE, NormalizedSign
from .ontology import HPO_ID_RE, HpoIndex, normalize_label

WEAK_MATCH = 0.80


class UndefinedMetric(ValueError):
    pass


# Count-based metrics are computed in exact rationals and rounded once at the end.

def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def _f1(p: Fraction, r: Fraction) -> float:
    return float(2 * p * r / (p + r)) if p + r else 0.0


def _mean(values: Sequence[Fraction]) -> float:
    return float(sum(values, Fraction(0)) / len(values)) if values else 0.0


def _keys(signs: Iterable) -> set:
    return {s.key if isinstance(s, Sign) else str(s).lower() for s in signs}


def _jaccard_exact(a: Iterable, b: Iterable) -> Fraction:
    a, b = _keys(a), _keys(b)
    if not a and not b:
        return Fraction(1)
    return Fraction(len(a & b), len(a | b))


def jaccard(a: Iterable, b: Iterable) -> float:
    return float(_jaccard_exact(a, b))


def _vectors(store: EmbeddingStore, signs: Sequence[Sign]):
    out = []
    for s in signs:
        pv = embed_phrase(store, s.text)
        out.append(pv.values if pv is not None and any(pv.values) else None)
    return out


def best_similarities(store: EmbeddingStore, sys: Sequence[Sign], gold: Sequence[Sign]) -> list[float | None]:
    """For each system sign its maximum cosine to any gold sign; None when nothing is comparable.

    A sign whose canonical text appears verbatim in ``gold`` scores 1.0 even
    without a vector, the value cosine identity gives embeddable signs.
    """
    gold_keys = _keys(gold)
    gv = [v for v in _vectors(store, gold) if v is not None]
    out = []
    for s, v in zip(sys, _vectors(store, sys)):
        if s.key in gold_keys:
            out.append(1.0)
        else:
            out.append(max(cosine(v, g) for g in gv) if v is not None and gv else None)
    return out


@dataclass(frozen=True)
class SimilarityIndex:
    index: float
    weak_pct: float
    scored: int
    unembeddable: int


def similarity_index_from_scores(scores: Sequence[float | None], weak_threshold: float = WEAK_MATCH) -> SimilarityIndex:
    valid = [s for s in scores if s is not None]
    if not valid:
        raise UndefinedMetric("no embeddable system/gold sign pair")
    weak = sum(1 for s in scores if s is None or s < weak_threshold)
    return SimilarityIndex(100.0 * math.fsum(valid) / len(valid), 100.0 * weak / len(scores),
                           len(valid), len(scores) - len(valid))


def max_similarity_index(store: EmbeddingStore, sys: Sequence[Sign], gold: Sequence[Sign],
                         weak_threshold: float = WEAK_MATCH) -> tuple[float, float]:
    if not sys or not gold:
        raise UndefinedMetric("max similarity index needs non-empty system and gold lists")
    r = similarity_index_from_scores(best_similarities(store, sys, gold), weak_threshold)
    return r.index, r.weak_pct


@dataclass(frozen=True)
class PRCounts:
    tp: int
    n_sys: int
    covered: int
    n_gold: int

    def __add__(self, other: "PRCounts") -> "PRCounts":
        return PRCounts(self.tp + other.tp, self.n_sys + other.n_sys,
                        self.covered + other.covered, self.n_gold + other.n_gold)

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.n_sys)

    @property
    def recall(self) -> float:
        return _ratio(self.covered, self.n_gold)

    @property
    def f1(self) -> float:
        p = Fraction(self.tp, self.n_sys) if self.n_sys else Fraction(0)
        r = Fraction(self.covered, self.n_gold) if self.n_gold else Fraction(0)
        return _f1(p, r)


def identification_counts(store: EmbeddingStore, sys: Sequence[Sign], gold: Sequence[Sign],
                          threshold: float = WEAK_MATCH) -> PRCounts:
    fwd = best_similarities(store, sys, gold)
    back = best_similarities(store, gold, sys)
    tp = sum(1 for s in fwd if s is not None and s >= threshold)
    covered = sum(1 for s in back if s is not None and s >= threshold)
    return PRCounts(tp, len(sys), covered, len(gold))


def identification_prf(store: EmbeddingStore, sys: Sequence[Sign], gold: Sequence[Sign],
                       threshold: float = WEAK_MATCH) -> tuple[float, float, float]:
    c = identification_counts(store, sys, gold, threshold)
    return c.precision, c.recall, c.f1


@dataclass(frozen=True)
class CategorizationMetrics:
    accuracy: float
    precision: float
    recall: float
    evaluated: int


def categorization_metrics(pred: Mapping[Hashable, str], gold: Mapping[Hashable, str]) -> CategorizationMetrics:
    """Accuracy plus macro precision/recall over categories other than Unclassified.

    A category contributes to macro precision only if something was predicted
    into it, and to macro recall only if it has gold members.
    """
    shared = [k for k in gold if k in pred]
    if not shared:
        raise UndefinedMetric("no signs shared between predicted and gold categories")
    correct = sum(1 for k in shared if pred[k] == gold[k])
    tp: Counter[str] = Counter()
    n_pred: Counter[str] = Counter()
    n_gold: Counter[str] = Counter()
    for k in shared:
        n_pred[pred[k]] += 1
        n_gold[gold[k]] += 1
        if pred[k] == gold[k]:
            tp[pred[k]] += 1
    cats = [c for c in CATEGORIES if c != UNCLASSIFIED]
    ps = [Fraction(tp[c], n_pred[c]) for c in cats if n_pred[c]]
    rs = [Fraction(tp[c], n_gold[c]) for c in cats if n_gold[c]]
    return CategorizationMetrics(correct / len(shared), _mean(ps), _mean(rs), len(shared))


@dataclass(frozen=True)
class NormalizationMetrics:
    accuracy: float
    precision: float
    recall: float
    evaluated: int
    label_only: int


def normalization_metrics(pred: Sequence[NormalizedSign] | Mapping[Hashable, NormalizedSign],
                          gold: Mapping[Hashable, str | None],
                          index: HpoIndex | None = None) -> NormalizationMetrics:
    """Score predicted HPO ids against gold ids; gold ``None`` or ``"not-mappable"`` means unmappable.

    ``pred`` may be keyed explicitly or given as a list keyed by sign. Label-only
    matches (right label text, wrong id) need ``index`` to resolve gold labels.
    """
    if not isinstance(pred, Mapping):
        pred = {r.input.key: r for r in pred}
    correct = correct_mapped = predicted_mapped = gold_mappable = label_only = 0
    for k, gold_id in gold.items():
        if k not in pred:
            raise UndefinedMetric(f"no prediction for gold sign {k!r}")
        gold_id = None if gold_id in (None, "", NOT_MAPPABLE) else gold_id
        p = pred[k]
        if p.mapped:
            predicted_mapped += 1
        if gold_id is not None:
            gold_mappable += 1
        if gold_id is None:
            if not p.mapped:
                correct += 1
        elif p.mapped and p.hpo_id == gold_id:
            correct += 1
            correct_mapped += 1
        elif index is not None and p.hpo_label and gold_id in index:
            if normalize_label(p.hpo_label) == normalize_label(index[gold_id].label):
                label_only += 1
    return NormalizationMetrics(
        _ratio(correct, len(gold)),
        _ratio(correct_mapped, predicted_mapped),
        _ratio(correct_mapped, gold_mappable),
        len(gold),
        label_only,
    )


# --- annotation sets -------------------------------------------------------------

@dataclass
class AnnotationSet:
    annotator: str
    signs: dict[str, list[Sign]] = field(default_factory=dict)
    categories: dict[tuple[str, str], str] = field(default_factory=dict)
    hpo_ids: dict[tuple[str, str], str] = field(default_factory=dict)

    def add(self, mim: str, sign: Sign, category: str | None = None, hpo_id: str | None = None) -> None:
        lst = self.signs.setdefault(mim, [])
        if all(s.key != sign.key for s in lst):
            lst.append(sign)
        k = (mim, sign.key)
        if category and k not in self.categories:
            self.categories[k] = category
        if hpo_id and k not in self.hpo_ids:
            self.hpo_ids[k] = hpo_id


class AnnotationError(ValueError):
    pass


def load_annotations(path) -> dict[str, AnnotationSet]:
    """CSV with columns mim, annotator, sign and optional category, hpo_id."""
    sets: dict[str, AnnotationSet] = {}
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        missing = {"mim", "annotator", "sign"} - set(reader.fieldnames or ())
        if missing:
            raise AnnotationError(f"annotation file lacks columns: {', '.join(sorted(missing))}")
        for lineno, row in enumerate(reader, 2):
            mim = check_mim(row["mim"].strip())
            sign = Sign.from_raw(row["sign"])
            if sign is None:
                continue
            cat = (row.get("category") or "").strip()
            if cat:
                canon = canonical_category(cat)
                if canon is None:
                    raise AnnotationError(f"line {lineno}: unknown category {cat!r}")
                cat = canon
            hpo = (row.get("hpo_id") or "").strip()
            if hpo and hpo != NOT_MAPPABLE and not HPO_ID_RE.fullmatch(hpo):
                raise AnnotationError(f"line {lineno}: malformed hpo_id {hpo!r}")
            sets.setdefault(row["annotator"].strip(), AnnotationSet(row["annotator"].strip())).add(mim, sign, cat or None, hpo or None)
    if not sets:
        raise AnnotationError(f"{path}: no annotations")
    return dict(sorted(sets.items()))


def union_annotations(sets: Iterable[AnnotationSet], name: str = "union") -> AnnotationSet:
    u = AnnotationSet(name)
    for a in sets:
        for mim, signs in a.signs.items():
            for s in signs:
                k = (mim, s.key)
                u.add(mim, s, a.categories.get(k), a.hpo_ids.get(k))
    return u


# --- reports -----------------------------------------------------------------------

@dataclass(frozen=True)
class ConcordanceReport:
    signs_identified: int
    gold_signs: int
    jaccard: float
    max_similarity_index: float
    weak_match_pct: float
    precision: float
    recall: float
    f1: float
    unembeddable_count: int
    diseases: int

    def to_dict(self) -> dict:
        return asdict(self)


def concordance(store: EmbeddingStore, sys: Mapping[str, Sequence[Sign]], gold: Mapping[str, Sequence[Sign]],
                threshold: float = WEAK_MATCH) -> ConcordanceReport:
    """Pooled over the diseases in ``gold``: mean per-disease Jaccard, pooled similarity scores and P/R counts."""
    mims = sorted(gold)
    if not mims:
        raise UndefinedMetric("no gold diseases")
    jac, scores = [], []
    counts = PRCounts(0, 0, 0, 0)
    for mim in mims:
        s, g = list(sys.get(mim, ())), list(gold[mim])
        jac.append(_jaccard_exact(s, g))
        scores.extend(best_similarities(store, s, g))
        counts = counts + identification_counts(store, s, g, threshold)
    idx = similarity_index_from_scores(scores, threshold)
    return ConcordanceReport(
        signs_identified=counts.n_sys,
        gold_signs=counts.n_gold,
        jaccard=_mean(jac),
        max_similarity_index=idx.index,
        weak_match_pct=idx.weak_pct,
        precision=counts.precision,
        recall=counts.recall,
        f1=counts.f1,
        unembeddable_count=idx.unembeddable,
        diseases=len(mims),
    )


@dataclass
class StageSpan:
    seconds: float = 0.0
    items: int = 0


@dataclass
class RunLog:
    wall_seconds: float = 0.0
    diseases: int = 0
    usable: int = 0
    words: int = 0
    stages: dict[str, StageSpan] = field(default_factory=dict)

    def record(self, stage: str, seconds: float, items: int) -> None:
        span = self.stages.setdefault(stage, StageSpan())
        span.seconds += seconds
        span.items += items


@dataclass(frozen=True)
class RunTimings:
    diseases_processed: int
    words_processed: int
    seconds_per_disease: float
    identification_rate: float
    categorization_rate: float
    normalization_rate: float

    def to_dict(self) -> dict:
        return asdict(self)


def timing_report(log: RunLog) -> RunTimings:
    def rate(stage):
        span = log.stages.get(stage)
        return _ratio(span.items, span.seconds) if span else 0.0

    return RunTimings(
        diseases_processed=log.diseases,
        words_processed=log.words,
        seconds_per_disease=_ratio(log.wall_seconds, log.diseases),
        identification_rate=rate("identify"),
        categorization_rate=rate("categorize"),
        normalization_rate=rate("normalize"),
    )
