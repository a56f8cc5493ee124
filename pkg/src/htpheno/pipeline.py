"""Stage orchestration: cached corpus -> signs -> categories -> normalized signs -> vectors -> plots."""
from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from . import analytics
from .backends import make_backend
from .categorize import CategorizedSigns, VectorTable, categorize_signs, vectorize_corpus
from .corpus import AuthenticationError, ClinicalSummary, DiskCache, SeriesManifest, is_usable, load_manifests
from .embeddings import EmbeddingStore, load_vectors
from .evaluation import (
    WEAK_MATCH, AnnotationSet, RunLog, concordance, categorization_metrics, load_annotations,
    normalization_metrics, timing_report, union_annotations,
)
from .extraction import ExtractionFailure, LlmExchange, Sign, identify_signs
from .normalize import (
    EmbeddingNormalizer, NormalizedSign, normalize_backend, normalized_from_csv, normalized_to_csv,
)
from .ontology import HpoIndex, load_ontology

logger = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


@dataclass
class RunConfig:
    cache_dir: Path = Path("cache")
    out_dir: Path = Path("out")
    hpo: Path | None = None
    vectors: Path | None = None
    backend: str = "chat"
    model: str = "gpt-4"
    min_similarity: float = 0.0
    match_threshold: float = WEAK_MATCH
    max_inflight: int = 4
    manifest: Path | None = None
    offline: bool = False
    replay_dir: Path | None = None
    lexicon: Path | None = None
    include_synopsis: bool = True
    labels_only: bool = False
    min_chars: int = 1
    max_attempts: int = 3
    backoff: float = 1.0
    rate: float = 1.0

    def validate(self) -> "RunConfig":
        for name in ("hpo", "vectors", "manifest", "replay_dir", "lexicon"):
            p = getattr(self, name)
            if p is not None and not Path(p).exists():
                raise PipelineError(f"--{name.replace('_', '-')}: {p} does not exist")
        for name in ("min_similarity", "match_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise PipelineError(f"{name} must be within [0, 1], got {v}")
        if self.max_inflight < 1:
            raise PipelineError("max_inflight must be at least 1")
        return self


def sha256_file(path) -> str | None:
    if path is None:
        return None
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False, ensure_ascii=False) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


@dataclass
class DiseaseResult:
    mim: str
    usable: bool = False
    words: int = 0
    signs: list[Sign] = field(default_factory=list)
    categories: CategorizedSigns = field(default_factory=dict)
    normalized: list[NormalizedSign] = field(default_factory=list)
    failure: str | None = None
    unusable_reason: str | None = None
    exchanges: list[LlmExchange] = field(default_factory=list)


class Phenotyper:
    """Runs identification, categorization and normalization for one disease at a time."""

    def __init__(self, config: RunConfig, backend, index: HpoIndex | None, store: EmbeddingStore | None):
        self.config = config
        self.backend = backend
        self.index = index
        self.normalizer = None
        if index is not None and store is not None:
            self.normalizer = EmbeddingNormalizer(store, config.min_similarity, config.labels_only).fit(index)
        self.log = RunLog()
        self._log_lock = threading.Lock()

    def _record(self, stage: str, started: float, items: int) -> None:
        with self._log_lock:
            self.log.record(stage, time.perf_counter() - started, items)

    def _call_opts(self, result: DiseaseResult) -> dict:
        return {"max_attempts": self.config.max_attempts, "backoff": self.config.backoff,
                "exchanges": result.exchanges}

    def run_one(self, summary: ClinicalSummary) -> DiseaseResult:
        cfg = self.config
        r = DiseaseResult(summary.mim, words=summary.word_count(cfg.include_synopsis))
        if not is_usable(summary, cfg.min_chars):
            r.unusable_reason = "empty summary"
            return r
        try:
            t0 = time.perf_counter()
            r.signs = identify_signs(self.backend, summary, include_synopsis=cfg.include_synopsis, **self._call_opts(r))
            self._record("identify", t0, len(r.signs))
            if not r.signs:
                r.unusable_reason = "no signs identified"
                return r
            t0 = time.perf_counter()
            r.categories = categorize_signs(self.backend, r.signs, key=summary.mim, **self._call_opts(r))
            self._record("categorize", t0, len(r.signs))
            t0 = time.perf_counter()
            if self.normalizer is not None:
                r.normalized.extend(self.normalizer.predict(r.signs))
            if self.index is not None and self.backend.supports("normalize"):
                r.normalized.extend(normalize_backend(self.backend, self.index, r.signs, key=summary.mim,
                                                      **self._call_opts(r)))
            if r.normalized:
                self._record("normalize", t0, len(r.signs))
        except AuthenticationError:
            raise
        except ExtractionFailure as e:
            r.failure = str(e)
            return r
        except Exception as e:  # per-disease failures never abort the batch
            r.failure = f"{type(e).__name__}: {e}"
            return r
        r.usable = True
        return r


def selected_mims(cache: DiskCache, manifests: Sequence[SeriesManifest]) -> list[str]:
    if manifests:
        return sorted({m for man in manifests for m in man.mims})
    return cache.cached_mims()


def run_phenotype(config: RunConfig, manifests: Sequence[SeriesManifest] = ()) -> dict:
    config.validate()
    cache = DiskCache(config.cache_dir)
    out = Path(config.out_dir)
    index = load_ontology(config.hpo) if config.hpo else None
    store = load_vectors(config.vectors) if config.vectors else None
    backend = make_backend(config.backend, model=config.model, replay_dir=config.replay_dir,
                           lexicon_path=config.lexicon, rate=config.rate)
    ph = Phenotyper(config, backend, index, store)

    summaries, failures = [], {}
    mims = selected_mims(cache, manifests)
    for mim in mims:
        s = cache.get_summary(mim)
        if s is None:
            failures[mim] = "summary not cached (run fetch first)"
        else:
            summaries.append(s)

    started = time.perf_counter()
    with ThreadPoolExecutor(max_workers=config.max_inflight) as pool:
        results = list(pool.map(ph.run_one, summaries))
    ph.log.wall_seconds = time.perf_counter() - started
    ph.log.diseases = len(summaries)
    ph.log.words = sum(r.words for r in results)

    usable = sorted((r for r in results if r.usable), key=lambda r: r.mim)
    ph.log.usable = len(usable)
    for r in results:
        if r.failure:
            failures[r.mim] = r.failure

    _write(out / "signs.json", _dump({r.mim: [s.text for s in r.signs] for r in usable}))
    _write(out / "categories.json", _dump({r.mim: {c: [s.text for s in v] for c, v in r.categories.items()}
                                           for r in usable}))
    for r in usable:
        if r.normalized:
            _write(out / "normalized" / f"{r.mim}.csv", normalized_to_csv(r.normalized))
    table = vectorize_corpus((r.mim, r.categories) for r in usable)
    _write(out / "disease_vectors.csv", table.to_csv())

    exchanges = [e for r in results for e in r.exchanges]
    report = {
        "backend": backend.name,
        "model": config.model if config.backend == "chat" else backend.name,
        "diseases": len(mims),
        "usable_diseases": len(usable),
        "signs_identified": sum(len(r.signs) for r in usable),
        "unique_signs_identified": len({s.key for r in usable for s in r.signs}),
        "unusable": {r.mim: r.unusable_reason for r in sorted(results, key=lambda r: r.mim) if r.unusable_reason},
        "failures": dict(sorted(failures.items())),
        "relaxed_json_responses": sum(1 for e in exchanges if e.relaxed),
        "unembeddable_signs": sum(1 for r in usable for n in r.normalized
                                  if n.strategy == "embedding" and n.detail == "unembeddable sign"),
        "unverified_backend_ids": sum(1 for r in usable for n in r.normalized
                                      if n.strategy == "backend" and n.mapped and not n.id_verified),
        "timings": timing_report(ph.log).to_dict(),
        "settings": {
            "min_similarity": config.min_similarity,
            "labels_only": config.labels_only,
            "include_synopsis": config.include_synopsis,
            "max_attempts": config.max_attempts,
        },
        "checksums": {"hpo": index.checksum if index else None, "vectors": store.checksum if store else None},
    }
    _write(out / "run_report.json", _dump(report))
    return report


# --- analyze -------------------------------------------------------------------------

def _membership(manifests: Sequence[SeriesManifest], order: Sequence[str]) -> dict[str, str]:
    by_id = {m.series_id: m for m in manifests}
    ranked = [by_id[s] for s in order if s in by_id] + [m for m in manifests if m.series_id not in order]
    membership: dict[str, str] = {}
    for man in ranked:
        for mim in man.mims:
            if mim in membership and membership[mim] != man.series_id:
                logger.info("MIM %s is in %s and %s; using %s", mim, membership[mim], man.series_id, membership[mim])
            membership.setdefault(mim, man.series_id)
    return membership


def _load_sign_outputs(out: Path):
    signs = json.loads((out / "signs.json").read_text(encoding="utf-8"))
    cats = json.loads((out / "categories.json").read_text(encoding="utf-8"))
    signs = {m: [Sign(t) for t in v] for m, v in signs.items()}
    cats = {m: {c: [Sign(t) for t in v] for c, v in d.items()} for m, d in cats.items()}
    return signs, cats


def run_analyze(config: RunConfig, manifests: Sequence[SeriesManifest], series: Sequence[str] = (),
                scatter_series: Sequence[str] | None = None) -> list[Path]:
    out = Path(config.out_dir)
    vec_path = out / "disease_vectors.csv"
    if not vec_path.exists():
        raise PipelineError(f"{vec_path} not found; run phenotype first")
    table = VectorTable.from_csv(vec_path.read_text(encoding="utf-8"))
    by_id = {m.series_id: m for m in manifests}
    series = list(series) or [m.series_id for m in manifests]
    unknown = [s for s in series + list(scatter_series or []) if s not in by_id]
    if unknown:
        raise PipelineError(f"unknown series: {', '.join(unknown)}")
    if scatter_series is not None and len(scatter_series) > analytics.MAX_SCATTER_SERIES:
        raise PipelineError(f"scatter plots are capped at {analytics.MAX_SCATTER_SERIES} series, "
                            f"got {len(scatter_series)}")
    signs, cats = _load_sign_outputs(out)
    written: list[Path] = []

    for sid in series:
        members = [m for m in by_id[sid].mims if m in table.mims]
        if not members:
            logger.warning("%s: no usable diseases; skipping heatmaps", sid)
            continue
        sub = table.subset(members)
        for order in (analytics.ALPHABETICAL, analytics.BY_PREVALENCE):
            hm = analytics.build_heatmap(sub, order)
            written.append(analytics.render_heatmap_svg(hm, out / f"{sid}.heatmap_{order}.svg",
                                                        title=f"{by_id[sid].name} ({sid})"))
        hm = analytics.build_heatmap(sub, analytics.ALPHABETICAL)
        _write(out / f"{sid}.heatmap.csv", hm.to_csv())
        terms_csv, cats_csv = analytics.frequency_tables({m: signs.get(m, []) for m in members},
                                                         {m: cats.get(m, {}) for m in members})
        _write(out / f"{sid}.terms.csv", terms_csv)
        _write(out / f"{sid}.categories.csv", cats_csv)
        written += [out / f"{sid}.heatmap.csv", out / f"{sid}.terms.csv", out / f"{sid}.categories.csv"]

    if scatter_series is None:
        if len(series) > analytics.MAX_SCATTER_SERIES:
            logger.warning("more than %d series selected; pass --scatter-series to plot centroids",
                           analytics.MAX_SCATTER_SERIES)
            return written
        scatter_series = series
    if scatter_series:
        written += _scatter(out, table, manifests, list(scatter_series), by_id)
    return written


def _scatter(out: Path, table: VectorTable, manifests, chosen: list[str], by_id) -> list[Path]:
    membership_all = _membership(manifests, chosen)
    in_corpus = [m for m in table.mims if m in membership_all]
    proj = analytics.pca_project(table.subset(in_corpus))
    keep = [i for i, m in enumerate(proj.mims) if membership_all[m] in chosen]
    sub = analytics.Projection2D(tuple(proj.mims[i] for i in keep), proj.points[keep], proj.components,
                                 proj.explained_variance, proj.mean)
    membership = {m: membership_all[m] for m in sub.mims}
    cents = analytics.centroids(sub, membership)
    stem = "+".join(chosen)
    svg = analytics.render_scatter_svg(sub, cents, membership, out / f"{stem}.scatter.svg",
                                       {s: by_id[s].name for s in chosen})
    _write(out / f"{stem}.points.csv", sub.to_csv(membership))
    _write(out / f"{stem}.centroids.csv", analytics.centroids_to_csv(cents))
    return [svg, out / f"{stem}.points.csv", out / f"{stem}.centroids.csv"]


# --- evaluate ---------------------------------------------------------------------------

def _evaluate_set(store, gold: AnnotationSet, sys_signs, sys_cats, sys_norm, threshold, index) -> dict:
    block: dict = {"identification": concordance(store, sys_signs, gold.signs, threshold).to_dict()}
    pred_cat = {(m, s.key): c for m, d in sys_cats.items() for c, v in d.items() for s in v}
    gold_cat = {k: c for k, c in gold.categories.items() if k[0] in gold.signs}
    try:
        block["categorization"] = asdict(categorization_metrics(pred_cat, gold_cat))
    except ValueError:
        block["categorization"] = None
    norm_blocks = {}
    for strategy in sorted({n.strategy for recs in sys_norm.values() for n in recs}):
        pred = {(m, n.input.key): n for m, recs in sys_norm.items() for n in recs if n.strategy == strategy}
        gold_ids = {k: v for k, v in gold.hpo_ids.items() if k in pred}
        norm_blocks[strategy] = asdict(normalization_metrics(pred, gold_ids, index)) if gold_ids else None
        if norm_blocks[strategy] is not None:
            norm_blocks[strategy]["skipped_gold_without_prediction"] = len(gold.hpo_ids) - len(gold_ids)
    block["normalization"] = norm_blocks
    return block


def run_evaluate(config: RunConfig, annotations_path) -> dict:
    out = Path(config.out_dir)
    if config.vectors is None:
        raise PipelineError("evaluate needs --vectors for similarity metrics")
    store = load_vectors(config.vectors)
    index = load_ontology(config.hpo) if config.hpo else None
    sets = load_annotations(annotations_path)
    sys_signs, sys_cats = _load_sign_outputs(out)
    sys_norm = {}
    norm_dir = out / "normalized"
    if norm_dir.is_dir():
        for p in sorted(norm_dir.glob("*.csv")):
            sys_norm[p.stem] = normalized_from_csv(p.read_text(encoding="utf-8"))

    offenders = sorted({m for a in sets.values() for m in a.signs} - set(sys_signs))
    if offenders:
        raise PipelineError(f"annotated MIMs missing from pipeline outputs: {', '.join(offenders)}")

    threshold = config.match_threshold
    report = {
        "header": {
            "match_threshold": threshold,
            "weak_match_threshold": WEAK_MATCH,
            "similarity_direction": "each system sign scored by its best match among gold signs",
            "jaccard": "mean over diseases of exact canonical-string Jaccard",
            "checksums": {
                "hpo": sha256_file(config.hpo),
                "vectors": store.checksum,
                "annotations": sha256_file(annotations_path),
            },
        },
        "annotators": {},
    }
    for name, gold in sets.items():
        report["annotators"][name] = _evaluate_set(store, gold, sys_signs, sys_cats, sys_norm, threshold, index)
    if len(sets) > 1:
        u = union_annotations(sets.values())
        report["union"] = _evaluate_set(store, u, sys_signs, sys_cats, sys_norm, threshold, index)
        inter = {}
        names = list(sets)
        for a in names:
            for b in names:
                if a == b:
                    continue
                shared = sorted(set(sets[a].signs) & set(sets[b].signs))
                if not shared:
                    continue
                inter[f"{a}_vs_{b}"] = concordance(store, {m: sets[a].signs[m] for m in shared},
                                                   {m: sets[b].signs[m] for m in shared}, threshold).to_dict()
        report["inter_annotator"] = inter
    _write(out / "evaluation.json", _dump(report))
    return report


def load_run_manifests(config: RunConfig) -> list[SeriesManifest]:
    if config.manifest:
        return load_manifests(config.manifest)
    d = Path(config.cache_dir) / "manifests"
    if not d.is_dir():
        return []
    cache = DiskCache(config.cache_dir)
    return [cache.get_manifest(p.stem) for p in sorted(d.glob("*.json"))]

