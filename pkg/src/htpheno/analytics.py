"""Heatmaps, PCA projection, series centroids, SVG rendering and frequency tables."""
from __future__ import annotations

import csv
import io
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .categories import CATEGORIES
from .categorize import VectorTable

logger = logging.getLogger(__name__)

PRESENT = "#d62728"
ABSENT = "#1f77b4"
CENTROID = "#d62728"
SERIES_COLORS = ("#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
MAX_SCATTER_SERIES = 5
ALPHABETICAL = "alphabetical"
BY_PREVALENCE = "by_prevalence"


class AnalyticsError(ValueError):
    pass


# --- heatmaps --------------------------------------------------------------------

@dataclass(frozen=True)
class HeatmapMatrix:
    rows: tuple[str, ...]
    columns: tuple[str, ...]
    cells: np.ndarray
    column_order: str

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mim", *self.columns])
        for mim, row in zip(self.rows, self.cells):
            w.writerow([mim, *(int(v) for v in row)])
        return buf.getvalue()


def build_heatmap(vectors: VectorTable, order: str = ALPHABETICAL) -> HeatmapMatrix:
    if len(vectors) == 0:
        raise AnalyticsError("cannot build a heatmap from an empty vector table")
    cells = np.asarray(vectors.bits)
    cols = list(range(len(CATEGORIES)))
    if order == BY_PREVALENCE:
        sums = cells.sum(axis=0)
        # canonical index is alphabetical, so it doubles as the tie-break
        cols.sort(key=lambda j: (-int(sums[j]), j))
    elif order != ALPHABETICAL:
        raise AnalyticsError(f"unknown column order {order!r}")
    m = cells[:, cols].copy()
    m.setflags(write=False)
    return HeatmapMatrix(tuple(vectors.mims), tuple(CATEGORIES[j] for j in cols), m, order)


def _write(path, text: str) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise AnalyticsError(f"cannot write {path}: {e}") from e
    return path


def render_heatmap_svg(matrix: HeatmapMatrix, path, title: str = "") -> Path:
    cell, left, top = 16, 70, 150
    n_rows, n_cols = matrix.cells.shape
    width = left + n_cols * cell + 10
    height = top + n_rows * cell + 10
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">',
    ]
    if title:
        out.append(f'<text x="4" y="14" font-size="12">{escape(title)}</text>')
    for j, name in enumerate(matrix.columns):
        x = left + j * cell + cell // 2 + 3
        out.append(f'<text x="{x}" y="{top - 4}" transform="rotate(-60 {x} {top - 4})">{escape(name)}</text>')
    for i, mim in enumerate(matrix.rows):
        y = top + i * cell
        out.append(f'<text x="{left - 4}" y="{y + cell - 4}" text-anchor="end">{escape(mim)}</text>')
        for j in range(n_cols):
            fill = PRESENT if matrix.cells[i, j] else ABSENT
            out.append(f'<rect class="cell" x="{left + j * cell}" y="{y}" width="{cell}" height="{cell}" '
                       f'fill="{fill}" stroke="#ffffff" stroke-width="1"/>')
    out.append("</svg>")
    return _write(path, "\n".join(out) + "\n")


# --- PCA ----------------------------------------------------------------------------

class PhenotypePCA(TransformerMixin, BaseEstimator):
    """Two-component PCA by eigendecomposition of the sample covariance (divisor n - 1).

    Each component is oriented so its largest-magnitude loading is positive
    (first such loading on ties).
    """

    def __init__(self, n_components: int = 2, tol: float = 1e-12):
        self.n_components = n_components
        self.tol = tol

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        n, d = X.shape
        k = self.n_components
        if n < 3:
            raise AnalyticsError(f"PCA needs at least 3 rows, got {n}")
        self.mean_ = X.mean(axis=0)
        Xc = X - self.mean_
        cov = Xc.T @ Xc / (n - 1)
        if int(np.count_nonzero(np.diag(cov) > self.tol)) < 2:
            raise AnalyticsError("PCA needs at least 2 columns with non-zero variance")
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals, kind="stable")[::-1]
        evals, evecs = evals[order], evecs[:, order]
        rank = int(np.count_nonzero(evals > self.tol * max(1.0, float(np.trace(cov)))))
        if rank == 0:
            raise AnalyticsError("degenerate data: covariance rank 0")
        if rank < k:
            logger.warning("covariance rank %d < %d components; trailing components carry no variance", rank, k)
        comps = evecs[:, :k].T.copy()
        for c in comps:
            j = int(np.argmax(np.abs(c)))
            if c[j] < 0:
                c *= -1
        self.components_ = comps
        self.explained_variance_ = np.clip(evals[:k], 0.0, None)
        self.eigenvalues_ = evals
        self.total_variance_ = float(np.trace(cov))
        self.explained_variance_ratio_ = self.explained_variance_ / self.total_variance_
        self.rank_ = rank
        self.n_features_in_ = d
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        return (X - self.mean_) @ self.components_.T

    def inverse_transform(self, Z):
        check_is_fitted(self, "components_")
        return np.asarray(Z, dtype=np.float64) @ self.components_ + self.mean_


@dataclass(frozen=True)
class Projection2D:
    mims: tuple[str, ...]
    points: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    mean: np.ndarray

    def point(self, mim: str) -> tuple[float, float]:
        x, y = self.points[self.mims.index(mim)]
        return float(x), float(y)

    def to_csv(self, membership: Mapping[str, str] | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mim", "series_id", "x", "y"])
        for mim, (x, y) in zip(self.mims, self.points):
            w.writerow([mim, (membership or {}).get(mim, ""), f"{x:.6f}", f"{y:.6f}"])
        return buf.getvalue()


def pca_project(vectors: VectorTable) -> Projection2D:
    pca = PhenotypePCA(2).fit(vectors.bits)
    return Projection2D(tuple(vectors.mims), pca.transform(vectors.bits), pca.components_,
                        pca.explained_variance_, pca.mean_)


@dataclass(frozen=True)
class SeriesCentroid:
    series_id: str
    x: float
    y: float
    member_count: int


def centroids(projection: Projection2D, membership: Mapping[str, str]) -> list[SeriesCentroid]:
    """Per-series mean point; ``membership`` maps every projected MIM to its series."""
    unknown = sorted(set(membership) - set(projection.mims))
    if unknown:
        raise AnalyticsError(f"membership names MIMs absent from the projection: {', '.join(unknown)}")
    missing = [m for m in projection.mims if m not in membership]
    if missing:
        raise AnalyticsError(f"projected MIMs without a series: {', '.join(missing)}")
    groups: dict[str, list[int]] = {}
    for i, mim in enumerate(projection.mims):
        groups.setdefault(membership[mim], []).append(i)
    out = []
    for sid in sorted(groups):
        pts = projection.points[groups[sid]]
        out.append(SeriesCentroid(sid, float(pts[:, 0].mean()), float(pts[:, 1].mean()), len(groups[sid])))
    return out


def centroids_to_csv(cents: Sequence[SeriesCentroid]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["series_id", "x", "y", "member_count"])
    for c in cents:
        w.writerow([c.series_id, f"{c.x:.6f}", f"{c.y:.6f}", c.member_count])
    return buf.getvalue()


def render_scatter_svg(
    projection: Projection2D,
    cents: Sequence[SeriesCentroid],
    membership: Mapping[str, str],
    path,
    series_names: Mapping[str, str] | None = None,
) -> Path:
    if len(cents) > MAX_SCATTER_SERIES:
        raise AnalyticsError(f"scatter plots are capped at {MAX_SCATTER_SERIES} series, got {len(cents)}")
    series = [c.series_id for c in cents]
    color = {sid: SERIES_COLORS[i] for i, sid in enumerate(series)}
    idx = [i for i, m in enumerate(projection.mims) if membership.get(m) in color]
    xs = [float(projection.points[i, 0]) for i in idx] + [c.x for c in cents]
    ys = [float(projection.points[i, 1]) for i in idx] + [c.y for c in cents]
    size, pad, legend_w = 400, 30, 180
    xmin, xmax = (min(xs), max(xs)) if xs else (0.0, 1.0)
    ymin, ymax = (min(ys), max(ys)) if ys else (0.0, 1.0)
    xspan = (xmax - xmin) or 1.0
    yspan = (ymax - ymin) or 1.0

    def sx(x):
        return f"{pad + (x - xmin) / xspan * (size - 2 * pad) if xmax > xmin else size / 2:.2f}"

    def sy(y):
        return f"{size - pad - (y - ymin) / yspan * (size - 2 * pad) if ymax > ymin else size / 2:.2f}"

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + legend_w}" height="{size}" '
        f'viewBox="0 0 {size + legend_w} {size}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="#ffffff" stroke="#cccccc"/>',
        f'<text x="{size / 2:.0f}" y="{size - 6}" text-anchor="middle">PC1</text>',
        f'<text x="10" y="{size / 2:.0f}" transform="rotate(-90 10 {size / 2:.0f})" text-anchor="middle">PC2</text>',
    ]
    for i in idx:
        mim = projection.mims[i]
        x, y = projection.points[i]
        out.append(f'<circle class="disease" data-mim="{mim}" cx="{sx(x)}" cy="{sy(y)}" r="4" '
                   f'fill="{color[membership[mim]]}" fill-opacity="0.8"/>')
    for c in cents:
        cx, cy = sx(c.x), sy(c.y)
        out.append(f'<g class="centroid" data-series="{escape(c.series_id)}" stroke="{CENTROID}" stroke-width="3">'
                   f'<line x1="{float(cx) - 6:.2f}" y1="{float(cy) - 6:.2f}" x2="{float(cx) + 6:.2f}" y2="{float(cy) + 6:.2f}"/>'
                   f'<line x1="{float(cx) - 6:.2f}" y1="{float(cy) + 6:.2f}" x2="{float(cx) + 6:.2f}" y2="{float(cy) - 6:.2f}"/></g>')
    for k, sid in enumerate(series):
        y = 20 + k * 18
        label = (series_names or {}).get(sid) or sid
        out.append(f'<circle cx="{size + 14}" cy="{y}" r="5" fill="{color[sid]}"/>')
        out.append(f'<text class="legend" x="{size + 24}" y="{y + 4}">{escape(label)}</text>')
    out.append("</svg>")
    return _write(path, "\n".join(out) + "\n")


# --- frequency tables ------------------------------------------------------------------

def frequency_tables(signs: Mapping[str, Sequence], categories: Mapping[str, Mapping[str, Sequence]]) -> tuple[str, str]:
    """Term and category count CSVs over a series' member diseases.

    Term counts are per disease mention, category counts are the number of
    signs placed in each category. Both sort by descending count, then name.
    """
    terms: Counter[str] = Counter()
    for mim in sorted(signs):
        terms.update(s.text.lower() for s in signs[mim])
    cats: Counter[str] = Counter()
    for mim in sorted(categories):
        for cat, members in categories[mim].items():
            cats[cat] += len(members)
    return _counts_csv("term", terms), _counts_csv("category", cats)


def _counts_csv(header: str, counts: Counter) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([header, "count"])
    for name, n in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
        w.writerow([name, n])
    return buf.getvalue()
