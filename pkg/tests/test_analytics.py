import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from htpheno.analytics import (
    ABSENT, ALPHABETICAL, BY_PREVALENCE, PRESENT, AnalyticsError, PhenotypePCA, Projection2D, build_heatmap,
    centroids, centroids_to_csv, frequency_tables, pca_project, render_heatmap_svg, render_scatter_svg,
)
from htpheno.categories import CATEGORIES, CATEGORY_INDEX
from htpheno.categorize import VectorTable
from htpheno.extraction import Sign


def table(rows, mims=None):
    rows = np.asarray(rows, dtype=np.int8)
    mims = mims or [f"{100000 + i}" for i in range(len(rows))]
    return VectorTable(mims, rows)


def bits(*cats):
    b = np.zeros(30, dtype=np.int8)
    for c in cats:
        b[CATEGORY_INDEX[c]] = 1
    return b


def svd_oracle(X, k=2):
    """PCA through SVD of the centred data, sign-normalised like the estimator."""
    Xc = X - X.mean(axis=0)
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = vt[:k].copy()
    for c in comps:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1
    return comps, (s[:k] ** 2) / (len(X) - 1)


# --- heatmap ---------------------------------------------------------------------------

def test_prevalence_puts_weakness_and_atrophy_first():
    t = table([bits("Weakness", "Muscle Atrophy", "Gait"), bits("Weakness", "Muscle Atrophy"),
               bits("Weakness", "Muscle Atrophy", "Speech")])
    assert build_heatmap(t, BY_PREVALENCE).columns[:2] == ("Muscle Atrophy", "Weakness")
    # remaining columns: equal sums fall back to alphabetical order
    assert build_heatmap(t, BY_PREVALENCE).columns[2:4] == ("Gait", "Speech")


def test_single_disease_alphabetical():
    m = build_heatmap(table([bits("Tremor")]), ALPHABETICAL)
    assert m.cells.shape == (1, 30)
    assert m.columns == CATEGORIES


def test_equal_sums_alphabetical():
    m = build_heatmap(table([np.ones(30), np.ones(30)]), BY_PREVALENCE)
    assert m.columns == CATEGORIES


def test_empty_heatmap_error():
    with pytest.raises(AnalyticsError):
        build_heatmap(table(np.zeros((0, 30))))


def test_heatmap_cells_preserved():
    t = table([bits("Tremor", "Gait"), bits("Gait")])
    m = build_heatmap(t, BY_PREVALENCE)
    for i, mim in enumerate(m.rows):
        for j, c in enumerate(m.columns):
            assert m.cells[i, j] == t.row(mim)[CATEGORY_INDEX[c]]
    assert m.to_csv().splitlines()[0] == "mim," + ",".join(m.columns)


def test_heatmap_svg(tmp_path):
    m = build_heatmap(table([bits("Tremor"), bits("Gait", "Weakness")]))
    a = render_heatmap_svg(m, tmp_path / "a.svg").read_text()
    b = render_heatmap_svg(m, tmp_path / "b.svg").read_text()
    assert a == b
    assert a.count('<rect class="cell"') == 60
    assert a.count(f'fill="{PRESENT}"') == 3


def test_all_zero_heatmap_has_no_red(tmp_path):
    svg = render_heatmap_svg(build_heatmap(table(np.zeros((2, 30)))), tmp_path / "z.svg").read_text()
    assert PRESENT not in svg and svg.count(ABSENT) == 60


# --- PCA -------------------------------------------------------------------------------

def planted(n=100, d=30, seed=7):
    rng = np.random.default_rng(seed)
    basis = np.linalg.qr(rng.normal(size=(d, 2)))[0].T
    scores = rng.normal(size=(n, 2)) * [3.0, 1.0]
    return scores @ basis + rng.normal(size=d)


def test_pca_matches_svd_oracle():
    X = planted()
    pca = PhenotypePCA().fit(X)
    comps, var = svd_oracle(X)
    assert np.max(np.abs(pca.components_ - comps)) < 1e-9
    assert np.max(np.abs(pca.explained_variance_ - var)) < 1e-9
    assert pca.total_variance_ == pytest.approx(np.trace(np.cov(X, rowvar=False)), abs=1e-9)
    assert pca.eigenvalues_.sum() == pytest.approx(pca.total_variance_, abs=1e-9)


def test_pca_reconstructs_rank_two_data():
    X = planted()
    pca = PhenotypePCA().fit(X)
    assert np.max(np.abs(pca.inverse_transform(pca.transform(X)) - X)) < 1e-9


def test_rank_one_data():
    rng = np.random.default_rng(3)
    X = np.outer(rng.normal(size=20), rng.normal(size=30)) + 2.0
    pca = PhenotypePCA().fit(X)
    assert pca.rank_ == 1
    assert abs(pca.explained_variance_[1]) <= 1e-9


def test_duplicated_rows_same_directions():
    X = planted(n=20)
    a = PhenotypePCA().fit(X)
    b = PhenotypePCA().fit(np.vstack([X, X]))
    assert np.allclose(a.components_, b.components_, atol=1e-9)
    assert np.allclose(a.explained_variance_ratio_, b.explained_variance_ratio_, atol=1e-9)


@pytest.mark.parametrize("X, msg", [
    (np.ones((2, 30)), "at least 3 rows"),
    (np.ones((5, 30)), "non-zero variance"),
    (np.c_[np.arange(5.0), np.zeros((5, 29))], "non-zero variance"),
])
def test_degenerate_pca(X, msg):
    with pytest.raises(AnalyticsError, match=msg):
        PhenotypePCA().fit(X)


@settings(max_examples=30, deadline=None)
@given(arrays(np.int8, (8, 30), elements=st.integers(0, 1)))
def test_binary_pca_against_oracle(X):
    Xf = X.astype(float)
    cov = np.cov(Xf, rowvar=False)
    if np.count_nonzero(np.diag(cov) > 1e-12) < 2:
        return
    pca = PhenotypePCA().fit(Xf)
    _, var = svd_oracle(Xf)
    assert np.allclose(pca.explained_variance_, var, atol=1e-9)
    assert pca.explained_variance_[0] >= pca.explained_variance_[1] >= 0
    assert np.allclose(pca.components_ @ pca.components_.T, np.eye(2), atol=1e-9)


def test_pca_project_table():
    t = table([bits("Gait"), bits("Tremor"), bits("Gait", "Tremor", "Weakness"), bits()])
    p = pca_project(t)
    assert p.points.shape == (4, 2)
    assert p.mims == tuple(t.mims)
    assert abs(p.points.mean(axis=0)).max() < 1e-12


# --- centroids and scatter ----------------------------------------------------------------

def proj(points, mims=None):
    points = np.asarray(points, dtype=float)
    mims = tuple(mims or [f"{100000 + i}" for i in range(len(points))])
    return Projection2D(mims, points, np.eye(2, 30), np.ones(2), np.zeros(30))


def test_centroid_of_two_points():
    (c,) = centroids(proj([(0, 0), (2, 2)]), {"100000": "PS000001", "100001": "PS000001"})
    assert (c.x, c.y, c.member_count) == (1.0, 1.0, 2)


def test_single_member_centroid_is_the_point():
    (c,) = centroids(proj([(0.3, -1.5)]), {"100000": "PS000001"})
    assert (c.x, c.y) == (0.3, -1.5)


def test_unknown_mim_error():
    with pytest.raises(AnalyticsError, match="999999"):
        centroids(proj([(0, 0)]), {"100000": "PS000001", "999999": "PS000001"})


def _series(n):
    pts = [(i, i % 3) for i in range(2 * n)]
    p = proj(pts)
    membership = {m: f"PS{i // 2 + 1:06d}" for i, m in enumerate(p.mims)}
    return p, membership


def test_five_series_five_markers(tmp_path):
    p, membership = _series(5)
    cents = centroids(p, membership)
    assert len(cents) == 5
    svg = render_scatter_svg(p, cents, membership, tmp_path / "s.svg").read_text()
    assert svg.count('<g class="centroid"') == 5
    assert svg.count('<circle class="disease"') == 10
    assert svg == render_scatter_svg(p, cents, membership, tmp_path / "t.svg").read_text()
    assert centroids_to_csv(cents).splitlines()[0] == "series_id,x,y,member_count"


def test_six_series_rejected(tmp_path):
    p, membership = _series(6)
    with pytest.raises(AnalyticsError, match="5"):
        render_scatter_svg(p, centroids(p, membership), membership, tmp_path / "s.svg")


def test_one_disease_marker_and_x_coincide(tmp_path):
    p = proj([(1.0, 2.0)])
    membership = {"100000": "PS000001"}
    svg = render_scatter_svg(p, centroids(p, membership), membership, tmp_path / "s.svg").read_text()
    assert 'cx="200.00" cy="200.00"' in svg
    assert 'x1="194.00" y1="194.00" x2="206.00" y2="206.00"' in svg


# --- frequency tables ------------------------------------------------------------------------

def test_cmt_like_category_table():
    W, D, G, S_ = "Weakness", "Deformity", "Gait", "Sensory"
    signs = {
        "118200": [Sign("distal weakness"), Sign("pes cavus"), Sign("steppage gait")],
        "118210": [Sign("distal weakness"), Sign("pes cavus"), Sign("hammer toes")],
        "118220": [Sign("distal weakness"), Sign("hand weakness"), Sign("foot drop"), Sign("areflexia")],
    }
    cats = {
        "118200": {W: [Sign("distal weakness")], D: [Sign("pes cavus")], G: [Sign("steppage gait")]},
        "118210": {W: [Sign("distal weakness")], D: [Sign("pes cavus"), Sign("hammer toes")]},
        "118220": {W: [Sign("distal weakness"), Sign("hand weakness")], G: [Sign("foot drop")], S_: [Sign("areflexia")]},
    }
    terms, categories = frequency_tables(signs, cats)
    assert categories.splitlines() == ["category,count", "Weakness,4", "Deformity,3", "Gait,2", "Sensory,1"]
    assert terms.splitlines()[:3] == ["term,count", "distal weakness,3", "pes cavus,2"]


def test_empty_frequency_tables():
    assert frequency_tables({}, {}) == ("term,count\n", "category,count\n")


def test_same_sign_in_two_diseases_counts_twice():
    terms, _ = frequency_tables({"100000": [Sign("Tremor")], "100001": [Sign("tremor")]}, {})
    assert terms == "term,count\ntremor,2\n"
