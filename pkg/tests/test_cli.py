import csv
import json
import shutil

import pytest

from htpheno.cli import main
from htpheno.corpus import DiskCache, SeriesManifest, make_raw, summary_from_raw, write_manifests

from fixtures.build_fixtures import MINI, mini_argv


@pytest.fixture
def mini_cache(tmp_path):
    dst = tmp_path / "cache"
    shutil.copytree(MINI / "cache", dst)
    return dst


def test_fetch_offline_warm_cache(mini_cache, capsys):
    assert main(["fetch", "PS105400", "PS303350", "--cache-dir", str(mini_cache), "--offline"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report == {"series": ["PS105400", "PS303350"], "diseases": 5, "cached": 5, "network_calls": 0,
                      "failures": {}}


def test_fetch_bad_key_nonzero_exit(fake_server, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("OMIM_API_KEY", "wrong")
    fake_server.routes["/api/phenotypicSeries/PS601104"] = lambda q, b: (401, {"error": "invalid key"})
    code = main(["fetch", "PS601104", "--cache-dir", str(tmp_path), "--base-url", fake_server.url])
    assert code == 3
    assert "authentication" in capsys.readouterr().err


def test_fetch_unknown_series_is_reported(fake_server, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("OMIM_API_KEY", "k")
    code = main(["fetch", "PS999999", "--cache-dir", str(tmp_path), "--base-url", fake_server.url])
    assert code == 0
    assert "PS999999" in json.loads(capsys.readouterr().out)["failures"]


def _lexicon_corpus(tmp_path):
    cache = DiskCache(tmp_path / "cache")
    texts = {"100001": "Progressive spastic gait and tremor.", "100002": "", "100003": "Nothing relevant here."}
    for mim, text in texts.items():
        raw = make_raw(mim, text)
        cache.put_summary(mim, raw, summary_from_raw(mim, raw, "2024-01-01T00:00:00+00:00"))
    man = SeriesManifest("PS000001", "test series", tuple((m, m) for m in texts))
    write_manifests([man], tmp_path / "manifest.json")
    return ["--cache-dir", str(tmp_path / "cache"), "--manifest", str(tmp_path / "manifest.json"),
            "--out-dir", str(tmp_path / "out"), "--backend", "lexicon"]


def test_phenotype_with_lexicon_lists_unusable(tmp_path):
    args = _lexicon_corpus(tmp_path)
    assert main(["phenotype", *args]) == 0
    report = json.loads((tmp_path / "out" / "run_report.json").read_text())
    assert report["diseases"] == 3 and report["usable_diseases"] == 1
    assert report["unusable"] == {"100002": "empty summary", "100003": "no signs identified"}
    signs = json.loads((tmp_path / "out" / "signs.json").read_text())
    assert signs == {"100001": ["spastic gait", "tremor"]}
    cats = json.loads((tmp_path / "out" / "categories.json").read_text())
    assert cats == {"100001": {"Gait": ["spastic gait"], "Tremor": ["tremor"]}}


def test_global_flags_before_subcommand(tmp_path):
    args = _lexicon_corpus(tmp_path)
    assert main([*args, "phenotype", "--no-synopsis"]) == 0
    report = json.loads((tmp_path / "out" / "run_report.json").read_text())
    assert report["settings"]["include_synopsis"] is False


def test_missing_hpo_file(tmp_path, capsys):
    args = _lexicon_corpus(tmp_path)
    assert main(["phenotype", *args, "--hpo", str(tmp_path / "nope.obo")]) == 1
    assert "does not exist" in capsys.readouterr().err


@pytest.fixture(scope="module")
def mini_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("mini")
    for argv in mini_argv(out):
        assert main(argv) == 0
    return out


def test_run_report_contents(mini_run):
    r = json.loads((mini_run / "run_report.json").read_text())
    assert (r["diseases"], r["usable_diseases"], r["signs_identified"], r["unique_signs_identified"]) == (5, 5, 30, 22)
    assert r["relaxed_json_responses"] == 1
    assert r["unembeddable_signs"] == 1
    assert r["unverified_backend_ids"] == 3
    assert r["failures"] == {}
    assert len(r["checksums"]["hpo"]) == 64 and len(r["checksums"]["vectors"]) == 64


def test_analyze_outputs(mini_run):
    for sid in ("PS105400", "PS303350"):
        assert (mini_run / f"{sid}.terms.csv").read_text().startswith("term,count\n")
        assert (mini_run / f"{sid}.categories.csv").read_text().startswith("category,count\n")
    cents = list(csv.DictReader((mini_run / "PS105400+PS303350.centroids.csv").open()))
    assert [(c["series_id"], c["member_count"]) for c in cents] == [("PS105400", "3"), ("PS303350", "2")]


def test_analyze_rejects_six_series(mini_run, tmp_path, capsys):
    mans = [SeriesManifest(f"PS00000{i}", f"s{i}", ((f"10000{i}", "x"),)) for i in range(6)]
    write_manifests(mans, tmp_path / "m.json")
    code = main(["analyze", "--out-dir", str(mini_run), "--manifest", str(tmp_path / "m.json"),
                 "--scatter-series", *[m.series_id for m in mans]])
    assert code == 1
    assert "capped at 5" in capsys.readouterr().err


def write_self_annotations(out, path, annotator="self"):
    signs = json.loads((out / "signs.json").read_text())
    cats = json.loads((out / "categories.json").read_text())
    cat_of = {(m, s): c for m, d in cats.items() for c, v in d.items() for s in v}
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["mim", "annotator", "sign", "category", "hpo_id"])
        for mim, lst in signs.items():
            for s in lst:
                w.writerow([mim, annotator, s, cat_of[(mim, s)], ""])


def test_evaluate_self(mini_run, tmp_path):
    gold = tmp_path / "self.csv"
    write_self_annotations(mini_run, gold)
    fixtures = MINI.parent
    assert main(["evaluate", str(gold), "--out-dir", str(mini_run), "--vectors", str(fixtures / "vectors.txt")]) == 0
    report = json.loads((mini_run / "evaluation.json").read_text())
    ident = report["annotators"]["self"]["identification"]
    assert (ident["jaccard"], ident["max_similarity_index"], ident["weak_match_pct"]) == (1.0, 100.0, 0.0)
    assert (ident["precision"], ident["recall"], ident["f1"]) == (1.0, 1.0, 1.0)
    assert report["annotators"]["self"]["categorization"]["accuracy"] == 1.0
    assert report["header"]["checksums"]["annotations"]


def test_evaluate_two_annotators(mini_run, tmp_path):
    gold = tmp_path / "two.csv"
    gold.write_text("mim,annotator,sign,category,hpo_id\n"
                    "105400,A,muscle weakness,Weakness,HP:0001324\n"
                    "105400,A,dysarthria,Speech,HP:0001260\n"
                    "105400,B,muscle weakness,Weakness,HP:0001324\n"
                    "105400,B,tremor,Tremor,HP:0001337\n")
    fixtures = MINI.parent
    assert main(["evaluate", str(gold), "--out-dir", str(mini_run), "--vectors", str(fixtures / "vectors.txt"),
                 "--hpo", str(fixtures / "hp_fixture.obo")]) == 0
    report = json.loads((mini_run / "evaluation.json").read_text())
    assert set(report["annotators"]) == {"A", "B"}
    assert set(report["inter_annotator"]) == {"A_vs_B", "B_vs_A"}
    assert report["inter_annotator"]["A_vs_B"]["jaccard"] == pytest.approx(1 / 3)
    assert report["union"]["identification"]["gold_signs"] == 3
    norm = report["annotators"]["A"]["normalization"]["backend"]
    assert norm["accuracy"] == 1.0 and norm["evaluated"] == 2


def test_evaluate_unknown_mim(mini_run, tmp_path, capsys):
    gold = tmp_path / "bad.csv"
    gold.write_text("mim,annotator,sign\n999999,A,tremor\n")
    code = main(["evaluate", str(gold), "--out-dir", str(mini_run), "--vectors", str(MINI.parent / "vectors.txt")])
    assert code == 1
    assert "999999" in capsys.readouterr().err


def test_evaluate_empty_annotations(mini_run, tmp_path, capsys):
    gold = tmp_path / "empty.csv"
    gold.write_text("mim,annotator,sign\n")
    code = main(["evaluate", str(gold), "--out-dir", str(mini_run), "--vectors", str(MINI.parent / "vectors.txt")])
    assert code == 1
    assert "no annotations" in capsys.readouterr().err
