"""Command-line entry point: ``htpheno {fetch,phenotype,analyze,evaluate}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .corpus import (
    ApiConfig, AuthenticationError, CorpusError, DiskCache, NotFoundError, OmimClient, load_manifests,
)
from .pipeline import PipelineError, RunConfig, load_run_manifests, run_analyze, run_evaluate, run_phenotype

logger = logging.getLogger("htpheno")

GLOBAL_DEFAULTS = {
    "cache_dir": Path("cache"),
    "out_dir": Path("out"),
    "hpo": None,
    "vectors": None,
    "backend": "chat",
    "model": "gpt-4",
    "min_similarity": 0.0,
    "match_threshold": 0.80,
    "max_inflight": 4,
    "offline": False,
    "manifest": None,
    "log_level": "WARNING",
}


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    def d(name):
        return argparse.SUPPRESS if suppress else GLOBAL_DEFAULTS[name]

    g = parser.add_argument_group("global options")
    g.add_argument("--cache-dir", type=Path, default=d("cache_dir"))
    g.add_argument("--out-dir", type=Path, default=d("out_dir"))
    g.add_argument("--hpo", type=Path, default=d("hpo"), help="hp.obo or hp.json")
    g.add_argument("--vectors", type=Path, default=d("vectors"), help="word2vec text file (optionally .gz)")
    g.add_argument("--backend", choices=["chat", "lexicon", "replay"], default=d("backend"))
    g.add_argument("--model", default=d("model"))
    g.add_argument("--min-similarity", type=float, default=d("min_similarity"))
    g.add_argument("--match-threshold", type=float, default=d("match_threshold"))
    g.add_argument("--max-inflight", type=int, default=d("max_inflight"))
    g.add_argument("--offline", action="store_true", default=d("offline"))
    g.add_argument("--manifest", type=Path, default=d("manifest"), help="series manifest JSON")
    g.add_argument("--log-level", default=d("log_level"), choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="htpheno", description=__doc__)
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch", parents=[common], help="cache series manifests and clinical summaries")
    p.add_argument("series", nargs="*", help="phenotypic series ids (PS######)")
    p.add_argument("--base-url", default="https://api.omim.org")
    p.add_argument("--rate", type=float, default=4.0, help="requests per second")

    p = sub.add_parser("phenotype", parents=[common], help="identify, categorize and normalize signs")
    p.add_argument("--replay-dir", type=Path)
    p.add_argument("--lexicon", type=Path)
    p.add_argument("--no-synopsis", action="store_true", help="leave clinical synopsis text out of the prompt")
    p.add_argument("--labels-only", action="store_true", help="match HPO labels only, not synonyms")
    p.add_argument("--min-chars", type=int, default=1)
    p.add_argument("--max-attempts", type=int, default=3)
    p.add_argument("--backoff", type=float, default=1.0)
    p.add_argument("--rate", type=float, default=1.0, help="chat requests per second")

    p = sub.add_parser("analyze", parents=[common], help="heatmaps, PCA centroids and frequency tables")
    p.add_argument("--series", nargs="*", default=[])
    p.add_argument("--scatter-series", nargs="*")

    p = sub.add_parser("evaluate", parents=[common], help="concordance metrics against annotations")
    p.add_argument("annotations", type=Path)
    return parser


def _config(args) -> RunConfig:
    return RunConfig(
        cache_dir=args.cache_dir,
        out_dir=args.out_dir,
        hpo=args.hpo,
        vectors=args.vectors,
        backend=args.backend,
        model=args.model,
        min_similarity=args.min_similarity,
        match_threshold=args.match_threshold,
        max_inflight=args.max_inflight,
        manifest=args.manifest,
        offline=args.offline,
        replay_dir=getattr(args, "replay_dir", None),
        lexicon=getattr(args, "lexicon", None),
        include_synopsis=not getattr(args, "no_synopsis", False),
        labels_only=getattr(args, "labels_only", False),
        min_chars=getattr(args, "min_chars", 1),
        max_attempts=getattr(args, "max_attempts", 3),
        backoff=getattr(args, "backoff", 1.0),
        rate=getattr(args, "rate", 1.0),
    )


def cmd_fetch(args) -> int:
    cache = DiskCache(args.cache_dir)
    client = OmimClient(ApiConfig.from_env(base_url=args.base_url, max_inflight=args.max_inflight,
                                           rate=args.rate, offline=args.offline), cache)
    manifests, problems = [], {}
    if args.manifest:
        manifests = load_manifests(args.manifest)
        for m in manifests:
            cache.put_manifest(m)
    for sid in args.series:
        if any(m.series_id == sid for m in manifests):
            continue
        try:
            manifests.append(client.fetch_series(sid))
        except NotFoundError as e:
            problems[sid] = str(e)
    mims = sorted({m for man in manifests for m in man.mims})

    def one(mim):
        try:
            client.fetch_summary(mim)
            return mim, None
        except AuthenticationError:
            raise
        except CorpusError as e:
            return mim, f"{type(e).__name__}: {e}"

    with ThreadPoolExecutor(max_workers=max(1, args.max_inflight)) as pool:
        for mim, err in pool.map(one, mims):
            if err:
                problems[mim] = err
    report = {
        "series": [m.series_id for m in manifests],
        "diseases": len(mims),
        "cached": len(mims) - sum(1 for k in problems if k in mims),
        "network_calls": client.network_calls,
        "failures": dict(sorted(problems.items())),
    }
    print(json.dumps(report, indent=2))
    return 0


def cmd_phenotype(args) -> int:
    config = _config(args)
    manifests = load_run_manifests(config)
    report = run_phenotype(config, manifests)
    print(json.dumps({k: report[k] for k in ("diseases", "usable_diseases", "signs_identified", "failures")},
                     indent=2))
    return 0


def cmd_analyze(args) -> int:
    config = _config(args)
    manifests = load_run_manifests(config)
    written = run_analyze(config, manifests, args.series, args.scatter_series)
    for p in written:
        print(p)
    return 0


def cmd_evaluate(args) -> int:
    config = _config(args)
    report = run_evaluate(config, args.annotations)
    print(json.dumps(report, indent=2))
    return 0


COMMANDS = {"fetch": cmd_fetch, "phenotype": cmd_phenotype, "analyze": cmd_analyze, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except AuthenticationError as e:
        print(f"error: authentication failed: {e}", file=sys.stderr)
        return 3
    except (PipelineError, CorpusError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
