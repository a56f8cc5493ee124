import json
import re

import pytest
from hypothesis import given, strategies as st

from htpheno.backends import ChatBackend, LexiconBackend, ReplayBackend, make_backend
from htpheno.corpus import AuthenticationError, ClinicalSummary, TransportError, preprocess
from htpheno.extraction import (
    ExtractionFailure, Lexicon, MissingKey, NoJsonObject, Sign, call_backend, dedupe_signs, extract_json_object,
    identify_signs, lexicon_extract, parse_sign_response,
)


def texts(signs):
    return [s.text for s in signs]


@pytest.mark.parametrize("raw, expected", [
    ('{"Signs":["tremor"]}', ["tremor"]),
    ('Here you go: ```{"Signs":[]}```', []),
    ('{"Signs":["Tremor", "tremor", " spastic,  gait "]}', ["Tremor", "spastic gait"]),
    ('{"Signs":["a {curly} sign"]} trailing {"Signs":["x"]}', ["a {curly} sign"]),
])
def test_parse_examples(raw, expected):
    assert texts(parse_sign_response(raw)) == expected


def test_missing_key():
    with pytest.raises(MissingKey, match="Signs"):
        parse_sign_response('{"Symptoms":["tremor"]}')


@pytest.mark.parametrize("raw", ["no json here", "{unbalanced", '["Signs"]', "{'Signs': [}"])
def test_no_object(raw):
    with pytest.raises(NoJsonObject):
        parse_sign_response(raw)


def test_relaxed_parse_is_flagged():
    obj, relaxed = extract_json_object("{'Signs': ['pes cavus']}")
    assert obj == {"Signs": ["pes cavus"]} and relaxed
    assert extract_json_object('{"Signs": []}')[1] is False


def test_sign_requires_preprocessed_text():
    with pytest.raises(ValueError):
        Sign("spastic, gait")
    assert Sign.from_raw(" - ") is None


# --- lexicon -----------------------------------------------------------------------

@pytest.mark.parametrize("lexicon, text, expected", [
    (["gait", "spastic gait"], "a spastic gait", ["spastic gait"]),
    (["tremor"], "no match here", []),
    (["tremor"], "tremor at rest. tremor when moving.", ["tremor"]),
    (["spastic gait", "tremor"], "progressive spastic gait and tremor.", ["spastic gait", "tremor"]),
    (["spastic gait"], "spastic. gait", []),  # matches never cross sentence boundaries
    (["Muscle Weakness"], "proximal muscle-weakness", ["Muscle Weakness"]),
])
def test_lexicon_examples(lexicon, text, expected):
    assert texts(lexicon_extract(lexicon, text)) == expected


def _oracle(lexicon, text):
    """Regex alternation, longest phrases first, greedily scanned left to right per sentence."""
    phrases = sorted({preprocess(p).lower() for p in lexicon if preprocess(p)}, key=lambda p: (-len(p.split()), p))
    out = []
    for sentence in preprocess(text).lower().split("."):
        tokens = sentence.split()
        spans = []
        for p in phrases:
            pat = re.compile(r"(?:(?<= )|^)" + re.escape(p) + r"(?= |$)")
            joined = " ".join(tokens)
            for m in pat.finditer(joined):
                start = joined[: m.start()].count(" ") if m.start() else 0
                spans.append((start, start + len(p.split()), p))
        spans.sort(key=lambda s: (s[0] - s[1], s[0]))
        used, kept = set(), []
        for a, b, p in spans:
            if used.isdisjoint(range(a, b)):
                used.update(range(a, b))
                kept.append((a, p))
        out.extend(p for _, p in sorted(kept))
    seen, result = set(), []
    for p in out:
        if p not in seen:
            seen.add(p)
            result.append(p)
    return result


words = st.sampled_from(["spastic", "gait", "tremor", "muscle", "weakness", "and", "of"])
phrase = st.lists(words, min_size=1, max_size=3).map(" ".join)


@given(st.lists(phrase, min_size=1, max_size=6),
       st.lists(st.one_of(words, st.just(".")), max_size=25).map(" ".join))
def test_lexicon_matches_regex_oracle(lexicon, text):
    assert [s.key for s in lexicon_extract(lexicon, text)] == _oracle(lexicon, text)


def test_lexicon_file(tmp_path):
    p = tmp_path / "lex.tsv"
    p.write_text("# comment\nspastic gait\tGait\ntremor\n\n")
    lex = Lexicon.load(p)
    assert lex.phrases == ["spastic gait", "tremor"]
    assert lex.categories == {"spastic gait": "Gait"}


def test_packaged_lexicon_categories_are_canonical():
    from htpheno.categories import CATEGORIES
    backend = make_backend("lexicon")
    assert len(backend.lexicon.phrases) > 100
    assert set(backend.lexicon.categories.values()) <= set(CATEGORIES)


# --- backend calls -----------------------------------------------------------------

class Scripted:
    name = "scripted"
    deterministic = True

    def __init__(self, responses):
        self.responses = list(responses)
        self.calls = 0

    def complete(self, stage, key, messages):
        self.calls += 1
        r = self.responses.pop(0)
        if isinstance(r, Exception):
            raise r
        return r


def _summary(text="Progressive weakness and muscle atrophy."):
    return ClinicalSummary("105400", description=text)


def test_identify_with_replay(tmp_path):
    (tmp_path / "105400.identify.json").write_text('{"Signs":["weakness","muscle atrophy"]}')
    assert texts(identify_signs(ReplayBackend(tmp_path), _summary())) == ["weakness", "muscle atrophy"]


def test_identify_with_lexicon():
    backend = LexiconBackend(Lexicon(["spastic gait", "tremor", "gait"]))
    summary = ClinicalSummary("123456", description="progressive spastic gait and tremor.")
    assert texts(identify_signs(backend, summary)) == ["spastic gait", "tremor"]


def test_empty_summary_precondition():
    with pytest.raises(ValueError):
        identify_signs(Scripted([]), ClinicalSummary("105400"))


def test_retry_then_success():
    b = Scripted([TransportError("boom"), "not json", '{"Signs":["tremor"]}'])
    exchanges, slept = [], []
    out = call_backend(b, "identify", "105400", [], lambda o: o["Signs"], max_attempts=3, backoff=0.5,
                       exchanges=exchanges, sleep=slept.append)
    assert out == ["tremor"]
    assert b.calls == 3
    assert slept == [0.5, 1.0]
    assert exchanges[0].attempts == 3 and exchanges[0].parsed


@pytest.mark.parametrize("n", [1, 2, 5])
def test_attempts_are_bounded(n):
    b = Scripted(["garbage"] * 10)
    exchanges = []
    with pytest.raises(ExtractionFailure) as info:
        identify_signs(b, _summary(), max_attempts=n, exchanges=exchanges)
    assert b.calls == n
    assert info.value.attempts == n and info.value.key == "105400"
    assert not exchanges[0].parsed


def test_auth_error_not_retried():
    b = Scripted([AuthenticationError("nope"), '{"Signs":[]}'])
    with pytest.raises(AuthenticationError):
        identify_signs(b, _summary(), max_attempts=3)
    assert b.calls == 1


def test_replay_is_deterministic(fixtures_dir):
    replay = ReplayBackend(fixtures_dir / "mini" / "replay")
    runs = [texts(identify_signs(replay, _summary())) for _ in range(3)]
    assert runs[0] == runs[1] == runs[2]
    assert runs[0][:2] == ["muscle weakness", "muscle atrophy"]


def test_dedupe_signs_keeps_first():
    assert texts(dedupe_signs(["Weakness", "", "weakness", "pes cavus"])) == ["Weakness", "pes cavus"]


# --- chat backend against a local fake server ----------------------------------------

def _completion(content):
    return {"choices": [{"message": {"role": "assistant", "content": content}}]}


def test_chat_backend_request_shape(fake_server):
    fake_server.routes["/v1/chat/completions"] = lambda q, body: (200, _completion('{"Signs":["ataxia"]}'))
    backend = ChatBackend("gpt-4", base_url=fake_server.url + "/v1", api_key="secret", rate=1000)
    out = identify_signs(backend, _summary("Ataxia."))
    assert texts(out) == ["ataxia"]
    req = fake_server.requests[0]
    assert req["headers"]["Authorization"] == "Bearer secret"
    assert req["body"]["model"] == "gpt-4" and req["body"]["temperature"] == 0.0
    assert req["body"]["response_format"] == {"type": "json_object"}
    assert [m["role"] for m in req["body"]["messages"]] == ["system", "user"]
    assert "Ataxia." in req["body"]["messages"][-1]["content"]


def test_chat_backend_auth(fake_server):
    fake_server.routes["/v1/chat/completions"] = lambda q, body: (401, {"error": "bad key"})
    backend = ChatBackend("gpt-4", base_url=fake_server.url + "/v1", api_key="bad", rate=1000)
    with pytest.raises(AuthenticationError):
        identify_signs(backend, _summary())


def test_chat_backend_retries_rate_limit(fake_server):
    replies = [(429, {"error": "slow down"}), (200, _completion('{"Signs":["tremor"]}'))]
    fake_server.routes["/v1/chat/completions"] = lambda q, body: replies.pop(0)
    backend = ChatBackend("gpt-4", base_url=fake_server.url + "/v1", api_key="k", rate=1000)
    assert texts(identify_signs(backend, _summary(), max_attempts=2)) == ["tremor"]


def test_chat_backend_needs_key(monkeypatch):
    monkeypatch.delenv("LLM_API_KEY", raising=False)
    with pytest.raises(AuthenticationError):
        ChatBackend("gpt-4", base_url="http://127.0.0.1:9").complete("identify", "1", [])


def test_lexicon_backend_categorize_payload():
    backend = LexiconBackend(Lexicon(["tremor", "pes cavus"], {"tremor": "Tremor"}))
    raw = backend.complete("categorize.1", "1", [{"role": "user", "content": json.dumps(["tremor", "pes cavus"])}])
    assert json.loads(raw) == {"Tremor": ["tremor"], "Unclassified": ["pes cavus"]}
