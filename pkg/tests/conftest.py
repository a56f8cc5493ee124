import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import pytest

from htpheno.embeddings import load_vectors
from htpheno.ontology import load_ontology

FIXTURES = Path(__file__).parent / "fixtures"
MINI = FIXTURES / "mini"


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def hpo_index():
    return load_ontology(FIXTURES / "hp_fixture.obo")


@pytest.fixture(scope="session")
def store():
    return load_vectors(FIXTURES / "vectors.txt")


class FakeServer:
    """Scriptable HTTP server; ``routes`` maps path -> callable(query, body) -> (status, payload)."""

    def __init__(self):
        self.routes = {}
        self.requests = []
        server = self

        class Handler(BaseHTTPRequestHandler):
            def _serve(self, body=None):
                url = urlparse(self.path)
                query = {k: v if len(v) > 1 else v[0] for k, v in parse_qs(url.query).items()}
                server.requests.append({"path": url.path, "query": query, "headers": dict(self.headers), "body": body})
                handler = server.routes.get(url.path)
                if handler is None:
                    status, payload = 404, {"error": "no route"}
                else:
                    status, payload = handler(query, body)
                data = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def do_GET(self):
                self._serve()

            def do_POST(self):
                n = int(self.headers.get("Content-Length", 0))
                self._serve(json.loads(self.rfile.read(n) or b"null"))

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}"
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self.thread.start()

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def fake_server():
    s = FakeServer()
    yield s
    s.close()


# --- acceptance reporting -------------------------------------------------------------

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """``with criterion(n, title): ...`` records one PASS/FAIL line for acceptance criterion ``n``."""
    import contextlib
    import time

    @contextlib.contextmanager
    def run(number, title):
        t0 = time.perf_counter()
        status = "FAIL"
        try:
            yield
            status = "PASS"
        finally:
            line = f"[{status}] criterion {number}: {title} ({time.perf_counter() - t0:.2f} s)"
            print(line)
            request.config.stash[_ACCEPTANCE].append((number, line))

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
