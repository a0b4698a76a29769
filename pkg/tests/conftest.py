import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from clozerank.backends import build_backends
from clozerank.ingest import load_dataset
from clozerank.synthetic import build_fixture


@pytest.fixture(scope="session")
def lift_fixture(tmp_path_factory):
    """20 queries, truth at head position 2 or 3, only the truth completes correctly."""
    return build_fixture(tmp_path_factory.mktemp("lift"), n_lift=20, seed=7)


@pytest.fixture(scope="session")
def sweep_fixture(tmp_path_factory):
    """Lift queries plus queries that a large alpha2 breaks."""
    return build_fixture(tmp_path_factory.mktemp("sweep"), n_lift=20, n_harm=8, seed=11)


def fixture_dataset(fx):
    return load_dataset(fx.manifest, fx.gallery, fx.rankings)


def mock_backends(fx, cache_dir=None):
    return build_backends(mock_path=fx.script, cache_dir=cache_dir)


class StubServer:
    """Tiny JSON HTTP server; ``handler(path, body, headers) -> (status, obj)``."""

    def __init__(self, handler):
        self.handler = handler
        self.requests = []
        stub = self

        class H(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                raw = self.rfile.read(length)
                body = json.loads(raw) if raw else None
                stub.requests.append({"path": self.path, "body": body, "headers": dict(self.headers)})
                status, obj = stub.handler(self.path, body, self.headers)
                data = json.dumps(obj).encode() if not isinstance(obj, bytes) else obj
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), H)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def url(self):
        host, port = self.httpd.server_address
        return f"http://{host}:{port}"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def stub_server():
    servers = []

    def make(handler):
        s = StubServer(handler).__enter__()
        servers.append(s)
        return s

    yield make
    for s in servers:
        s.__exit__(None, None, None)


def chat_reply(text):
    return {"choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]}


# -- acceptance summary ------------------------------------------------------

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    _ACCEPTANCE[name] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"{_ACCEPTANCE[name]}  {name}")
