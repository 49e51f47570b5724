from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest

from suffbench.corpus import load_corpus

FIXTURES = Path(__file__).parent / "fixtures"

LOGPROB_FIXTURE = json.loads((FIXTURES / "completions_logprobs.json").read_text(encoding="utf-8"))
EMBED_FIXTURE = json.loads((FIXTURES / "embeddings.json").read_text(encoding="utf-8"))

CHAT_BODY = {
    "object": "chat.completion",
    "model": "gen-live",
    "choices": [
        {
            "index": 0,
            "message": {
                "role": "assistant",
                "content": "Answer: B\nExplanation: Light drives photosynthesis.",
            },
            "finish_reason": "stop",
        }
    ],
}


class _FixtureHandler(BaseHTTPRequestHandler):
    def log_message(self, *args):  # keep test output clean
        pass

    def do_POST(self):
        server = self.server
        length = int(self.headers.get("Content-Length", "0"))
        payload = json.loads(self.rfile.read(length) or b"{}")
        server.requests.append(
            {"path": self.path, "payload": payload, "headers": dict(self.headers)}
        )
        if server.status_script:
            status = server.status_script.pop(0)
            if status != 200:
                body = json.dumps({"error": {"message": "scripted failure"}}).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)
                return
        handler = server.routes.get(self.path)
        if handler is None:
            self.send_response(404)
            self.end_headers()
            return
        body = json.dumps(handler(payload), ensure_ascii=False).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


class FixtureServer:
    """Local OpenAI-shaped endpoint with per-path canned responses and an
    optional scripted status sequence."""

    def __init__(self):
        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), _FixtureHandler)
        self.httpd.requests = []
        self.httpd.routes = {}
        self.httpd.status_script = []
        self.thread = threading.Thread(
            target=lambda: self.httpd.serve_forever(poll_interval=0.02), daemon=True
        )

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.httpd.server_address[1]}"

    @property
    def requests(self):
        return self.httpd.requests

    def route(self, path, handler):
        self.httpd.routes[path] = handler

    def script_statuses(self, statuses):
        self.httpd.status_script = list(statuses)

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def server():
    with FixtureServer() as srv:
        srv.route("/chat/completions", lambda payload: CHAT_BODY)
        srv.route("/completions", lambda payload: LOGPROB_FIXTURE[payload["prompt"]])
        srv.route(
            "/embeddings",
            lambda payload: {
                "object": "list",
                "model": payload["model"],
                "data": [
                    {
                        "object": "embedding",
                        "index": 0,
                        "embedding": EMBED_FIXTURE[payload["input"]],
                    }
                ],
            },
        )
        yield srv


@pytest.fixture(scope="session")
def fixtures() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def en_corpus():
    return load_corpus(FIXTURES / "corpus_en.jsonl", "en")


@pytest.fixture(scope="session")
def fa_corpus():
    return load_corpus(FIXTURES / "corpus_fa.jsonl", "fa")
