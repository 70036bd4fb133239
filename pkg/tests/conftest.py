import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from biomx.bench_data import McqaItem, render_prompt, sample_few_shots
from biomx.scoring import TableBackend
from biomx.tensor_store import Checkpoint


def random_checkpoint(rng, n_tensors=None, dtype=None, max_dim=6, names=None):
    """Small checkpoint with random names, shapes and values."""
    if names is None:
        n_tensors = int(rng.integers(1, 5)) if n_tensors is None else n_tensors
        names = [f"layer{i}.{rng.choice(['w', 'b', 'q'])}{i}" for i in range(n_tensors)]
    arrays = {}
    for name in names:
        ndim = int(rng.integers(0, 3))
        shape = tuple(int(d) for d in rng.integers(1, max_dim, size=ndim))
        arrays[name] = rng.standard_normal(shape)
    dt = dtype or rng.choice(["float32", "float16"])
    return Checkpoint.from_arrays(arrays, {"base_model": "toy"}, dtype=str(dt))


def like(ckpt, rng):
    """A checkpoint with the same names/shapes/dtypes as ``ckpt`` and fresh values."""
    arrays = {n: rng.standard_normal(ckpt[n].shape) for n in ckpt.names()}
    dtypes = {ckpt[n].dtype for n in ckpt.names()}
    return Checkpoint.from_arrays(arrays, dtype=dtypes.pop() if len(dtypes) == 1 else None)


def make_items(n, rng=None, n_options=4, split="test", prefix="q"):
    rng = rng or np.random.default_rng(0)
    letters = "ABCDE"[:n_options]
    items = []
    for i in range(n):
        opts = tuple((l, f"option {l} of {prefix}{i}") for l in letters)
        gold = letters[int(rng.integers(0, n_options))]
        items.append(McqaItem(f"{prefix}{i:04d}", f"What is fact {i}?", opts, gold, split=split))
    return items


def table_backend(test, train, k_shots, seeds, score_fn, template="mcqa-default", label="table"):
    """Table backend holding ``score_fn(item)`` for every prompt an evaluation will render."""
    table = {}
    for seed in seeds:
        shots = sample_few_shots(train, k_shots, seed)
        for item in test:
            table[render_prompt(template, item, shots)] = score_fn(item)
    return TableBackend.from_prompts(table, label)


def oracle_backend(test, train, k_shots, seeds, template="mcqa-default"):
    return table_backend(
        test, train, k_shots, seeds, lambda it: {l: 10.0 if l == it.gold else 0.0 for l in it.letters}, template,
        "oracle",
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


class StubServer:
    """Local HTTP server whose POST handler is a Python callable ``(path, body) -> (status, obj)``."""

    def __init__(self, handler):
        self.handler = handler
        self.requests = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                raw = self.rfile.read(length)
                body = json.loads(raw) if raw else None
                stub.requests.append((self.path, body, dict(self.headers)))
                status, payload = stub.handler(self.path, body)
                data = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, args=(0.02,), daemon=True)
        self.thread.start()

    @property
    def url(self):
        host, port = self.httpd.server_address
        return f"http://{host}:{port}"

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def stub_server():
    servers = []

    def start(handler):
        s = StubServer(handler)
        servers.append(s)
        return s

    yield start
    for s in servers:
        s.close()


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
