import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
import requests

from datamark.core import Image, PosteriorError
from datamark.model.mocks import MockSpec, make_mock
from datamark.model.network import Architecture, MiniNetClassifier, TrainConfig, predict_posterior, train
from datamark.model.remote import (
    BackgroundServer,
    MalformedResponseError,
    RemoteClassifier,
    RemoteTimeoutError,
    query_remote,
)


class _Canned(BaseHTTPRequestHandler):
    body = b"{}"
    status = 200
    hits = 0

    def log_message(self, *a):
        pass

    def do_POST(self):
        type(self).hits += 1
        self.rfile.read(int(self.headers.get("Content-Length", 0)))
        self.send_response(self.status)
        self.send_header("Content-Length", str(len(self.body)))
        self.end_headers()
        self.wfile.write(self.body)


@pytest.fixture
def canned():
    servers = []

    def start(body: bytes, status: int = 200):
        handler = type("H", (_Canned,), {"body": body, "status": status, "hits": 0})
        srv = ThreadingHTTPServer(("127.0.0.1", 0), handler)
        threading.Thread(target=srv.serve_forever, daemon=True).start()
        servers.append(srv)
        return f"http://127.0.0.1:{srv.server_address[1]}", handler

    yield start
    for s in servers:
        s.shutdown()
        s.server_close()


IMG = Image(np.arange(3 * 4 * 4).reshape(3, 4, 4) % 256)


def test_loopback_matches_local(small_split):
    tr, te = small_split
    params = train(tr, Architecture.mlp(16), TrainConfig(epochs=2))
    with BackgroundServer(MiniNetClassifier(params)) as srv:
        for i in range(10):
            remote = query_remote(srv.url, te[i].image, timeout=5, retries=0)
            np.testing.assert_allclose(remote, predict_posterior(params, te[i].image), atol=1e-6, rtol=0)


def test_wire_format_is_channel_major(canned):
    seen = {}

    class Echo(BaseHTTPRequestHandler):
        def log_message(self, *a):
            pass

        def do_POST(self):
            seen.update(json.loads(self.rfile.read(int(self.headers["Content-Length"]))))
            body = b'{"posterior": [1.0, 0.0]}'
            self.send_response(200)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

    srv = ThreadingHTTPServer(("127.0.0.1", 0), Echo)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    try:
        px = np.arange(2 * 3 * 5).reshape(2, 3, 5)  # C=2, H=3, W=5
        query_remote(f"http://127.0.0.1:{srv.server_address[1]}", Image(px), retries=0)
    finally:
        srv.shutdown()
        srv.server_close()
    assert seen["shape"] == [2, 5, 3]
    assert seen["pixels"] == list(range(30))


def test_invalid_posterior_surfaces_vector(canned):
    url, _ = canned(b'{"posterior": [0.5, 0.6]}')
    with pytest.raises(PosteriorError, match=r"0\.6"):
        query_remote(url, IMG, retries=0)


@pytest.mark.parametrize("body", [b"not json", b'{"probs": [1.0]}', b'{"posterior": "abc"}', b'{"posterior": [true, false]}'])
def test_malformed_response(canned, body):
    url, _ = canned(body)
    with pytest.raises(MalformedResponseError):
        query_remote(url, IMG, retries=0)


def test_bad_status_is_retried_then_fails(canned):
    url, handler = canned(b"oops", status=500)
    with pytest.raises(RemoteTimeoutError, match="3 attempts"):
        query_remote(url, IMG, retries=2, backoff=0.0)
    assert handler.hits == 3


def test_unreachable_host_times_out():
    with socket_free_port() as port:
        pass
    with pytest.raises(RemoteTimeoutError):
        query_remote(f"http://127.0.0.1:{port}", IMG, timeout=0.5, retries=1, backoff=0.0)


def test_server_rejects_bad_requests():
    mock = make_mock(MockSpec("uniform", 3))
    with BackgroundServer(mock) as srv:
        r = requests.post(srv.url + "/v1/posterior", data=b"{}", timeout=5)
        assert r.status_code == 400
        r = requests.post(srv.url + "/other", json={}, timeout=5)
        assert r.status_code == 404
        ok = requests.post(srv.url + "/v1/posterior", json={"shape": [1, 2, 2], "pixels": [0, 1, 2, 3]}, timeout=5)
        assert ok.status_code == 200 and ok.json()["posterior"] == [1 / 3] * 3


def test_remote_classifier_learns_class_count():
    with BackgroundServer(make_mock(MockSpec("uniform", 4))) as srv:
        rc = RemoteClassifier(srv.url)
        rc.posterior(IMG)
        assert rc.num_classes == 4
        assert np.array_equal(rc.posterior(IMG), rc.posterior(IMG))


class socket_free_port:
    def __enter__(self):
        import socket

        self.sock = socket.socket()
        self.sock.bind(("127.0.0.1", 0))
        return self.sock.getsockname()[1]

    def __exit__(self, *exc):
        self.sock.close()
