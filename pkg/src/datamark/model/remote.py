"""HTTP client and loopback server for the JSON posterior protocol.

Request:  POST /v1/posterior  {"shape": [C, W, H], "pixels": [...]}
Response: 200 {"posterior": [K floats]}

Pixels are listed channel-major, then row-major.  Any non-200 status is
treated as a transport failure and retried.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import requests

from datamark.core import Image, PosteriorError, validate_posterior
from datamark.model.base import Classifier

log = logging.getLogger(__name__)

POSTERIOR_PATH = "/v1/posterior"


class RemoteError(RuntimeError):
    pass


class RemoteTimeoutError(RemoteError):
    """Transport failed (timeout, refused connection, bad status) on every attempt."""


class MalformedResponseError(RemoteError):
    pass


def _url(endpoint: str) -> str:
    endpoint = endpoint.rstrip("/")
    return endpoint if endpoint.endswith(POSTERIOR_PATH) else endpoint + POSTERIOR_PATH


def encode_request(image: Image) -> dict:
    return {"shape": list(image.shape), "pixels": image.flat()}


def query_remote(
    endpoint: str,
    image: Image,
    timeout: float = 10.0,
    retries: int = 2,
    num_classes: int | None = None,
    backoff: float = 0.05,
) -> np.ndarray:
    """Fetch and validate one posterior; transport errors are retried ``retries`` times."""
    url = _url(endpoint)
    body = encode_request(image)
    last: Exception | None = None
    for attempt in range(retries + 1):
        try:
            resp = requests.post(url, json=body, timeout=timeout)
        except requests.RequestException as e:
            last = e
        else:
            if resp.status_code == 200:
                break
            last = RemoteError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        log.debug("attempt %d/%d to %s failed: %s", attempt + 1, retries + 1, url, last)
        if attempt < retries:
            time.sleep(backoff * (2**attempt))
    else:
        raise RemoteTimeoutError(f"{url} unavailable after {retries + 1} attempts: {last}") from last

    try:
        payload = resp.json()
        vec = payload["posterior"]
        if not isinstance(vec, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vec):
            raise TypeError("posterior must be a list of numbers")
    except (ValueError, KeyError, TypeError) as e:
        raise MalformedResponseError(f"malformed response from {url}: {resp.text[:200]!r}") from e
    return validate_posterior(vec, 1e-5, num_classes)


class RemoteClassifier(Classifier):
    """A third-party model reachable over HTTP.

    If ``num_classes`` is not given it is taken from the first response and
    enforced from then on.
    """

    reentrant = True

    def __init__(self, endpoint: str, num_classes: int | None = None, timeout: float = 10.0, retries: int = 2):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.num_classes = num_classes

    def posterior(self, image: Image) -> np.ndarray:
        post = query_remote(self.endpoint, image, self.timeout, self.retries, self.num_classes)
        if self.num_classes is None:
            self.num_classes = len(post)
        return post


class _Handler(BaseHTTPRequestHandler):
    classifier: Classifier

    def log_message(self, fmt, *args):
        log.debug("serve: " + fmt, *args)

    def _reply(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):
        if self.path != POSTERIOR_PATH:
            self._reply(404, {"error": f"unknown path {self.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", 0))
            req = json.loads(self.rfile.read(length))
            image = Image.from_flat(req["shape"], req["pixels"])
        except (ValueError, KeyError, TypeError) as e:
            self._reply(400, {"error": f"bad request: {e}"})
            return
        try:
            post = self.classifier.posterior(image)
        except (ValueError, PosteriorError) as e:
            self._reply(422, {"error": str(e)})
            return
        self._reply(200, {"posterior": [float(v) for v in post]})


def make_server(classifier: Classifier, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """An HTTP server answering posterior queries; port 0 picks a free port."""
    handler = type("PosteriorHandler", (_Handler,), {"classifier": classifier})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server


class BackgroundServer:
    """Context manager running :func:`make_server` on a daemon thread."""

    def __init__(self, classifier: Classifier, host: str = "127.0.0.1", port: int = 0):
        self.server = make_server(classifier, host, port)
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self) -> "BackgroundServer":
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()
        self._thread.join()
