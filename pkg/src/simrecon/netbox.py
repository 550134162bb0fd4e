"""Similarity oracle over HTTP: JSON envelopes, base64 float32 pixel payloads.

Endpoints:
    POST /v1/similarity  {protocol_version, target_id, width, height,
                          channels, pixels(base64 of little-endian f32)}
                         -> {similarity, queries_used, budget_remaining}
    GET  /v1/targets     -> {targets: [{target_id, queries_used,
                          budget_remaining}]}
    GET  /v1/health      -> {status, protocol_version}

Errors use {error_code, message} with codes MALFORMED, UNKNOWN_TARGET,
BUDGET_EXHAUSTED, VERSION_MISMATCH. Malformed requests never consume budget;
the per-target budget check and the scoring call happen under one lock, so a
target's budget is never overshot by concurrent clients. The client performs
no automatic retries: a request that may have reached scoring must surface as
an error rather than risk double-counted queries.
"""

from __future__ import annotations

import base64
import binascii
import json
import threading
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .eigenspace import ImageTensor
from .oracle import (
    BudgetExhausted,
    OracleError,
    QueryLedger,
    SimilarityOracle,
    UnknownTarget,
)

PROTOCOL_VERSION = 1


class ConnectionFailed(OracleError):
    """Transport-level failure talking to the oracle server."""


class VersionMismatch(OracleError):
    """Client and server disagree on the protocol version."""


class ProtocolError(OracleError):
    """The server rejected the request as malformed or sent an invalid reply."""


class _Malformed(ValueError):
    pass


def encode_pixels(image: ImageTensor) -> str:
    """Base64 of the pixel vector as little-endian float32."""
    return base64.b64encode(
        np.asarray(image.pixels, dtype="<f4").tobytes()
    ).decode("ascii")


def _decode_request(payload: dict) -> tuple[str, ImageTensor]:
    target = payload.get("target_id")
    if not isinstance(target, str) or not target:
        raise _Malformed("target_id must be a non-empty string")
    dims = []
    for key in ("width", "height", "channels"):
        value = payload.get(key)
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            raise _Malformed(f"{key} must be a positive integer")
        dims.append(value)
    w, h, c = dims
    pixels_b64 = payload.get("pixels")
    if not isinstance(pixels_b64, str):
        raise _Malformed("pixels must be a base64 string")
    try:
        raw = base64.b64decode(pixels_b64, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise _Malformed(f"pixels is not valid base64: {exc}") from exc
    if len(raw) != w * h * c * 4:
        raise _Malformed(
            f"pixels payload is {len(raw)} bytes, expected {w * h * c * 4}"
        )
    values = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    if not np.isfinite(values).all():
        raise _Malformed("pixels contain non-finite values")
    try:
        return target, ImageTensor(w, h, c, values)
    except ValueError as exc:
        raise _Malformed(str(exc)) from exc


class _TargetState:
    def __init__(self, budget: int | None):
        self.lock = threading.Lock()
        self.used = 0
        self.budget = budget

    @property
    def remaining(self) -> int | None:
        return None if self.budget is None else self.budget - self.used


class OracleServer:
    """Serves an oracle over HTTP with per-target budget enforcement."""

    def __init__(
        self,
        oracle: SimilarityOracle,
        bind_address: str = "127.0.0.1:0",
        per_target_budget: int | None = None,
        targets: list[str] | None = None,
    ):
        if targets is None:
            targets = list(getattr(oracle, "targets", ()))
        if not targets:
            raise ValueError("no targets to serve; pass targets= explicitly")
        self.oracle = oracle
        self.states = {t: _TargetState(per_target_budget) for t in targets}
        host, _, port_s = bind_address.rpartition(":")
        self._http = ThreadingHTTPServer((host or "127.0.0.1", int(port_s)), _Handler)
        self._http.daemon_threads = True
        self._http.oracle_server = self
        self._thread: threading.Thread | None = None

    @property
    def host(self) -> str:
        return self._http.server_address[0]

    @property
    def port(self) -> int:
        return self._http.server_address[1]

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self) -> "OracleServer":
        self._thread = threading.Thread(target=self._http.serve_forever, daemon=True)
        self._thread.start()
        return self

    def run_forever(self) -> None:
        self._http.serve_forever()

    def close(self) -> None:
        self._http.shutdown()
        self._http.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def handle_similarity(self, payload: dict) -> dict:
        target, image = _decode_request(payload)
        state = self.states.get(target)
        if state is None:
            raise UnknownTarget(f"target {target!r} is not enrolled")
        # Check, score, and count under the target's lock: no overshoot, and a
        # failed scoring call consumes nothing.
        with state.lock:
            if state.budget is not None and state.used >= state.budget:
                raise BudgetExhausted(
                    f"budget of {state.budget} for {target!r} exhausted"
                )
            score = self.oracle.query(image, target)
            state.used += 1
            return {
                "similarity": score,
                "queries_used": state.used,
                "budget_remaining": state.remaining,
            }

    def targets_payload(self) -> dict:
        return {
            "targets": [
                {
                    "target_id": t,
                    "queries_used": s.used,
                    "budget_remaining": s.remaining,
                }
                for t, s in sorted(self.states.items())
            ]
        }


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def log_message(self, format, *args):  # keep test output quiet
        pass

    def _send_json(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_error_envelope(self, status: int, code: str, message: str) -> None:
        self._send_json(status, {"error_code": code, "message": message})

    def do_GET(self):
        server: OracleServer = self.server.oracle_server
        if self.path == "/v1/health":
            self._send_json(200, {"status": "ok", "protocol_version": PROTOCOL_VERSION})
        elif self.path == "/v1/targets":
            self._send_json(200, server.targets_payload())
        else:
            self._send_error_envelope(404, "MALFORMED", f"no such path {self.path}")

    def do_POST(self):
        server: OracleServer = self.server.oracle_server
        if self.path != "/v1/similarity":
            self._send_error_envelope(404, "MALFORMED", f"no such path {self.path}")
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            payload = json.loads(self.rfile.read(length).decode("utf-8"))
            if not isinstance(payload, dict):
                raise _Malformed("request body must be a JSON object")
        except (ValueError, UnicodeDecodeError) as exc:
            self._send_error_envelope(400, "MALFORMED", f"bad request body: {exc}")
            return
        version = payload.get("protocol_version")
        if version is None:
            self._send_error_envelope(400, "MALFORMED", "protocol_version is required")
            return
        if version != PROTOCOL_VERSION:
            self._send_error_envelope(
                426,
                "VERSION_MISMATCH",
                f"server speaks version {PROTOCOL_VERSION}, got {version!r}",
            )
            return
        try:
            self._send_json(200, server.handle_similarity(payload))
        except _Malformed as exc:
            self._send_error_envelope(400, "MALFORMED", str(exc))
        except UnknownTarget as exc:
            self._send_error_envelope(404, "UNKNOWN_TARGET", str(exc))
        except BudgetExhausted as exc:
            self._send_error_envelope(429, "BUDGET_EXHAUSTED", str(exc))


def serve(
    oracle: SimilarityOracle,
    bind_address: str = "127.0.0.1:0",
    per_target_budget: int | None = None,
    targets: list[str] | None = None,
) -> OracleServer:
    """Start serving `oracle` in a background thread; returns the running server."""
    return OracleServer(oracle, bind_address, per_target_budget, targets).start()


_ERROR_MAP = {
    "BUDGET_EXHAUSTED": BudgetExhausted,
    "UNKNOWN_TARGET": UnknownTarget,
    "VERSION_MISMATCH": VersionMismatch,
    "MALFORMED": ProtocolError,
}


class RemoteOracle(SimilarityOracle):
    """Oracle interface against a remote server; one request per query."""

    def __init__(
        self,
        server_address: str,
        target_id: str | None = None,
        budget: int | None = None,
        timeout: float = 30.0,
    ):
        address = server_address
        if not address.startswith("http://") and not address.startswith("https://"):
            address = "http://" + address
        self.base_url = address.rstrip("/")
        self.target_id = target_id
        self.timeout = timeout
        self.ledger = QueryLedger(budget)
        self.server_queries_used: int | None = None
        self.server_budget_remaining: int | None = None
        self._handshake()

    def _handshake(self) -> None:
        reply = self._get("/v1/health")
        version = reply.get("protocol_version")
        if version != PROTOCOL_VERSION:
            raise VersionMismatch(
                f"server speaks version {version!r}, client speaks {PROTOCOL_VERSION}"
            )

    def _get(self, path: str) -> dict:
        try:
            with urllib.request.urlopen(
                self.base_url + path, timeout=self.timeout
            ) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            raise _mapped_error(exc) from exc
        except (urllib.error.URLError, OSError) as exc:
            raise ConnectionFailed(f"GET {path} failed: {exc}") from exc

    def targets(self) -> dict:
        return self._get("/v1/targets")

    def query(self, image: ImageTensor, target: str | None = None) -> float:
        target = target if target is not None else self.target_id
        if target is None:
            raise UnknownTarget("no target id given")
        if self.ledger.remaining is not None and self.ledger.remaining < 1:
            raise BudgetExhausted(f"client-side budget of {self.ledger.budget} exhausted")
        body = json.dumps(
            {
                "protocol_version": PROTOCOL_VERSION,
                "target_id": target,
                "width": image.width,
                "height": image.height,
                "channels": image.channels,
                "pixels": encode_pixels(image),
            }
        ).encode("utf-8")
        request = urllib.request.Request(
            self.base_url + "/v1/similarity",
            data=body,
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as resp:
                reply = json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            raise _mapped_error(exc) from exc
        except (urllib.error.URLError, OSError) as exc:
            raise ConnectionFailed(f"similarity request failed: {exc}") from exc
        similarity = reply.get("similarity")
        if not isinstance(similarity, (int, float)) or isinstance(similarity, bool):
            raise ProtocolError(f"server reply missing similarity: {reply!r}")
        self.ledger.charge()
        self.server_queries_used = reply.get("queries_used")
        self.server_budget_remaining = reply.get("budget_remaining")
        return float(similarity)


def _mapped_error(exc: urllib.error.HTTPError) -> OracleError:
    try:
        envelope = json.loads(exc.read().decode("utf-8"))
        code = envelope.get("error_code", "")
        message = envelope.get("message", "")
    except (ValueError, UnicodeDecodeError):
        return ProtocolError(f"HTTP {exc.code} with unparseable error body")
    err_cls = _ERROR_MAP.get(code, ProtocolError)
    return err_cls(f"{code}: {message}")


def remote_oracle(
    server_address: str, target_id: str, budget: int | None = None
) -> RemoteOracle:
    """Client oracle for `target_id` at `server_address`; verifies the protocol version."""
    return RemoteOracle(server_address, target_id=target_id, budget=budget)
