"""Low-latency shading service: newline-delimited JSON over TCP.

Protocol: one JSON object per line in each direction, stateless.

Shading request -- the 13 record fields (any subset; missing fields fall
back to the ``__MISSING__`` bucket) plus the unshaded bid::

    {"page_tld": "example.com", "device_type_id": "phone",
     "unshaded_bid": 5.0, "goal_type": "CPC", ...}

Successful response::

    {"shaded_bid": 2.5, "ratio": 0.5, "model_version": "fm-v1-1a2b3c4d",
     "latency_us": 18, "fallback": false}

``latency_us`` measures shading compute only (encode + predict + clamp),
not transport.  ``fallback`` is true when the model produced a
non-finite prediction and the unshaded bid was returned.

Admin request: ``{"command": "reload", "path": "new.model"}`` loads and
atomically swaps the model; requests observe entirely the old or
entirely the new model.

Error response: ``{"error": {"code": C, "message": "..."}}`` with codes
1 = malformed request, 2 = model unavailable, 3 = internal error.  The
connection stays usable after an error response.
"""

from __future__ import annotations

import json
import math
import socketserver
import time
from typing import Sequence

from .baseline import SegmentKey, SegmentedShader, nonlinear_shade
from .encoding import encode_tokens
from .modelfile import LoadedModel, ModelFileError, load_model
from .models import clamp_ratio
from .records import FIELD_ORDER, MISSING_TOKEN, AuctionRecord

ERR_MALFORMED = 1
ERR_MODEL_UNAVAILABLE = 2
ERR_INTERNAL = 3


def request_tokens(request: dict) -> tuple[str, ...]:
    """Extract the 13 encoder tokens from a request object.

    Values are stringified; booleans map to "1"/"0"; absent fields use
    the missing-value bucket.
    """
    tokens = []
    for name in FIELD_ORDER:
        value = request.get(name)
        if value is None:
            tokens.append(MISSING_TOKEN)
        elif isinstance(value, bool):
            tokens.append("1" if value else "0")
        else:
            tokens.append(str(value))
    return tuple(tokens)


class ShadingEngine:
    """Shading compute for a loaded model, shared by server and replay."""

    def __init__(self, loaded: LoadedModel):
        self.loaded = loaded

    @property
    def version_tag(self) -> str:
        return self.loaded.version_tag

    def shade_tokens(self, tokens: Sequence[str], unshaded_bid: float) -> tuple[float, float, bool]:
        """(shaded_bid, ratio, fallback) for one opportunity."""
        model = self.loaded.model
        if isinstance(model, SegmentedShader):
            key = SegmentKey(tokens[3], tokens[0], tokens[7], tokens[11])
            shaded = nonlinear_shade(model.store.get(key), unshaded_bid)
            return shaded, shaded / unshaded_bid, False
        prediction = model.predict(encode_tokens(tokens, model.encoder))
        if not math.isfinite(prediction):
            return unshaded_bid, 1.0, True
        ratio = clamp_ratio(prediction)
        return ratio * unshaded_bid, ratio, False

    def shade_record(self, record: AuctionRecord) -> tuple[float, float, bool]:
        return self.shade_tokens(record.field_tokens(), record.unshaded_bid)


def _error(code: int, message: str) -> dict:
    return {"error": {"code": code, "message": message}}


class ShadingService:
    """Request dispatch over an atomically swappable engine."""

    def __init__(self, engine: ShadingEngine):
        self.engine = engine

    def handle(self, request) -> dict:
        if not isinstance(request, dict):
            return _error(ERR_MALFORMED, "request must be a JSON object")
        if "command" in request:
            return self._handle_command(request)

        bid = request.get("unshaded_bid")
        if not isinstance(bid, (int, float)) or isinstance(bid, bool) or not bid > 0 or not math.isfinite(bid):
            return _error(ERR_MALFORMED, "unshaded_bid must be a positive number")
        tokens = request_tokens(request)
        engine = self.engine  # snapshot: one request, one model
        try:
            start = time.perf_counter_ns()
            shaded, ratio, fallback = engine.shade_tokens(tokens, float(bid))
            elapsed_us = (time.perf_counter_ns() - start) // 1000
        except Exception as exc:  # pragma: no cover - defensive
            return _error(ERR_INTERNAL, f"prediction failed: {exc}")
        return {
            "shaded_bid": shaded,
            "ratio": ratio,
            "model_version": engine.version_tag,
            "latency_us": int(elapsed_us),
            "fallback": fallback,
        }

    def _handle_command(self, request: dict) -> dict:
        command = request.get("command")
        if command == "reload":
            path = request.get("path")
            if not isinstance(path, str):
                return _error(ERR_MALFORMED, "reload requires a 'path' string")
            try:
                loaded = load_model(path)
            except ModelFileError as exc:
                return _error(ERR_MODEL_UNAVAILABLE, str(exc))
            self.engine = ShadingEngine(loaded)
            return {"status": "reloaded", "model_version": self.engine.version_tag}
        return _error(ERR_MALFORMED, f"unknown command {command!r}")


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        for line in self.rfile:
            line = line.strip()
            if not line:
                continue
            try:
                request = json.loads(line)
            except json.JSONDecodeError as exc:
                response = _error(ERR_MALFORMED, f"invalid JSON: {exc}")
            else:
                response = self.server.service.handle(request)
            self.wfile.write(json.dumps(response).encode("utf-8") + b"\n")
            self.wfile.flush()


class ShadingServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], service: ShadingService):
        super().__init__(address, _Handler)
        self.service = service


def start_server(model_path: str, host: str = "127.0.0.1", port: int = 0) -> ShadingServer:
    """Bind a shading server for the model file (port 0 picks a free port)."""
    service = ShadingService(ShadingEngine(load_model(model_path)))
    return ShadingServer((host, port), service)


def measure_latency(
    engine: ShadingEngine, records: Sequence[AuctionRecord], n_requests: int = 10_000
) -> dict:
    """Shading-compute latency over cycled records, in microseconds."""
    if not records:
        raise ValueError("no records to benchmark")
    token_rows = [(r.field_tokens(), r.unshaded_bid) for r in records]
    m = len(token_rows)
    for i in range(min(100, n_requests)):  # warmup
        tokens, bid = token_rows[i % m]
        engine.shade_tokens(tokens, bid)
    samples = []
    for i in range(n_requests):
        tokens, bid = token_rows[i % m]
        start = time.perf_counter_ns()
        engine.shade_tokens(tokens, bid)
        samples.append(time.perf_counter_ns() - start)
    samples.sort()

    def us(q: float) -> float:
        return samples[min(len(samples) - 1, int(q * len(samples)))] / 1000.0

    return {
        "requests": n_requests,
        "mean_us": sum(samples) / len(samples) / 1000.0,
        "p50_us": us(0.50),
        "p99_us": us(0.99),
        "max_us": samples[-1] / 1000.0,
    }
