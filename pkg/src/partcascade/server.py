"""JSON-over-HTTP inference service.

Stateless: model parameters and the schedule are loaded once and shared
read-only; every generation endpoint requires a seed in the request, so
equal requests produce byte-identical responses. Shapes travel as plain
JSON (arrays of 16-float extrinsics, d_s-float intrinsics, optional labels).

Endpoints:
    GET  /health                                  -> {"status": "ok"}
    POST /generate {n, seed, text?, w?}           -> {"shapes": [...]}
    POST /complete {shape, mask, seed, text?, w?} -> {"shape": ...}
    POST /mix {shape_a, shape_b, label, t_start, seed} -> {"shape": ...}
    POST /decode {shape, grid?, seed?}            -> {"points": [...]}
    POST /labels {shape, family?}                 -> {"labels": [...]}

Errors: 400 malformed body, 422 invariant violations, both with an "error"
field.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .parts import PartMask, PartSet
from .sampler import complete_part, mix_and_refine, sample_cascade
from .schedule import NoiseSchedule
from .tensor import RandomSource
from .toyworld import (LABELS, label_parts_by_height, sample_points, tokenize)

__all__ = [
    "ApiError",
    "text_part_selector",
    "AppState",
    "make_server",
    "http_serve",
]

# keyword -> part label map standing in for a learned text segmenter
_KEYWORD_LABELS = {
    "leg": LABELS["leg"],
    "legs": LABELS["leg"],
    "seat": LABELS["seat"],
    "back": LABELS["back"],
    "top": LABELS["top"],
}


class ApiError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


def text_part_selector(token_ids, labels) -> tuple[PartMask, bool]:
    """Mask with 0 on parts whose label matches a keyword in the text.

    Returns (mask, matched); without a keyword match the mask is all ones
    and ``matched`` is False (callers should warn).
    """
    from .toyworld import VOCAB
    labels = np.asarray(labels, dtype=np.int64)
    targets = {
        _KEYWORD_LABELS[VOCAB[int(i)]]
        for i in token_ids
        if 0 <= int(i) < len(VOCAB) and VOCAB[int(i)] in _KEYWORD_LABELS
    }
    values = np.ones(len(labels), dtype=np.int64)
    matched = False
    for t in targets:
        hit = labels == t
        if hit.any():
            matched = True
            values[hit] = 0
    return PartMask(values), matched


class AppState:
    """Loaded models + schedule shared across requests."""

    def __init__(self, params1, params2, sched: NoiseSchedule,
                 default_n_parts: int = 5):
        self.params1 = params1
        self.params2 = params2
        self.sched = sched
        self.default_n_parts = default_n_parts

    # -- request helpers ----------------------------------------------------

    def _require(self, body: dict, key: str):
        if key not in body:
            raise ApiError(400, f"missing required field '{key}'")
        return body[key]

    def _parse_shape(self, obj) -> PartSet:
        try:
            return PartSet.from_json(obj)
        except Exception as e:
            raise ApiError(422, f"invalid shape payload: {e}") from e

    def _parse_text(self, body: dict):
        text = body.get("text")
        if text in (None, ""):
            return None
        try:
            ids = tokenize(text)
        except ValueError as e:
            raise ApiError(422, str(e)) from e
        if self.params1.config.text_dim == 0:
            raise ApiError(422, "loaded model has no text conditioning")
        return tuple(ids)

    # -- endpoint handlers ----------------------------------------------------

    def handle(self, path: str, body: dict) -> dict:
        if path == "/generate":
            return self.generate(body)
        if path == "/complete":
            return self.complete(body)
        if path == "/mix":
            return self.mix(body)
        if path == "/decode":
            return self.decode(body)
        if path == "/labels":
            return self.labels(body)
        raise ApiError(404, f"unknown endpoint {path}")

    def generate(self, body: dict) -> dict:
        n = int(self._require(body, "n"))
        seed = int(self._require(body, "seed"))
        if n < 1 or n > 256:
            raise ApiError(422, "n must be in 1..256")
        text = self._parse_text(body)
        w = float(body.get("w", 2.0 if text else 0.0))
        n_parts = int(body.get("n_parts", self.default_n_parts))
        texts = None if text is None else [text] * n
        shapes = sample_cascade(self.params1, self.params2, n, n_parts,
                                self.sched, RandomSource(seed),
                                texts=texts, w=w)
        return {"shapes": [s.to_json() for s in shapes]}

    def complete(self, body: dict) -> dict:
        shape = self._parse_shape(self._require(body, "shape"))
        seed = int(self._require(body, "seed"))
        mask_raw = self._require(body, "mask")
        try:
            mask = PartMask(np.asarray(mask_raw, dtype=np.int64))
        except ValueError as e:
            raise ApiError(422, str(e)) from e
        if len(mask) != shape.n_parts:
            raise ApiError(422, "mask length does not match part count")
        text = self._parse_text(body)
        w = float(body.get("w", 2.0 if text else 0.0))
        texts = None if text is None else [text]
        out = complete_part(self.params1, self.params2, shape, mask,
                            self.sched, RandomSource(seed),
                            texts=texts, w=w)
        return {"shape": out.to_json()}

    def mix(self, body: dict) -> dict:
        a = self._parse_shape(self._require(body, "shape_a"))
        b = self._parse_shape(self._require(body, "shape_b"))
        label = int(self._require(body, "label"))
        seed = int(self._require(body, "seed"))
        t_start = int(body.get("t_start", 10))
        if a.labels is None:
            a.labels = label_parts_by_height(a)
        if b.labels is None:
            b.labels = label_parts_by_height(b)
        try:
            out = mix_and_refine(self.params1, self.params2, a, b, label,
                                 self.sched, RandomSource(seed),
                                 t_start=t_start)
        except ValueError as e:
            raise ApiError(422, str(e)) from e
        return {"shape": out.to_json()}

    def decode(self, body: dict) -> dict:
        shape = self._parse_shape(self._require(body, "shape"))
        count = int(body.get("grid", 512))
        seed = int(body.get("seed", 0))
        if count < 0 or count > 65536:
            raise ApiError(422, "grid must be in 0..65536")
        try:
            pts = sample_points(shape, count, seed)
        except Exception as e:
            raise ApiError(422, f"decode failed: {e}") from e
        return {"points": np.asarray(pts, dtype=np.float32).tolist()}

    def labels(self, body: dict) -> dict:
        shape = self._parse_shape(self._require(body, "shape"))
        family = body.get("family")
        if family is not None and family not in ("chair", "table"):
            raise ApiError(422, "family must be 'chair' or 'table'")
        return {"labels": label_parts_by_height(shape, family).tolist()}


def _encode(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


class _Handler(BaseHTTPRequestHandler):
    state: AppState = None  # set by make_server

    def log_message(self, fmt, *args):  # quiet by default
        pass

    def _send(self, status: int, obj: dict) -> None:
        payload = _encode(obj)
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(payload)

    def do_OPTIONS(self):
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.end_headers()

    def do_GET(self):
        if self.path == "/health":
            self._send(200, {"status": "ok"})
        else:
            self._send(404, {"error": f"unknown endpoint {self.path}"})

    def do_POST(self):
        try:
            length = int(self.headers.get("Content-Length", "0"))
            try:
                body = json.loads(self.rfile.read(length) or b"{}")
                if not isinstance(body, dict):
                    raise ValueError("body must be a JSON object")
            except ValueError as e:
                raise ApiError(400, f"malformed JSON body: {e}") from e
            self._send(200, self.state.handle(self.path, body))
        except ApiError as e:
            self._send(e.status, {"error": e.message})
        except Exception as e:  # pragma: no cover - last-resort guard
            self._send(500, {"error": f"internal error: {e}"})


def make_server(state: AppState, port: int = 0) -> ThreadingHTTPServer:
    """Build (but do not run) the HTTP server; port 0 picks a free port."""
    handler = type("BoundHandler", (_Handler,), {"state": state})
    return ThreadingHTTPServer(("127.0.0.1", port), handler)


def http_serve(ckpt_phase1, ckpt_phase2, port: int) -> None:
    """Load the two checkpoints and serve until interrupted."""
    from .formats import load_checkpoint
    p1, h1 = load_checkpoint(ckpt_phase1)
    p2, _ = load_checkpoint(ckpt_phase2)
    sched = NoiseSchedule.from_header(h1["schedule"])
    state = AppState(p1, p2, sched,
                     default_n_parts=int(h1.get("n_parts", 5)))
    server = make_server(state, port)
    host, bound_port = server.server_address
    print(f"serving on http://{host}:{bound_port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()


def start_background(state: AppState, port: int = 0):
    """Start a server thread; returns (server, port). Used by tests."""
    server = make_server(state, port)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, server.server_address[1]
