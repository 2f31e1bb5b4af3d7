"""HTTP render service.

GET endpoints:
  /api/meta                       model name, dimensions, resolution (JSON)
  /api/render?c=0.5,0.3[&w=&h=]   one PNG frame at the given coordinate
  /api/effect?c=..&axis=&radius=&n=[&w=&h=]  averaged-frames PNG
  /                               static viewer assets (or a fallback page)

Coordinates travel normalized to [0, 1]; converting raw ranges is the
client's job using /api/meta. Malformed queries get a 400 with a JSON body
{code, message}. The model is immutable after load, so concurrent requests
are handled by a plain threading server with no locking.
"""

from __future__ import annotations

import io
import json
import mimetypes
import os
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

import numpy as np
from PIL import Image

from .data import to_uint8
from .render import ModelRuntime

FALLBACK_PAGE = """<!doctype html>
<html><head><title>xfield render service</title></head>
<body style="font-family: sans-serif">
<h1>xfield render service</h1>
<p>No viewer assets configured. API endpoints:</p>
<ul>
<li><code>GET /api/meta</code></li>
<li><code>GET /api/render?c=&lt;comma-separated coords&gt;[&amp;w=&amp;h=]</code></li>
<li><code>GET /api/effect?c=...&amp;axis=&amp;radius=&amp;n=</code></li>
</ul>
</body></html>
"""


class BadRequest(ValueError):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _parse_coord(query: dict, n_d: int) -> np.ndarray:
    if "c" not in query:
        raise BadRequest("missing_coord", "query parameter 'c' is required")
    parts = query["c"][0].split(",")
    if len(parts) != n_d:
        raise BadRequest("coord_arity", f"expected {n_d} coordinates, got {len(parts)}")
    try:
        return np.array([float(p) for p in parts], dtype=np.float64)
    except ValueError:
        raise BadRequest("coord_parse", f"non-numeric coordinate in {query['c'][0]!r}") from None


def _parse_int(query: dict, key: str, default=None, minimum=1):
    if key not in query:
        return default
    try:
        value = int(query[key][0])
    except ValueError:
        raise BadRequest(f"bad_{key}", f"parameter {key!r} must be an integer") from None
    if value < minimum:
        raise BadRequest(f"bad_{key}", f"parameter {key!r} must be >= {minimum}")
    return value


def _parse_float(query: dict, key: str, default=None):
    if key not in query:
        if default is None:
            raise BadRequest(f"missing_{key}", f"query parameter {key!r} is required")
        return default
    try:
        return float(query[key][0])
    except ValueError:
        raise BadRequest(f"bad_{key}", f"parameter {key!r} must be a number") from None


def encode_png(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


class RenderHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    @property
    def runtime(self) -> ModelRuntime:
        return self.server.runtime

    def log_message(self, fmt, *args):
        if getattr(self.server, "verbose", False):
            super().log_message(fmt, *args)

    def do_GET(self):
        parsed = urlparse(self.path)
        query = parse_qs(parsed.query)
        try:
            if parsed.path == "/api/meta":
                self._send_json(200, self.runtime.meta())
            elif parsed.path == "/api/render":
                coord = _parse_coord(query, self.runtime.n_d)
                w = _parse_int(query, "w")
                h = _parse_int(query, "h")
                self._send_png(self.runtime.render_frame(coord, width=w, height=h))
            elif parsed.path == "/api/effect":
                coord = _parse_coord(query, self.runtime.n_d)
                axis = _parse_int(query, "axis", default=0, minimum=0)
                radius = _parse_float(query, "radius")
                n = _parse_int(query, "n", default=8)
                w = _parse_int(query, "w")
                h = _parse_int(query, "h")
                if not 0 <= axis < self.runtime.n_d:
                    raise BadRequest("bad_axis", f"axis must be in [0, {self.runtime.n_d - 1}]")
                if radius < 0:
                    raise BadRequest("bad_radius", "radius must be >= 0")
                self._send_png(self.runtime.render_effect(coord, axis, radius, n, width=w, height=h))
            else:
                self._send_static(parsed.path)
        except BadRequest as e:
            self._send_json(400, {"code": e.code, "message": str(e)})

    def _send_static(self, path: str):
        static_dir = getattr(self.server, "static_dir", None)
        rel = path.lstrip("/") or "index.html"
        if static_dir:
            full = os.path.realpath(os.path.join(static_dir, rel))
            if full.startswith(os.path.realpath(static_dir)) and os.path.isfile(full):
                ctype = mimetypes.guess_type(full)[0] or "application/octet-stream"
                with open(full, "rb") as fh:
                    self._send_bytes(200, ctype, fh.read())
                return
        if rel == "index.html":
            self._send_bytes(200, "text/html; charset=utf-8", FALLBACK_PAGE.encode("utf-8"))
        else:
            self._send_json(404, {"code": "not_found", "message": f"no such path {path!r}"})

    def _send_png(self, img: np.ndarray):
        self._send_bytes(200, "image/png", encode_png(img))

    def _send_json(self, status: int, obj: dict):
        self._send_bytes(status, "application/json", json.dumps(obj).encode("utf-8"))

    def _send_bytes(self, status: int, ctype: str, body: bytes):
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Cache-Control", "no-store")
        self.end_headers()
        self.wfile.write(body)


def serve(runtime: ModelRuntime, bind: str = "127.0.0.1:8000",
          static_dir: str | None = None, verbose: bool = False) -> ThreadingHTTPServer:
    """Bind the render service; the caller drives serve_forever()/shutdown()."""
    host, _, port = bind.partition(":")
    server = ThreadingHTTPServer((host, int(port or 8000)), RenderHandler)
    server.runtime = runtime
    server.static_dir = os.path.abspath(static_dir) if static_dir else None
    server.verbose = verbose
    return server
