"""HTTP predict/refine service over a frozen checkpoint.

Endpoints (JSON over HTTP/1.1):

  GET  /api/health                     {"status":"ok"}
  GET  /api/samples                    test-split metadata, stable order
  GET  /api/sample/{id}/image          {"w","h","gray_b64"} raw 8-bit rows
  POST /api/predict                    body: {"sample_id"} or {"image":{...}},
                                       optional "concept","modality","points"
  POST /api/session/{id}/refine        body: {"points":[{x,y,polarity},...]}
  POST /api/session/{id}/reset         back to the initial prompt

Masks travel bit-packed: row-major, most significant bit first,
ceil(H*W/8) bytes, then base64. Sessions live in memory with a TTL and are
serialized per session id; model parameters are never written to.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import re
import threading
import time
import uuid
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .data import Dataset, load_dataset
from .evaluate import frozen_view
from .hitl import binarize
from .model import ModelParams, PromptPoint, load_checkpoint, model_forward
from .uncertainty import UncertaintyHyper, uncertainty_record

log = logging.getLogger("biasseg.server")

DEFAULT_PORT = 8765
DEFAULT_SESSION_TTL = 3600.0

_STATIC_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".mjs": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".json": "application/json",
    ".svg": "image/svg+xml",
    ".png": "image/png",
    ".ico": "image/x-icon",
    ".map": "application/json",
}


class RequestError(Exception):
    """Maps directly to an HTTP error response."""

    def __init__(self, status: int, body: dict):
        super().__init__(body.get("error", "error"))
        self.status = status
        self.body = body


def pack_mask(mask: np.ndarray) -> str:
    """Bit-pack a binary H×W mask row-major MSB-first and base64 it."""
    flat = np.asarray(mask, dtype=np.uint8).reshape(-1)
    return base64.b64encode(np.packbits(flat).tobytes()).decode("ascii")


def unpack_mask(b64: str, h: int, w: int) -> np.ndarray:
    raw = base64.b64decode(b64.encode("ascii"))
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=h * w)
    return bits.reshape(h, w).astype(np.uint8)


def encode_gray(image: np.ndarray) -> str:
    u8 = np.rint(np.asarray(image, dtype=np.float64) * 255.0).astype(np.uint8)
    return base64.b64encode(u8.tobytes()).decode("ascii")


class Session:
    """One refinement dialogue; refine/reset on it are serialized by `lock`."""

    def __init__(self, image: np.ndarray, concept: str, modality: str,
                 initial_points: List[PromptPoint]):
        self.id = uuid.uuid4().hex
        self.image = image
        self.concept = concept
        self.modality = modality
        self.initial_points = list(initial_points)
        self.points: List[PromptPoint] = list(initial_points)
        self.mask: Optional[np.ndarray] = None
        self.u_vl: float = 0.0
        self.created = time.monotonic()
        self.updated = self.created
        self.lock = threading.Lock()


class SessionStore:
    def __init__(self, ttl: float):
        self.ttl = float(ttl)
        self._sessions: Dict[str, Session] = {}
        self._lock = threading.Lock()

    def put(self, session: Session) -> None:
        with self._lock:
            self._sessions[session.id] = session

    def get(self, session_id: str) -> Session:
        with self._lock:
            self._purge_locked()
            if session_id not in self._sessions:
                raise RequestError(404, {"error": "unknown_session"})
            return self._sessions[session_id]

    def _purge_locked(self) -> None:
        cutoff = time.monotonic() - self.ttl
        stale = [k for k, s in self._sessions.items() if s.updated < cutoff]
        for k in stale:
            del self._sessions[k]

    def __len__(self) -> int:
        with self._lock:
            self._purge_locked()
            return len(self._sessions)


class RefineService:
    """Model + dataset + sessions; the HTTP layer is a thin shell over this."""

    def __init__(
        self,
        params: ModelParams,
        dataset: Dataset,
        session_ttl: float = DEFAULT_SESSION_TTL,
        hyper: Optional[UncertaintyHyper] = None,
    ):
        self.params = frozen_view(params)
        self.dataset = dataset
        self.hyper = hyper or UncertaintyHyper()
        self.sessions = SessionStore(session_ttl)
        self._by_id = {rec.id: rec for rec in dataset.records}

    # -- queries ------------------------------------------------------------

    def sample_list(self) -> List[dict]:
        ds = self.dataset
        return [
            {
                "id": rec.id,
                "concept": ds.concepts[rec.concept_id],
                "modality": ds.modalities[rec.modality_id],
                "attribute": ds.attributes[rec.attribute_id],
                "prevalence_group": rec.prevalence_group,
            }
            for rec in ds.records
        ]

    def sample_image(self, sample_id: str) -> dict:
        rec = self._by_id.get(sample_id)
        if rec is None:
            raise RequestError(404, {"error": "unknown_sample"})
        h, w = rec.image.shape
        return {"w": w, "h": h, "gray_b64": encode_gray(rec.image)}

    # -- prediction ----------------------------------------------------------

    def _parse_points(self, raw, shape: Tuple[int, int]) -> List[PromptPoint]:
        h, w = shape
        points = []
        if raw is None:
            return points
        if not isinstance(raw, list):
            raise RequestError(400, {"error": "bad_request", "detail": "points must be a list"})
        for item in raw:
            try:
                x, y = int(item["x"]), int(item["y"])
                polarity = str(item["polarity"])
            except (KeyError, TypeError, ValueError):
                raise RequestError(
                    400, {"error": "bad_request", "detail": "point needs x, y, polarity"}
                ) from None
            if polarity not in ("positive", "negative"):
                raise RequestError(
                    400, {"error": "bad_request", "detail": f"unknown polarity {polarity!r}"}
                )
            if not (0 <= x < w and 0 <= y < h):
                raise RequestError(
                    400,
                    {"error": "point_out_of_bounds", "x": x, "y": y, "w": w, "h": h},
                )
            points.append(PromptPoint(x, y, polarity))
        return points

    def _run(self, session: Session) -> None:
        out = model_forward(
            self.params, session.image, session.concept, session.modality,
            points=session.points,
        )
        rec = uncertainty_record(
            out.z_img.data, out.P.data, out.z_bar_vlm.data[0], 0.0, self.hyper
        )
        session.mask = binarize(out.P.data)
        session.u_vl = rec.u_vl
        session.updated = time.monotonic()

    def _response(self, session: Session) -> dict:
        h, w = session.image.shape
        return {
            "session_id": session.id,
            "mask_b64": pack_mask(session.mask),
            "u_vl": session.u_vl,
            "fg_pixels": int(session.mask.sum()),
            "w": w,
            "h": h,
            "points": [
                {"x": p.x, "y": p.y, "polarity": p.polarity} for p in session.points
            ],
        }

    def predict(self, body: dict) -> dict:
        if "sample_id" in body:
            rec = self._by_id.get(str(body["sample_id"]))
            if rec is None:
                raise RequestError(404, {"error": "unknown_sample"})
            image = rec.image
            concept = body.get("concept", self.dataset.concepts[rec.concept_id])
            modality = body.get("modality", self.dataset.modalities[rec.modality_id])
        elif "image" in body:
            image = self._decode_image(body["image"])
            if "concept" not in body:
                raise RequestError(
                    400, {"error": "bad_request", "detail": "uploaded image needs a concept"}
                )
            concept = str(body["concept"])
            modality = str(body.get("modality", "plain"))
        else:
            raise RequestError(
                400, {"error": "bad_request", "detail": "need sample_id or image"}
            )
        if concept not in self.dataset.concepts:
            raise RequestError(400, {"error": "unknown_concept", "concept": concept})
        if modality not in self.dataset.modalities:
            raise RequestError(400, {"error": "unknown_modality", "modality": modality})

        h, w = image.shape
        points = self._parse_points(body.get("points"), (h, w))
        if not points:
            points = [PromptPoint(w // 2, h // 2, "positive")]
        session = Session(image, concept, modality, points)
        self._run(session)
        self.sessions.put(session)
        return self._response(session)

    def _decode_image(self, spec) -> np.ndarray:
        try:
            w, h = int(spec["w"]), int(spec["h"])
            raw = base64.b64decode(str(spec["gray_b64"]).encode("ascii"), validate=True)
        except (KeyError, TypeError, ValueError) as e:
            raise RequestError(
                400, {"error": "bad_image", "detail": f"image needs w, h, gray_b64: {e}"}
            ) from None
        ds = self.params.hyper.downsample
        if w < ds or h < ds or h % ds or w % ds:
            raise RequestError(
                400, {"error": "bad_image", "detail": f"dimensions must be multiples of {ds}"}
            )
        if len(raw) != w * h:
            raise RequestError(
                400,
                {"error": "bad_image", "detail": f"expected {w * h} bytes, got {len(raw)}"},
            )
        u8 = np.frombuffer(raw, dtype=np.uint8)
        return (u8.astype(np.float64) / 255.0).reshape(h, w)

    def refine(self, session_id: str, body: dict) -> dict:
        session = self.sessions.get(session_id)
        with session.lock:
            extra = self._parse_points(body.get("points"), session.image.shape)
            if extra:
                session.points.extend(extra)
                self._run(session)
            else:
                session.updated = time.monotonic()
            return self._response(session)

    def reset(self, session_id: str) -> dict:
        session = self.sessions.get(session_id)
        with session.lock:
            session.points = list(session.initial_points)
            self._run(session)
            return self._response(session)


# -- HTTP shell ------------------------------------------------------------------


class RefineHTTPServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, addr, service: RefineService, static_dir: Optional[Path],
                 checkpoint_sha: str):
        super().__init__(addr, _Handler)
        self.service = service
        self.static_dir = static_dir
        self.checkpoint_sha = checkpoint_sha


_ROUTE_IMAGE = re.compile(r"^/api/sample/([^/]+)/image$")
_ROUTE_REFINE = re.compile(r"^/api/session/([^/]+)/refine$")
_ROUTE_RESET = re.compile(r"^/api/session/([^/]+)/reset$")


class _Handler(BaseHTTPRequestHandler):
    server: RefineHTTPServer
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # route chatter to the logger, not stderr
        log.debug("%s %s", self.address_string(), fmt % args)

    def _send_json(self, status: int, obj: dict) -> None:
        payload = json.dumps(obj).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        if length == 0:
            return {}
        raw = self.rfile.read(length)
        try:
            doc = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise RequestError(400, {"error": "bad_request", "detail": "body is not JSON"})
        if not isinstance(doc, dict):
            raise RequestError(400, {"error": "bad_request", "detail": "body must be an object"})
        return doc

    def do_GET(self):
        try:
            if self.path == "/api/health":
                return self._send_json(200, {"status": "ok"})
            if self.path == "/api/samples":
                return self._send_json(200, {"samples": self.server.service.sample_list()})
            m = _ROUTE_IMAGE.match(self.path)
            if m:
                return self._send_json(200, self.server.service.sample_image(m.group(1)))
            if self.path.startswith("/api/"):
                return self._send_json(404, {"error": "unknown_endpoint"})
            return self._serve_static()
        except RequestError as e:
            return self._send_json(e.status, e.body)
        except Exception as e:  # noqa: BLE001 - last-resort 500 with a JSON body
            log.exception("GET %s failed", self.path)
            return self._send_json(500, {"error": "internal", "detail": str(e)})

    def do_POST(self):
        try:
            body = self._read_body()
            if self.path == "/api/predict":
                return self._send_json(200, self.server.service.predict(body))
            m = _ROUTE_REFINE.match(self.path)
            if m:
                return self._send_json(200, self.server.service.refine(m.group(1), body))
            m = _ROUTE_RESET.match(self.path)
            if m:
                return self._send_json(200, self.server.service.reset(m.group(1)))
            return self._send_json(404, {"error": "unknown_endpoint"})
        except RequestError as e:
            return self._send_json(e.status, e.body)
        except Exception as e:  # noqa: BLE001
            log.exception("POST %s failed", self.path)
            return self._send_json(500, {"error": "internal", "detail": str(e)})

    def _serve_static(self):
        static = self.server.static_dir
        if static is None:
            return self._send_json(404, {"error": "no_static_files"})
        rel = self.path.split("?", 1)[0].lstrip("/") or "index.html"
        target = (static / rel).resolve()
        if not str(target).startswith(str(static.resolve())) or not target.is_file():
            return self._send_json(404, {"error": "not_found"})
        data = target.read_bytes()
        ctype = _STATIC_TYPES.get(target.suffix, "application/octet-stream")
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def create_server(
    checkpoint,
    data,
    port: int = DEFAULT_PORT,
    host: str = "127.0.0.1",
    static_dir=None,
    session_ttl: float = DEFAULT_SESSION_TTL,
) -> RefineHTTPServer:
    """Load the checkpoint and test split; bind but do not serve yet."""
    params = load_checkpoint(checkpoint)
    dataset = load_dataset(Path(data) / "test" / "manifest.json")
    sha = _sha256(checkpoint)
    service = RefineService(params, dataset, session_ttl=session_ttl)
    static = Path(static_dir) if static_dir else None
    server = RefineHTTPServer((host, port), service, static, sha)
    log.info("listening on %s:%d, checkpoint sha256=%s, %d samples",
             host, server.server_address[1], sha, len(dataset))
    return server


def run_server(checkpoint, data, port: int = DEFAULT_PORT, host: str = "127.0.0.1",
               static_dir=None, session_ttl: float = DEFAULT_SESSION_TTL) -> None:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    server = create_server(checkpoint, data, port=port, host=host,
                           static_dir=static_dir, session_ttl=session_ttl)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        sha_now = _sha256(checkpoint)
        log.info("shutdown, checkpoint sha256=%s (unchanged=%s)",
                 sha_now, sha_now == server.checkpoint_sha)
