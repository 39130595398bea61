"""HTTP prediction service and its client.

Requests and responses are packets posted to ``/predict``.  Models are
trained on first use per (compiler, platform, model kind, objective) and
replaced when the repository has changed, at most once every
``RETRAIN_INTERVAL`` seconds.
"""

import logging
import threading
import time
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Dict, Mapping, Tuple

from . import packets as pk
from .errors import CTuneError, EmptyFeatureVector, InsufficientData, ModelMismatch, PacketError
from .model import FeatureVector, parse_entity_id
from .predictor import KINDS, OBJECTIVES, Model, PredictionQuery, predict, train

log = logging.getLogger(__name__)

RETRAIN_INTERVAL = 10.0
MAX_BODY = 1 << 20


class PredictionService:
    """Request handling, independent of the transport.

    ``source`` is a repository, or a callable returning a fresh read-only
    view of one (so that writes by other processes become visible).
    """

    def __init__(self, source, *, retrain_interval: float = RETRAIN_INTERVAL,
                 clock: Callable[[], float] = time.monotonic):
        self._source = source if callable(source) else (lambda: source)
        self._repo = self._source()
        self._checked = clock()
        self.retrain_interval = retrain_interval
        self.clock = clock
        self._lock = threading.Lock()
        self._models: Dict[Tuple[int, int, str, str], Tuple[Model, tuple, float]] = {}

    def _refresh(self):
        now = self.clock()
        if now - self._checked >= self.retrain_interval:
            self._repo = self._source()
            self._checked = now

    def model(self, compiler_id: int, platform_id: int, kind: str, objective: str) -> Model:
        key = (compiler_id, platform_id, kind, objective)
        with self._lock:
            self._refresh()
            now, repo = self.clock(), self._repo
            cached = self._models.get(key)
            if cached is not None:
                model, fingerprint, trained_at = cached
                if fingerprint == repo.fingerprint() or now - trained_at < self.retrain_interval:
                    return model
            model = train(repo, compiler_id, platform_id, objective, kind)
            if cached is not None and cached[0].training_digest == model.training_digest:
                model = cached[0]
            else:
                log.info("trained %s/%s model (digest %s)", kind, objective, model.training_digest[:12])
            self._models[key] = (model, repo.fingerprint(), now)
            return model

    def handle(self, body: str) -> str:
        try:
            query = parse_query(body)
            model = self.model(query.compiler_id, query.platform_id, query.model_kind, query.objective)
            pred = predict(model, query)
        except CTuneError as exc:
            return error_body(exc)
        return pk.format_packet([
            ("STATUS", "OK"),
            ("OPT_FLAGS", pred.flags.canonical()),
            ("MATCHED_PROGRAM_ID", str(pred.matched_program_ids[0])),
            ("DISTANCE", pk.fmt_float(pred.distance)),
            ("MODEL", query.model_kind),
            ("OBJECTIVE", query.objective),
        ])


def error_body(exc: CTuneError) -> str:
    code = {EmptyFeatureVector: "MALFORMED_QUERY", InsufficientData: "INSUFFICIENT_DATA",
            ModelMismatch: "MODEL_MISMATCH"}
    status = next((v for k, v in code.items() if isinstance(exc, k)), "MALFORMED_QUERY")
    message = " ".join(str(exc).split())
    return pk.format_packet([("STATUS", status), ("MESSAGE", message)])


def parse_query(body: str) -> PredictionQuery:
    if not body.strip():
        raise PacketError("empty request body")
    f = pk.parse_fields(body)
    missing = [k for k in ("PLATFORM_ID", "COMPILER_ID", "STATIC_FEATURE_VECTOR") if k not in f]
    if missing:
        raise PacketError(f"missing {', '.join(missing)}")
    kind = f.get("MODEL", "nearest_neighbor")
    objective = f.get("OBJECTIVE", "time")
    if kind not in KINDS or objective not in OBJECTIVES:
        raise PacketError(f"unknown model {kind!r} or objective {objective!r}")
    if not f["STATIC_FEATURE_VECTOR"].strip():
        raise EmptyFeatureVector("STATIC_FEATURE_VECTOR is empty")
    try:
        features = FeatureVector("static", pk.parse_vector(f["STATIC_FEATURE_VECTOR"]))
        ids = [parse_entity_id(f[k]) for k in ("PLATFORM_ID", "COMPILER_ID")]
        env = parse_entity_id(f["ENVIRONMENT_ID"]) if f.get("ENVIRONMENT_ID") else 0
    except ValueError as exc:
        raise PacketError(str(exc)) from None
    return PredictionQuery(ids[0], ids[1], features, env, kind, objective)


class _Handler(BaseHTTPRequestHandler):
    service: PredictionService = None

    def do_POST(self):
        if self.path.rstrip("/") != "/predict":
            self.send_error(404)
            return
        length = int(self.headers.get("Content-Length") or 0)
        if length > MAX_BODY:
            self.send_error(413)
            return
        body = self.rfile.read(length).decode("utf-8", errors="replace")
        out = self.service.handle(body).encode()
        self.send_response(200)
        self.send_header("Content-Type", "text/plain; charset=utf-8")
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)


class Server(ThreadingHTTPServer):
    daemon_threads = True
    # the socketserver default of 5 resets bursts of concurrent clients
    request_queue_size = 128

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}/predict"


def serve(source, bind_address: Tuple[str, int] = ("127.0.0.1", 0), *,
          background: bool = True, **kw) -> Server:
    """Start the service; with ``background`` it runs on a daemon thread."""
    handler = type("Handler", (_Handler,), {"service": PredictionService(source, **kw)})
    server = Server(bind_address, handler)
    if background:
        threading.Thread(target=server.serve_forever, daemon=True).start()
    else:
        server.serve_forever()
    return server


def query(url: str, fields: Mapping[str, str], timeout: float = 30.0) -> Dict[str, str]:
    data = pk.format_packet(list(fields.items())).encode()
    req = urllib.request.Request(url, data=data, method="POST",
                                 headers={"Content-Type": "text/plain; charset=utf-8"})
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return pk.parse_fields(resp.read().decode())


def raw_query(url: str, body: str, timeout: float = 30.0) -> str:
    req = urllib.request.Request(url, data=body.encode(), method="POST")
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return resp.read().decode()
