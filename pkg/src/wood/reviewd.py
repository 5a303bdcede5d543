"""HTTP service backing the human pruning step.

Serves the ranked candidate queue one batch at a time, records verdicts to an
append-only JSONL log (single writer, many readers), and reports progress with
a running n/(1-r) cost estimate. Plain JSON over HTTP, no auth: this is a
single-machine labeling tool.

Queue semantics: candidates are ordered by (class, rank). A (sample, class)
pair leaves the queue once any annotator posts a non-skip verdict for it; a
contains_foreground verdict removes every pair of that sample, since one
foreground sighting disqualifies the image globally. Skips only advance the
skipping annotator past the item.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import asdict
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from .oodpipe import (
    VERDICT_BACKGROUND_ONLY,
    VERDICT_CONTAINS_FOREGROUND,
    VERDICT_SKIP,
    VERDICTS,
    RankedCandidate,
    ReviewDecision,
    effective_verdicts,
    load_decisions,
)


class ReviewService:
    """Queue + decision log state machine, independent of the HTTP layer."""

    def __init__(
        self,
        ranked: list[RankedCandidate],
        image_paths: dict[str, Path],
        log_path: str | Path,
        target: int | None = None,
    ):
        class_order: list[str] = []
        for rc in ranked:
            if rc.class_name not in class_order:
                class_order.append(rc.class_name)
        self.queue = sorted(
            ranked, key=lambda rc: (class_order.index(rc.class_name), rc.rank)
        )
        self.pairs = {(rc.sample_id, rc.class_name) for rc in self.queue}
        self.image_paths = image_paths
        self.log_path = Path(log_path)
        self.target = target if target is not None else len({rc.sample_id for rc in ranked})
        self._lock = threading.Lock()
        self._decisions = load_decisions(self.log_path) if self.log_path.exists() else []
        self._seen = {self._tuple(d) for d in self._decisions}

    @staticmethod
    def _tuple(d: ReviewDecision) -> tuple:
        return (d.sample_id, d.class_name, d.verdict, d.annotator_id, d.timestamp)

    def _state(self):
        verdicts = effective_verdicts(self._decisions)
        rejected = {
            sample for (sample, _), v in verdicts.items()
            if v == VERDICT_CONTAINS_FOREGROUND
        }
        kept = {
            sample for (sample, _), v in verdicts.items()
            if v == VERDICT_BACKGROUND_ONLY
        }
        return verdicts, rejected, kept - rejected

    def _skipped_by(self, annotator_id: str) -> set[tuple[str, str]]:
        return {
            (d.sample_id, d.class_name)
            for d in self._decisions
            if d.verdict == VERDICT_SKIP and d.annotator_id == annotator_id
        }

    def get_batch(self, annotator_id: str, size: int) -> dict:
        with self._lock:
            verdicts, rejected, _ = self._state()
            skipped = self._skipped_by(annotator_id)
            items = []
            for rc in self.queue:
                key = (rc.sample_id, rc.class_name)
                if key in verdicts or rc.sample_id in rejected or key in skipped:
                    continue
                items.append(
                    {
                        "sample_id": rc.sample_id,
                        "class_name": rc.class_name,
                        "score": rc.score,
                        "rank": rc.rank,
                        "image_url": f"/image/{rc.sample_id}",
                    }
                )
                if len(items) == size:
                    break
            return {"items": items, "done": len(items) == 0}

    def post_decision(self, body: dict) -> dict:
        for key in ("sample_id", "class_name", "verdict", "annotator_id"):
            if key not in body:
                raise ValueError(f"missing field {key!r}")
        if body["verdict"] not in VERDICTS:
            raise ValueError(f"unknown verdict {body['verdict']!r}")
        if (body["sample_id"], body["class_name"]) not in self.pairs:
            raise KeyError(
                f"no ranked candidate ({body['sample_id']!r}, {body['class_name']!r})"
            )
        decision = ReviewDecision(
            sample_id=str(body["sample_id"]),
            class_name=str(body["class_name"]),
            verdict=str(body["verdict"]),
            annotator_id=str(body["annotator_id"]),
            timestamp=float(body.get("timestamp", time.time())),
        )
        with self._lock:
            if self._tuple(decision) in self._seen:
                return {"ok": True, "duplicate": True}
            # single-writer append keeps the log one valid JSON line per decision
            with self.log_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(asdict(decision)) + "\n")
            self._decisions.append(decision)
            self._seen.add(self._tuple(decision))
            return {"ok": True, "duplicate": False}

    def progress(self) -> dict:
        from .oodpipe import expected_reviews

        with self._lock:
            verdicts, rejected, collected = self._state()
            decided = len(verdicts)
            positives = sum(
                1 for v in verdicts.values() if v == VERDICT_CONTAINS_FOREGROUND
            )
            rate = positives / decided if decided else 0.0
            remaining = 0
            for rc in self.queue:
                key = (rc.sample_id, rc.class_name)
                if key not in verdicts and rc.sample_id not in rejected:
                    remaining += 1
            need = max(0, self.target - len(collected))
            estimate = expected_reviews(need, rate) if rate < 1.0 else float("inf")
            return {
                "decided": decided,
                "positives": positives,
                "rate": rate,
                "remaining": remaining,
                "collected": len(collected),
                "target": self.target,
                "estimated_remaining_reviews": estimate,
                "done": remaining == 0,
            }


_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".png": "image/png",
    ".pgm": "image/x-portable-graymap",
    ".json": "application/json",
}

_PLACEHOLDER_PAGE = b"""<!doctype html>
<html><head><meta charset="utf-8"><title>review service</title></head>
<body><h1>review service is running</h1>
<p>No UI bundle is installed. Use the HTTP API directly:
GET /batch?annotator_id=..&amp;size=.., POST /decision, GET /progress.</p>
</body></html>
"""


class _Handler(BaseHTTPRequestHandler):
    service: ReviewService = None  # set by make_server
    static_dir: Path | None = None

    def log_message(self, fmt, *args):  # quiet by default
        pass

    def _send_json(self, payload: dict, status: int = 200) -> None:
        blob = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(blob)))
        self.end_headers()
        self.wfile.write(blob)

    def _send_file(self, path: Path) -> None:
        blob = path.read_bytes()
        self.send_response(200)
        ctype = _CONTENT_TYPES.get(path.suffix, "application/octet-stream")
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(blob)))
        self.end_headers()
        self.wfile.write(blob)

    def do_GET(self):
        url = urlparse(self.path)
        if url.path == "/batch":
            params = parse_qs(url.query)
            annotator = params.get("annotator_id", ["anon"])[0]
            try:
                size = int(params.get("size", ["10"])[0])
            except ValueError:
                self._send_json({"error": "size must be an integer"}, 400)
                return
            self._send_json(self.service.get_batch(annotator, size))
        elif url.path == "/progress":
            self._send_json(self.service.progress())
        elif url.path.startswith("/image/"):
            sample_id = url.path[len("/image/") :]
            path = self.service.image_paths.get(sample_id)
            if path is None or not Path(path).exists():
                self._send_json({"error": f"unknown image {sample_id!r}"}, 404)
                return
            self._send_file(Path(path))
        elif url.path == "/":
            index = (self.static_dir / "index.html") if self.static_dir else None
            if index is not None and index.exists():
                self._send_file(index)
            else:
                self.send_response(200)
                self.send_header("Content-Type", "text/html; charset=utf-8")
                self.send_header("Content-Length", str(len(_PLACEHOLDER_PAGE)))
                self.end_headers()
                self.wfile.write(_PLACEHOLDER_PAGE)
        elif self.static_dir is not None:
            target = (self.static_dir / url.path.lstrip("/")).resolve()
            if target.is_file() and target.is_relative_to(self.static_dir.resolve()):
                self._send_file(target)
            else:
                self._send_json({"error": "not found"}, 404)
        else:
            self._send_json({"error": "not found"}, 404)

    def do_POST(self):
        url = urlparse(self.path)
        if url.path != "/decision":
            self._send_json({"error": "not found"}, 404)
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            body = json.loads(self.rfile.read(length).decode("utf-8"))
            if not isinstance(body, dict):
                raise ValueError("body must be a JSON object")
        except (ValueError, json.JSONDecodeError) as e:
            self._send_json({"error": f"malformed body: {e}"}, 400)
            return
        try:
            self._send_json(self.service.post_decision(body))
        except KeyError as e:
            self._send_json({"error": str(e)}, 404)
        except ValueError as e:
            self._send_json({"error": str(e)}, 400)


def make_server(
    service: ReviewService,
    host: str = "127.0.0.1",
    port: int = 0,
    static_dir: str | Path | None = None,
) -> ThreadingHTTPServer:
    handler = type(
        "BoundHandler",
        (_Handler,),
        {
            "service": service,
            "static_dir": Path(static_dir) if static_dir else None,
        },
    )
    return ThreadingHTTPServer((host, port), handler)
