"""HTTP service exposing a project to the browser console.

Read endpoints serve hash-versioned artifacts (the hash travels in the
X-Artifact-Hash header); frame slices are byte-exact sub-ranges of the
stored PISTRJ payload.  One training job may run at a time; while it
runs, model-derived endpoints answer 503.
"""
from __future__ import annotations

import struct
import threading
import traceback
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

import numpy as np

from .kinetics import InsufficientDataError, ck_test
from .pipeline import run_analysis, run_training
from .project import (
    MissingArtifactError,
    ProjectStore,
    StaleArtifactError,
    dumps,
    parse_metrics_csv,
    parse_residues_csv,
    parse_states_csv,
    sha256_bytes,
)
from .trajectory import PISTRJ_HEADER_SIZE, PISTRJ_MAGIC
from .training import TrainConfig

TRAIN_CONFIG_FIELDS = {f.name for f in TrainConfig.__dataclass_fields__.values()}


class TrainJobManager:
    """At most one training job; POST while running returns the same id."""

    def __init__(self, store: ProjectStore):
        self.store = store
        self.lock = threading.Lock()
        self.state = {"stage": "idle", "epoch": 0, "train_score": None,
                      "val_score": None, "job_id": None, "error": None}
        self.thread: threading.Thread | None = None

    def status(self) -> dict:
        with self.lock:
            return dict(self.state)

    @property
    def running(self) -> bool:
        with self.lock:
            return self.thread is not None and self.thread.is_alive()

    def start(self, overrides: dict) -> tuple[str, bool]:
        with self.lock:
            if self.thread is not None and self.thread.is_alive():
                return self.state["job_id"], False
            job_id = f"train-{int(self.state['job_id'].split('-')[1]) + 1}" \
                if self.state["job_id"] else "train-1"
            unknown = set(overrides) - TRAIN_CONFIG_FIELDS
            if unknown:
                raise ValueError(f"unknown training options: {sorted(unknown)}")
            config = TrainConfig(**overrides)
            self.state.update(stage="starting", epoch=0, train_score=None,
                              val_score=None, job_id=job_id, error=None)
            self.thread = threading.Thread(
                target=self._run, args=(config, job_id), daemon=True)
            self.thread.start()
            return job_id, True

    def _progress(self, stage, epoch, train_score, val_score):
        with self.lock:
            self.state.update(stage=stage, epoch=epoch,
                              train_score=train_score, val_score=val_score)

    def _run(self, config: TrainConfig, job_id: str):
        try:
            run_training(self.store, config, progress=self._progress)
            run_analysis(self.store)
            with self.lock:
                self.state["stage"] = "done"
        except Exception as exc:  # surfaced through /api/train/status
            traceback.print_exc()
            with self.lock:
                self.state.update(stage="error", error=str(exc))


class ApiServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, store: ProjectStore):
        super().__init__(address, ApiHandler)
        self.store = store
        self.jobs = TrainJobManager(store)
        self.ck_cache: dict = {}


class ApiHandler(BaseHTTPRequestHandler):
    server: ApiServer

    # -- plumbing -----------------------------------------------------------
    def log_message(self, format, *args):  # tests need a quiet server
        pass

    def _send(self, code: int, body: bytes, content_type: str,
              artifact_hash: str | None = None):
        self.send_response(code)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        if artifact_hash:
            self.send_header("X-Artifact-Hash", artifact_hash)
            self.send_header("ETag", f'"{artifact_hash}"')
        self.end_headers()
        self.wfile.write(body)

    def _send_json(self, code: int, obj, artifact_hash: str | None = None):
        self._send(code, (dumps(obj) + "\n").encode(), "application/json", artifact_hash)

    def _error(self, code: int, message: str):
        self._send_json(code, {"error": message})

    def _store(self) -> ProjectStore:
        return self.server.store

    def _guard_model_artifacts(self) -> bool:
        """503 while the exclusive training job rewrites model artifacts."""
        if self.server.jobs.running:
            self._error(503, "training job in progress; model artifacts are being rewritten")
            return True
        return False

    # -- routing --------------------------------------------------------------
    def do_GET(self):
        url = urlparse(self.path)
        query = {k: v[-1] for k, v in parse_qs(url.query).items()}
        parts = [p for p in url.path.split("/") if p]
        try:
            if parts[:2] == ["api", "manifest"]:
                return self._get_artifact_json("manifest")
            if parts[:2] == ["api", "topology"]:
                return self._get_topology()
            if parts[:2] == ["api", "traj"] and len(parts) == 4:
                traj_id = self._traj_id(parts[2])
                if parts[3] == "frames":
                    return self._get_frames(traj_id, query)
                if parts[3] == "metrics":
                    return self._get_metrics(traj_id, query)
                if parts[3] == "states":
                    return self._get_states(traj_id)
            if parts[:2] == ["api", "fes"]:
                if self._guard_model_artifacts():
                    return
                return self._get_artifact_json("fes")
            if parts[:2] == ["api", "cktest"]:
                if self._guard_model_artifacts():
                    return
                return self._get_cktest(query)
            if parts[:2] == ["api", "residues"]:
                return self._get_residues()
            if parts[:2] == ["api", "train"] and len(parts) == 3 and parts[2] == "status":
                return self._send_json(200, self.server.jobs.status())
            return self._error(404, f"unknown endpoint {url.path}")
        except MissingArtifactError as exc:
            return self._error(404, str(exc))
        except StaleArtifactError as exc:
            return self._error(409, str(exc))
        except (ValueError, KeyError) as exc:
            return self._error(400, str(exc))

    def do_POST(self):
        url = urlparse(self.path)
        parts = [p for p in url.path.split("/") if p]
        try:
            if parts[:2] == ["api", "train"] and len(parts) == 2:
                length = int(self.headers.get("Content-Length") or 0)
                body = self.rfile.read(length) if length else b"{}"
                import json as stdlib_json
                overrides = stdlib_json.loads(body.decode() or "{}")
                job_id, started = self.server.jobs.start(overrides)
                return self._send_json(200, {"job_id": job_id, "started": started})
            return self._error(404, f"unknown endpoint {url.path}")
        except ValueError as exc:
            return self._error(400, str(exc))

    # -- endpoint bodies ------------------------------------------------------
    def _traj_id(self, raw: str) -> int:
        try:
            return int(raw)
        except ValueError:
            raise MissingArtifactError(f"unknown trajectory id {raw!r}") from None

    def _get_artifact_json(self, name: str):
        text, digest = self._store().read_text(name)
        self._send(200, text.encode(), "application/json", digest)

    def _get_topology(self):
        from .trajectory import parse_topology
        text, digest = self._store().read_text("topology")
        topo, _ = parse_topology(text)
        body = {
            "n_residues": topo.n_residues,
            "n_atoms": topo.n_atoms,
            "residue_names": list(topo.residue_names),
            "residue_ranges": [list(r) for r in topo.residue_ranges],
            "elements": [a.element for a in topo.atoms],
        }
        self._send_json(200, body, digest)

    def _get_frames(self, traj_id: int, query: dict):
        data, digest = self._store().read_bytes(f"traj/{traj_id}")
        n_frames, n_atoms, _ = struct.unpack("<IIf", data[8:PISTRJ_HEADER_SIZE])
        start = int(query.get("start", 0))
        count = int(query.get("count", n_frames))
        if start < 0 or count < 0 or start + count > n_frames:
            raise ValueError(f"frame range [{start},{start + count}) outside [0,{n_frames})")
        frame_size = n_atoms * 12
        header = PISTRJ_MAGIC + struct.pack("<I", count) + data[12:PISTRJ_HEADER_SIZE]
        lo = PISTRJ_HEADER_SIZE + start * frame_size
        hi = lo + count * frame_size
        self._send(200, header + data[lo:hi], "application/octet-stream", digest)

    def _get_metrics(self, traj_id: int, query: dict):
        series = query.get("series")
        if series not in ("rg", "sasa"):
            raise ValueError(f"series must be rg or sasa, got {series!r}")
        text, digest = self._store().read_text(f"metrics/{traj_id}")
        values = parse_metrics_csv(text)[series]
        self._send_json(200, values, digest)

    def _get_states(self, traj_id: int):
        if self._guard_model_artifacts():
            return
        text, digest = self._store().read_text(f"states/{traj_id}")
        states, chi = parse_states_csv(text)
        self._send_json(200, {"state": states.tolist(), "chi": chi}, digest)

    def _get_cktest(self, query: dict):
        lag = int(query.get("lag", 0))
        steps = int(query.get("n", 1))
        if lag < 1 or steps < 1:
            raise ValueError("lag and n must be positive integers")
        store = self._store()
        state_names = store.names("states/")
        if not state_names:
            raise MissingArtifactError("no state assignments; run analyze first")
        chi_parts, digests = [], []
        for name in state_names:
            text, digest = store.read_text(name)
            digests.append(digest)
            chi_parts.append(parse_states_csv(text)[1])
        cache_key = (lag, steps, tuple(digests))
        if cache_key not in self.server.ck_cache:
            try:
                results = ck_test(chi_parts, lag, steps)
            except InsufficientDataError as exc:
                raise ValueError(str(exc)) from None
            self.server.ck_cache[cache_key] = results
        result = self.server.ck_cache[cache_key][steps - 1]
        self._send_json(200, {
            "base_lag": result.base_lag,
            "steps": result.steps,
            "predicted": result.predicted,
            "estimated": result.estimated,
            "max_abs_dev": result.max_abs_deviation,
        }, sha256_bytes("".join(digests).encode()))

    def _get_residues(self):
        store = self._store()
        text, digest = store.read_text("residues")
        parsed = parse_residues_csv(text)
        body = {
            "rmsf": parsed["rmsf"],
            "res_sasa": parsed["res_sasa"],
            "contributions": None,
            "contribution_flags": None,
        }
        digests = [digest]
        if store.has("contributions"):
            if self._guard_model_artifacts():
                return
            doc, contrib_digest = store.read_json("contributions")
            body["contributions"] = doc["contributions"]
            body["contribution_flags"] = doc["flagged"]
            digests.append(contrib_digest)
        self._send_json(200, body, sha256_bytes("".join(digests).encode()))


def serve(store: ProjectStore, host: str = "127.0.0.1", port: int = 8420) -> ApiServer:
    """Bind the API server; the caller drives serve_forever()."""
    return ApiServer((host, port), store)
