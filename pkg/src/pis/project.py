"""Project persistence: a directory of content-hashed artifacts.

Every artifact write goes through a temp-file rename and updates the
index; every read re-hashes the file and refuses to serve stale bytes.
JSON emitted here prints floats with 17 significant digits so values
round-trip exactly through the wire.
"""
from __future__ import annotations

import hashlib
import json
import os
import threading
from pathlib import Path

import numpy as np


class ProjectError(RuntimeError):
    pass


class MissingArtifactError(ProjectError):
    pass


class StaleArtifactError(ProjectError):
    pass


def _format_float(x: float) -> str:
    if x != x or x in (float("inf"), float("-inf")):
        raise ValueError("non-finite numbers are not allowed in wire JSON")
    text = f"{x:.17g}"
    return text


def dumps(obj) -> str:
    """JSON with floats at 17 significant digits; rejects non-finite values."""
    pieces: list[str] = []

    def emit(o):
        if o is None:
            pieces.append("null")
        elif o is True:
            pieces.append("true")
        elif o is False:
            pieces.append("false")
        elif isinstance(o, (int, np.integer)):
            pieces.append(str(int(o)))
        elif isinstance(o, (float, np.floating)):
            pieces.append(_format_float(float(o)))
        elif isinstance(o, str):
            pieces.append(json.dumps(o))
        elif isinstance(o, dict):
            pieces.append("{")
            for i, (key, value) in enumerate(o.items()):
                if i:
                    pieces.append(",")
                if not isinstance(key, str):
                    raise TypeError(f"JSON object keys must be strings, got {type(key)}")
                pieces.append(json.dumps(key))
                pieces.append(":")
                emit(value)
            pieces.append("}")
        elif isinstance(o, (list, tuple)):
            pieces.append("[")
            for i, value in enumerate(o):
                if i:
                    pieces.append(",")
                emit(value)
            pieces.append("]")
        elif isinstance(o, np.ndarray):
            emit(o.tolist())
        else:
            raise TypeError(f"cannot serialize {type(o)} to wire JSON")

    emit(obj)
    return "".join(pieces)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class ProjectStore:
    """Single-project artifact store with content hashes.

    Artifact names are logical (e.g. ``traj/3``, ``fes``); each maps to a
    relative path recorded in ``index.json`` together with its sha256.
    """

    INDEX = "index.json"

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()

    # -- index ------------------------------------------------------------
    def _index_path(self) -> Path:
        return self.root / self.INDEX

    def _load_index(self) -> dict:
        path = self._index_path()
        if not path.exists():
            return {}
        return json.loads(path.read_text())

    def _save_index(self, index: dict) -> None:
        tmp = self._index_path().with_suffix(".json.tmp")
        tmp.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, self._index_path())

    # -- artifacts ----------------------------------------------------------
    def put_bytes(self, name: str, relative_path: str, data: bytes) -> str:
        with self._lock:
            target = self.root / relative_path
            target.parent.mkdir(parents=True, exist_ok=True)
            tmp = target.with_name(target.name + ".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, target)
            digest = sha256_bytes(data)
            index = self._load_index()
            index[name] = {"path": relative_path, "sha256": digest}
            self._save_index(index)
            return digest

    def put_text(self, name: str, relative_path: str, text: str) -> str:
        return self.put_bytes(name, relative_path, text.encode("utf-8"))

    def put_json(self, name: str, relative_path: str, obj) -> str:
        return self.put_text(name, relative_path, dumps(obj) + "\n")

    def has(self, name: str) -> bool:
        with self._lock:
            return name in self._load_index()

    def names(self, prefix: str = "") -> list[str]:
        with self._lock:
            return sorted(n for n in self._load_index() if n.startswith(prefix))

    def entry(self, name: str) -> dict:
        with self._lock:
            index = self._load_index()
            if name not in index:
                raise MissingArtifactError(f"artifact {name!r} is not in the project index")
            return index[name]

    def path_of(self, name: str) -> Path:
        return self.root / self.entry(name)["path"]

    def read_bytes(self, name: str) -> tuple[bytes, str]:
        """Artifact payload plus its hash; refuses stale content."""
        with self._lock:
            entry = self.entry(name)
            path = self.root / entry["path"]
            if not path.exists():
                raise MissingArtifactError(f"artifact {name!r} file {entry['path']} is missing")
            data = path.read_bytes()
            digest = sha256_bytes(data)
            if digest != entry["sha256"]:
                raise StaleArtifactError(
                    f"artifact {name!r} does not match its index hash; recompute it")
            return data, digest

    def read_text(self, name: str) -> tuple[str, str]:
        data, digest = self.read_bytes(name)
        return data.decode("utf-8"), digest

    def read_json(self, name: str) -> tuple[dict, str]:
        text, digest = self.read_text(name)
        return json.loads(text), digest


# ---------------------------------------------------------------------------
# CSV helpers for the artifact formats
# ---------------------------------------------------------------------------

def metrics_csv(rg: np.ndarray, sasa_total: np.ndarray) -> str:
    lines = ["frame,rg,sasa_total"]
    for f in range(rg.shape[0]):
        lines.append(f"{f},{_format_float(float(rg[f]))},{_format_float(float(sasa_total[f]))}")
    return "\n".join(lines) + "\n"


def parse_metrics_csv(text: str) -> dict[str, np.ndarray]:
    lines = text.strip().splitlines()
    if lines[0] != "frame,rg,sasa_total":
        raise ProjectError(f"unexpected metrics header {lines[0]!r}")
    rg, sasa_total = [], []
    for line in lines[1:]:
        _, a, b = line.split(",")
        rg.append(float(a))
        sasa_total.append(float(b))
    return {"rg": np.array(rg), "sasa": np.array(sasa_total)}


def residues_csv(rmsf: np.ndarray, res_sasa: np.ndarray) -> str:
    lines = ["residue_index,rmsf,res_sasa"]
    for r in range(rmsf.shape[0]):
        lines.append(f"{r},{_format_float(float(rmsf[r]))},{_format_float(float(res_sasa[r]))}")
    return "\n".join(lines) + "\n"


def parse_residues_csv(text: str) -> dict[str, np.ndarray]:
    lines = text.strip().splitlines()
    if lines[0] != "residue_index,rmsf,res_sasa":
        raise ProjectError(f"unexpected residues header {lines[0]!r}")
    rmsf, rs = [], []
    for line in lines[1:]:
        _, a, b = line.split(",")
        rmsf.append(float(a))
        rs.append(float(b))
    return {"rmsf": np.array(rmsf), "res_sasa": np.array(rs)}


def states_csv(chi: np.ndarray) -> str:
    m = chi.shape[1]
    header = "frame,state," + ",".join(f"chi_{s}" for s in range(m))
    lines = [header]
    states = chi.argmax(axis=1)
    for f in range(chi.shape[0]):
        probs = ",".join(_format_float(float(x)) for x in chi[f])
        lines.append(f"{f},{states[f]},{probs}")
    return "\n".join(lines) + "\n"


def parse_states_csv(text: str) -> tuple[np.ndarray, np.ndarray]:
    lines = text.strip().splitlines()
    if not lines[0].startswith("frame,state,chi_0"):
        raise ProjectError(f"unexpected states header {lines[0]!r}")
    m = len(lines[0].split(",")) - 2
    states, chi = [], []
    for line in lines[1:]:
        parts = line.split(",")
        states.append(int(parts[1]))
        chi.append([float(x) for x in parts[2:2 + m]])
    return np.array(states, dtype=np.int64), np.array(chi)


def labels_csv(labels: np.ndarray) -> str:
    lines = ["frame,state"]
    for f, s in enumerate(labels):
        lines.append(f"{f},{int(s)}")
    return "\n".join(lines) + "\n"


def parse_labels_csv(text: str) -> np.ndarray:
    lines = text.strip().splitlines()
    if lines[0] != "frame,state":
        raise ProjectError(f"unexpected labels header {lines[0]!r}")
    return np.array([int(line.split(",")[1]) for line in lines[1:]], dtype=np.int64)
