#!/usr/bin/env python3
"""Export console test fixtures by capturing real API responses.

Builds a small synthetic project, trains it enough for clean state
separation, starts the HTTP service, and saves raw response bytes for
the endpoints the console consumes. Run from the repository root:

    python3 frontend/scripts/export_fixtures.py
"""
import json
import sys
import tempfile
import threading
import urllib.request
from pathlib import Path

from pis.cli import main as cli_main
from pis.project import ProjectStore
from pis.service import ApiServer

FIXTURES = Path(__file__).parent.parent / "tests" / "fixtures"


def fetch(base: str, path: str) -> bytes:
    with urllib.request.urlopen(base + path) as response:
        return response.read()


def main() -> int:
    FIXTURES.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp) / "project"
        steps = [
            ["synth", "--project", str(root), "--frames", "1800",
             "--trajectories", "6", "--seed", "21"],
            ["features", "--project", str(root)],
            ["train", "--project", str(root), "--lag", "1", "--batch-size", "256",
             "--epochs1", "4", "--epochs2", "60", "--warmup", "2",
             "--lr2", "0.003", "--d-h", "16", "--layers", "2"],
            ["analyze", "--project", str(root), "--lag", "1", "--steps", "3"],
        ]
        for argv in steps:
            if cli_main(argv) != 0:
                print(f"step failed: {argv}", file=sys.stderr)
                return 1

        api = ApiServer(("127.0.0.1", 0), ProjectStore(root))
        thread = threading.Thread(target=api.serve_forever, daemon=True)
        thread.start()
        base = f"http://127.0.0.1:{api.server_address[1]}"
        try:
            captures = {
                "manifest.json": "/api/manifest",
                "topology.json": "/api/topology",
                "metrics_rg_0.json": "/api/traj/0/metrics?series=rg",
                "metrics_sasa_0.json": "/api/traj/0/metrics?series=sasa",
                "states_0.json": "/api/traj/0/states",
                "fes.json": "/api/fes",
                "cktest_lag1_n1.json": "/api/cktest?lag=1&n=1",
                "cktest_lag1_n2.json": "/api/cktest?lag=1&n=2",
                "cktest_lag1_n3.json": "/api/cktest?lag=1&n=3",
                "residues.json": "/api/residues",
                "frames_slice.bin": "/api/traj/0/frames?start=10&count=4",
            }
            for filename, path in captures.items():
                (FIXTURES / filename).write_bytes(fetch(base, path))

            # Sidecar with values the binary decoder test checks against.
            slice_bytes = (FIXTURES / "frames_slice.bin").read_bytes()
            import struct
            n_frames, n_atoms, dt_ps = struct.unpack("<IIf", slice_bytes[8:20])
            first_atom = struct.unpack("<3f", slice_bytes[20:32])
            (FIXTURES / "frames_slice_meta.json").write_text(json.dumps({
                "n_frames": n_frames,
                "n_atoms": n_atoms,
                "dt_ps": dt_ps,
                "first_atom_xyz": list(first_atom),
                "start": 10,
                "count": 4,
            }, indent=2))
        finally:
            api.shutdown()
    print(f"fixtures written to {FIXTURES}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
