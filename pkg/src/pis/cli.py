"""Command-line entry points: synth, ingest, features, train, analyze, serve.

Failures exit with status 1 and a single machine-parseable JSON line on
stderr.  The project root comes from --project or PIS_PROJECT_ROOT.
"""
from __future__ import annotations

import argparse
import os
import sys

from .pipeline import (
    PipelineError,
    build_synthetic_project,
    compute_features,
    ingest_project,
    run_analysis,
    run_training,
)
from .project import ProjectError, ProjectStore, dumps
from .trajectory import ManifestError, PdbParseError, TrajectoryFormatError
from .training import TrainConfig


def _project_root(args) -> str:
    if args.project:
        return args.project
    env = os.environ.get("PIS_PROJECT_ROOT")
    if env:
        return env
    return "."


def _add_project_flag(parser):
    parser.add_argument("--project", default=None,
                        help="project root (default: $PIS_PROJECT_ROOT or .)")


def cmd_synth(args) -> int:
    store = build_synthetic_project(
        _project_root(args), n_frames=args.frames, seed=args.seed,
        n_trajectories=args.trajectories, emission_sigma=args.sigma)
    manifest, _ = store.read_json("manifest")
    print(dumps({"project": str(store.root), **manifest["totals"]}))
    return 0


def cmd_ingest(args) -> int:
    store = ingest_project(_project_root(args), args.topology, args.traj)
    manifest, _ = store.read_json("manifest")
    print(dumps({"project": str(store.root), **manifest["totals"]}))
    return 0


def cmd_features(args) -> int:
    store = ProjectStore(_project_root(args))
    dataset = compute_features(store, k=args.k, graph_dump_path=args.dump_graphs)
    print(dumps({"n_frames": dataset.n_frames_total,
                 "n_trajectories": len(dataset.lengths), "k": dataset.k}))
    return 0


def cmd_train(args) -> int:
    store = ProjectStore(_project_root(args))
    config = TrainConfig(
        lag=args.lag, batch_size=args.batch_size,
        lr_stage1=args.lr1, lr_stage2=args.lr2, lr_constraint=args.lr_constraint,
        epochs_stage1=args.epochs1, epochs_stage2=args.epochs2,
        n_states=args.states, seed=args.seed,
        validation_fraction=args.val_fraction, warmup_epochs=args.warmup,
        d_h=args.d_h, n_layers=args.layers)

    def progress(stage, epoch, train_score, val_score):
        print(f"{stage} epoch {epoch}: train {train_score:.6f} val {val_score:.6f}",
              flush=True)

    checkpoint = run_training(store, config, progress=progress if args.verbose else None)
    last = checkpoint.history[-1] if checkpoint.history else None
    print(dumps({"stage": checkpoint.stage,
                 "final_val_score": None if last is None else last.val_score}))
    return 0


def cmd_analyze(args) -> int:
    store = ProjectStore(_project_root(args))
    summary = run_analysis(store, base_lag=args.lag, max_steps=args.steps,
                           fes_bins=args.bins)
    print(dumps(summary))
    return 0


def cmd_serve(args) -> int:
    from .service import serve
    store = ProjectStore(_project_root(args))
    server = serve(store, host=args.host, port=args.port)
    print(dumps({"listening": f"http://{args.host}:{server.server_address[1]}"}), flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pis",
        description="Physics-informed metastable-state analysis for protein trajectories")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark project")
    _add_project_flag(p)
    p.add_argument("--frames", type=int, default=20000, help="total frames across trajectories")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--trajectories", type=int, default=10)
    p.add_argument("--sigma", type=float, default=0.3, help="emission noise, Angstrom")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="build a project from a topology and PISTRJ files")
    _add_project_flag(p)
    p.add_argument("--topology", required=True, help="PDB-subset topology file")
    p.add_argument("--traj", nargs="+", required=True, help="PISTRJ trajectory files")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("features", help="compute graphs, Rg/SASA series, RMSF")
    _add_project_flag(p)
    p.add_argument("--k", type=int, default=10, help="neighbors per residue")
    p.add_argument("--dump-graphs", default=None, metavar="CSV",
                   help="debug dump of the first trajectory's edges")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="two-stage model training")
    _add_project_flag(p)
    p.add_argument("--lag", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=1024)
    p.add_argument("--epochs1", type=int, default=30)
    p.add_argument("--epochs2", type=int, default=30)
    p.add_argument("--lr1", type=float, default=1e-3)
    p.add_argument("--lr2", type=float, default=3e-4)
    p.add_argument("--lr-constraint", type=float, default=1e-2)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--states", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--d-h", type=int, default=32, help="hidden width")
    p.add_argument("--layers", type=int, default=3, help="graph convolution layers")
    p.add_argument("--verbose", action="store_true", help="per-epoch progress lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze", help="assignments, FES, CK test, contributions")
    _add_project_flag(p)
    p.add_argument("--lag", type=int, default=None, help="CK base lag (frames)")
    p.add_argument("--steps", type=int, default=5, help="maximum CK step multiple")
    p.add_argument("--bins", type=int, default=64, help="FES grid resolution")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("serve", help="start the HTTP API")
    _add_project_flag(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8420)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (PipelineError, ProjectError, ManifestError, PdbParseError,
            TrajectoryFormatError, ValueError, OSError) as exc:
        print(dumps({"error": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
