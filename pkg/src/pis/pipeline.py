"""Project-level pipeline steps shared by the CLI and the HTTP service.

A project directory holds the manifest, topology, trajectory containers,
cached features, metric series, the model checkpoint, and analysis
artifacts, all indexed with content hashes by the ProjectStore.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .graphs import RbfConfig, dump_graph_csv, frame_graph
from .kinetics import ck_test, free_energy_surface, residue_contributions
from .physchem import ResidueMetrics, SasaParams, rmsf
from .project import (
    MissingArtifactError,
    ProjectStore,
    labels_csv,
    metrics_csv,
    residues_csv,
    states_csv,
)
from .synthetic import default_spec, generate, spec_topology
from .trajectory import (
    DatasetManifest,
    ManifestEntry,
    Topology,
    Trajectory,
    parse_topology,
    read_frames,
    write_frames,
    write_topology_pdb,
)
from .training import (
    Checkpoint,
    FeaturizedDataset,
    TrainConfig,
    encode_frames,
    featurize,
    load_features,
    make_pairs,
    save_features,
    train_full,
    write_training_log,
)


class PipelineError(RuntimeError):
    pass


def _traj_name(i: int) -> str:
    return f"traj/{i}"


def _traj_path(i: int) -> str:
    return f"traj/traj_{i:04d}.pistrj"


# ---------------------------------------------------------------------------
# Project creation
# ---------------------------------------------------------------------------

def build_synthetic_project(root, n_frames: int, seed: int, n_trajectories: int = 10,
                            emission_sigma: float = 0.3) -> ProjectStore:
    """Generate a synthetic benchmark dataset and lay out a full project."""
    if n_frames < n_trajectories:
        raise PipelineError(f"{n_frames} frames cannot fill {n_trajectories} trajectories")
    store = ProjectStore(root)
    spec = default_spec(emission_sigma=emission_sigma)
    topology = spec_topology(spec)

    per = n_frames // n_trajectories
    counts = [per] * n_trajectories
    counts[-1] += n_frames - per * n_trajectories

    entries = []
    for i, count in enumerate(counts):
        traj, labels = generate(spec, count, seed=seed + i)
        store.put_bytes(_traj_name(i), _traj_path(i), write_frames(traj))
        store.put_text(f"labels/{i}", f"labels/labels_{i:04d}.csv", labels_csv(labels))
        entries.append(ManifestEntry(_traj_path(i), count))

    store.put_text("topology", "topology.pdb",
                   write_topology_pdb(topology, spec.templates[0]))
    manifest = DatasetManifest(tuple(entries))
    store.put_json("manifest", "manifest.json", manifest.to_json())
    store.put_json("synth_spec", "synth_spec.json", {
        "t_true": spec.t_true, "emission_sigma": spec.emission_sigma,
        "n_residues": spec.n_residues, "atoms_per_residue": spec.atoms_per_residue,
        "seed": seed, "n_trajectories": n_trajectories,
    })
    return store


def ingest_project(root, topology_path, trajectory_paths) -> ProjectStore:
    """Copy a topology and PISTRJ containers into a fresh project layout."""
    store = ProjectStore(root)
    text = Path(topology_path).read_text()
    topology, _ = parse_topology(text)
    store.put_text("topology", "topology.pdb", text)

    entries = []
    for i, src in enumerate(trajectory_paths):
        data = Path(src).read_bytes()
        traj = read_frames(data, topology)  # validates header and sizes
        store.put_bytes(_traj_name(i), _traj_path(i), data)
        entries.append(ManifestEntry(_traj_path(i), traj.n_frames))
    manifest = DatasetManifest(tuple(entries))
    store.put_json("manifest", "manifest.json", manifest.to_json())
    return store


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def load_manifest(store: ProjectStore) -> DatasetManifest:
    doc, _ = store.read_json("manifest")
    return DatasetManifest.from_json(doc)


def load_topology(store: ProjectStore) -> Topology:
    text, _ = store.read_text("topology")
    return parse_topology(text)[0]


def load_trajectories(store: ProjectStore) -> tuple[Topology, list[Trajectory]]:
    manifest = load_manifest(store)
    topology = load_topology(store)
    trajs = []
    for i in range(manifest.n_trajectories):
        data, _ = store.read_bytes(_traj_name(i))
        trajs.append(read_frames(data, topology))
    return topology, trajs


# ---------------------------------------------------------------------------
# Features and metrics
# ---------------------------------------------------------------------------

def compute_features(store: ProjectStore, k: int = 10, rbf: RbfConfig = RbfConfig(),
                     sasa_params: SasaParams = SasaParams(),
                     graph_dump_path=None) -> FeaturizedDataset:
    """Featurize every trajectory; persist features, metric series, RMSF."""
    topology, trajs = load_trajectories(store)
    for i, traj in enumerate(trajs):
        if traj.n_frames == 0:
            raise PipelineError(f"empty trajectory {_traj_path(i)}")
    dataset = featurize(trajs, k=k, rbf=rbf, sasa_params=sasa_params)

    tmp = store.root / "features" / "features.build.npz"
    tmp.parent.mkdir(parents=True, exist_ok=True)
    save_features(dataset, tmp)
    store.put_bytes("features", "features/features.npz", tmp.read_bytes())
    tmp.unlink()

    for i, phys in enumerate(dataset.per_trajectory(dataset.phys)):
        store.put_text(f"metrics/{i}", f"metrics/metrics_{i:04d}.csv",
                       metrics_csv(phys[:, 0], phys[:, 1]))

    from .trajectory import concat_trajectories
    pooled = concat_trajectories(trajs) if len(trajs) > 1 else trajs[0]
    metrics = ResidueMetrics(rmsf(pooled), dataset.res_sasa_mean)
    store.put_text("residues", "metrics/residues.csv",
                   residues_csv(metrics.rmsf, metrics.res_sasa))

    if graph_dump_path is not None:
        graphs = [frame_graph(trajs[0].coordinates[f], topology, k=k, rbf=dataset.rbf)
                  for f in range(min(trajs[0].n_frames, 50))]
        dump_graph_csv(graph_dump_path, graphs)
    return dataset


def ensure_features(store: ProjectStore, k: int = 10) -> FeaturizedDataset:
    if store.has("features"):
        store.read_bytes("features")  # hash check
        return load_features(store.path_of("features"))
    return compute_features(store, k=k)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def run_training(store: ProjectStore, config: TrainConfig, progress=None) -> Checkpoint:
    dataset = ensure_features(store)
    checkpoint = train_full(config, dataset, progress=progress)

    build = store.root / "model" / "checkpoint.build"
    build.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(build)
    bin_path = Path(str(build) + ".bin")
    json_path = Path(str(build) + ".json")
    store.put_bytes("checkpoint_bin", "model/checkpoint.bin", bin_path.read_bytes())
    store.put_bytes("checkpoint_json", "model/checkpoint.json", json_path.read_bytes())
    bin_path.unlink()
    json_path.unlink()

    log_path = store.root / "model" / "training_log.build"
    write_training_log(log_path, checkpoint.history)
    store.put_bytes("training_log", "model/training_log.csv", log_path.read_bytes())
    log_path.unlink()
    return checkpoint


def load_checkpoint(store: ProjectStore) -> Checkpoint:
    try:
        bin_data, _ = store.read_bytes("checkpoint_bin")
        json_data, _ = store.read_bytes("checkpoint_json")
    except MissingArtifactError:
        raise PipelineError("no model: run train first") from None
    build = store.root / "model" / "checkpoint.load"
    bin_path = Path(str(build) + ".bin")
    json_path = Path(str(build) + ".json")
    bin_path.write_bytes(bin_data)
    json_path.write_bytes(json_data)
    checkpoint = Checkpoint.load(build)
    bin_path.unlink()
    json_path.unlink()
    return checkpoint


# ---------------------------------------------------------------------------
# Analysis
# ---------------------------------------------------------------------------

def run_analysis(store: ProjectStore, base_lag: int | None = None,
                 max_steps: int = 5, fes_bins: int = 64) -> dict:
    """Assignments, free-energy surface, CK test, residue contributions."""
    checkpoint = load_checkpoint(store)
    dataset = ensure_features(store)
    lag = base_lag if base_lag is not None else checkpoint.train_config.lag

    all_frames = np.arange(dataset.n_frames_total)
    chi, z, mass = encode_frames(checkpoint.encoder, dataset, all_frames,
                                 want_z=True, want_attention=True)

    chi_parts = dataset.per_trajectory(chi)
    for i, part in enumerate(chi_parts):
        store.put_text(f"states/{i}", f"analysis/states_{i:04d}.csv", states_csv(part))

    fes = free_energy_surface(z, bins=fes_bins)
    f_grid = [[None if not fes.occupied[i, j] else float(fes.free_energy[i, j])
               for j in range(fes.free_energy.shape[1])]
              for i in range(fes.free_energy.shape[0])]
    store.put_json("fes", "analysis/fes.json", {
        "pc1_edges": fes.pc1_edges, "pc2_edges": fes.pc2_edges,
        "free_energy": f_grid,
        "explained_variance": fes.explained_variance,
    })

    feasible = 0
    for n in range(1, max_steps + 1):
        if any(length > n * lag for length in dataset.lengths):
            feasible = n
    results = ck_test(chi_parts, lag, feasible) if feasible else []
    store.put_json("cktest", "analysis/cktest.json", {
        "base_lag": lag,
        "results": [{
            "steps": r.steps,
            "predicted": r.predicted,
            "estimated": r.estimated,
            "max_abs_dev": r.max_abs_deviation,
        } for r in results],
    })

    contributions, flagged = residue_contributions(mass, chi)
    store.put_json("contributions", "analysis/contributions.json", {
        "contributions": contributions,
        "flagged": flagged.tolist(),
    })
    return {
        "n_frames": int(dataset.n_frames_total),
        "base_lag": lag,
        "ck_steps": feasible,
        "n_states": chi.shape[1],
    }
