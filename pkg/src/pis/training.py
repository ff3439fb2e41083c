"""Two-stage training: score-based pretraining of the encoder, then
constrained optimization of the reweighting/kernel modules with the
variational candidate score.

Featurization (graphs + physical descriptors) is precomputed once per
dataset; batches then assemble by fancy indexing only.  All shuffling
comes from Philox streams keyed by the run seed, so a run is bitwise
reproducible on one machine.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, NonFiniteError, Tensor
from .encoder import EncoderConfig, EncoderParams, encode_batch, residue_type_indices
from .graphs import RbfConfig, knn_graph
from .kinetics import build_constrained_K, covariances, vamp2_score, vamp_e_score
from .physchem import SasaParams, radius_of_gyration, sasa
from .trajectory import Trajectory


@dataclass(frozen=True)
class TrainConfig:
    lag: int = 5
    batch_size: int = 1024
    lr_stage1: float = 1e-3
    lr_stage2: float = 3e-4
    lr_constraint: float = 1e-2
    epochs_stage1: int = 30
    epochs_stage2: int = 30
    n_states: int = 4
    seed: int = 0
    validation_fraction: float = 0.2
    eps_rel: float = 1e-6
    warmup_epochs: int = 5
    d_h: int = 32
    n_layers: int = 3

    def __post_init__(self):
        if self.lag < 1:
            raise ValueError(f"lag must be >= 1, got {self.lag}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError(f"validation fraction must lie in (0,1), got {self.validation_fraction}")


# ---------------------------------------------------------------------------
# Featurization
# ---------------------------------------------------------------------------

@dataclass
class FeaturizedDataset:
    """Per-frame graph and physical features for a set of trajectories."""

    type_indices: np.ndarray          # (n_residues,)
    lengths: list[int]                # frames per trajectory
    neighbors: np.ndarray             # (total_frames, n, k)
    distances: np.ndarray             # (total_frames, n, k)
    phys: np.ndarray                  # (total_frames, 2)
    dt_ps: float
    k: int
    rbf: RbfConfig
    res_sasa_mean: np.ndarray | None = None  # (n_residues,), time-averaged

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.lengths)])

    @property
    def n_frames_total(self) -> int:
        return int(sum(self.lengths))

    def per_trajectory(self, array: np.ndarray) -> list[np.ndarray]:
        off = self.offsets
        return [array[off[i]:off[i + 1]] for i in range(len(self.lengths))]


def featurize(trajectories: list[Trajectory], k: int = 10,
              rbf: RbfConfig = RbfConfig(),
              sasa_params: SasaParams = SasaParams()) -> FeaturizedDataset:
    """Precompute k-NN graphs and [Rg, SASA] for every frame."""
    if not trajectories:
        raise ValueError("no trajectories to featurize")
    topo = trajectories[0].topology
    types = residue_type_indices(topo.residue_names)
    k_eff = min(k, topo.n_residues - 1)
    res_index = topo.residue_index
    res_sasa_acc = np.zeros(topo.n_residues, dtype=np.float64)
    neighbors_parts, distance_parts, phys_parts, lengths = [], [], [], []
    for traj in trajectories:
        if traj.n_frames == 0:
            raise ValueError("empty trajectory")
        nb = np.empty((traj.n_frames, topo.n_residues, k_eff), dtype=np.int64)
        ds = np.empty((traj.n_frames, topo.n_residues, k_eff), dtype=np.float64)
        ph = np.empty((traj.n_frames, 2), dtype=np.float64)
        for f in range(traj.n_frames):
            coords = traj.coordinates[f]
            nb[f], ds[f] = knn_graph(coords, topo, k)
            ph[f, 0] = radius_of_gyration(coords, topo)
            total, per_atom = sasa(coords, topo, sasa_params)
            ph[f, 1] = total
            np.add.at(res_sasa_acc, res_index, per_atom)
        neighbors_parts.append(nb)
        distance_parts.append(ds)
        phys_parts.append(ph)
        lengths.append(traj.n_frames)
    n_total = sum(lengths)
    return FeaturizedDataset(
        type_indices=types, lengths=lengths,
        neighbors=np.concatenate(neighbors_parts),
        distances=np.concatenate(distance_parts),
        phys=np.concatenate(phys_parts),
        dt_ps=trajectories[0].dt_ps, k=k_eff, rbf=rbf,
        res_sasa_mean=res_sasa_acc / n_total)


def save_features(dataset: FeaturizedDataset, path) -> None:
    np.savez(path,
             type_indices=dataset.type_indices,
             lengths=np.array(dataset.lengths, dtype=np.int64),
             neighbors=dataset.neighbors,
             distances=dataset.distances,
             phys=dataset.phys,
             dt_ps=np.array([dataset.dt_ps]),
             k=np.array([dataset.k]),
             rbf=np.array([dataset.rbf.n_centers, dataset.rbf.d_max, dataset.rbf.sigma]),
             res_sasa_mean=(dataset.res_sasa_mean if dataset.res_sasa_mean is not None
                            else np.zeros(0)))


def load_features(path) -> FeaturizedDataset:
    with np.load(path) as data:
        rbf_arr = data["rbf"]
        res_sasa_mean = data["res_sasa_mean"] if "res_sasa_mean" in data else np.zeros(0)
        return FeaturizedDataset(
            type_indices=data["type_indices"],
            lengths=[int(x) for x in data["lengths"]],
            neighbors=data["neighbors"],
            distances=data["distances"],
            phys=data["phys"],
            dt_ps=float(data["dt_ps"][0]),
            k=int(data["k"][0]),
            rbf=RbfConfig(int(rbf_arr[0]), float(rbf_arr[1]), float(rbf_arr[2])),
            res_sasa_mean=res_sasa_mean if res_sasa_mean.size else None)


# ---------------------------------------------------------------------------
# Pair bookkeeping
# ---------------------------------------------------------------------------

def make_pairs(lengths: list[int], lag: int) -> np.ndarray:
    """Global (t, t+lag) index pairs that never straddle trajectory bounds."""
    if lag < 1:
        raise ValueError(f"lag must be >= 1, got {lag}")
    offset = 0
    pairs = []
    for length in lengths:
        span = max(0, length - lag)
        if span:
            t = offset + np.arange(span, dtype=np.int64)
            pairs.append(np.column_stack([t, t + lag]))
        offset += length
    if not pairs:
        raise ValueError(f"no (t, t+{lag}) pairs; trajectories are too short")
    return np.concatenate(pairs)


def split_trajectories(n_trajectories: int, validation_fraction: float,
                       seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Whole-trajectory split so time-lagged pairs never leak across sets."""
    rng = np.random.Generator(np.random.Philox(key=seed ^ 0x53504C49))
    order = rng.permutation(n_trajectories)
    n_val = max(1, int(round(n_trajectories * validation_fraction)))
    if n_val >= n_trajectories:
        raise ValueError(f"validation would consume all {n_trajectories} trajectories")
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _pairs_for(dataset: FeaturizedDataset, traj_ids: np.ndarray, lag: int) -> np.ndarray:
    offsets = dataset.offsets
    chunks = []
    for t in traj_ids:
        length = dataset.lengths[t]
        span = max(0, length - lag)
        if span:
            start = offsets[t]
            idx = start + np.arange(span, dtype=np.int64)
            chunks.append(np.column_stack([idx, idx + lag]))
    if not chunks:
        raise ValueError(f"no pairs at lag {lag} in the selected trajectories")
    return np.concatenate(chunks)


# ---------------------------------------------------------------------------
# Checkpoint
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    stage: str
    train_score: float
    val_score: float


@dataclass
class Checkpoint:
    encoder: EncoderParams
    u_raw: Tensor
    kernel_raw: Tensor
    optimizer_arrays: dict[str, np.ndarray]
    stage: str
    history: list[EpochRecord]
    train_config: TrainConfig
    k_final: np.ndarray | None = None
    pi_final: np.ndarray | None = None

    def history_rows(self) -> list[dict]:
        return [asdict(r) for r in self.history]

    def save(self, path_prefix) -> None:
        bin_path = Path(str(path_prefix) + ".bin")
        json_path = Path(str(path_prefix) + ".json")
        arrays = dict(self.encoder.to_arrays())
        arrays["constraint.u_raw"] = self.u_raw.value
        arrays["constraint.kernel_raw"] = self.kernel_raw.value
        arrays.update(self.optimizer_arrays)
        bin_path.write_bytes(ad.save_arrays(arrays))

        cfg = self.encoder.config
        sidecar = {
            "encoder": {
                "d_h": cfg.d_h, "n_layers": cfg.n_layers, "n_states": cfg.n_states,
                "k_neighbors": cfg.k_neighbors,
                "rbf": {"n_centers": cfg.rbf.n_centers, "d_max": cfg.rbf.d_max,
                        "sigma": cfg.rbf.sigma},
            },
            "phys_mean": self.encoder.phys_mean.tolist(),
            "phys_std": self.encoder.phys_std.tolist(),
            "train_config": asdict(self.train_config),
            "stage": self.stage,
            "history": self.history_rows(),
            "k_final": None if self.k_final is None else self.k_final.tolist(),
            "pi_final": None if self.pi_final is None else self.pi_final.tolist(),
        }
        json_path.write_text(json.dumps(sidecar, indent=2) + "\n")

    @classmethod
    def load(cls, path_prefix) -> "Checkpoint":
        sidecar = json.loads(Path(str(path_prefix) + ".json").read_text())
        enc = sidecar["encoder"]
        config = EncoderConfig(
            d_h=enc["d_h"], n_layers=enc["n_layers"], n_states=enc["n_states"],
            k_neighbors=enc["k_neighbors"],
            rbf=RbfConfig(enc["rbf"]["n_centers"], enc["rbf"]["d_max"], enc["rbf"]["sigma"]))
        params = EncoderParams.initialize(config, seed=0,
                                          phys_mean=sidecar["phys_mean"],
                                          phys_std=sidecar["phys_std"])
        arrays = ad.load_arrays(Path(str(path_prefix) + ".bin").read_bytes())
        params.load_arrays(arrays)
        optimizer_arrays = {k: v for k, v in arrays.items() if k.startswith("adam.")}
        history = [EpochRecord(**row) for row in sidecar["history"]]
        return cls(
            encoder=params,
            u_raw=ad.parameter(arrays["constraint.u_raw"], name="constraint.u_raw"),
            kernel_raw=ad.parameter(arrays["constraint.kernel_raw"], name="constraint.kernel_raw"),
            optimizer_arrays=optimizer_arrays,
            stage=sidecar["stage"],
            history=history,
            train_config=TrainConfig(**sidecar["train_config"]),
            k_final=None if sidecar["k_final"] is None else np.array(sidecar["k_final"]),
            pi_final=None if sidecar["pi_final"] is None else np.array(sidecar["pi_final"]),
        )


def write_training_log(path, history: list[EpochRecord]) -> None:
    lines = ["epoch,stage,train_score,val_score"]
    for r in history:
        lines.append(f"{r.epoch},{r.stage},{r.train_score!r},{r.val_score!r}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Scoring helpers (full-dataset, forward only)
# ---------------------------------------------------------------------------

_CHUNK = 4096


def encode_frames(params: EncoderParams, dataset: FeaturizedDataset,
                  frame_idx: np.ndarray, want_z: bool = False,
                  want_attention: bool = False):
    """Forward-only encoding of arbitrary frames, chunked for memory."""
    chis, zs, att_mass = [], [], []
    n_res = dataset.type_indices.shape[0]
    for lo in range(0, frame_idx.shape[0], _CHUNK):
        sel = frame_idx[lo:lo + _CHUNK]
        out = encode_batch(params, dataset.type_indices,
                           dataset.neighbors[sel], dataset.distances[sel],
                           dataset.phys[sel])
        chis.append(out.chi.value.copy())
        if want_z:
            zs.append(out.z.value.copy())
        if want_attention:
            from .kinetics import attention_mass
            att_mass.append(attention_mass(dataset.neighbors[sel], out.attention, n_res))
    chi = np.concatenate(chis)
    z = np.concatenate(zs) if want_z else None
    mass = np.concatenate(att_mass) if want_attention else None
    return chi, z, mass


def dataset_scores(params: EncoderParams, dataset: FeaturizedDataset,
                   pairs: np.ndarray, eps_rel: float,
                   constraint: tuple[Tensor, Tensor] | None = None) -> dict[str, float]:
    """Full-pair-set VAMP-2 (and VAMP-E when constraint modules are given)."""
    chi0, _, _ = encode_frames(params, dataset, pairs[:, 0])
    chit, _, _ = encode_frames(params, dataset, pairs[:, 1])
    cov = covariances(chi0, chit, eps_rel=eps_rel)
    out = {"vamp2": float(vamp2_score(cov).value)}
    if constraint is not None:
        u_raw, kernel_raw = constraint
        built = build_constrained_K(Tensor(u_raw.value), Tensor(kernel_raw.value), chit)
        cov_w = covariances(chi0, chit, weights=built.w.value, eps_rel=eps_rel)
        out["vamp_e"] = float(vamp_e_score(cov_w, built.candidate.value).value)
    return out


# ---------------------------------------------------------------------------
# Stage 1: score-based pretraining
# ---------------------------------------------------------------------------

def stage1_pretrain(config: TrainConfig, dataset: FeaturizedDataset,
                    progress=None) -> Checkpoint:
    """Maximize the batch VAMP-2 of the encoder's soft assignments."""
    train_ids, val_ids = split_trajectories(len(dataset.lengths),
                                            config.validation_fraction, config.seed)
    train_pairs = _pairs_for(dataset, train_ids, config.lag)
    val_pairs = _pairs_for(dataset, val_ids, config.lag)

    train_frames = np.unique(train_pairs)
    phys_mean = dataset.phys[train_frames].mean(axis=0)
    phys_std = dataset.phys[train_frames].std(axis=0)

    enc_config = EncoderConfig(d_h=config.d_h, n_layers=config.n_layers,
                               n_states=config.n_states, k_neighbors=dataset.k, rbf=dataset.rbf)
    params = EncoderParams.initialize(enc_config, seed=config.seed,
                                      phys_mean=phys_mean, phys_std=phys_std)
    u_raw = ad.parameter(np.zeros(config.n_states), name="constraint.u_raw")
    kernel_raw = ad.parameter(np.zeros((config.n_states, config.n_states)),
                              name="constraint.kernel_raw")
    optimizer = Adam(params.parameters(), lr=config.lr_stage1)
    shuffle_rng = np.random.Generator(np.random.Philox(key=config.seed ^ 0x53485546))

    history: list[EpochRecord] = []
    good_arrays = params.to_arrays()
    good_opt = optimizer.state_arrays()

    for epoch in range(1, config.epochs_stage1 + 1):
        order = shuffle_rng.permutation(train_pairs.shape[0])
        try:
            for lo in range(0, order.shape[0], config.batch_size):
                batch = train_pairs[order[lo:lo + config.batch_size]]
                if batch.shape[0] < 2 * config.n_states:
                    continue
                frames = np.concatenate([batch[:, 0], batch[:, 1]])
                out = encode_batch(params, dataset.type_indices,
                                   dataset.neighbors[frames], dataset.distances[frames],
                                   dataset.phys[frames])
                chi0 = ad.gather_rows(out.chi, np.arange(batch.shape[0]))
                chit = ad.gather_rows(out.chi, np.arange(batch.shape[0], 2 * batch.shape[0]))
                loss = -vamp2_score(covariances(chi0, chit, eps_rel=config.eps_rel))
                ad.zero_gradients(params.parameters())
                ad.backward(loss)
                optimizer.step()
        except NonFiniteError:
            params.load_arrays(good_arrays)
            return Checkpoint(params, u_raw, kernel_raw, good_opt,
                              "stage1-aborted", history, config)
        train_score = dataset_scores(params, dataset, train_pairs, config.eps_rel)["vamp2"]
        val_score = dataset_scores(params, dataset, val_pairs, config.eps_rel)["vamp2"]
        history.append(EpochRecord(epoch, "stage1", train_score, val_score))
        good_arrays = params.to_arrays()
        good_opt = optimizer.state_arrays()
        if progress is not None:
            progress("stage1", epoch, train_score, val_score)

    return Checkpoint(params, u_raw, kernel_raw, optimizer.state_arrays(),
                      "stage1", history, config)


# ---------------------------------------------------------------------------
# Stage 2: constrained optimization
# ---------------------------------------------------------------------------

def stage2_constrained(config: TrainConfig, dataset: FeaturizedDataset,
                       checkpoint: Checkpoint, progress=None) -> Checkpoint:
    """VAMP-E training of the reweighting/kernel modules, then joint tuning.

    The first ``warmup_epochs`` epochs leave the encoder frozen.
    """
    params = checkpoint.encoder
    u_raw, kernel_raw = checkpoint.u_raw, checkpoint.kernel_raw
    train_ids, val_ids = split_trajectories(len(dataset.lengths),
                                            config.validation_fraction, config.seed)
    train_pairs = _pairs_for(dataset, train_ids, config.lag)
    val_pairs = _pairs_for(dataset, val_ids, config.lag)

    if not kernel_raw.value.any():
        # Fresh kernel: warm-start from the stage-1 model's symmetrized
        # empirical flux so the constrained score starts near VAMP-2.
        chi0, _, _ = encode_frames(params, dataset, train_pairs[:, 0])
        chit, _, _ = encode_frames(params, dataset, train_pairs[:, 1])
        cov = covariances(chi0, chit, eps_rel=config.eps_rel)
        raw = ad.matmul(ad.matrix_inverse(cov.c00_reg()), cov.c0t).value
        raw = np.clip(raw, 0.0, None)
        raw /= raw.sum(axis=1, keepdims=True)
        pi0 = chit.mean(axis=0)
        flux = 0.5 * (pi0[:, None] * raw + (pi0[:, None] * raw).T)
        kernel_raw.value = np.log(np.maximum(flux, 1e-8))

    history = list(checkpoint.history)
    shuffle_rng = np.random.Generator(np.random.Philox(key=config.seed ^ 0x53324146))
    warm_opt = Adam([u_raw, kernel_raw], lr=config.lr_constraint)
    joint_opt = Adam(params.parameters() + [u_raw, kernel_raw], lr=config.lr_stage2)

    encoder_tensors = params.parameters()
    good_arrays = params.to_arrays()
    good_u, good_kernel = u_raw.value.copy(), kernel_raw.value.copy()
    good_opt = warm_opt.state_arrays()

    for epoch in range(1, config.epochs_stage2 + 1):
        warmup = epoch <= config.warmup_epochs
        optimizer = warm_opt if warmup else joint_opt
        trained = [u_raw, kernel_raw] if warmup else encoder_tensors + [u_raw, kernel_raw]
        if warmup:
            for t in encoder_tensors:
                t.requires_grad = False
        try:
            order = shuffle_rng.permutation(train_pairs.shape[0])
            for lo in range(0, order.shape[0], config.batch_size):
                batch = train_pairs[order[lo:lo + config.batch_size]]
                if batch.shape[0] < 2 * config.n_states:
                    continue
                frames = np.concatenate([batch[:, 0], batch[:, 1]])
                out = encode_batch(params, dataset.type_indices,
                                   dataset.neighbors[frames], dataset.distances[frames],
                                   dataset.phys[frames])
                chi0 = ad.gather_rows(out.chi, np.arange(batch.shape[0]))
                chit = ad.gather_rows(out.chi, np.arange(batch.shape[0], 2 * batch.shape[0]))
                built = build_constrained_K(u_raw, kernel_raw, chit)
                cov_w = covariances(chi0, chit, weights=built.w, eps_rel=config.eps_rel)
                loss = -vamp_e_score(cov_w, built.candidate)
                ad.zero_gradients(trained)
                ad.backward(loss)
                optimizer.step()
        except NonFiniteError:
            params.load_arrays(good_arrays)
            u_raw.value, kernel_raw.value = good_u, good_kernel
            for t in encoder_tensors:
                t.requires_grad = True
            return Checkpoint(params, u_raw, kernel_raw, good_opt,
                              "stage2-aborted", history, config)
        finally:
            for t in encoder_tensors:
                t.requires_grad = True

        scores_t = dataset_scores(params, dataset, train_pairs, config.eps_rel,
                                  constraint=(u_raw, kernel_raw))
        scores_v = dataset_scores(params, dataset, val_pairs, config.eps_rel,
                                  constraint=(u_raw, kernel_raw))
        history.append(EpochRecord(epoch, "stage2", scores_t["vamp_e"], scores_v["vamp_e"]))
        good_arrays = params.to_arrays()
        good_u, good_kernel = u_raw.value.copy(), kernel_raw.value.copy()
        good_opt = optimizer.state_arrays()
        if progress is not None:
            progress("stage2", epoch, scores_t["vamp_e"], scores_v["vamp_e"])

    all_pairs = make_pairs(dataset.lengths, config.lag)
    chit_all, _, _ = encode_frames(params, dataset, all_pairs[:, 1])
    built = build_constrained_K(Tensor(u_raw.value), Tensor(kernel_raw.value), chit_all)
    return Checkpoint(params, u_raw, kernel_raw, optimizer.state_arrays(),
                      "stage2", history, config,
                      k_final=built.k.value.copy(), pi_final=built.pi.value[:, 0].copy())


def train_full(config: TrainConfig, dataset: FeaturizedDataset, progress=None) -> Checkpoint:
    stage1 = stage1_pretrain(config, dataset, progress=progress)
    if stage1.stage.endswith("aborted"):
        return stage1
    return stage2_constrained(config, dataset, stage1, progress=progress)
