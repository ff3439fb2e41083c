"""Dual-track graph encoder: attention-weighted continuous-filter
convolutions pooled to a topological embedding, fused with a physical
descriptor track through a learned gate, and read out as metastable-state
probabilities.

The forward pass is written over flattened node batches (frames share one
residue layout), so training and single-frame inference run the same code.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graphs import RbfConfig, ResidueGraph, rbf_expand

AMINO_ACIDS = (
    "ALA", "ARG", "ASN", "ASP", "CYS", "GLN", "GLU", "GLY", "HIS", "ILE",
    "LEU", "LYS", "MET", "PHE", "PRO", "SER", "THR", "TRP", "TYR", "VAL",
)
AA_INDEX = {name: i for i, name in enumerate(AMINO_ACIDS)}


class EncoderStageError(FloatingPointError):
    pass


def residue_type_indices(residue_names) -> np.ndarray:
    try:
        return np.array([AA_INDEX[name] for name in residue_names], dtype=np.int64)
    except KeyError as exc:
        raise KeyError(f"unknown residue type {exc.args[0]!r}; expected one of the 20 standard codes") from None


@dataclass(frozen=True)
class EncoderConfig:
    d_h: int = 32
    n_layers: int = 3
    n_states: int = 4
    k_neighbors: int = 10
    rbf: RbfConfig = field(default_factory=RbfConfig)

    def __post_init__(self):
        if self.n_states < 2:
            raise ValueError(f"need at least 2 states, got {self.n_states}")
        if self.d_h < 1 or self.n_layers < 1 or self.k_neighbors < 1:
            raise ValueError("d_h, n_layers and k_neighbors must be positive")


@dataclass(frozen=True)
class EncoderOutput:
    """Per-frame encoder readout."""

    node_states: np.ndarray   # (n_nodes, d_h)
    v_g: np.ndarray           # (d_h,)
    p_prime: np.ndarray       # (d_h,)
    alpha: float
    h_fuse: np.ndarray        # (d_h,)
    z: np.ndarray             # (d_h,)
    chi: np.ndarray           # (m,)
    attention: np.ndarray     # (n_nodes, k) final conv layer

    def __post_init__(self):
        if abs(self.chi.sum() - 1.0) > 1e-9 or (self.chi < 0).any() or (self.chi > 1).any():
            raise ValueError("state probabilities must form a distribution")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"fusion weight must lie in (0,1), got {self.alpha}")


def classify(chi: np.ndarray) -> int:
    """Most probable state; ties break to the lowest index."""
    return int(np.argmax(chi))


def _glorot(rng, fan_in, fan_out, shape):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class EncoderParams:
    """Named parameter store plus the physical-input standardization."""

    def __init__(self, config: EncoderConfig, tensors: dict[str, Tensor],
                 phys_mean: np.ndarray, phys_std: np.ndarray):
        self.config = config
        self.tensors = tensors
        self.phys_mean = np.asarray(phys_mean, dtype=np.float64)
        self.phys_std = np.asarray(phys_std, dtype=np.float64)

    @classmethod
    def initialize(cls, config: EncoderConfig, seed: int = 0,
                   phys_mean=(0.0, 0.0), phys_std=(1.0, 1.0)) -> "EncoderParams":
        rng = np.random.Generator(np.random.Philox(seed))
        d, kr, m = config.d_h, config.rbf.n_centers, config.n_states
        t: dict[str, Tensor] = {}

        def par(name, fan_in, fan_out, shape):
            t[name] = ad.parameter(_glorot(rng, fan_in, fan_out, shape), name=name)

        def zeros(name, shape):
            t[name] = ad.parameter(np.zeros(shape), name=name)

        par("embed", 20, d, (20, d))
        for layer in range(config.n_layers):
            p = f"conv{layer}"
            par(f"{p}.filter.w1", kr, d, (kr, d))
            zeros(f"{p}.filter.b1", (d,))
            par(f"{p}.filter.w2", d, d, (d, d))
            zeros(f"{p}.filter.b2", (d,))
            par(f"{p}.att.wi", d, d, (d, d))
            par(f"{p}.att.wj", d, d, (d, d))
            par(f"{p}.att.ww", d, d, (d, d))
            zeros(f"{p}.att.b", (d,))
            par(f"{p}.att.a", d, 1, (d, 1))
            par(f"{p}.update.w1", d, d, (d, d))
            zeros(f"{p}.update.b1", (d,))
            par(f"{p}.update.w2", d, d, (d, d))
            zeros(f"{p}.update.b2", (d,))
        par("phys.w1", 2, d, (2, d))
        zeros("phys.b1", (d,))
        par("gate.w", 2 * d, 1, (2 * d, 1))
        zeros("gate.b", (1,))
        par("pool.w", d, d, (d, d))
        zeros("pool.b", (d,))
        par("out.w", d, m, (d, m))
        zeros("out.b", (m,))
        return cls(config, t, np.asarray(phys_mean, float), np.asarray(phys_std, float))

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.value.copy() for name, t in self.tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.tensors.items():
            incoming = arrays[name]
            if incoming.shape != t.value.shape:
                raise ad.ShapeError(
                    f"checkpoint array {name} has shape {incoming.shape}, expected {t.value.shape}")
            t.value = incoming.copy()


def _check_stage(value: np.ndarray, stage: str) -> None:
    if not np.isfinite(value).all():
        raise EncoderStageError(f"non-finite values after stage {stage!r}")


def _conv_layer(h: Tensor, params: EncoderParams, layer: int,
                senders: np.ndarray, receivers: np.ndarray,
                edge_features: Tensor, n_nodes_total: int, k: int,
                send_plan: ad.ScatterPlan | None = None,
                recv_plan: ad.ScatterPlan | None = None) -> tuple[Tensor, Tensor]:
    """One attention-weighted continuous-filter convolution with residual update.

    Edges are ordered receiver-major with constant fan-in k, so per-receiver
    softmax and aggregation reduce to reshapes.
    """
    p = f"conv{layer}"
    hidden = ad.tanh(ad.matmul(edge_features, params[f"{p}.filter.w1"]) + params[f"{p}.filter.b1"])
    w_edge = ad.matmul(hidden, params[f"{p}.filter.w2"]) + params[f"{p}.filter.b2"]

    h_sender = ad.gather_rows(h, senders, plan=send_plan)
    messages = w_edge * h_sender

    part_i = ad.gather_rows(ad.matmul(h, params[f"{p}.att.wi"]), receivers, plan=recv_plan)
    part_j = ad.gather_rows(ad.matmul(h, params[f"{p}.att.wj"]), senders, plan=send_plan)
    part_w = ad.matmul(w_edge, params[f"{p}.att.ww"])
    scores = ad.matmul(ad.tanh(part_i + part_j + part_w + params[f"{p}.att.b"]),
                       params[f"{p}.att.a"])
    attention = ad.softmax(ad.reshape(scores, (n_nodes_total, k)), axis=1)

    weighted = ad.reshape(messages, (n_nodes_total, k, h.value.shape[1])) \
        * ad.reshape(attention, (n_nodes_total, k, 1))
    aggregated = ad.tensor_sum(weighted, axis=1)

    upd_hidden = ad.tanh(ad.matmul(aggregated, params[f"{p}.update.w1"]) + params[f"{p}.update.b1"])
    update = ad.matmul(upd_hidden, params[f"{p}.update.w2"]) + params[f"{p}.update.b2"]
    return h + update, attention


@dataclass
class BatchOutputs:
    chi: Tensor                # (B, m)
    z: Tensor                  # (B, d_h)
    v_g: Tensor
    p_prime: Tensor
    alpha: Tensor              # (B, 1)
    h_fuse: Tensor
    node_states: Tensor        # (B*n, d_h)
    attention: np.ndarray      # (B, n, k) final layer


def encode_batch(params: EncoderParams, type_indices: np.ndarray,
                 neighbors: np.ndarray, distances: np.ndarray,
                 phys: np.ndarray) -> BatchOutputs:
    """Encode a batch of frames sharing one residue layout.

    ``neighbors``/``distances`` are (B, n, k); ``phys`` is (B, 2) raw
    [Rg, SASA] values, standardized here with the stored constants.
    """
    cfg = params.config
    b, n, k = neighbors.shape
    if k < 1:
        raise ValueError("graphs must provide at least one neighbor per node")
    total = b * n

    edge_feat = rbf_expand(distances.reshape(-1), cfg.rbf)
    frame_offset = (np.arange(b, dtype=np.int64) * n)[:, None, None]
    senders = (neighbors + frame_offset).reshape(-1)
    receivers = np.repeat(np.arange(total, dtype=np.int64), k)
    send_plan = ad.ScatterPlan(senders, total)
    recv_plan = ad.ScatterPlan(receivers, total)
    tiled_types = np.tile(type_indices, b)

    h = ad.gather_rows(params["embed"], tiled_types,
                       plan=ad.ScatterPlan(tiled_types, params["embed"].value.shape[0]))
    attention = None
    for layer in range(cfg.n_layers):
        h, attention = _conv_layer(h, params, layer, senders, receivers,
                                   Tensor(edge_feat), total, k,
                                   send_plan=send_plan, recv_plan=recv_plan)
    _check_stage(h.value, "graph convolutions")

    v_g = ad.tensor_mean(ad.reshape(h, (b, n, cfg.d_h)), axis=1)

    std = np.where(params.phys_std > 0, params.phys_std, 1.0)
    phys_standardized = (np.asarray(phys, dtype=np.float64) - params.phys_mean) / std
    x = ad.relu(ad.matmul(Tensor(phys_standardized), params["phys.w1"]) + params["phys.b1"])
    norm = ad.sqrt(ad.tensor_sum(x * x, axis=1, keepdims=True))
    safe = norm + Tensor((norm.value == 0).astype(np.float64))
    p_prime = x / safe

    gate_logit = ad.matmul(ad.concat([v_g, p_prime], axis=1), params["gate.w"]) + params["gate.b"]
    alpha = ad.sigmoid(gate_logit)
    h_fuse = alpha * v_g + (1.0 - alpha) * p_prime
    _check_stage(h_fuse.value, "gated fusion")

    # Attention pooling over the three track vectors with the fused vector
    # as query: beta = softmax(u . (W h_fuse + b)).
    query = ad.matmul(h_fuse, params["pool.w"]) + params["pool.b"]
    slots = [v_g, p_prime, h_fuse]
    scores = ad.concat([ad.tensor_sum(u * query, axis=1, keepdims=True) for u in slots], axis=1)
    beta = ad.softmax(scores, axis=1)
    z = None
    for i, u in enumerate(slots):
        selector = np.zeros((len(slots), 1))
        selector[i, 0] = 1.0
        term = ad.matmul(beta, Tensor(selector)) * u
        z = term if z is None else z + term

    chi = ad.softmax(ad.matmul(z, params["out.w"]) + params["out.b"], axis=1)
    _check_stage(chi.value, "state probabilities")

    return BatchOutputs(chi=chi, z=z, v_g=v_g, p_prime=p_prime, alpha=alpha,
                        h_fuse=h_fuse, node_states=h,
                        attention=attention.value.reshape(b, n, k))


def encode(graph: ResidueGraph, residue_names, phys: np.ndarray,
           params: EncoderParams) -> EncoderOutput:
    """Encode a single frame (batch of one)."""
    types = residue_type_indices(residue_names)
    if types.shape[0] != graph.n_nodes:
        raise ValueError(f"{types.shape[0]} residue types for {graph.n_nodes} graph nodes")
    out = encode_batch(params, types, graph.neighbors[None], graph.distances[None],
                       np.asarray(phys, dtype=np.float64)[None])
    return EncoderOutput(
        node_states=out.node_states.value.copy(),
        v_g=out.v_g.value[0].copy(),
        p_prime=out.p_prime.value[0].copy(),
        alpha=float(out.alpha.value[0, 0]),
        h_fuse=out.h_fuse.value[0].copy(),
        z=out.z.value[0].copy(),
        chi=out.chi.value[0].copy(),
        attention=out.attention[0].copy(),
    )
