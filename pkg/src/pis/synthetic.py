"""Synthetic metastable trajectory generator with exact kinetic ground truth.

A hidden Markov chain over a few template conformations emits frames as
template-plus-isotropic-Gaussian-noise.  The chain, the templates, and
the noise are all known exactly, so tests can score estimators against
closed-form oracles.  Randomness comes from the counter-based Philox
generator keyed by the seed; the draw order is documented in ``generate``
so a stream is reproducible bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .physchem import kabsch_align
from .trajectory import ELEMENT_MASSES, VDW_RADII, Atom, Topology, Trajectory

SYNTH_DT_PS = 250.0
SYNTH_SEQUENCE = ("ASP", "ALA", "GLU", "PHE", "ARG", "HIS", "LYS", "LEU", "MET", "ASN")
RESIDUE_ELEMENTS = ("N", "C", "C")
RESIDUE_ATOM_NAMES = ("N", "CA", "C")


def stationary_distribution(transition: np.ndarray) -> np.ndarray:
    evals, evecs = np.linalg.eig(transition.T)
    lead = np.argmax(np.real(evals))
    pi = np.abs(np.real(evecs[:, lead]))
    return pi / pi.sum()


@dataclass(frozen=True)
class HmmSpec:
    t_true: np.ndarray        # (m, m) row-stochastic
    templates: np.ndarray     # (m, n_atoms, 3) Angstrom
    emission_sigma: float
    n_residues: int
    atoms_per_residue: int

    def __post_init__(self):
        t = np.asarray(self.t_true, dtype=np.float64)
        object.__setattr__(self, "t_true", t)
        object.__setattr__(self, "templates", np.asarray(self.templates, dtype=np.float64))
        if (t < 0).any() or np.abs(t.sum(axis=1) - 1.0).max() > 1e-12:
            raise ValueError("transition matrix must be row-stochastic")
        n_atoms = self.n_residues * self.atoms_per_residue
        if self.templates.shape != (self.m_true, n_atoms, 3):
            raise ValueError(
                f"templates must be ({self.m_true}, {n_atoms}, 3), got {self.templates.shape}")
        if self.emission_sigma < 0:
            raise ValueError("emission sigma must be non-negative")
        if self.emission_sigma > 0:
            floor = 6.0 * self.emission_sigma
            for a in range(self.m_true):
                for b in range(a + 1, self.m_true):
                    _, _, rmsd = kabsch_align(self.templates[a], self.templates[b])
                    if rmsd <= floor:
                        raise ValueError(
                            f"templates {a} and {b} are only {rmsd:.2f} A apart; "
                            f"separability needs > {floor:.2f} A")

    @property
    def m_true(self) -> int:
        return self.t_true.shape[0]

    @property
    def stationary(self) -> np.ndarray:
        return stationary_distribution(self.t_true)


def _chain_atoms(centers: np.ndarray) -> np.ndarray:
    """Place 3 atoms per residue center: backbone-like N, CA, C triplet."""
    n = centers.shape[0]
    atoms = np.empty((n * 3, 3))
    for i in range(n):
        nxt = centers[min(i + 1, n - 1)] - centers[max(i - 1, 0) if i == n - 1 else i]
        tangent = nxt / np.linalg.norm(nxt)
        helper = np.array([0.0, 0.0, 1.0])
        if abs(tangent @ helper) > 0.99:
            helper = np.array([1.0, 0.0, 0.0])
        normal = np.cross(helper, tangent)
        normal /= np.linalg.norm(normal)
        atoms[3 * i + 0] = centers[i] + 1.2 * normal
        atoms[3 * i + 1] = centers[i]
        atoms[3 * i + 2] = centers[i] + 1.2 * tangent
    return atoms


def _template_centers(kind: str, n_residues: int) -> np.ndarray:
    i = np.arange(n_residues, dtype=np.float64)
    if kind == "extended":
        return np.column_stack([3.8 * i, np.zeros(n_residues), np.zeros(n_residues)])
    if kind == "hairpin":
        half = n_residues // 2
        centers = np.empty((n_residues, 3))
        for r in range(n_residues):
            if r < half:
                centers[r] = (3.8 * r, 0.0, 0.0)
            else:
                centers[r] = (3.8 * (n_residues - 1 - r), 4.4, 0.0)
        return centers
    if kind in ("coil_left", "coil_right"):
        # Distinct radius and pitch: distance features are blind to
        # chirality alone, so mirror-image coils would be nearly
        # indistinguishable to the whole pipeline.
        sign = -1.0 if kind == "coil_left" else 1.0
        radius = 4.0 if kind == "coil_left" else 5.4
        rise = 1.2 if kind == "coil_left" else 2.0
        angle = sign * np.deg2rad(100.0) * i
        return np.column_stack([radius * np.cos(angle), radius * np.sin(angle), rise * i])
    raise ValueError(f"unknown template kind {kind!r}")


def default_spec(n_residues: int = 10, emission_sigma: float = 0.3) -> HmmSpec:
    """Four metastable folds over a ten-residue chain; 0.97/0.01 kinetics."""
    m = 4
    t_true = np.full((m, m), 0.01)
    np.fill_diagonal(t_true, 0.97)
    templates = np.stack([
        _chain_atoms(_template_centers(kind, n_residues))
        for kind in ("extended", "hairpin", "coil_left", "coil_right")
    ])
    return HmmSpec(t_true=t_true, templates=templates, emission_sigma=emission_sigma,
                   n_residues=n_residues, atoms_per_residue=3)


def spec_topology(spec: HmmSpec) -> Topology:
    atoms, ranges = [], []
    count = 0
    for r in range(spec.n_residues):
        name = SYNTH_SEQUENCE[r % len(SYNTH_SEQUENCE)]
        start = count
        for a in range(spec.atoms_per_residue):
            element = RESIDUE_ELEMENTS[a % len(RESIDUE_ELEMENTS)]
            atoms.append(Atom(
                name=RESIDUE_ATOM_NAMES[a % len(RESIDUE_ATOM_NAMES)],
                element=element, residue_index=r, residue_name=name,
                mass=ELEMENT_MASSES[element], vdw_radius=VDW_RADII[element]))
            count += 1
        ranges.append((start, count))
    names = tuple(SYNTH_SEQUENCE[r % len(SYNTH_SEQUENCE)] for r in range(spec.n_residues))
    return Topology(tuple(atoms), names, tuple(ranges))


def generate(spec: HmmSpec, n_frames: int, seed: int) -> tuple[Trajectory, np.ndarray]:
    """Sample one trajectory plus its hidden state labels.

    Philox(key=seed) draw order: one uniform for the initial state
    (inverse CDF of the stationary distribution), one uniform per
    subsequent frame (inverse CDF of the current transition row), then
    n_frames * n_atoms * 3 standard normals for the emission noise.
    Coordinates are snapped to float32 so container round trips are exact.
    """
    if n_frames < 1:
        raise ValueError("need at least one frame")
    rng = np.random.Generator(np.random.Philox(key=seed))
    cdf = spec.t_true.cumsum(axis=1)

    labels = np.empty(n_frames, dtype=np.int64)
    labels[0] = np.searchsorted(spec.stationary.cumsum(), rng.uniform())
    uniforms = rng.uniform(size=max(n_frames - 1, 0))
    for t in range(1, n_frames):
        labels[t] = np.searchsorted(cdf[labels[t - 1]], uniforms[t - 1])

    topo = spec_topology(spec)
    coords = spec.templates[labels]
    if spec.emission_sigma > 0:
        coords = coords + spec.emission_sigma * rng.standard_normal(size=coords.shape)
    coords = coords.astype(np.float32).astype(np.float64)
    return Trajectory(topo, coords, SYNTH_DT_PS), labels


def oracle_vamp2(t_true: np.ndarray, lag_steps: int = 1) -> float:
    """Exact VAMP-2 of perfect assignments: sum of squared eigenvalues of T^n.

    Requires a transition matrix reversible with respect to a positive
    stationary distribution (eigenvalues real).  For chains whose
    stationary distribution is degenerate (e.g. the identity) the uniform
    distribution is tried as the reversibility witness.
    """
    t = np.asarray(t_true, dtype=np.float64)
    m = t.shape[0]
    pi = stationary_distribution(t)
    if pi.min() < 1e-12:
        pi = np.full(m, 1.0 / m)
        if np.abs(pi @ t - pi).max() > 1e-10:
            raise ValueError("no positive stationary distribution found")
    flux = pi[:, None] * t
    if np.abs(flux - flux.T).max() > 1e-10:
        raise ValueError("transition matrix is not reversible w.r.t. its stationary distribution")
    eigenvalues = np.linalg.eigvalsh(np.sqrt(pi)[:, None] * t / np.sqrt(pi)[None, :])
    return float(((eigenvalues ** lag_steps) ** 2).sum())


def oracle_count_K(labels: np.ndarray, lag: int, n_states: int | None = None) -> np.ndarray:
    """Row-normalized transition counts at the given lag."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] <= lag:
        raise ValueError(f"need more than {lag} labels, got {labels.shape[0]}")
    m = int(labels.max()) + 1 if n_states is None else n_states
    counts = np.zeros((m, m), dtype=np.float64)
    np.add.at(counts, (labels[:-lag], labels[lag:]), 1.0)
    sums = counts.sum(axis=1, keepdims=True)
    if (sums == 0).any():
        missing = int(np.flatnonzero(sums[:, 0] == 0)[0])
        raise ValueError(f"state {missing} is never visited at lag {lag}")
    return counts / sums
