"""Physical descriptors: radius of gyration, solvent-accessible surface
area (Shrake-Rupley), rigid-body superposition (Kabsch), and RMSF.

All functions are pure and operate on immutable inputs; SASA uses heavy
atoms only and a deterministic golden-angle point quadrature, so results
are bitwise reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .trajectory import Topology, Trajectory


class DegenerateGeometryError(ValueError):
    """Raised when a point set is too rank-deficient to superpose."""


@dataclass(frozen=True)
class SasaParams:
    probe_radius: float = 1.4
    n_sphere_points: int = 960

    def __post_init__(self):
        if not self.probe_radius > 0:
            raise ValueError(f"probe_radius must be positive, got {self.probe_radius}")
        if self.n_sphere_points < 32:
            raise ValueError(f"n_sphere_points must be >= 32, got {self.n_sphere_points}")


@dataclass(frozen=True)
class PhysicalFeatures:
    rg: float
    sasa_total: float

    def __post_init__(self):
        if self.rg < 0 or self.sasa_total < 0:
            raise ValueError("physical features must be non-negative")

    def as_vector(self) -> np.ndarray:
        return np.array([self.rg, self.sasa_total], dtype=np.float64)


@dataclass(frozen=True)
class ResidueMetrics:
    rmsf: np.ndarray      # (n_residues,) Angstrom
    res_sasa: np.ndarray  # (n_residues,) Angstrom^2, time-averaged

    def __post_init__(self):
        if self.rmsf.shape != self.res_sasa.shape or self.rmsf.ndim != 1:
            raise ValueError("rmsf and res_sasa must be matching 1-D arrays")
        if (self.rmsf < 0).any() or (self.res_sasa < 0).any():
            raise ValueError("residue metrics must be non-negative")


def radius_of_gyration(coordinates: np.ndarray, topology: Topology, heavy_only: bool = True) -> float:
    """Mass-weighted radius of gyration of one frame, in Angstrom."""
    coords = np.asarray(coordinates, dtype=np.float64)
    mask = topology.heavy_mask if heavy_only else np.ones(topology.n_atoms, dtype=bool)
    if not mask.any():
        raise ValueError("no atoms selected for radius of gyration")
    xyz = coords[mask]
    masses = topology.masses[mask]
    com = (masses[:, None] * xyz).sum(axis=0) / masses.sum()
    sq = ((xyz - com) ** 2).sum(axis=1)
    return float(np.sqrt((masses * sq).sum() / masses.sum()))


def sphere_points(n: int) -> np.ndarray:
    """Quasi-uniform unit-sphere points from the golden-angle spiral."""
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    theta = i * np.pi * (3.0 - np.sqrt(5.0))
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), z])


def _local_frames(pos: np.ndarray) -> np.ndarray:
    """Right-handed orthonormal frame per atom, anchored to its neighbors.

    Rows of each (3,3) block are the basis vectors.  e1 points at the
    nearest other atom (ties toward the lower index); the completion uses
    the nearest non-collinear atom, so the frames co-rotate with the
    molecule and the point-quadrature classification is exactly covariant
    under rigid motion.  When every neighbor direction is parallel the
    completion is arbitrary; the occlusion pattern is then axisymmetric
    about e1 and the choice cannot change any classification.
    """
    h = pos.shape[0]
    d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=-1)
    np.fill_diagonal(d2, np.inf)
    order = np.lexsort((np.broadcast_to(np.arange(h), (h, h)), d2), axis=1)

    e1 = pos[order[:, 0]] - pos
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e3 = np.zeros_like(e1)
    unresolved = np.ones(h, dtype=bool)
    for rank in range(1, h):
        if not unresolved.any():
            break
        w = pos[order[:, rank]] - pos
        cross = np.cross(e1, w)
        cross_norm = np.linalg.norm(cross, axis=1)
        ok = unresolved & (cross_norm > 1e-8 * np.linalg.norm(w, axis=1))
        e3[ok] = cross[ok] / cross_norm[ok, None]
        unresolved &= ~ok
    if unresolved.any():
        helper = np.eye(3)[np.argmin(np.abs(e1[unresolved]), axis=1)]
        cross = np.cross(e1[unresolved], helper)
        e3[unresolved] = cross / np.linalg.norm(cross, axis=1, keepdims=True)
    e2 = np.cross(e3, e1)
    return np.stack([e1, e2, e3], axis=1)


_SASA_CHUNK = 64


def sasa(coordinates: np.ndarray, topology: Topology,
         params: SasaParams = SasaParams()) -> tuple[float, np.ndarray]:
    """Shrake-Rupley solvent-accessible surface area of one frame.

    Returns (total, per_atom) in Angstrom^2.  ``per_atom`` spans all atoms;
    hydrogens get 0 (only heavy atoms carry surface).  A surface point is
    accessible iff it lies outside every other heavy atom's expanded sphere.
    Each atom's quadrature sphere is oriented by a molecule-fixed local
    frame, so the estimate is invariant under global rigid motion.
    """
    coords = np.asarray(coordinates, dtype=np.float64)
    heavy = np.flatnonzero(topology.heavy_mask)
    if heavy.size == 0:
        raise ValueError("no heavy atoms for SASA")
    pos = coords[heavy]
    radii = topology.vdw_radii[heavy] + params.probe_radius
    h = heavy.size
    unit = sphere_points(params.n_sphere_points)
    areas_full = 4.0 * np.pi * radii ** 2

    per_atom = np.zeros(topology.n_atoms, dtype=np.float64)
    if h == 1:
        per_atom[heavy[0]] = areas_full[0]
        return float(per_atom.sum()), per_atom

    frames = _local_frames(pos)
    d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=-1)
    cutoff2 = (radii[:, None] + radii[None, :]) ** 2
    np.fill_diagonal(cutoff2, 0.0)  # an atom never occludes itself
    occluders = d2 < cutoff2

    fractions = np.empty(h, dtype=np.float64)
    counts = occluders.sum(axis=1)
    max_nb = int(counts.max())
    if max_nb == 0:
        fractions[:] = 1.0
    else:
        # Padded occluder table: unused slots get negative squared radius.
        nb_idx = np.zeros((h, max_nb), dtype=np.int64)
        nb_r2 = np.full((h, max_nb), -1.0)
        for a in range(h):
            nb = np.flatnonzero(occluders[a])
            nb_idx[a, :nb.size] = nb
            nb_r2[a, :nb.size] = radii[nb] ** 2
        for lo in range(0, h, _SASA_CHUNK):
            sel = slice(lo, min(lo + _SASA_CHUNK, h))
            # Work in atom-centered coordinates: surface points sit at
            # radius R, so |p-o|^2 >= r^2 becomes p.o <= (R^2+|o|^2-r^2)/2
            # and the only large operation is one batched GEMM.
            dirs = np.matmul(unit[None, :, :], frames[sel])   # (chunk, P, 3)
            points = radii[sel, None, None] * dirs
            occ = pos[nb_idx[sel]] - pos[sel, None, :]        # (chunk, max_nb, 3)
            thresh = (radii[sel, None] ** 2 + (occ ** 2).sum(axis=-1) - nb_r2[sel]) * 0.5
            cross = np.matmul(points, occ.transpose(0, 2, 1))
            accessible = (cross <= thresh[:, None, :]).all(axis=2)
            fractions[sel] = accessible.mean(axis=1)
    per_atom[heavy] = areas_full * fractions
    return float(per_atom.sum()), per_atom


def res_sasa(coordinates: np.ndarray, topology: Topology,
             params: SasaParams = SasaParams()) -> np.ndarray:
    """Per-residue SASA sums (same point classification as ``sasa``)."""
    _, per_atom = sasa(coordinates, topology, params)
    out = np.zeros(topology.n_residues, dtype=np.float64)
    np.add.at(out, topology.residue_index, per_atom)
    return out


def kabsch_align(mobile: np.ndarray, reference: np.ndarray,
                 weights: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, float]:
    """Weighted least-squares rigid superposition of ``mobile`` onto ``reference``.

    Returns (rotation, translation, rmsd) with ``mobile @ rotation.T + translation``
    best matching ``reference``; the rotation is always proper (det +1).
    """
    mob = np.asarray(mobile, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if mob.shape != ref.shape or mob.ndim != 2 or mob.shape[1] != 3 or mob.shape[0] < 3:
        raise ValueError(f"need matching (n>=3, 3) point sets, got {mob.shape} and {ref.shape}")
    if weights is None:
        w = np.full(mob.shape[0], 1.0 / mob.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (mob.shape[0],) or (w < 0).any() or w.sum() <= 0:
            raise ValueError("weights must be non-negative with positive sum")
        w = w / w.sum()

    mob_c = mob - (w[:, None] * mob).sum(axis=0)
    ref_c = ref - (w[:, None] * ref).sum(axis=0)
    h = mob_c.T @ (w[:, None] * ref_c)
    u, s, vt = np.linalg.svd(h)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        rank = int((s > 1e-12 * max(s[0], 1e-300)).sum())
        raise DegenerateGeometryError(
            f"point set is rank {rank}; at least rank 2 is needed for a unique rotation")
    sign = np.sign(np.linalg.det(vt.T @ u.T))
    d = np.diag([1.0, 1.0, sign])
    rotation = vt.T @ d @ u.T
    translation = (w[:, None] * ref).sum(axis=0) - rotation @ (w[:, None] * mob).sum(axis=0)
    moved = mob @ rotation.T + translation
    rmsd = float(np.sqrt((w * ((moved - ref) ** 2).sum(axis=1)).sum()))
    return rotation, translation, rmsd


def residue_centroids(coordinates: np.ndarray, topology: Topology) -> np.ndarray:
    """Heavy-atom centroid of each residue for one frame, (n_residues, 3)."""
    coords = np.asarray(coordinates, dtype=np.float64)
    heavy = topology.heavy_mask
    out = np.empty((topology.n_residues, 3), dtype=np.float64)
    for r, (start, stop) in enumerate(topology.residue_ranges):
        sel = heavy[start:stop]
        if not sel.any():
            raise ValueError(f"residue {r} has no heavy atoms")
        out[r] = coords[start:stop][sel].mean(axis=0)
    return out


def rmsf(trajectory: Trajectory, topology: Topology | None = None) -> np.ndarray:
    """Per-residue root mean square fluctuation about the mean structure.

    Frames are aligned twice: once to frame 0 to build a mean structure,
    then to that mean.  Residue positions are heavy-atom centroids.
    """
    topo = topology or trajectory.topology
    if trajectory.n_frames < 2:
        raise ValueError(f"RMSF needs at least 2 frames, got {trajectory.n_frames}")
    heavy = np.flatnonzero(topo.heavy_mask)
    masses = topo.masses[heavy]
    coords = trajectory.coordinates[:, heavy, :]

    def align_all(frames, reference):
        aligned = np.empty_like(frames)
        for f in range(frames.shape[0]):
            rot, trans, _ = kabsch_align(frames[f], reference, weights=masses)
            aligned[f] = frames[f] @ rot.T + trans
        return aligned

    mean = align_all(coords, coords[0]).mean(axis=0)
    aligned = align_all(coords, mean)

    # Residue centroids on the aligned heavy-atom subset.
    res_of_heavy = topo.residue_index[heavy]
    counts = np.bincount(res_of_heavy, minlength=topo.n_residues).astype(np.float64)
    if (counts == 0).any():
        missing = int(np.flatnonzero(counts == 0)[0])
        raise ValueError(f"residue {missing} has no heavy atoms")
    centroids = np.zeros((trajectory.n_frames, topo.n_residues, 3), dtype=np.float64)
    for axis in range(3):
        for f in range(trajectory.n_frames):
            centroids[f, :, axis] = np.bincount(
                res_of_heavy, weights=aligned[f, :, axis], minlength=topo.n_residues) / counts

    mean_centroid = centroids.mean(axis=0)
    sq = ((centroids - mean_centroid[None]) ** 2).sum(axis=2)
    return np.sqrt(sq.mean(axis=0))


def physical_feature_series(trajectory: Trajectory,
                            params: SasaParams = SasaParams()) -> np.ndarray:
    """Per-frame [Rg, total SASA] matrix, shape (n_frames, 2)."""
    topo = trajectory.topology
    out = np.empty((trajectory.n_frames, 2), dtype=np.float64)
    for f in range(trajectory.n_frames):
        out[f, 0] = radius_of_gyration(trajectory.coordinates[f], topo)
        out[f, 1] = sasa(trajectory.coordinates[f], topo, params)[0]
    return out


