"""Topologies, trajectories, and the on-disk formats that carry them.

Atom metadata comes from a fixed-column PDB subset (ATOM records only);
frame coordinates travel in the little-endian PISTRJ binary container.
Coordinates are held as float64 in memory and stored as float32, so a
write/read cycle is bit-exact for values already representable in
single precision.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PISTRJ_MAGIC = b"PISTRJ01"
PISTRJ_HEADER_SIZE = 20

# Bondi van der Waals radii (Angstrom); SASA needs these to be fixed.
VDW_RADII = {"H": 1.20, "C": 1.70, "N": 1.55, "O": 1.52, "S": 1.80, "P": 1.80}

# Standard atomic weights (amu), same element coverage as VDW_RADII.
ELEMENT_MASSES = {"H": 1.008, "C": 12.011, "N": 14.007, "O": 15.999, "S": 32.06, "P": 30.974}


class PdbParseError(ValueError):
    """Raised for malformed or unsupported PDB input."""


class TrajectoryFormatError(ValueError):
    """Raised for malformed PISTRJ streams."""


class ManifestError(ValueError):
    """Raised when a dataset manifest is inconsistent."""


@dataclass(frozen=True)
class Atom:
    name: str
    element: str
    residue_index: int
    residue_name: str
    mass: float
    vdw_radius: float


@dataclass(frozen=True)
class Topology:
    """Immutable atom/residue layout shared by all frames of a system.

    ``residue_ranges[r] = (start, stop)`` gives the half-open atom index
    range of residue ``r``; ranges partition the atom list contiguously.
    """

    atoms: tuple[Atom, ...]
    residue_names: tuple[str, ...]
    residue_ranges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        n_res = len(self.residue_names)
        if len(self.residue_ranges) != n_res:
            raise ValueError("residue_names and residue_ranges length mismatch")
        expected_start = 0
        for r, (start, stop) in enumerate(self.residue_ranges):
            if start != expected_start or stop <= start:
                raise ValueError(f"residue {r} range [{start},{stop}) does not partition atoms contiguously")
            expected_start = stop
        if expected_start != len(self.atoms):
            raise ValueError("residue ranges do not cover the atom list")
        for i, atom in enumerate(self.atoms):
            if not 0 <= atom.residue_index < n_res:
                raise ValueError(f"atom {i} residue_index {atom.residue_index} out of [0,{n_res})")
            if atom.mass <= 0 or atom.vdw_radius <= 0:
                raise ValueError(f"atom {i} has non-positive mass or vdw radius")

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def n_residues(self) -> int:
        return len(self.residue_names)

    @property
    def masses(self) -> np.ndarray:
        return np.array([a.mass for a in self.atoms], dtype=np.float64)

    @property
    def vdw_radii(self) -> np.ndarray:
        return np.array([a.vdw_radius for a in self.atoms], dtype=np.float64)

    @property
    def residue_index(self) -> np.ndarray:
        return np.array([a.residue_index for a in self.atoms], dtype=np.int64)

    @property
    def heavy_mask(self) -> np.ndarray:
        """Boolean mask selecting non-hydrogen atoms."""
        return np.array([a.element != "H" for a in self.atoms], dtype=bool)


@dataclass(frozen=True)
class Trajectory:
    """Frames of coordinates (Angstrom) over a fixed topology."""

    topology: Topology
    coordinates: np.ndarray  # (n_frames, n_atoms, 3) float64
    dt_ps: float

    def __post_init__(self):
        coords = np.asarray(self.coordinates, dtype=np.float64)
        object.__setattr__(self, "coordinates", coords)
        if coords.ndim != 3 or coords.shape[2] != 3:
            raise ValueError(f"coordinates must be (frames, atoms, 3), got {coords.shape}")
        if coords.shape[1] != self.topology.n_atoms:
            raise ValueError(
                f"coordinate atom count {coords.shape[1]} does not match topology ({self.topology.n_atoms})")
        if not np.isfinite(coords).all():
            raise ValueError("coordinates contain non-finite values")
        if not self.dt_ps > 0:
            raise ValueError(f"dt_ps must be positive, got {self.dt_ps}")

    @property
    def n_frames(self) -> int:
        return self.coordinates.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.coordinates.shape[1]

    def slice(self, start: int, stop: int) -> "Trajectory":
        """Frames [start, stop) as a new trajectory."""
        if not 0 <= start <= stop <= self.n_frames:
            raise IndexError(f"slice [{start},{stop}) out of range [0,{self.n_frames}]")
        return Trajectory(self.topology, self.coordinates[start:stop].copy(), self.dt_ps)


def concat_trajectories(parts: list[Trajectory]) -> Trajectory:
    if not parts:
        raise ValueError("nothing to concatenate")
    topo = parts[0].topology
    for p in parts[1:]:
        if p.topology is not topo and p.topology != topo:
            raise ValueError("trajectories share no common topology")
        if p.dt_ps != parts[0].dt_ps:
            raise ValueError("trajectories have differing dt_ps")
    coords = np.concatenate([p.coordinates for p in parts], axis=0)
    return Trajectory(topo, coords, parts[0].dt_ps)


# ---------------------------------------------------------------------------
# PDB subset parsing (fixed-column v3.3 ATOM records)
# ---------------------------------------------------------------------------

def _infer_element(raw_element: str, atom_name: str, lineno: int) -> str:
    symbol = raw_element.strip()
    if not symbol:
        # Fall back to the first alphabetic character of the atom name.
        for ch in atom_name:
            if ch.isalpha():
                symbol = ch.upper()
                break
        else:
            raise PdbParseError(f"line {lineno}: cannot infer element from atom name {atom_name!r}")
    symbol = symbol.capitalize()
    if symbol not in VDW_RADII:
        raise PdbParseError(f"line {lineno}: unknown element symbol {symbol!r}")
    return symbol


def parse_topology(text: str) -> tuple[Topology, np.ndarray]:
    """Parse a PDB-subset document into a topology plus its coordinates.

    Only fixed-column ATOM records are interpreted; TER/END and any other
    record types are skipped.  Alternate locations keep 'A' and drop the
    rest.  Residues are grouped by consecutive (chain, residue sequence
    number) runs, chains concatenated in file order.

    Returns the topology and an (n_atoms, 3) float64 coordinate array.
    """
    atoms: list[Atom] = []
    coords: list[tuple[float, float, float]] = []
    residue_names: list[str] = []
    residue_ranges: list[tuple[int, int]] = []
    current_key: tuple[str, str] | None = None

    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.startswith("ATOM"):
            continue
        if len(line) < 54:
            raise PdbParseError(f"line {lineno}: ATOM record shorter than the coordinate columns")
        altloc = line[16]
        if altloc not in (" ", "A"):
            continue
        atom_name = line[12:16].strip()
        res_name = line[17:20].strip()
        chain = line[21]
        res_seq = line[22:26].strip()
        try:
            x = float(line[30:38])
            y = float(line[38:46])
            z = float(line[46:54])
        except ValueError:
            raise PdbParseError(f"line {lineno}: malformed coordinate columns") from None
        if not res_seq:
            raise PdbParseError(f"line {lineno}: blank residue sequence number")
        element = _infer_element(line[76:78] if len(line) >= 78 else "", atom_name, lineno)

        key = (chain, res_seq)
        if key != current_key:
            if residue_ranges:
                start, _ = residue_ranges[-1]
                residue_ranges[-1] = (start, len(atoms))
            residue_names.append(res_name)
            residue_ranges.append((len(atoms), -1))
            current_key = key
        atoms.append(Atom(
            name=atom_name,
            element=element,
            residue_index=len(residue_names) - 1,
            residue_name=res_name,
            mass=ELEMENT_MASSES[element],
            vdw_radius=VDW_RADII[element],
        ))
        coords.append((x, y, z))

    if not atoms:
        raise PdbParseError("no ATOM records")
    start, _ = residue_ranges[-1]
    residue_ranges[-1] = (start, len(atoms))
    topology = Topology(tuple(atoms), tuple(residue_names), tuple(residue_ranges))
    return topology, np.array(coords, dtype=np.float64)


def write_topology_pdb(topology: Topology, coordinates: np.ndarray) -> str:
    """Render a topology (with one set of coordinates) as PDB ATOM records."""
    coords = np.asarray(coordinates, dtype=np.float64)
    if coords.shape != (topology.n_atoms, 3):
        raise ValueError(f"expected ({topology.n_atoms}, 3) coordinates, got {coords.shape}")
    lines = []
    for i, atom in enumerate(topology.atoms):
        name = atom.name if len(atom.name) >= 4 else f" {atom.name:<3s}"
        x, y, z = coords[i]
        lines.append(
            f"ATOM  {i + 1:5d} {name:<4.4s} {atom.residue_name:<3.3s} A{atom.residue_index + 1:4d}    "
            f"{x:8.3f}{y:8.3f}{z:8.3f}{1.0:6.2f}{0.0:6.2f}          {atom.element:>2.2s}"
        )
    lines.append("TER")
    lines.append("END")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# PISTRJ binary container
# ---------------------------------------------------------------------------

def write_frames(trajectory: Trajectory) -> bytes:
    """Serialize a trajectory to PISTRJ bytes (header + f32 coordinates)."""
    n_frames, n_atoms = trajectory.n_frames, trajectory.n_atoms
    header = PISTRJ_MAGIC + struct.pack("<IIf", n_frames, n_atoms, trajectory.dt_ps)
    payload = trajectory.coordinates.astype("<f4").tobytes()
    return header + payload


def read_frames(data: bytes, topology: Topology) -> Trajectory:
    """Deserialize PISTRJ bytes against a topology.

    Raises ``TrajectoryFormatError`` on a bad magic, truncated payload, or
    an atom count that disagrees with the topology.
    """
    if len(data) < PISTRJ_HEADER_SIZE:
        raise TrajectoryFormatError(
            f"stream of {len(data)} bytes is shorter than the {PISTRJ_HEADER_SIZE}-byte header")
    if data[:8] != PISTRJ_MAGIC:
        raise TrajectoryFormatError(f"bad magic {data[:8]!r}, expected {PISTRJ_MAGIC!r}")
    n_frames, n_atoms, dt_ps = struct.unpack("<IIf", data[8:PISTRJ_HEADER_SIZE])
    if n_atoms != topology.n_atoms:
        raise TrajectoryFormatError(
            f"stream has {n_atoms} atoms per frame but topology has {topology.n_atoms}")
    expected = n_frames * n_atoms * 3 * 4
    actual = len(data) - PISTRJ_HEADER_SIZE
    if actual != expected:
        raise TrajectoryFormatError(f"payload truncated: expected {expected} bytes, got {actual}")
    coords = np.frombuffer(data, dtype="<f4", offset=PISTRJ_HEADER_SIZE)
    coords = coords.reshape(n_frames, n_atoms, 3).astype(np.float64)
    return Trajectory(topology, coords, float(dt_ps))


def read_frames_path(path: str | Path, topology: Topology) -> Trajectory:
    return read_frames(Path(path).read_bytes(), topology)


def write_frames_path(trajectory: Trajectory, path: str | Path) -> None:
    Path(path).write_bytes(write_frames(trajectory))


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    path: str
    n_frames: int


@dataclass(frozen=True)
class DatasetManifest:
    """Index of the trajectory files making up one dataset."""

    entries: tuple[ManifestEntry, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.entries:
            raise ManifestError("manifest has no entries")
        for e in self.entries:
            if e.n_frames < 0:
                raise ManifestError(f"entry {e.path!r} has negative frame count")

    @property
    def n_trajectories(self) -> int:
        return len(self.entries)

    @property
    def n_frames_total(self) -> int:
        return sum(e.n_frames for e in self.entries)

    def to_json(self) -> dict:
        return {
            "entries": [{"path": e.path, "n_frames": e.n_frames} for e in self.entries],
            "totals": {"n_trajectories": self.n_trajectories, "n_frames_total": self.n_frames_total},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetManifest":
        try:
            entries = tuple(ManifestEntry(str(e["path"]), int(e["n_frames"])) for e in doc["entries"])
            totals = doc["totals"]
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"manifest document missing field: {exc}") from None
        manifest = cls(entries)
        if (int(totals["n_trajectories"]) != manifest.n_trajectories
                or int(totals["n_frames_total"]) != manifest.n_frames_total):
            raise ManifestError(
                "manifest totals do not match entry sums: "
                f"declared ({totals['n_trajectories']}, {totals['n_frames_total']}), "
                f"computed ({manifest.n_trajectories}, {manifest.n_frames_total})")
        return manifest

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        return cls.from_json(json.loads(Path(path).read_text()))
