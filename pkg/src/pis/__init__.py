"""Physics-informed metastable-state analysis for protein trajectories.

The package covers the full pipeline: topology/trajectory ingestion,
physical descriptors (radius of gyration, SASA, RMSF), residue-graph
featurization, a small reverse-mode autodiff engine, the dual-track
graph encoder, variational kinetic scoring with reversibility
constraints, two-stage training, a synthetic benchmark with exact
oracles, and a CLI plus HTTP service feeding the browser console.
"""

__version__ = "0.1.0"

from .trajectory import Topology, Trajectory, DatasetManifest

__all__ = ["Topology", "Trajectory", "DatasetManifest", "__version__"]
