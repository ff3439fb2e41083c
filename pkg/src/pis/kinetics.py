"""Variational kinetic scoring and constrained transition-matrix estimation.

Scores and the constrained estimator are written against the autodiff
Tensor type so the same code path serves training (differentiable) and
analysis (plain values).  Covariances are built from soft state
assignments without mean-centering; the constant function lives inside
the softmax span, so the score ceiling equals the number of states.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor

DEFAULT_EPS_REL = 1e-6
SINKHORN_TOL = 1e-12
SINKHORN_MAX_ITER = 5000


class StateStarvedError(RuntimeError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass
class CovarianceSet:
    """Instantaneous/lagged second-moment matrices of state assignments.

    ``eps_rel`` scales the trace-proportional ridge used on the inversion
    paths; the ridge is an expression of the covariances themselves, so
    scores stay differentiable end to end.
    """

    c00: Tensor
    c0t: Tensor
    ctt: Tensor
    lag: int
    eps_rel: float
    n_pairs: int

    def __post_init__(self):
        m = self.c00.value.shape[0]
        for name, c in (("c00", self.c00), ("ctt", self.ctt)):
            v = c.value
            if v.shape != (m, m):
                raise ad.ShapeError(f"{name} must be ({m},{m}), got {v.shape}")
            if np.abs(v - v.T).max() > 1e-12 * max(1.0, np.abs(v).max()):
                raise ValueError(f"{name} is not symmetric within 1e-12")

    @property
    def n_states(self) -> int:
        return self.c00.value.shape[0]

    @property
    def eps00(self) -> float:
        return self.eps_rel * float(np.trace(self.c00.value)) / self.n_states

    @property
    def eps_tt(self) -> float:
        return self.eps_rel * float(np.trace(self.ctt.value)) / self.n_states

    def _regularized(self, c: Tensor) -> Tensor:
        if self.eps_rel == 0.0:
            return c
        eye = Tensor(np.eye(self.n_states))
        return c + ad.trace(c) * (self.eps_rel / self.n_states) * eye

    def c00_reg(self) -> Tensor:
        return self._regularized(self.c00)

    def ctt_reg(self) -> Tensor:
        return self._regularized(self.ctt)


def covariances(x0, xt, weights=None, eps_rel: float = DEFAULT_EPS_REL,
                lag: int = 0) -> CovarianceSet:
    """Second moments C00, C0t, Ctt of paired assignments.

    ``weights`` (per-pair, summing to 1) default to uniform 1/n.  No mean
    centering: the constant function stays inside the assignment span.
    """
    x0, xt = as_tensor(x0), as_tensor(xt)
    n, m = x0.value.shape
    if xt.value.shape != (n, m):
        raise ad.ShapeError(f"x0 {x0.value.shape} and xt {xt.value.shape} must match")
    if n < m:
        raise InsufficientDataError(f"need at least {m} pairs for {m} states, got {n}")
    if not (np.isfinite(x0.value).all() and np.isfinite(xt.value).all()):
        raise ValueError("assignments contain non-finite values")
    if weights is None:
        w = Tensor(np.full((n, 1), 1.0 / n))
    else:
        w = as_tensor(weights)
        if w.value.ndim == 1:
            w = ad.reshape(w, (n, 1))
    c00 = ad.matmul(ad.transpose(x0), w * x0)
    c0t = ad.matmul(ad.transpose(x0), w * xt)
    ctt = ad.matmul(ad.transpose(xt), w * xt)
    return CovarianceSet(c00, c0t, ctt, lag, eps_rel, n)


def vamp2_score(cov: CovarianceSet) -> Tensor:
    """tr[(C00+eI)^-1 C0t (Ctt+eI)^-1 C0t^T]; ceiling is the state count."""
    inv00 = ad.matrix_inverse(cov.c00_reg())
    inv_tt = ad.matrix_inverse(cov.ctt_reg())
    return ad.trace(ad.matmul(ad.matmul(inv00, cov.c0t),
                              ad.matmul(inv_tt, ad.transpose(cov.c0t))))


def vamp_e_score(cov: CovarianceSet, a) -> Tensor:
    """tr[2 A^T C0t - A^T C00 A Ctt], with the regularized copies in the
    quadratic term so the closed-form maximizer recovers the VAMP-2 value
    for every regularization magnitude."""
    a = as_tensor(a)
    m = cov.n_states
    if a.value.shape != (m, m):
        raise ad.ShapeError(f"candidate operator must be ({m},{m}), got {a.value.shape}")
    at = ad.transpose(a)
    linear = ad.trace(ad.matmul(at, cov.c0t)) * 2.0
    quad = ad.trace(ad.matmul(ad.matmul(at, cov.c00_reg()),
                              ad.matmul(a, cov.ctt_reg())))
    return linear - quad


def vamp_e_maximizer(cov: CovarianceSet) -> Tensor:
    """Closed-form maximizer (C00+eI)^-1 C0t (Ctt+eI)^-1 of the VAMP-E score."""
    return ad.matmul(ad.matmul(ad.matrix_inverse(cov.c00_reg()), cov.c0t),
                     ad.matrix_inverse(cov.ctt_reg()))


# ---------------------------------------------------------------------------
# Reversibility-constrained estimator
# ---------------------------------------------------------------------------

@dataclass
class ConstrainedKoopman:
    """Reweighting vector, symmetric kernel, and the reversible K they induce."""

    u_raw: Tensor       # unconstrained reweighting parameters (m,)
    kernel_raw: Tensor  # unconstrained symmetric-kernel parameters (m, m)
    u: Tensor           # positive, normalized against the lagged mean (m, 1)
    w: Tensor           # per-pair weights summing to 1 (n, 1)
    pi: Tensor          # stationary distribution (m, 1)
    s: Tensor           # symmetric nonnegative kernel with S 1 = pi (m, m)
    k: Tensor           # row-stochastic reversible transition matrix (m, m)
    candidate: Tensor   # pi-whitened symmetric candidate diag(pi)^-1 S diag(pi)^-1
    sinkhorn_iterations: int
    sinkhorn_residual: float

    def validate(self, chi_tau_mean: np.ndarray) -> None:
        u = self.u.value[:, 0]
        if abs(float(chi_tau_mean @ u) - 1.0) > 1e-9:
            raise ValueError("u is not normalized against the lagged mean")
        w = self.w.value
        if abs(w.sum() - 1.0) > 1e-9 or (w < 0).any():
            raise ValueError("pair weights must be non-negative and sum to 1")
        pi = self.pi.value[:, 0]
        if (pi < 0).any() or abs(pi.sum() - 1.0) > 1e-9:
            raise ValueError("stationary vector must be a distribution")
        s = self.s.value
        if not (s == s.T).all():
            raise ValueError("kernel S must be exactly symmetric")
        if (s < 0).any():
            raise ValueError("kernel S must be non-negative")
        k = self.k.value
        if (k < 0).any():
            raise ValueError("K must be non-negative")
        if np.abs(k.sum(axis=1) - 1.0).max() > 1e-8:
            raise ValueError("K rows must sum to 1 within 1e-8")
        balance = np.abs(pi[:, None] * k - (pi[:, None] * k).T).max()
        if balance > 1e-6:
            raise ValueError(f"detailed balance residual {balance:.2e} exceeds 1e-6")


def build_constrained_K(u_raw, kernel_raw, chi_tau,
                        tol: float = SINKHORN_TOL,
                        max_iterations: int = SINKHORN_MAX_ITER) -> ConstrainedKoopman:
    """Stationarity- and reversibility-constrained transition matrix.

    u = exp(u_raw) normalized so mean(chi_tau) . u = 1; pair weights
    w_i = chi_tau(x_i) . u / n; pi = sum_i w_i chi_tau(x_i).  The kernel
    exp(kernel_raw) + exp(kernel_raw)^T is rescaled by a symmetric
    Sinkhorn iteration until its row sums match pi (relative residual
    ``tol``), and K = diag(pi)^-1 S.  Differentiable throughout (the
    iteration unrolls on the tape).
    """
    u_raw = as_tensor(u_raw)
    kernel_raw = as_tensor(kernel_raw)
    chi_tau = as_tensor(chi_tau)
    n, m = chi_tau.value.shape
    if n == 0:
        raise InsufficientDataError("empty assignment batch")
    if u_raw.value.shape != (m,) or kernel_raw.value.shape != (m, m):
        raise ad.ShapeError(
            f"parameter shapes ({u_raw.value.shape}, {kernel_raw.value.shape}) "
            f"do not fit {m} states")

    chi_mean = ad.tensor_mean(chi_tau, axis=0)                       # (m,)
    eu = ad.exp(u_raw)
    u = ad.reshape(eu / ad.tensor_sum(chi_mean * eu), (m, 1))
    w = ad.matmul(chi_tau, u) * (1.0 / n)                            # (n, 1)
    pi = ad.matmul(ad.transpose(chi_tau), w)                         # (m, 1)

    pi_values = pi.value[:, 0]
    if (pi_values < 1e-12).any():
        starved = int(np.flatnonzero(pi_values < 1e-12)[0])
        raise StateStarvedError(f"state starved: state {starved} has weight {pi_values[starved]:.3e}")

    ek = ad.exp(kernel_raw)
    s_hat = ek + ad.transpose(ek)                                     # symmetric, positive

    # Symmetric Sinkhorn with geometric-mean damping: d <- d sqrt(pi / (d o S_hat d)).
    d = ad.sqrt(pi / ad.reshape(ad.tensor_sum(s_hat, axis=1), (m, 1)))
    iterations = 0
    residual = np.inf
    for _ in range(max_iterations):
        q = d * ad.matmul(s_hat, d)
        residual = float((np.abs(q.value - pi.value) / pi.value).max())
        if residual <= tol:
            break
        d = d * ad.sqrt(pi / q)
        iterations += 1
    s = s_hat * ad.matmul(d, ad.transpose(d))
    k = s / pi
    # Whitening K by pi on the right gives the symmetric candidate whose
    # unconstrained optimum recovers the VAMP-2 value, so the candidate
    # score is comparable across the two training stages.
    candidate = k / ad.transpose(pi)

    built = ConstrainedKoopman(u_raw, kernel_raw, u, w, pi, s, k, candidate,
                               sinkhorn_iterations=iterations,
                               sinkhorn_residual=residual)
    built.validate(chi_mean.value)
    return built


# ---------------------------------------------------------------------------
# Chapman-Kolmogorov machinery
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CkTestResult:
    base_lag: int
    steps: int
    predicted: np.ndarray
    estimated: np.ndarray
    deviations: np.ndarray

    def __post_init__(self):
        for name, mat in (("predicted", self.predicted), ("estimated", self.estimated)):
            if (mat < -1e-12).any() or np.abs(mat.sum(axis=1) - 1.0).max() > 1e-8:
                raise ValueError(f"{name} matrix is not row-stochastic within 1e-8")

    @property
    def max_abs_deviation(self) -> float:
        return float(self.deviations.max())


def lagged_pairs(chi_trajs: list[np.ndarray], lag: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack (t, t+lag) assignment pairs; pairs never straddle trajectories."""
    x0_parts, xt_parts = [], []
    for chi in chi_trajs:
        if chi.shape[0] > lag:
            x0_parts.append(chi[:-lag])
            xt_parts.append(chi[lag:])
    if not x0_parts:
        lengths = max((c.shape[0] for c in chi_trajs), default=0)
        raise InsufficientDataError(
            f"no pairs at lag {lag}; longest trajectory has {lengths} frames, needs {lag + 1}")
    return np.concatenate(x0_parts), np.concatenate(xt_parts)


def estimate_K(chi_trajs: list[np.ndarray], lag: int,
               eps_rel: float = DEFAULT_EPS_REL) -> np.ndarray:
    """Non-reversible estimator (C00+eI)^-1 C0l projected to row-stochastic
    form (negative entries clipped, rows renormalized)."""
    x0, xt = lagged_pairs(chi_trajs, lag)
    cov = covariances(x0, xt, eps_rel=eps_rel, lag=lag)
    raw = ad.matmul(ad.matrix_inverse(cov.c00_reg()), cov.c0t).value
    clipped = np.clip(raw, 0.0, None)
    sums = clipped.sum(axis=1, keepdims=True)
    if (sums <= 0).any():
        empty = int(np.flatnonzero(sums[:, 0] <= 0)[0])
        raise InsufficientDataError(f"state {empty} has no outgoing weight at lag {lag}")
    return clipped / sums


def ck_test(chi_trajs: list[np.ndarray], base_lag: int, max_steps: int,
            eps_rel: float = DEFAULT_EPS_REL) -> list[CkTestResult]:
    """Chapman-Kolmogorov test: K(base)^n against K(n*base) for n=1..max_steps."""
    base = estimate_K(chi_trajs, base_lag, eps_rel)
    results = []
    for n in range(1, max_steps + 1):
        estimated = base if n == 1 else estimate_K(chi_trajs, n * base_lag, eps_rel)
        predicted = base if n == 1 else np.linalg.matrix_power(base, n)
        results.append(CkTestResult(
            base_lag=base_lag, steps=n, predicted=predicted, estimated=estimated,
            deviations=np.abs(predicted - estimated)))
    return results


@dataclass(frozen=True)
class ImpliedTimescales:
    timescales_ps: np.ndarray  # inf where flagged
    eigenvalues: np.ndarray
    flagged: np.ndarray        # |eigenvalue| >= 1 beyond the Perron root


def implied_timescales(k: np.ndarray, lag: int, dt_ps: float) -> ImpliedTimescales:
    """t_i = -lag*dt / ln|eigenvalue_i|, Perron root excluded."""
    k = np.asarray(k, dtype=np.float64)
    if np.abs(k.sum(axis=1) - 1.0).max() > 1e-8:
        raise ValueError("K must be row-stochastic")
    eig = np.linalg.eigvals(k)
    order = np.argsort(-np.abs(eig))
    eig = eig[order][1:]  # drop the Perron root
    mods = np.abs(eig)
    flagged = mods >= 1.0 - 1e-12
    timescales = np.full(eig.shape[0], np.inf)
    ok = ~flagged
    timescales[ok] = -lag * dt_ps / np.log(mods[ok])
    return ImpliedTimescales(timescales, eig, flagged)


# ---------------------------------------------------------------------------
# Free-energy surface over the learned embedding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FreeEnergySurface:
    pc1_edges: np.ndarray
    pc2_edges: np.ndarray
    free_energy: np.ndarray       # (bins, bins), +inf on empty bins
    occupied: np.ndarray          # bool mask
    explained_variance: np.ndarray  # fractions for PC1, PC2
    counts: np.ndarray

    def __post_init__(self):
        if self.occupied.any():
            if abs(float(self.free_energy[self.occupied].min())) > 1e-12:
                raise ValueError("occupied free-energy minimum must be 0")
        if np.isfinite(self.free_energy[~self.occupied]).any():
            raise ValueError("empty bins must not carry finite free energy")


def free_energy_surface(embeddings: np.ndarray, bins: int = 64) -> FreeEnergySurface:
    """PCA projection of embeddings to 2-D plus -ln density, min shifted to 0."""
    z = np.asarray(embeddings, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2 or z.shape[1] < 2:
        raise ValueError(f"need (>=2 frames, >=2 dims) embeddings, got {z.shape}")
    centered = z - z.mean(axis=0)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    if svals[0] <= 0:
        raise ValueError("embeddings have zero variance in all directions")
    # Deterministic component signs: largest-magnitude loading positive.
    comps = vt[:2].copy()
    for i in range(2):
        lead = np.argmax(np.abs(comps[i]))
        if comps[i, lead] < 0:
            comps[i] = -comps[i]
    projected = centered @ comps.T
    variances = svals ** 2
    explained = variances[:2] / variances.sum()

    counts, pc1_edges, pc2_edges = np.histogram2d(
        projected[:, 0], projected[:, 1], bins=bins)
    occupied = counts > 0
    total = counts.sum()
    free_energy = np.full_like(counts, np.inf)
    free_energy[occupied] = -np.log(counts[occupied] / total)
    free_energy[occupied] -= free_energy[occupied].min()
    return FreeEnergySurface(pc1_edges, pc2_edges, free_energy, occupied, explained, counts)


# ---------------------------------------------------------------------------
# Residue contributions
# ---------------------------------------------------------------------------

def attention_mass(neighbors: np.ndarray, attention: np.ndarray, n_residues: int) -> np.ndarray:
    """Incoming attention per residue: attention paid to each residue as a
    message sender, accumulated over all receiving nodes.

    ``neighbors`` and ``attention`` are (frames, nodes, k).
    Returns (frames, n_residues).
    """
    frames = attention.shape[0]
    out = np.zeros((frames, n_residues), dtype=np.float64)
    flat_idx = (np.arange(frames)[:, None, None] * n_residues + neighbors).reshape(-1)
    np.add.at(out.reshape(-1), flat_idx, attention.reshape(-1))
    return out


def residue_contributions(mass: np.ndarray, chi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-state residue contribution probabilities.

    ``mass`` is (frames, n_residues) incoming attention, ``chi`` is
    (frames, m).  Row s is the chi_s-weighted residue mass, normalized to
    sum to 1.  States with zero soft weight get a uniform row and a flag.
    """
    mass = np.asarray(mass, dtype=np.float64)
    chi = np.asarray(chi, dtype=np.float64)
    if mass.shape[0] != chi.shape[0]:
        raise ValueError(f"frame counts differ: {mass.shape[0]} vs {chi.shape[0]}")
    raw = chi.T @ mass  # (m, n_residues)
    totals = raw.sum(axis=1, keepdims=True)
    flagged = totals[:, 0] <= 0
    out = np.empty_like(raw)
    n_res = mass.shape[1]
    for s in range(raw.shape[0]):
        out[s] = np.full(n_res, 1.0 / n_res) if flagged[s] else raw[s] / totals[s, 0]
    return out, flagged
