"""Grid partitioning of the reduced state/input spaces, the absorbing state,
and exact construction of the finite row-stochastic transition kernel."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtr

from sgsynth.errors import ConfigurationError, KernelConsistencyError, UnsupportedCovariance
from sgsynth.model import ReducedOrderGame

__all__ = [
    "Grid",
    "TransitionKernel",
    "FiniteAbstraction",
    "rep_point",
    "project_w",
    "cell_probability",
    "build_kernel",
]

log = logging.getLogger(__name__)

ROW_SUM_ATOL = 1e-9


@dataclass(frozen=True)
class Grid:
    """Uniform axis-aligned partition of a bounded region into half-open cells
    ``[lo + k*eta, lo + (k+1)*eta)`` represented by their centers."""

    lo: np.ndarray
    hi: np.ndarray
    eta: np.ndarray
    counts: np.ndarray = field(init=False)

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        eta = np.atleast_1d(np.asarray(self.eta, dtype=float))
        if eta.shape == (1,) and lo.shape[0] > 1:
            eta = np.full_like(lo, eta[0])
        if lo.shape != hi.shape or lo.shape != eta.shape:
            raise ConfigurationError("grid lo/hi/eta dimensions disagree")
        if np.any(eta <= 0) or not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
            raise ConfigurationError("grid needs finite bounds and positive widths")
        ratio = (hi - lo) / eta
        counts = np.rint(ratio).astype(np.int64)
        if np.any(counts < 1) or np.any(np.abs(ratio - counts) > 1e-9 * np.maximum(1.0, np.abs(ratio))):
            raise ConfigurationError(f"widths {eta} do not tile [{lo}, {hi}] exactly")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "counts", counts)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.counts))

    @property
    def quantization_bound(self) -> float:
        """Sup-norm bound on the offset between a point and its cell center."""
        return float(np.max(self.eta) / 2.0)

    def cell_index(self, x) -> Optional[np.ndarray]:
        """Per-dimension cell indices, or None when x is outside the region."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if np.any(x < self.lo) or np.any(x > self.hi):
            return None
        k = np.floor((x - self.lo) / self.eta).astype(np.int64)
        return np.minimum(k, self.counts - 1)

    def flat_index(self, k: np.ndarray) -> int:
        return int(np.ravel_multi_index(tuple(k), tuple(self.counts)))

    def center(self, flat: int) -> np.ndarray:
        k = np.array(np.unravel_index(flat, tuple(self.counts)))
        return self.lo + (k + 0.5) * self.eta

    def centers(self) -> np.ndarray:
        """All cell centers, ordered by flat index; shape (n_cells, dim)."""
        axes = [self.lo[i] + (np.arange(self.counts[i]) + 0.5) * self.eta[i] for i in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def snap(self, x) -> np.ndarray:
        """Center of the virtual cell containing x on the unclipped grid
        extended to all of space; used by coupling diagnostics."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        k = np.floor((x - self.lo) / self.eta)
        return self.lo + (k + 0.5) * self.eta

    def edges(self, axis: int) -> np.ndarray:
        return self.lo[axis] + self.eta[axis] * np.arange(self.counts[axis] + 1)


@dataclass
class TransitionKernel:
    """Row-stochastic kernel over (state, input, adversary-input) rows.

    Dense mode stores the full (S, U, W, S) tensor. Sparse mode stores CSR
    arrays over flattened rows plus the per-row mass dropped below the
    truncation threshold, so downstream consumers can route it soundly.
    """

    n_states: int  # grid cells + absorbing
    n_u: int
    n_w: int
    dense: Optional[np.ndarray] = None
    indptr: Optional[np.ndarray] = None
    indices: Optional[np.ndarray] = None
    data: Optional[np.ndarray] = None
    truncated: Optional[np.ndarray] = None
    threshold: float = 0.0

    @property
    def mode(self) -> str:
        return "dense" if self.dense is not None else "sparse"

    @property
    def n_rows(self) -> int:
        return self.n_states * self.n_u * self.n_w

    def row(self, x: int, u: int, w: int) -> np.ndarray:
        """Full probability row as a dense vector (sparse rows are expanded)."""
        if self.dense is not None:
            return self.dense[x, u, w]
        r = (x * self.n_u + u) * self.n_w + w
        out = np.zeros(self.n_states)
        sl = slice(self.indptr[r], self.indptr[r + 1])
        out[self.indices[sl]] = self.data[sl]
        return out

    def matrix(self) -> np.ndarray:
        """Dense (rows, S) view; only valid in dense mode."""
        return self.dense.reshape(self.n_rows, self.n_states)

    def validate(self):
        phi = self.n_states - 1
        if self.dense is not None:
            if self.dense.shape != (self.n_states, self.n_u, self.n_w, self.n_states):
                raise KernelConsistencyError("dense kernel shape mismatch")
            if np.any(self.dense < -1e-15) or np.any(self.dense > 1 + 1e-12):
                raise KernelConsistencyError("kernel entries outside [0, 1]")
            sums = self.dense.sum(axis=3)
            if np.max(np.abs(sums - 1.0)) > ROW_SUM_ATOL:
                raise KernelConsistencyError(
                    f"row sums deviate from 1 by {np.max(np.abs(sums - 1.0)):.3e}"
                )
            if not np.all(self.dense[phi, :, :, phi] == 1.0) or self.dense[phi].sum() != self.n_u * self.n_w:
                raise KernelConsistencyError("absorbing row is not an exact self-loop")
        else:
            rows = self.n_rows
            if self.indptr.shape[0] != rows + 1 or self.truncated.shape[0] != rows:
                raise KernelConsistencyError("sparse kernel arrays malformed")
            if np.any(self.data < 0) or np.any(self.data > 1 + 1e-12):
                raise KernelConsistencyError("kernel entries outside [0, 1]")
            sums = np.zeros(rows)
            np.add.at(sums, np.repeat(np.arange(rows), np.diff(self.indptr)), self.data)
            resid = np.abs(sums + self.truncated - 1.0)
            if np.max(resid) > ROW_SUM_ATOL:
                raise KernelConsistencyError(
                    f"sparse row mass + truncated ledger deviates from 1 by {np.max(resid):.3e}"
                )
            if self.indices.size > 1:
                diffs = np.diff(self.indices)
                within = np.ones(diffs.shape[0], dtype=bool)
                within[self.indptr[1:-1] - 1] = False  # row boundaries
                if np.any(diffs[within] <= 0):
                    raise KernelConsistencyError("sparse row indices not strictly increasing")

    def memory_report(self) -> dict:
        entries = (
            int(self.dense.size) if self.dense is not None else int(self.data.size)
        )
        return {
            "mode": self.mode,
            "entries": entries,
            "bytes_f32": entries * 4,
            "bytes_f64": entries * 8,
        }


@dataclass
class FiniteAbstraction:
    """Finite-state abstraction: grid states plus absorbing state, finite
    input sets for both players, and (once built) the transition kernel."""

    grid: Grid
    u_grid: Grid
    w_grid: Grid
    u_prime_lo: Optional[np.ndarray] = None
    u_prime_hi: Optional[np.ndarray] = None
    output_matrix: Optional[np.ndarray] = None  # abstract output map (reduced C)
    kernel: Optional[TransitionKernel] = None
    r_r_used: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.u_prime_lo is not None:
            self.u_prime_lo = np.atleast_1d(np.asarray(self.u_prime_lo, dtype=float))
        if self.u_prime_hi is not None:
            self.u_prime_hi = np.atleast_1d(np.asarray(self.u_prime_hi, dtype=float))
        if self.output_matrix is not None:
            self.output_matrix = np.atleast_2d(np.asarray(self.output_matrix, dtype=float))

    def output_of(self, center) -> np.ndarray:
        if self.output_matrix is None:
            raise ConfigurationError("abstraction carries no output matrix")
        return self.output_matrix @ np.asarray(center, dtype=float).ravel()

    @property
    def n_grid(self) -> int:
        return self.grid.n_cells

    @property
    def n_states(self) -> int:
        """Grid cells plus the absorbing state."""
        return self.grid.n_cells + 1

    @property
    def phi_index(self) -> int:
        return self.grid.n_cells

    def state_centers(self) -> np.ndarray:
        return self.grid.centers()

    def u_points(self) -> np.ndarray:
        return self.u_grid.centers()

    def u_prime_mask(self) -> np.ndarray:
        """Mask over u_points selecting the synthesis input set."""
        pts = self.u_points()
        if self.u_prime_lo is None:
            return np.ones(pts.shape[0], dtype=bool)
        return np.all((pts >= self.u_prime_lo - 1e-12) & (pts <= self.u_prime_hi + 1e-12), axis=1)

    def u_prime_points(self) -> np.ndarray:
        return self.u_points()[self.u_prime_mask()]

    def u_prime_indices(self) -> np.ndarray:
        return np.nonzero(self.u_prime_mask())[0]

    def w_points(self) -> np.ndarray:
        return self.w_grid.centers()

    def w_quantization_radius(self) -> float:
        """Max Euclidean distance between an adversary input and its cell center."""
        return float(np.linalg.norm(self.w_grid.eta / 2.0))


def rep_point(abstraction_or_grid, x_r) -> int:
    """Abstract state index of the cell containing x_r; outside points map to
    the absorbing index."""
    grid = abstraction_or_grid.grid if isinstance(abstraction_or_grid, FiniteAbstraction) else abstraction_or_grid
    k = grid.cell_index(x_r)
    if k is None:
        return grid.n_cells
    return grid.flat_index(k)


def project_w(abstraction: FiniteAbstraction, w) -> np.ndarray:
    """Representative adversary input of the cell containing w.

    Inputs outside the adversary box are clamped in with a warning.
    """
    g = abstraction.w_grid
    w = np.atleast_1d(np.asarray(w, dtype=float))
    clamped = np.clip(w, g.lo, g.hi)
    if np.any(clamped != w):
        log.warning("adversary input %s outside box; clamped to %s", w, clamped)
    k = g.cell_index(clamped)
    return g.lo + (k + 0.5) * g.eta


def cell_probability(mean, cov_diag, cell_lo, cell_hi) -> float:
    """Gaussian mass of an axis-aligned cell under a diagonal covariance.

    Zero-variance dimensions degenerate to point-mass indicators; the mean
    coordinate must then decide membership, half-open like the grid cells.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    var = np.atleast_1d(np.asarray(cov_diag, dtype=float))
    lo = np.atleast_1d(np.asarray(cell_lo, dtype=float))
    hi = np.atleast_1d(np.asarray(cell_hi, dtype=float))
    if np.any(var < 0):
        raise ConfigurationError("negative variance")
    p = 1.0
    for mu, v, a, b in zip(mean, var, lo, hi):
        if v == 0.0:
            p *= 1.0 if (a <= mu < b) or (a == mu == b) else 0.0
        else:
            sd = np.sqrt(v)
            p *= ndtr((b - mu) / sd) - ndtr((a - mu) / sd)
    return float(p)


def _noise_std(red: ReducedOrderGame) -> np.ndarray:
    """Per-dimension noise standard deviations; rejects correlated noise."""
    if red.R_r is None:
        raise ConfigurationError("reduced model has no noise matrix; establish the relation or set R_r")
    cov = red.R_r @ red.R_r.T
    off = cov - np.diag(np.diag(cov))
    if np.max(np.abs(off)) > 1e-12 * max(1.0, np.max(np.abs(cov))):
        raise UnsupportedCovariance(
            "R_r R_r^T has off-diagonal terms; exact cell probabilities need a diagonal covariance"
        )
    return np.sqrt(np.diag(cov))


def _dim_cdf_table(edges: np.ndarray, mu: np.ndarray, sd: float) -> np.ndarray:
    """(n_means, n_cells) per-dimension cell probabilities for all means."""
    if sd == 0.0:
        k = np.floor((mu - edges[0]) / (edges[1] - edges[0])).astype(np.int64)
        table = np.zeros((mu.shape[0], edges.shape[0] - 1))
        ok = (k >= 0) & (k < edges.shape[0] - 1)
        table[np.nonzero(ok)[0], k[ok]] = 1.0
        return table
    z = (edges[None, :] - mu[:, None]) / sd
    cdf = ndtr(z)
    return np.diff(cdf, axis=1)


def build_kernel(
    red: ReducedOrderGame,
    abstraction: FiniteAbstraction,
    mode: str = "dense",
    threshold: float = 1e-12,
    chunk_rows: int = 4096,
) -> TransitionKernel:
    """Exact transition kernel of the finite abstraction.

    For every (state, input, adversary) triple the successor mean is the
    reduced drift at the cell center; in-grid cells receive their Gaussian
    mass, the remainder goes to the absorbing state, and the absorbing state
    self-loops with probability one. Sparse mode drops in-grid entries below
    ``threshold`` and records the dropped mass per row.
    """
    if mode not in ("dense", "sparse"):
        raise ConfigurationError(f"unknown kernel mode {mode!r}")
    grid = abstraction.grid
    sd = _noise_std(red)
    centers = abstraction.state_centers()
    u_pts = abstraction.u_points()
    w_pts = abstraction.w_points()
    n_grid, n_u, n_w = grid.n_cells, u_pts.shape[0], w_pts.shape[0]
    n_states = n_grid + 1
    phi = n_grid

    # Means decompose into a state/nonlinearity part plus input and adversary shifts.
    base = centers @ red.A_r.T + red.phi(centers @ red.F_r.T) @ red.E_r.T
    du = u_pts @ red.B_r.T
    dw = w_pts @ red.D_r.T

    n_rows_grid = n_grid * n_u * n_w
    kernel = TransitionKernel(n_states=n_states, n_u=n_u, n_w=n_w, threshold=threshold if mode == "sparse" else 0.0)

    if mode == "dense":
        dense = np.zeros((n_states, n_u, n_w, n_states))
    else:
        ind_chunks, dat_chunks = [], []
        counts = np.zeros(n_rows_grid + n_u * n_w, dtype=np.int64)
        trunc = np.zeros(n_rows_grid + n_u * n_w)

    # Row order (x, u, w); chunked over flattened grid-state rows.
    for start in range(0, n_rows_grid, chunk_rows):
        stop = min(start + chunk_rows, n_rows_grid)
        rows = np.arange(start, stop)
        xi = rows // (n_u * n_w)
        ui = (rows // n_w) % n_u
        wi = rows % n_w
        means = base[xi] + du[ui] + dw[wi]
        probs = np.ones((rows.shape[0], 1))
        for d in range(grid.dim):
            tab = _dim_cdf_table(grid.edges(d), means[:, d], sd[d])
            probs = (probs[:, :, None] * tab[:, None, :]).reshape(rows.shape[0], -1)
        in_mass = probs.sum(axis=1)
        if np.any(in_mass > 1.0 + 1e-9):
            raise KernelConsistencyError(f"in-grid mass exceeds 1 by {np.max(in_mass - 1.0):.3e}")
        if mode == "dense":
            block = np.concatenate([probs, (1.0 - in_mass)[:, None]], axis=1)
            dense.reshape(-1, n_states)[start:stop] = np.clip(block, 0.0, 1.0)
        else:
            keep = probs >= threshold
            trunc[start:stop] = np.where(keep, 0.0, probs).sum(axis=1)
            phi_mass = np.maximum(1.0 - in_mass, 0.0)
            # The absorbing column is always kept so its mass stays exact;
            # appending it as an extra always-true column keeps the row-major
            # nonzero scan sorted within each row.
            keep_ext = np.concatenate([keep, np.ones((rows.shape[0], 1), dtype=bool)], axis=1)
            vals_ext = np.concatenate([probs, phi_mass[:, None]], axis=1)
            r_idx, c_idx = np.nonzero(keep_ext)
            ind_chunks.append(c_idx.astype(np.int64))
            dat_chunks.append(vals_ext[r_idx, c_idx])
            counts[start:stop] = keep_ext.sum(axis=1)

    # Absorbing rows: unit self-loop for every input pair.
    if mode == "dense":
        dense[phi, :, :, phi] = 1.0
        kernel.dense = dense
    else:
        for r in range(n_rows_grid, n_rows_grid + n_u * n_w):
            ind_chunks.append(np.array([phi], dtype=np.int64))
            dat_chunks.append(np.array([1.0]))
            counts[r] = 1
        kernel.indices = np.concatenate(ind_chunks)
        kernel.data = np.concatenate(dat_chunks)
        kernel.indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        kernel.truncated = trunc
    kernel.validate()
    return kernel
