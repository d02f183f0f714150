"""Matrix-free curvature probes: Hutchinson traces and stochastic Lanczos quadrature.

Operators only expose their action on vectors. ``apply_many`` takes a stack
of row vectors so Hessian operators can push several directions through one
forward/backward pass.
"""

from __future__ import annotations

import zlib
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal

from . import autodiff as ad
from .autodiff import ParamSet

__all__ = [
    "CurvatureOperator",
    "TraceEstimate",
    "RitzSpectrum",
    "SpectralDensity",
    "derive_seed",
    "hessian_operator",
    "matrix_operator",
    "rademacher_probes",
    "hutchinson_trace",
    "hutchinson_from_samples",
    "lanczos",
    "lanczos_runs",
    "default_sigma",
    "density_on_grid",
    "slq_density",
    "exact_smoothed_density",
    "l1_distance",
    "dense_spectrum_oracle",
    "random_symmetric_operator",
]


def derive_seed(master: int, label: str) -> int:
    """Independent child seed for a named component of a run."""
    ss = np.random.SeedSequence([int(master), zlib.crc32(label.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass
class CurvatureOperator:
    """A symmetric linear map ``v -> H v`` of dimension ``dim``.

    ``matvecs`` maps a ``(K, dim)`` stack of vectors to their images. Stacks
    are processed in chunks of ``chunk_size`` rows.
    """

    dim: int
    matvecs: Callable[[np.ndarray], np.ndarray]
    label: str = ""
    chunk_size: int = 16

    def apply(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim,):
            raise ValueError(f"expected a vector of length {self.dim}, got {v.shape}")
        return self.apply_many(v[None, :])[0]

    def apply_many(self, vs) -> np.ndarray:
        vs = np.asarray(vs, dtype=np.float64)
        if vs.ndim != 2 or vs.shape[1] != self.dim:
            raise ValueError(f"expected shape (K, {self.dim}), got {vs.shape}")
        out = [
            np.asarray(self.matvecs(vs[i:i + self.chunk_size]), dtype=np.float64)
            for i in range(0, vs.shape[0], self.chunk_size)
        ]
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.dim))

    def __matmul__(self, v):
        return self.apply(v)


def hessian_operator(loss_fn, params: ParamSet, block="shared", label: str = "",
                     chunk_size: int = 16) -> CurvatureOperator:
    """Hessian of ``loss_fn`` over one parameter block; other blocks stay fixed."""
    dim = params.size(block)
    return CurvatureOperator(
        dim=dim,
        matvecs=lambda vs: ad.hvp(loss_fn, params, block, vs),
        label=label,
        chunk_size=chunk_size,
    )


def matrix_operator(matrix, label: str = "") -> CurvatureOperator:
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"matrix must be square, got {a.shape}")
    return CurvatureOperator(dim=a.shape[0], matvecs=lambda vs: (a @ vs.T).T, label=label,
                             chunk_size=max(1, a.shape[0]))


# --------------------------------------------------------------------------
# trace


@dataclass
class TraceEstimate:
    mean: float
    stderr: float
    n_samples: int
    samples: np.ndarray | None = None


def rademacher_probes(n_samples: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 2, size=(n_samples, dim)).astype(np.float64) * 2.0 - 1.0


def hutchinson_from_samples(samples) -> TraceEstimate:
    """Summarize quadratic-form samples. One sample reports a zero stderr."""
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.size
    if n < 1:
        raise ValueError("need at least one sample")
    mean = float(np.mean(samples))
    stderr = float(np.std(samples, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return TraceEstimate(mean=mean, stderr=stderr, n_samples=n, samples=samples)


def hutchinson_trace(op: CurvatureOperator, n_samples: int = 500, seed: int = 0) -> TraceEstimate:
    """Estimate ``tr H`` as the mean of ``v^T H v`` over Rademacher probes ``v``.

    Probes depend only on ``(n_samples, dim, seed)``, so two operators of the
    same dimension see identical probes under the same seed.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    probes = rademacher_probes(n_samples, op.dim, seed)
    images = op.apply_many(probes)
    if not np.all(np.isfinite(images)):
        raise FloatingPointError(f"operator {op.label!r} returned non-finite values")
    return hutchinson_from_samples(np.einsum("ij,ij->i", probes, images))


# --------------------------------------------------------------------------
# Lanczos


@dataclass
class RitzSpectrum:
    """Ritz values (ascending) and quadrature weights from one Lanczos run."""

    values: np.ndarray
    weights: np.ndarray
    alphas: np.ndarray = field(repr=False, default=None)
    betas: np.ndarray = field(repr=False, default=None)
    basis: np.ndarray | None = field(repr=False, default=None)

    @property
    def n_iter(self) -> int:
        return self.values.size


def _ritz(alphas, betas) -> tuple[np.ndarray, np.ndarray]:
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.size == 1:
        return alphas.copy(), np.ones(1)
    vals, vecs = eigh_tridiagonal(alphas, np.asarray(betas, dtype=np.float64))
    order = np.argsort(vals, kind="stable")
    weights = vecs[0, order] ** 2
    return vals[order], weights / weights.sum()


BREAKDOWN_TOL = 1e-12


def lanczos_runs(op: CurvatureOperator, iters: int, starts: np.ndarray,
                 keep_basis: bool = False) -> list[RitzSpectrum]:
    """Run one Lanczos process per row of ``starts`` in lockstep.

    Each iterate is re-orthogonalized (twice) against all previous iterates of
    its own run. A run stops when its residual norm falls below
    ``1e-12 * scale`` where ``scale`` is the largest tridiagonal entry seen.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=np.float64))
    runs, dim = starts.shape
    if dim != op.dim:
        raise ValueError(f"start vectors have length {dim}, operator has {op.dim}")
    if not (1 <= iters <= dim):
        raise ValueError(f"iterations must satisfy 1 <= iters <= dim ({dim}), got {iters}")

    basis = np.zeros((runs, iters, dim))
    basis[:, 0] = starts / np.linalg.norm(starts, axis=1, keepdims=True)
    alphas = np.zeros((runs, iters))
    betas = np.zeros((runs, iters))
    length = np.zeros(runs, dtype=int)
    scale = np.zeros(runs)
    active = np.ones(runs, dtype=bool)

    for j in range(iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        w = op.apply_many(basis[idx, j])
        if not np.all(np.isfinite(w)):
            raise FloatingPointError(f"operator {op.label!r} returned non-finite values")
        for row, r in enumerate(idx):
            q = basis[r, j]
            wr = w[row]
            alpha = q @ wr
            wr = wr - alpha * q
            if j > 0:
                wr = wr - betas[r, j - 1] * basis[r, j - 1]
            prev = basis[r, : j + 1]
            for _ in range(2):
                wr = wr - prev.T @ (prev @ wr)
            beta = np.linalg.norm(wr)
            alphas[r, j] = alpha
            betas[r, j] = beta
            length[r] = j + 1
            scale[r] = max(scale[r], abs(alpha), beta)
            if j + 1 == iters or beta <= BREAKDOWN_TOL * scale[r]:
                active[r] = False
            else:
                basis[r, j + 1] = wr / beta

    out = []
    for r in range(runs):
        m = length[r]
        vals, weights = _ritz(alphas[r, :m], betas[r, : m - 1])
        out.append(
            RitzSpectrum(
                values=vals,
                weights=weights,
                alphas=alphas[r, :m].copy(),
                betas=betas[r, : m - 1].copy(),
                basis=basis[r, :m].copy() if keep_basis else None,
            )
        )
    return out


def lanczos(op: CurvatureOperator, iters: int = 100, seed: int = 0,
            keep_basis: bool = False) -> RitzSpectrum:
    """One Lanczos run from a normalized Gaussian start vector."""
    if iters > op.dim:
        raise ValueError(f"iters ({iters}) exceeds operator dimension ({op.dim})")
    start = np.random.default_rng(seed).standard_normal(op.dim)
    return lanczos_runs(op, iters, start[None, :], keep_basis=keep_basis)[0]


# --------------------------------------------------------------------------
# smoothed densities


@dataclass
class SpectralDensity:
    grid: np.ndarray
    density: np.ndarray
    sigma: float
    runs: list[RitzSpectrum] = field(default_factory=list, repr=False)

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))

    def ritz_points(self) -> list[dict]:
        """All runs' Ritz pairs as one mixture whose weights sum to one."""
        r = max(len(self.runs), 1)
        return [
            {"value": float(v), "weight": float(w) / r}
            for run in self.runs
            for v, w in zip(run.values, run.weights)
        ]


def default_sigma(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    return 0.01 * max(1.0, float(values.max() - values.min()))


def _gaussian_mixture(grid, centers, weights, sigma) -> np.ndarray:
    z = (grid[:, None] - centers[None, :]) / sigma
    return (np.exp(-0.5 * z * z) @ weights) / (sigma * np.sqrt(2.0 * np.pi))


def density_on_grid(grid, centers, weights, sigma) -> np.ndarray:
    """Gaussian-smoothed mixture on ``grid``, renormalized to unit trapezoid mass."""
    grid = np.asarray(grid, dtype=np.float64)
    dens = _gaussian_mixture(grid, np.asarray(centers, float), np.asarray(weights, float), sigma)
    mass = np.trapezoid(dens, grid)
    if not mass > 0:
        raise FloatingPointError("smoothed density has no mass on the grid")
    return dens / mass


def slq_density(op: CurvatureOperator, iters: int = 100, runs: int = 10, sigma: float | None = None,
                grid_points: int = 1024, seed: int = 0) -> SpectralDensity:
    """Average ``runs`` Lanczos quadratures and smooth them with a Gaussian kernel.

    Run ``r`` starts from the Gaussian vector drawn with child seed ``r`` of
    ``seed``. ``sigma`` defaults to ``0.01 * max(1, Ritz range)``; the grid
    spans the Ritz values plus three kernel widths on each side.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if grid_points < 2:
        raise ValueError("grid_points must be >= 2")
    if iters > op.dim:
        raise ValueError(f"iters ({iters}) exceeds operator dimension ({op.dim})")
    starts = np.stack([
        np.random.default_rng(child).standard_normal(op.dim)
        for child in np.random.SeedSequence(seed).spawn(runs)
    ])
    spectra = lanczos_runs(op, iters, starts)
    centers = np.concatenate([s.values for s in spectra])
    weights = np.concatenate([s.weights for s in spectra]) / runs
    if sigma is None:
        sigma = default_sigma(centers)
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    grid = np.linspace(centers.min() - 3 * sigma, centers.max() + 3 * sigma, grid_points)
    return SpectralDensity(grid=grid, density=density_on_grid(grid, centers, weights, sigma),
                           sigma=float(sigma), runs=spectra)


def exact_smoothed_density(eigenvalues, grid, sigma) -> np.ndarray:
    """Equal-weight smoothed spectrum on ``grid`` (the reference for SLQ)."""
    eigenvalues = np.asarray(eigenvalues, dtype=np.float64)
    return density_on_grid(grid, eigenvalues, np.full(eigenvalues.size, 1.0 / eigenvalues.size), sigma)


def l1_distance(grid, f, g) -> float:
    return float(np.trapezoid(np.abs(np.asarray(f) - np.asarray(g)), grid))


# --------------------------------------------------------------------------
# dense oracles


MAX_DENSE_DIM = 2000


def dense_spectrum_oracle(matrix) -> np.ndarray:
    """All eigenvalues (ascending) of an explicit symmetric matrix."""
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"matrix must be square, got {a.shape}")
    if a.shape[0] > MAX_DENSE_DIM:
        raise ValueError(f"dense oracle limited to dimension {MAX_DENSE_DIM}")
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > 1e-12:
        raise ValueError(f"matrix is not symmetric (max |A - A^T| = {asym:.3e})")
    return np.linalg.eigvalsh(a)


def random_symmetric_operator(dim: int, seed: int = 0) -> tuple[CurvatureOperator, np.ndarray]:
    """``A = (B + B^T) / 2`` with iid standard-normal ``B``; returns operator and matrix."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    b = np.random.default_rng(seed).standard_normal((dim, dim))
    a = (b + b.T) / 2.0
    return matrix_operator(a, label=f"random-symmetric-{dim}"), a


def stack_traces(estimates: Sequence[TraceEstimate]) -> np.ndarray:
    return np.array([e.mean for e in estimates])
