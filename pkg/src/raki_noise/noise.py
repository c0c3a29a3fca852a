"""Noise amplification estimators: analytical, pseudo-replica, normality.

The analytical route propagates white k-space noise through the
combined Jacobian.  Noise on an undersampled acquisition lives only on
the comb lines, so the aliased coil images carry noise ``P Sigma P`` where
``P`` is the Hermitian projection onto comb data; the projection is
applied to the Jacobian rows before the quadratic form.

Monte-Carlo replicas use one independent RNG stream per replica so the
result does not depend on chunking or thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import kolmogorov, ndtr

from .tensor import comb_image

METHODS = ("analytical", "monte-carlo", "finite-difference")


@dataclass(frozen=True)
class GFactorMap:
    values: np.ndarray  # [Nx, Ny]
    method: str
    R: int
    roi: np.ndarray | None = None
    degenerate: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown g-factor method {self.method!r}")

    def in_roi(self) -> np.ndarray:
        return self.values[self.roi] if self.roi is not None else self.values.ravel()


def _check_cov(cov, C):
    cov = np.eye(C) if cov is None else np.asarray(cov, dtype=np.complex128)
    if cov.shape != (C, C):
        raise ValueError(f"covariance must be {C}x{C}")
    if not np.allclose(cov, cov.conj().T, atol=1e-12 * max(1.0, np.abs(cov).max())):
        raise ValueError("covariance is not Hermitian")
    if np.linalg.eigvalsh(cov).min() < -1e-12 * np.abs(cov).max():
        raise ValueError("covariance is not positive semi-definite")
    return cov


def _quad(rows, cov):
    # sum over input voxels of row Sigma row^H, real part checked by caller
    return np.einsum("vmi,ij,vmj->v", rows, cov, rows.conj())


def project_rows(J_acc: np.ndarray, grid, R: int) -> np.ndarray:
    """Rows of ``J_acc [n, N, C]`` right-multiplied by the comb projection."""
    nx, ny = grid
    n, N, C = J_acc.shape
    rows = J_acc.reshape(n, nx, ny, C)
    return np.conj(comb_image(np.conj(rows), R, 0)).reshape(n, N, C)


def accelerated_variance(J_acc: np.ndarray, grid, R: int, cov=None, aliasing: bool = True) -> np.ndarray:
    """Per-voxel complex noise variance of the combined reconstruction."""
    cov = _check_cov(cov, J_acc.shape[-1])
    rows = project_rows(J_acc, grid, R) if aliasing else J_acc
    var = _quad(rows, cov)
    if np.any(np.abs(var.imag) > 1e-10 * np.maximum(np.abs(var.real), 1e-300)):
        raise FloatingPointError("variance has a non-negligible imaginary part")
    return var.real


def full_variance(p: np.ndarray, cov=None) -> np.ndarray:
    """``p Sigma p^H`` per voxel for the fully sampled reference."""
    C = p.shape[-1]
    cov = _check_cov(cov, C)
    return np.einsum("...i,ij,...j->...", p, cov, p.conj()).real


def gfactor_from_variances(var_acc, var_full, R: int, roi=None) -> np.ndarray:
    var_full = np.asarray(var_full)
    if roi is not None and np.any(var_full[roi] <= 0):
        raise ValueError("zero reference variance inside the ROI")
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.sqrt(np.asarray(var_acc) / var_full) / np.sqrt(R)


def gfactor_analytical(J_acc: np.ndarray, p: np.ndarray, R: int, cov=None, roi=None,
                       method: str = "analytical") -> GFactorMap:
    """g-factor map from combined Jacobian rows ``J_acc [N, N, C]`` and weights ``p [Nx, Ny, C]``."""
    grid = p.shape[:2]
    if J_acc.shape[0] != grid[0] * grid[1]:
        raise ValueError("need one Jacobian row per voxel")
    var_acc = accelerated_variance(J_acc, grid, R, cov).reshape(grid)
    var_full = full_variance(p, cov)
    return GFactorMap(gfactor_from_variances(var_acc, var_full, R, roi), method, R, roi)


def real_linear_variance(A: np.ndarray, B: np.ndarray, cov=None) -> np.ndarray:
    """Variance for rows that respond ``A`` to real and ``B`` to imaginary input steps.

    The response splits into a complex-linear part ``(A - iB)/2`` and a
    conjugate-linear part ``(A + iB)/2``; for circular noise their
    contributions add.
    """
    cov = _check_cov(cov, A.shape[-1])
    lin, anti = 0.5 * (A - 1j * B), 0.5 * (A + 1j * B)
    return (_quad(lin, cov) + _quad(anti, cov.conj())).real


# --- Monte Carlo --------------------------------------------------------


def replica_noise(seed: int, index: int, stream: int, shape, sigma: float) -> np.ndarray:
    """Complex white noise with ``E|n|^2 = sigma^2`` from a dedicated stream."""
    rng = np.random.default_rng([int(seed), int(stream), int(index)])
    return sigma * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


@dataclass
class ReplicaStack:
    images: np.ndarray  # [n, Nx, Ny] complex combined images
    seed: int
    stream: int
    mode: str
    sigma: float

    def __post_init__(self):
        if self.images.shape[0] < 2:
            raise ValueError("a replica stack needs at least two replicas")

    @property
    def n(self) -> int:
        return self.images.shape[0]

    def magnitude_stats(self) -> tuple[np.ndarray, np.ndarray]:
        mag = np.abs(self.images)
        return mag.mean(axis=0), mag.var(axis=0, ddof=1)


def run_replicas(recon, kspace: np.ndarray, n: int, sigma: float, seed: int, stream: int = 0,
                 mode: str = "frozen", chunk: int = 25, threads: int = 1, noise_mask=None) -> ReplicaStack:
    """Reconstruct ``n`` noisy copies of ``kspace [Nx, Ny, C]``.

    ``recon`` maps a batch of k-space arrays ``[B, Nx, Ny, C]`` to combined
    images ``[B, Nx, Ny]``.  ``noise_mask`` (broadcastable to ``kspace``)
    restricts noise to the acquired samples.
    """
    if n < 2:
        raise ValueError("need at least two replicas")
    shape = kspace.shape
    out = np.empty((n,) + shape[:2], dtype=np.complex128)

    def job(start):
        idx = range(start, min(start + chunk, n))
        batch = np.stack([kspace + replica_noise(seed, i, stream, shape, sigma) for i in idx])
        if noise_mask is not None:
            batch = np.where(noise_mask, batch, 0)
        res = recon(batch)
        if not np.all(np.isfinite(res)):
            bad = start + int(np.flatnonzero(~np.all(np.isfinite(res.reshape(len(res), -1)), axis=1))[0])
            raise FloatingPointError(f"replica {bad} produced non-finite output")
        out[start : start + len(res)] = res

    starts = range(0, n, chunk)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(job, starts))
    else:
        for s in starts:
            job(s)
    return ReplicaStack(out, seed, stream, mode, sigma)


def gfactor_montecarlo(acc: ReplicaStack, full: ReplicaStack, R: int, roi=None) -> tuple[GFactorMap, dict]:
    """g from magnitude variances of matched accelerated and fully sampled stacks."""
    if acc.seed == full.seed and acc.stream == full.stream:
        raise ValueError("accelerated and reference stacks share a noise stream")
    mean_acc, var_acc = acc.magnitude_stats()
    _, var_full = full.magnitude_stats()
    degenerate = bool(np.all(var_acc == 0) or np.all(var_full == 0))
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.sqrt(var_acc / var_full) / np.sqrt(R)
        snr = mean_acc / np.sqrt(var_acc)
    if degenerate:
        g = np.full_like(g, np.nan)
    maps = {"variance": var_acc, "variance_full": var_full, "snr": snr, "mean": mean_acc}
    return GFactorMap(g, "monte-carlo", R, roi, degenerate, {"mode": acc.mode, "n": acc.n}), maps


# --- normality ---------------------------------------------------------


@dataclass(frozen=True)
class NormalityReport:
    D: np.ndarray
    p: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    degenerate: np.ndarray
    roi: np.ndarray | None = None

    @property
    def passing(self) -> np.ndarray:
        return self.p > 0.05

    @property
    def fraction(self) -> float:
        ok = ~self.degenerate if self.roi is None else (~self.degenerate & self.roi)
        return float(self.passing[ok].mean()) if ok.any() else float("nan")


def ks_statistic(samples: np.ndarray, mu, sigma) -> np.ndarray:
    """Two-sided one-sample KS distance to ``N(mu, sigma^2)`` along axis 0."""
    n = samples.shape[0]
    x = np.sort(samples, axis=0)
    cdf = ndtr((x - mu) / sigma)
    i = np.arange(1, n + 1).reshape((n,) + (1,) * (samples.ndim - 1))
    return np.maximum((i / n - cdf).max(axis=0), (cdf - (i - 1) / n).max(axis=0))


def ks_normality(samples: np.ndarray, roi=None, mu=None, sigma=None) -> NormalityReport:
    """Per-voxel KS test of ``samples [n, ...]`` against a normal law.

    By default the mean and standard deviation are fitted on the same
    samples and the asymptotic Kolmogorov p-value is used without
    correction, which makes the test conservative.  Passing ``mu`` and
    ``sigma`` tests against a fully specified normal instead.
    """
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[0]
    if n < 50:
        raise ValueError(f"need at least 50 samples, got {n}")
    mu_hat = samples.mean(axis=0) if mu is None else np.broadcast_to(mu, samples.shape[1:])
    sd_hat = samples.std(axis=0, ddof=1) if sigma is None else np.broadcast_to(sigma, samples.shape[1:])
    degenerate = ~(sd_hat > 0)
    safe = np.where(degenerate, 1.0, sd_hat)
    D = ks_statistic(samples, mu_hat, safe)
    p = kolmogorov(np.sqrt(n) * D)
    D = np.where(degenerate, np.nan, D)
    p = np.where(degenerate, np.nan, p)
    return NormalityReport(D, p, np.asarray(mu_hat), np.asarray(sd_hat), degenerate, roi)
