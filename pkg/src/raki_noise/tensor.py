"""Complex multichannel 2D tensor algebra.

All grids are laid out as ``[..., Nx, Ny, C]`` with ``ky`` (the
phase-encode, undersampled direction) on axis -2; leading axes are batch
axes (replicas, perturbations).  k-space is *centered*: the DC
coefficient of an ``N``-point axis sits at index ``N // 2``.  Grid sizes
must be even so that ``fftshift`` and ``ifftshift`` coincide.

Two convolution flavours appear in this package:

* k-space kernels (:class:`ConvKernel`) act by circular *correlation*
  ``y[p] = sum_j w[j] s[p + o_j]`` where ``o_j`` are the (dilated) tap
  offsets, as in CNN layers.
* image-domain kernels (activation masks) act by circular *convolution*
  ``y[l] = sum_m x[m] K[(l - m) mod N]`` with the kernel origin at index 0.
  This is the circulant form whose matrix is ``K[l - m]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

AXES = (-3, -2)


class TensorError(ValueError):
    """Raised for malformed grids, kernels or noise models."""


def check_finite(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise TensorError(f"{name} contains {bad} non-finite entries")
    return x


def check_grid(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if x.ndim != 3:
        raise TensorError(f"{name} must have shape [Nx, Ny, C], got {x.shape}")
    nx, ny, nc = x.shape
    if nx < 2 or ny < 2 or nc < 1:
        raise TensorError(f"{name} grid too small: {x.shape}")
    if nx % 2 or ny % 2:
        raise TensorError(f"{name} grid must have even Nx, Ny, got {x.shape[:2]}")
    return check_finite(x, name)


def dft2(x: np.ndarray) -> np.ndarray:
    """Centered unitary 2D DFT over the grid axes (image -> k-space)."""
    check_finite(x, "dft2 input")
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(x, axes=AXES), axes=AXES, norm="ortho"), axes=AXES)


def idft2(x: np.ndarray) -> np.ndarray:
    """Centered unitary 2D inverse DFT over the grid axes."""
    check_finite(x, "idft2 input")
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(x, axes=AXES), axes=AXES, norm="ortho"), axes=AXES)


def tap_offsets(size: int, dilation: int) -> np.ndarray:
    """Offsets of a dilated kernel's taps around its anchor.

    The anchor is the middle of the dilated footprint (lower middle for
    even footprints), so ``size=3, dilation=1`` gives ``[-1, 0, 1]`` and
    ``size=2, dilation=4`` gives ``[-2, 2]``.
    """
    return np.arange(size) * dilation - ((size - 1) * dilation) // 2


@dataclass(frozen=True)
class ConvKernel:
    """Complex k-space kernel with taps ``[kx, ky, Cin, Cout]``."""

    taps: np.ndarray
    dilation: tuple[int, int] = (1, 1)

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.complex128)
        if taps.ndim != 4:
            raise TensorError(f"kernel taps must be [kx, ky, Cin, Cout], got {taps.shape}")
        dx, dy = (int(d) for d in self.dilation)
        if dx < 1 or dy < 1:
            raise TensorError(f"dilation must be positive, got {self.dilation}")
        check_finite(taps, "kernel taps")
        object.__setattr__(self, "taps", taps)
        object.__setattr__(self, "dilation", (dx, dy))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.taps.shape

    @property
    def cin(self) -> int:
        return self.taps.shape[2]

    @property
    def cout(self) -> int:
        return self.taps.shape[3]

    @property
    def footprint(self) -> tuple[int, int]:
        kx, ky = self.taps.shape[:2]
        return (kx - 1) * self.dilation[0] + 1, (ky - 1) * self.dilation[1] + 1

    @property
    def offsets(self) -> tuple[np.ndarray, np.ndarray]:
        kx, ky = self.taps.shape[:2]
        return tap_offsets(kx, self.dilation[0]), tap_offsets(ky, self.dilation[1])

    def check_fits(self, grid: tuple[int, int]) -> None:
        fx, fy = self.footprint
        if fx > grid[0] or fy > grid[1]:
            raise TensorError(f"kernel footprint {self.footprint} exceeds grid {tuple(grid)}")


def circ_conv2(s: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    """Circular multichannel correlation of ``s [..., Nx, Ny, Cin]`` with ``kernel``."""
    if s.ndim < 3:
        raise TensorError(f"input must be [..., Nx, Ny, C], got {s.shape}")
    if s.shape[-1] != kernel.cin:
        raise TensorError(f"channel mismatch: input has {s.shape[-1]}, kernel expects {kernel.cin}")
    kernel.check_fits(s.shape[-3:-1])
    ox, oy = kernel.offsets
    out = np.zeros(s.shape[:-1] + (kernel.cout,), dtype=np.complex128)
    for i, dx in enumerate(ox):
        for j, dy in enumerate(oy):
            out += np.roll(s, (-dx, -dy), axis=AXES) @ kernel.taps[i, j]
    return out


def _axis_phase(offsets: np.ndarray, n: int) -> np.ndarray:
    # image-domain factor of a k-space roll by -offset, shape [n, len(offsets)]
    coord = np.arange(n) - n // 2
    return np.exp(-2j * np.pi * np.outer(coord, offsets) / n)


def kernel_to_multiplier(kernel: ConvKernel, grid: tuple[int, int]) -> np.ndarray:
    """Image-domain multiplier ``[Nx, Ny, Cin, Cout]`` of a k-space kernel.

    Equivalent to zero-padding the dilated kernel onto the grid around its
    anchor and taking the (sqrt(N)-rescaled) inverse DFT, so that
    ``idft2(circ_conv2(s, w))[..., o] == sum_i idft2(s)[..., i] * m[..., i, o]``.
    """
    nx, ny = grid
    kernel.check_fits((nx, ny))
    ox, oy = kernel.offsets
    return np.einsum("xi,yj,ijab->xyab", _axis_phase(ox, nx), _axis_phase(oy, ny), kernel.taps)


def apply_multiplier(x: np.ndarray, multiplier: np.ndarray) -> np.ndarray:
    """Per-voxel channel mixing ``y[l, o] = sum_i x[l, i] m[l, i, o]``.

    ``x`` may carry extra leading batch axes: ``[..., Nx, Ny, Cin]``.
    """
    lead = x.shape[:-3]
    nx, ny, cin = x.shape[-3:]
    # voxel-major layout turns the batch into one small GEMM per voxel
    xt = np.moveaxis(x.reshape((-1, nx, ny, cin)), 0, 2)
    out = np.matmul(xt, multiplier)
    return np.moveaxis(out, 2, 0).reshape(lead + (nx, ny, multiplier.shape[-1]))


def mask_to_image_kernel(mask: np.ndarray) -> np.ndarray:
    """Image-domain circular-convolution kernel of a k-space elementwise mask.

    The kernel has its origin at index 0 and satisfies
    ``idft2(s * mask) == image_conv(idft2(s), kernel)``.  The 1/sqrt(N)
    of the unitary product theorem is absorbed here.
    """
    check_finite(mask, "activation mask")
    return np.fft.ifft2(np.fft.ifftshift(mask, axes=AXES), axes=AXES)


def image_conv(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Channelwise full-grid circular convolution, ``x [..., Nx, Ny, C]``.

    ``kernel`` is ``[Nx, Ny, C]`` with origin at index 0.  Evaluated through
    the DFT diagonalisation of the circulant matrix ``K[l - m]``.
    """
    return np.fft.ifft2(np.fft.fft2(x, axes=AXES) * np.fft.fft2(kernel, axes=AXES), axes=AXES)


def circulant(kernel_1ch: np.ndarray) -> np.ndarray:
    """Dense ``[N, N]`` circulant matrix ``T[l, m] = K[(l - m) mod N]`` of a 2D kernel.

    Voxels are flattened in C order (``index = x * Ny + y``).
    """
    nx, ny = kernel_1ch.shape
    lx, ly = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    lx, ly = lx.ravel(), ly.ravel()
    return kernel_1ch[(lx[:, None] - lx[None, :]) % nx, (ly[:, None] - ly[None, :]) % ny]


def kspace_shift(s: np.ndarray, delta: int) -> np.ndarray:
    """Move k-space lines by ``delta`` along ky: ``out[:, k] = s[:, k - delta]``."""
    return np.roll(s, delta, axis=-2)


def image_phase_ramp(delta: int, ny: int) -> np.ndarray:
    """Image-domain equivalent of :func:`kspace_shift`, shape ``[1, Ny, 1]``."""
    coord = np.arange(ny) - ny // 2
    return np.exp(2j * np.pi * delta * coord / ny)[None, :, None]


def _check_comb(ny: int, R: int, r: int) -> None:
    if R < 1 or not 0 <= r < R:
        raise TensorError(f"need 0 <= r < R, got R={R}, r={r}")
    if ny % R:
        raise TensorError(f"R={R} does not divide Ny={ny}")


def comb_kspace(s: np.ndarray, R: int, r: int) -> np.ndarray:
    """Keep k-space lines with ``ky % R == r`` (ky on axis -2), zero the rest."""
    ny = s.shape[-2]
    _check_comb(ny, R, r)
    keep = (np.arange(ny) % R == r)[:, None]
    return np.where(keep, s, 0)


def comb_image(x: np.ndarray, R: int, r: int) -> np.ndarray:
    """Image-domain form of :func:`comb_kspace`.

    A circular convolution with an R-peak comb along y: the average of the
    image and its ``Ny/R``-shifted copies, each carrying a linear phase.
    """
    ny = x.shape[-2]
    _check_comb(ny, R, r)
    step = ny // R
    out = np.zeros_like(x, dtype=np.complex128)
    for t in range(R):
        phase = np.exp(-2j * np.pi * t * r / R + 1j * np.pi * t * step)
        out += phase * np.roll(x, -t * step, axis=-2)
    return out / R


@dataclass(frozen=True)
class NoiseModel:
    """Coil noise covariance with its Cholesky and whitening factors.

    ``chol`` is lower triangular with ``chol @ chol^H == covariance``;
    ``whitening = inv(chol)`` (also lower triangular) so that
    ``whitening @ covariance @ whitening^H == I``.
    """

    covariance: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)
    whitening: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=np.complex128)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise TensorError(f"covariance must be square, got {cov.shape}")
        check_finite(cov, "covariance")
        scale = max(np.abs(cov).max(), 1e-300)
        if np.abs(cov - cov.conj().T).max() > 1e-12 * scale:
            raise TensorError("covariance is not Hermitian")
        eig = np.linalg.eigvalsh(cov)
        if eig.min() < -1e-12 * scale:
            raise TensorError(f"covariance is not PSD (min eigenvalue {eig.min():.3g})")
        if eig.min() <= 1e-14 * scale:
            raise TensorError("covariance is singular; cannot whiten")
        chol = np.linalg.cholesky(cov)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "chol", chol)
        object.__setattr__(self, "whitening", np.linalg.inv(chol))

    @property
    def ncoils(self) -> int:
        return self.covariance.shape[0]

    @classmethod
    def identity(cls, ncoils: int) -> "NoiseModel":
        return cls(np.eye(ncoils))

    @classmethod
    def exponential(cls, ncoils: int, rho: float) -> "NoiseModel":
        """Covariance ``rho ** |i - j|``."""
        idx = np.arange(ncoils)
        return cls(float(rho) ** np.abs(idx[:, None] - idx[None, :]))


def prewhiten(s: np.ndarray, noise_model: NoiseModel) -> np.ndarray:
    """Mix coil channels (last axis) with the whitening factor."""
    if s.shape[-1] != noise_model.ncoils:
        raise TensorError(f"channel mismatch: data has {s.shape[-1]}, noise model {noise_model.ncoils}")
    return s @ noise_model.whitening.T


def color(s: np.ndarray, noise_model: NoiseModel) -> np.ndarray:
    """Inverse of :func:`prewhiten`."""
    return s @ noise_model.chol.T


def aligned_residue(kernels, R: int) -> int:
    """ky residue (mod R) of output lines whose receptive field sits on the comb.

    Every kernel in the stack must have all its ky taps on one residue
    class, i.e. ky size 1 or ky dilation R.  Feeding comb-only data
    (lines ``ky % R == 0``) through the stack then produces nonzero output
    only on lines ``ky % R == q``.
    """
    q = 0
    for k in kernels:
        ky = k.taps.shape[1]
        if ky > 1 and k.dilation[1] % R:
            raise TensorError(f"ky taps of a {k.shape} kernel with dilation {k.dilation} straddle the R={R} comb")
        q -= int(k.offsets[1][0])
    return q % R


def target_shift(r: int, q: int, R: int) -> int:
    """Line shift from an aligned output line (residue ``q``) to its offset-``r`` target.

    Chosen in ``[-R // 2, R - R // 2)`` so predictions land next to their sources.
    """
    return (r - q + R // 2) % R - R // 2
