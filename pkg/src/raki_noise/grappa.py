"""GRAPPA: least-squares k-space interpolation kernels calibrated on ACS.

One kernel per missing-line offset ``r = 1..R-1`` maps the multi-coil
source lines around an aligned output line to all coils of the target
line ``p + delta_r``.  Source taps are dilated by ``R`` along ky so they
only ever touch acquired lines.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ConvKernel,
    aligned_residue,
    circ_conv2,
    comb_kspace,
    kernel_to_multiplier,
    kspace_shift,
    tap_offsets,
    target_shift,
)


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class GrappaKernels:
    R: int
    ncoils: int
    kernels: dict  # offset r -> ConvKernel [kx, ky, C, C]
    footprint: tuple[int, int]
    lam: float
    residuals: dict = field(default_factory=dict)

    @property
    def residue(self) -> int:
        return aligned_residue(list(self.kernels.values())[:1], self.R) if self.kernels else 0

    @property
    def shifts(self) -> dict:
        return {r: target_shift(r, self.residue, self.R) for r in self.kernels}


def _source_matrix(acs: np.ndarray, ox, oy, rows_y: np.ndarray) -> np.ndarray:
    # rows: every (x, p) with p in rows_y; columns: taps (i, j, coil) in C order
    nx = acs.shape[0]
    xs = (np.arange(nx)[:, None] + ox[None, :]) % nx  # [nx, kx]
    ys = rows_y[:, None] + oy[None, :]  # [np, ky]
    src = acs[xs[:, None, :, None], ys[None, :, None, :], :]  # [nx, np, kx, ky, C]
    return src.reshape(nx * len(rows_y), -1)


def calibrate(acs: np.ndarray, R: int, kx: int = 5, ky: int = 4, lam: float = 1e-6) -> GrappaKernels:
    """Fit GRAPPA kernels on a fully sampled ACS block ``[Nx, n_acs, C]``.

    Every ky position of the block whose sources and target fall inside it
    contributes one equation per readout column (circular along x).  The
    ridge weight is ``lam * trace(X^H X) / n_unknowns``.

    Raises
    ------
    CalibrationError
        If there are fewer than four equations per unknown, or the system is
        rank deficient and ``lam == 0``.
    """
    acs = np.asarray(acs, dtype=np.complex128)
    nx, nacs, nc = acs.shape
    if R == 1:
        return GrappaKernels(1, nc, {}, (kx, ky), lam)
    ox, oy = tap_offsets(kx, 1), tap_offsets(ky, R)
    proto = ConvKernel(np.zeros((kx, ky, nc, nc)), (1, R))
    q = aligned_residue([proto], R)
    kernels, residuals = {}, {}
    for r in range(1, R):
        d = target_shift(r, q, R)
        lo = max(-oy.min(), -d, 0)
        hi = min(nacs - oy.max(), nacs - d, nacs)
        rows_y = np.arange(lo, hi)
        n_unknown = kx * ky * nc
        n_eq = nx * len(rows_y)
        if n_eq < 4 * n_unknown:
            raise CalibrationError(
                f"offset {r}: {n_eq} equations for {n_unknown} unknowns per coil; need at least 4x (enlarge the ACS)"
            )
        X = _source_matrix(acs, ox, oy, rows_y)
        Y = acs[:, rows_y + d, :].reshape(n_eq, nc)
        if lam == 0:
            w, _, rank, _ = np.linalg.lstsq(X, Y, rcond=None)
            if rank < n_unknown:
                raise CalibrationError(f"offset {r}: calibration matrix rank {rank} < {n_unknown} with lam=0")
        else:
            gram = X.conj().T @ X
            reg = lam * np.real(np.trace(gram)) / n_unknown
            w = np.linalg.solve(gram + reg * np.eye(n_unknown), X.conj().T @ Y)
        residuals[r] = float(np.linalg.norm(X @ w - Y) / max(np.linalg.norm(Y), 1e-300))
        kernels[r] = ConvKernel(w.reshape(kx, ky, nc, nc), (1, R))
    return GrappaKernels(R, nc, kernels, (kx, ky), lam, residuals)


def infer_kspace(s0: np.ndarray, gk: GrappaKernels) -> np.ndarray:
    """Fill the missing lines of zero-filled ``s0``; comb lines pass through.

    Only lines ``ky % R == 0`` of ``s0`` are used; ACS lines off the comb are
    neither used as sources nor reinserted.
    """
    if s0.shape[-1] != gk.ncoils:
        raise CalibrationError(f"data has {s0.shape[-1]} coils, kernels {gk.ncoils}")
    comb = comb_kspace(s0, gk.R, 0)
    out = comb.copy()
    for r, kernel in gk.kernels.items():
        pred = kspace_shift(circ_conv2(comb, kernel), gk.shifts[r])
        out += comb_kspace(pred, gk.R, r)
    return out


def composite_kernel(gk: GrappaKernels) -> ConvKernel:
    """Single undilated kernel = unit delta + every offset kernel moved onto its target line.

    Applied to comb-only data it reproduces :func:`infer_kspace`: the
    contribution of kernel ``r`` reads acquired lines only at outputs
    ``ky % R == r``.
    """
    nc = gk.ncoils
    kx = gk.footprint[0]
    ox = tap_offsets(kx, 1)
    span = max([abs(int(o) - gk.shifts[r]) for r, k in gk.kernels.items() for o in k.offsets[1]], default=0)
    taps = np.zeros((kx, 2 * span + 1, nc, nc), dtype=np.complex128)
    taps[int(np.flatnonzero(ox == 0)[0]), span] += np.eye(nc)
    for r, k in gk.kernels.items():
        for j, o in enumerate(k.offsets[1]):
            taps[:, span + int(o) - gk.shifts[r]] += k.taps[:, j]
    return ConvKernel(taps, (1, 1))


def image_space_weights(gk: GrappaKernels, grid) -> np.ndarray:
    """Composite image-domain multiplier ``[Nx, Ny, C_in, C_out]``.

    ``apply_multiplier(idft2(comb_kspace(s0, R, 0)), w)`` equals
    ``idft2(infer_kspace(s0, gk))``.
    """
    if grid[1] % gk.R:
        raise CalibrationError(f"R={gk.R} must divide Ny={grid[1]}")
    if gk.R == 1:
        return np.broadcast_to(np.eye(gk.ncoils, dtype=np.complex128), tuple(grid) + (gk.ncoils,) * 2).copy()
    return kernel_to_multiplier(composite_kernel(gk), grid)
