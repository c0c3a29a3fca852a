"""Jacobians of the frozen image-space reconstruction.

With the activation masks frozen, each hidden layer is ``x -> K(M x)``:
a per-voxel channel mix ``M`` followed by a channelwise circular
convolution ``K``.  The unfolded output is the aliased input plus the
folded final multiplier applied to the last hidden layer, so

    J_int = I + W_fin K_H M_H ... K_1 M_1.

Rows are obtained in reverse mode by pushing unit cotangents through the
transposed layers, a batch of output rows at a time.  Each row of the
combined Jacobian ``p J_int`` needs one such pass, which is what makes
full-grid g-factor maps affordable.

Index layout: voxels are flattened in C order (``x * Ny + y``), Jacobians
are ``[N_out, C_out, N_in, C_in]`` and combined Jacobians ``[N_out, N_in, C_in]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imagespace import ImageSpaceParams, unfold
from .tensor import AXES

DEFAULT_BUDGET = 4 * 2**30


class BudgetError(MemoryError):
    pass


@dataclass(frozen=True)
class JacobianBlock:
    entries: np.ndarray  # [N_out, C_out, N_in, C_in]
    layer: str
    grid: tuple[int, int]


def layer_jacobian(params: ImageSpaceParams, n: int, budget: int = DEFAULT_BUDGET) -> JacobianBlock:
    """Dense Jacobian of hidden layer ``n`` (1-based), ``J[l,c;m,i] = w[m,i,c] K[l-m,c]``."""
    if not 1 <= n <= len(params.hidden_multipliers):
        raise IndexError(f"hidden layer {n} out of range 1..{len(params.hidden_multipliers)}")
    w = params.hidden_multipliers[n - 1]
    k = params.image_kernels[n - 1]
    nx, ny, cin, cout = w.shape
    N = nx * ny
    if N * N * cin * cout * 16 > budget:
        raise BudgetError(f"dense layer Jacobian needs {N * N * cin * cout * 16} bytes, budget {budget}")
    dx = (np.arange(nx)[:, None] - np.arange(nx)[None, :]) % nx  # [lx, mx]
    dy = (np.arange(ny)[:, None] - np.arange(ny)[None, :]) % ny
    kd = k[dx[:, None, :, None], dy[None, :, None, :]]  # [lx, ly, mx, my, c]
    kd = kd.reshape(N, N, cout)
    J = np.einsum("lmc,mic->lcmi", kd, w.reshape(N, cin, cout))
    return JacobianBlock(J, f"hidden{n}", (nx, ny))


class _Transposed:
    """Precomputed transposed layer operators for reverse-mode row extraction."""

    def __init__(self, params: ImageSpaceParams):
        self.params = params
        self.hidden_t = [np.ascontiguousarray(np.swapaxes(w, -1, -2)) for w in params.hidden_multipliers]
        # transpose of circular convolution with K: convolution with K[-l]
        self.kernel_t = [np.conj(np.fft.fft2(np.conj(k), axes=(0, 1))) for k in params.image_kernels]
        self.final_t = np.ascontiguousarray(np.swapaxes(params.folded_final, -1, -2)) if params.R > 1 else None
        self.width = max([params.ncoils] + [w.shape[-1] for w in params.hidden_multipliers])

    @staticmethod
    def _mix(g, wt):
        return (g[..., None, :] @ wt)[..., 0, :]

    def rows(self, seed: np.ndarray) -> np.ndarray:
        """``seed^T J_int`` for a batch of cotangents ``seed [B, Nx, Ny, C]``."""
        if self.final_t is None:
            return seed.copy()
        g = self._mix(seed, self.final_t)
        for wt, kt in zip(self.hidden_t[::-1], self.kernel_t[::-1]):
            g = np.fft.ifft2(np.fft.fft2(g, axes=AXES) * kt, axes=AXES)
            g = self._mix(g, wt)
        return seed + g


def _batch_size(tr: _Transposed, batch: int | None, budget: int) -> int:
    nx, ny = tr.params.grid
    per_row = 4 * nx * ny * tr.width * 16
    if per_row > budget:
        raise BudgetError(f"one output row needs about {per_row} bytes, budget is {budget}; use a smaller grid")
    fit = budget // per_row
    return int(max(1, min(fit, batch if batch else 64)))


def chain_jacobian(params: ImageSpaceParams, batch: int | None = None, budget: int = DEFAULT_BUDGET) -> np.ndarray:
    """Full ``J_int [N, C, N, C]`` including the aliased pass-through term."""
    tr = _Transposed(params)
    nx, ny = params.grid
    C = params.ncoils
    N = nx * ny
    if N * C * N * C * 16 > budget:
        raise BudgetError(f"dense J_int needs {N * C * N * C * 16} bytes, budget {budget}")
    J = np.empty((N, C, N, C), dtype=np.complex128)
    B = _batch_size(tr, batch, budget)
    rows = [(l, c) for l in range(N) for c in range(C)]
    for start in range(0, len(rows), B):
        chunk = rows[start : start + B]
        seed = np.zeros((len(chunk), nx, ny, C), dtype=np.complex128)
        for b, (l, c) in enumerate(chunk):
            seed[b, l // ny, l % ny, c] = 1.0
        out = tr.rows(seed).reshape(len(chunk), N, C)
        for b, (l, c) in enumerate(chunk):
            J[l, c] = out[b]
    return J


def combined_jacobian(params: ImageSpaceParams, p: np.ndarray, batch: int | None = None,
                      budget: int = DEFAULT_BUDGET, voxels=None) -> np.ndarray:
    """Rows of ``J_acc = p J_int`` as ``[n_vox, N, C]``; all voxels unless ``voxels`` is given."""
    tr = _Transposed(params)
    nx, ny = params.grid
    C = params.ncoils
    N = nx * ny
    p = np.asarray(p).reshape(N, C)
    vox = np.arange(N) if voxels is None else np.asarray(voxels)
    J = np.empty((len(vox), N, C), dtype=np.complex128)
    B = _batch_size(tr, batch, budget)
    for start in range(0, len(vox), B):
        chunk = vox[start : start + B]
        seed = np.zeros((len(chunk), N, C), dtype=np.complex128)
        seed[np.arange(len(chunk)), chunk] = p[chunk]
        J[start : start + len(chunk)] = tr.rows(seed.reshape(len(chunk), nx, ny, C)).reshape(len(chunk), N, C)
    return J


def apply_combine(J_int: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Contract the output-coil axis of ``J_int [N, C, N, C]`` with ``p [N, C]``."""
    N, C = J_int.shape[:2]
    p = np.asarray(p)
    if p.size != N * C:
        raise ValueError(f"p has {p.size} entries, expected {N}x{C}")
    return np.einsum("lc,lcmi->lmi", p.reshape(N, C), J_int)


def frozen_map(params: ImageSpaceParams):
    """Aliased coil images -> unfolded coil images with frozen masks."""
    return lambda x: unfold(x, params)


@dataclass(frozen=True)
class FDJacobian:
    """Central-difference responses to real (``re``) and imaginary (``im``) input steps.

    Both are ``[N_out, C_out, N_in, C_in]``.  For a complex-linear map
    ``im == 1j * re`` and ``re`` is the complex Jacobian.
    """

    re: np.ndarray
    im: np.ndarray
    mode: str

    @property
    def complex(self) -> np.ndarray:
        return 0.5 * (self.re - 1j * self.im)

    @property
    def anti(self) -> np.ndarray:
        """Conjugate-linear part; zero for complex-linear maps."""
        return 0.5 * (self.re + 1j * self.im)


def fd_jacobian(fn, x0: np.ndarray, h: float = 1e-5, mode: str = "frozen", batch: int = 32) -> FDJacobian:
    """Central finite differences of ``fn`` at ``x0 [Nx, Ny, C]``.

    ``fn`` must accept a leading batch axis.  ``mode`` only tags the result:
    pass :func:`frozen_map` for the frozen linearisation or a function
    rerunning the k-space network for the true branch behaviour.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    nx, ny, C = x0.shape
    n_in = nx * ny * C
    cols = {}
    for name, step in (("re", h), ("im", 1j * h)):
        out = None
        for start in range(0, n_in, batch):
            idx = np.arange(start, min(start + batch, n_in))
            pert = np.zeros((len(idx), n_in), dtype=np.complex128)
            pert[np.arange(len(idx)), idx] = step
            pert = pert.reshape(len(idx), nx, ny, C)
            diff = (fn(x0 + pert) - fn(x0 - pert)) / (2 * h)
            if out is None:
                out = np.empty((n_in,) + diff.shape[1:], dtype=np.complex128)
            out[idx] = diff
        n_out = out[0].size
        cols[name] = np.moveaxis(out.reshape(n_in, n_out), 0, 1).reshape(
            nx * ny, n_out // (nx * ny), nx * ny, C
        )
    return FDJacobian(cols["re"], cols["im"], mode)
