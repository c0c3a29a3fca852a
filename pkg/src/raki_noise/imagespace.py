"""RAKI inference carried out entirely on coil images.

Every k-space correlation becomes a per-voxel channel-mixing multiplier
and every CLReLU becomes an elementwise product with a complex activation
mask ``A`` measured on the target data.  In image space that product is a
full-grid circular convolution with the mask's image kernel.  Once the
masks are frozen the map from aliased coil images to unfolded coil images
is exactly linear.

Reassembly works on folded images: the network only ever sees comb data,
so each offset channel already lives on a single residue class of ky and
moving it to its target lines is a phase ramp.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .phantom import Dataset, roi_mask, rss
from .raki import TrainedNetwork, clrelu_masks, forward
from .tensor import (
    apply_multiplier,
    comb_kspace,
    idft2,
    image_conv,
    image_phase_ramp,
    kernel_to_multiplier,
    mask_to_image_kernel,
)

MASK_EPS = 1e-12


class FingerprintError(ValueError):
    pass


def fingerprint(s0: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(s0, dtype=np.complex128).tobytes()).hexdigest()


def activation_mask(pre: np.ndarray, a: float, eps: float = MASK_EPS) -> np.ndarray:
    """Complex mask with ``pre * A == clrelu(pre)`` wherever ``|pre|`` is not negligible.

    Voxels below ``eps * max|pre|`` get ``A = 1``.
    """
    m_re, m_im = clrelu_masks(pre, a)
    mag2 = np.abs(pre) ** 2
    floor = (eps * np.abs(pre).max()) ** 2 if pre.size else 0.0
    small = mag2 <= floor
    out = (m_re * pre.real + 1j * m_im * pre.imag) * pre.conj() / np.where(small, 1.0, mag2)
    return np.where(small, 1.0, out)


@dataclass(frozen=True)
class ActivationMaskSet:
    masks: list  # per hidden layer, k-space form [..., Nx, Ny, Cn]
    image_kernels: list  # per hidden layer, image kernel with origin at index 0
    fingerprint: str
    slope: float


def extract_masks(pre_activations: list, a: float, source: np.ndarray | None = None, identity: bool = False) -> ActivationMaskSet:
    """Activation masks and their image kernels from hidden-layer pre-activations."""
    if identity:
        masks = [np.ones_like(p) for p in pre_activations]
    else:
        masks = [activation_mask(p, a) for p in pre_activations]
    fp = "" if source is None else fingerprint(source)
    return ActivationMaskSet(masks, [mask_to_image_kernel(m) for m in masks], fp, a)


def masks_for(net: TrainedNetwork, s0: np.ndarray) -> ActivationMaskSet:
    """Run the k-space network on the comb lines of ``s0`` and freeze its masks."""
    comb = comb_kspace(s0, net.R, 0)
    _, pre = forward(comb, net)
    return extract_masks(pre, net.spec.slope, source=s0, identity=net.spec.activation == "identity")


@dataclass(frozen=True)
class ImageSpaceParams:
    R: int
    ncoils: int
    hidden_multipliers: list  # [Nx, Ny, Cin, Cout] per hidden layer
    image_kernels: list  # [Nx, Ny, Cn] per hidden layer
    final_multiplier: np.ndarray  # [Nx, Ny, Chid, C*(R-1)]
    shifts: dict
    combine: np.ndarray | None  # p [Nx, Ny, C]
    fingerprint: str

    @property
    def grid(self) -> tuple[int, int]:
        return self.final_multiplier.shape[:2]

    @property
    def folded_final(self) -> np.ndarray:
        """Final multiplier with reassembly folded in: ``[Nx, Ny, Chid, C]``."""
        nx, ny = self.grid
        out = np.zeros((nx, ny, self.final_multiplier.shape[2], self.ncoils), dtype=np.complex128)
        for r, d in self.shifts.items():
            ch = [c * (self.R - 1) + (r - 1) for c in range(self.ncoils)]
            out += self.final_multiplier[..., ch] * image_phase_ramp(d, ny)[..., None]
        return out


def to_image_space(net: TrainedNetwork, masks: ActivationMaskSet, grid, combine=None) -> ImageSpaceParams:
    """Transfer kernels and frozen masks to their image-domain counterparts on ``grid``."""
    grid = tuple(int(g) for g in grid)
    if len(masks.masks) != len(net.hidden):
        raise ValueError(f"{len(masks.masks)} masks for {len(net.hidden)} hidden layers")
    for m, k in zip(masks.masks, net.hidden):
        if m.shape[-3:] != grid + (k.cout,):
            raise ValueError(f"mask shape {m.shape} does not match grid {grid} with {k.cout} channels")
    hidden = [kernel_to_multiplier(k, grid) for k in net.hidden]
    final = kernel_to_multiplier(net.final, grid)
    return ImageSpaceParams(net.R, net.ncoils, hidden, list(masks.image_kernels), final, net.shifts, combine, masks.fingerprint)


def hidden_image_stack(x0: np.ndarray, params: ImageSpaceParams) -> list:
    """Image-space layer outputs ``[x0, S_1, ..., S_Nhid]``."""
    out = [x0]
    for w, k in zip(params.hidden_multipliers, params.image_kernels):
        out.append(image_conv(apply_multiplier(out[-1], w), k))
    return out


def unfold(x0: np.ndarray, params: ImageSpaceParams) -> np.ndarray:
    """Unfolded coil images from aliased coil images ``x0 [..., Nx, Ny, C]``."""
    if params.R == 1:
        return x0.copy()
    last = hidden_image_stack(x0, params)[-1]
    return x0 + apply_multiplier(last, params.folded_final)


def combine(images: np.ndarray, p: np.ndarray) -> np.ndarray:
    return np.sum(p * images, axis=-1)


def infer_image_space(x0: np.ndarray, params: ImageSpaceParams, source: np.ndarray | None = None):
    """Unfolded coil images and (if weights are set) the combined image.

    ``source`` is the k-space data the caller claims ``x0`` came from; when
    given it must match the data the masks were measured on.
    """
    if source is not None and params.fingerprint and fingerprint(source) != params.fingerprint:
        raise FingerprintError("activation masks were measured on different data")
    unf = unfold(x0, params)
    return unf, (None if params.combine is None else combine(unf, params.combine))


def reconstruct_image_space(s0: np.ndarray, net: TrainedNetwork, p=None):
    """Full image-space pipeline for zero-filled k-space ``s0``."""
    masks = masks_for(net, s0)
    params = to_image_space(net, masks, s0.shape[-3:-1], p)
    x0 = idft2(comb_kspace(s0, net.R, 0))
    return infer_image_space(x0, params, source=s0) + (params,)


def effective_multiplier(params: ImageSpaceParams) -> np.ndarray:
    """Single per-voxel operator ``[Nx, Ny, C, C]`` of a network without activations.

    Only defined when every image kernel is a unit delta (identity activation).
    """
    for k in params.image_kernels:
        delta = np.zeros_like(k)
        delta[0, 0] = 1.0
        if not np.allclose(k, delta, rtol=0, atol=1e-13):
            raise ValueError("network has active nonlinear masks; no single multiplier exists")
    nx, ny = params.grid
    eye = np.broadcast_to(np.eye(params.ncoils, dtype=np.complex128), (nx, ny, params.ncoils, params.ncoils))
    if params.R == 1:
        return eye.copy()
    prod = eye
    for w in params.hidden_multipliers:
        prod = prod @ w
    return eye + prod @ params.folded_final


def coil_combine_weights(d: Dataset, roi=None) -> np.ndarray:
    """Unit-gain SENSE-like weights ``conj(s) / sum|s|^2``; unit-norm RSS weights outside the ROI."""
    sens = d.sensitivities
    roi = roi_mask(d) if roi is None else roi
    energy = np.sum(np.abs(sens) ** 2, axis=-1)
    if np.any(energy[roi] <= 1e-12 * energy.max()):
        raise ValueError("coil sensitivities vanish at a voxel inside the ROI")
    norm = rss(sens)
    fallback = sens.conj() / np.where(norm > 0, norm, 1.0)[..., None]
    inside = sens.conj() / np.where(energy > 0, energy, 1.0)[..., None]
    return np.where(roi[..., None], inside, fallback)
