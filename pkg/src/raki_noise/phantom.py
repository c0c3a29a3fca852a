"""Synthetic multi-coil acquisitions with known ground truth.

An ellipse-composite object with a smooth phase is weighted by Gaussian
coil lobes placed on a ring around the field of view, transformed to
k-space and corrupted with correlated complex Gaussian noise.  Sampling
patterns keep every R-th ky line plus a centered block of
auto-calibration (ACS) lines.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .tensor import NoiseModel, TensorError, dft2, idft2, prewhiten

# (center x, center y, semi-axis x, semi-axis y, angle [deg], added intensity)
DEFAULT_ELLIPSES = (
    (0.0, 0.0, 0.78, 0.62, 0.0, 1.0),
    (0.0, 0.0, 0.72, 0.56, 0.0, -0.35),
    (-0.28, 0.20, 0.20, 0.12, 30.0, 0.35),
    (0.30, 0.18, 0.14, 0.20, -20.0, 0.25),
    (0.05, -0.25, 0.26, 0.10, 10.0, -0.2),
    (-0.20, -0.22, 0.06, 0.06, 0.0, 0.4),
    (0.35, -0.10, 0.05, 0.09, 0.0, 0.3),
)


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    """Everything needed to regenerate a dataset bit-for-bit."""

    grid: tuple[int, int] = (64, 64)
    ncoils: int = 8
    noise_level: float = 1.0
    rho: float = 0.2
    amplitude: float = 60.0
    coil_radius: float = 1.25
    coil_width: float = 0.75
    ellipses: tuple = DEFAULT_ELLIPSES
    phase_coeffs: tuple = (0.3, 0.6, -0.4, 0.5)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        object.__setattr__(self, "ellipses", tuple(tuple(float(v) for v in e) for e in self.ellipses))
        object.__setattr__(self, "phase_coeffs", tuple(float(v) for v in self.phase_coeffs))
        nx, ny = self.grid
        if nx < 2 or ny < 2 or nx % 2 or ny % 2:
            raise PhantomError(f"grid must be even and >= 2, got {self.grid}")
        if not 1 <= self.ncoils <= 64:
            raise PhantomError(f"ncoils out of range: {self.ncoils}")
        if self.noise_level < 0:
            raise PhantomError("noise_level must be >= 0")

    @property
    def noise_model(self) -> NoiseModel:
        return NoiseModel.exponential(self.ncoils, self.rho)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise PhantomError(f"unknown phantom fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "PhantomSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SamplingPattern:
    """Regular ky undersampling by ``R`` plus a centered ACS block."""

    grid: tuple[int, int]
    R: int
    acs_start: int
    n_acs: int

    def __post_init__(self):
        nx, ny = self.grid
        if self.R < 1:
            raise PhantomError(f"R must be >= 1, got {self.R}")
        if ny % self.R:
            raise PhantomError(f"R={self.R} must divide Ny={ny}")
        if not (0 <= self.acs_start and self.acs_start + self.n_acs <= ny):
            raise PhantomError(f"ACS block [{self.acs_start}, {self.acs_start + self.n_acs}) outside grid")

    @classmethod
    def centered(cls, grid, R: int, n_acs: int | None = None) -> "SamplingPattern":
        ny = int(grid[1])
        if n_acs is None:
            n_acs = max(2, int(round(24 * ny / 64)))
        return cls(tuple(int(g) for g in grid), int(R), ny // 2 - n_acs // 2, int(n_acs))

    @property
    def comb_lines(self) -> np.ndarray:
        return np.arange(self.grid[1]) % self.R == 0

    @property
    def acs_lines(self) -> np.ndarray:
        ky = np.arange(self.grid[1])
        return (ky >= self.acs_start) & (ky < self.acs_start + self.n_acs)

    @property
    def line_kind(self) -> np.ndarray:
        """Per ky line: 0 comb, 1 ACS-only, 2 not acquired."""
        kind = np.full(self.grid[1], 2)
        kind[self.acs_lines] = 1
        kind[self.comb_lines] = 0
        return kind

    @property
    def mask(self) -> np.ndarray:
        return np.broadcast_to(self.comb_lines | self.acs_lines, self.grid).copy()

    @property
    def comb_mask(self) -> np.ndarray:
        return np.broadcast_to(self.comb_lines, self.grid).copy()


@dataclass(frozen=True)
class Dataset:
    full_kspace: np.ndarray
    truth_image: np.ndarray
    sensitivities: np.ndarray
    noise_model: NoiseModel
    spec: PhantomSpec
    whitened: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def grid(self) -> tuple[int, int]:
        return self.full_kspace.shape[:2]

    @property
    def ncoils(self) -> int:
        return self.full_kspace.shape[2]

    def prewhitened(self) -> "Dataset":
        """Same acquisition after channel whitening; coil noise becomes ``noise_level**2 * I``."""
        if self.whitened:
            return self
        nm = self.noise_model
        return replace(
            self,
            full_kspace=prewhiten(self.full_kspace, nm),
            truth_image=prewhiten(self.truth_image, nm),
            sensitivities=prewhiten(self.sensitivities, nm),
            noise_model=NoiseModel.identity(nm.ncoils),
            whitened=True,
        )


def _coords(n: int) -> np.ndarray:
    return (np.arange(n) - n // 2) / (n / 2)


def ellipse_object(spec: PhantomSpec, grid=None) -> np.ndarray:
    """Complex object (magnitude scaled by ``spec.amplitude``) on ``grid``."""
    nx, ny = grid or spec.grid
    x, y = np.meshgrid(_coords(nx), _coords(ny), indexing="ij")
    mag = np.zeros((nx, ny))
    for cx, cy, ax, ay, ang, val in spec.ellipses:
        t = np.deg2rad(ang)
        u = (x - cx) * np.cos(t) + (y - cy) * np.sin(t)
        v = -(x - cx) * np.sin(t) + (y - cy) * np.cos(t)
        mag += val * ((u / ax) ** 2 + (v / ay) ** 2 <= 1.0)
    c0, c1, c2, c3 = spec.phase_coeffs
    phase = c0 + c1 * x + c2 * y + c3 * x * y
    return spec.amplitude * mag * np.exp(1j * phase)


def coil_sensitivities(spec: PhantomSpec, grid=None) -> np.ndarray:
    """Gaussian lobes on a ring, normalised to mean RSS 1 over the object."""
    nx, ny = grid or spec.grid
    x, y = np.meshgrid(_coords(nx), _coords(ny), indexing="ij")
    sens = np.empty((nx, ny, spec.ncoils), dtype=np.complex128)
    for c in range(spec.ncoils):
        theta = 2 * np.pi * c / spec.ncoils
        px, py = spec.coil_radius * np.cos(theta), spec.coil_radius * np.sin(theta)
        lobe = np.exp(-((x - px) ** 2 + (y - py) ** 2) / (2 * spec.coil_width**2))
        sens[..., c] = lobe * np.exp(1j * (theta + 0.4 * (x * np.cos(theta) + y * np.sin(theta))))
    support = np.abs(ellipse_object(spec, (nx, ny))) > 0
    rss = np.sqrt(np.sum(np.abs(sens) ** 2, axis=-1))
    if support.any():
        if rss[support].min() <= 1e-8 * rss.max():
            raise PhantomError("coil sensitivities vanish inside the object")
        sens /= rss[support].mean()
    return sens


def generate(spec: PhantomSpec) -> Dataset:
    """Fully sampled noisy multi-coil k-space with ground truth."""
    sens = coil_sensitivities(spec)
    truth = sens * ellipse_object(spec)[..., None]
    clean = dft2(truth)
    nm = spec.noise_model
    rng = np.random.default_rng(spec.seed)
    white = (rng.standard_normal(clean.shape) + 1j * rng.standard_normal(clean.shape)) / np.sqrt(2)
    noise = spec.noise_level * (white @ nm.chol.T)
    return Dataset(clean + noise, truth, sens, nm, spec, meta={"seed": spec.seed})


def add_noise(d: Dataset, sigma: float, seed: int) -> Dataset:
    """Superimpose extra complex Gaussian noise with coil covariance ``sigma**2 * cov``."""
    rng = np.random.default_rng(seed)
    shape = d.full_kspace.shape
    white = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)
    return replace(d, full_kspace=d.full_kspace + sigma * (white @ d.noise_model.chol.T))


def undersample(d: Dataset, pattern: SamplingPattern) -> tuple[np.ndarray, np.ndarray]:
    """Zero-filled k-space on the pattern mask, and the ACS block ``[Nx, n_acs, C]``."""
    if tuple(pattern.grid) != tuple(d.grid):
        raise PhantomError(f"pattern grid {pattern.grid} does not match dataset grid {d.grid}")
    s0 = np.where(pattern.mask[..., None], d.full_kspace, 0)
    acs = d.full_kspace[:, pattern.acs_start : pattern.acs_start + pattern.n_acs].copy()
    return s0, acs


def rss(images: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.abs(images) ** 2, axis=-1))


def roi_mask(d: Dataset, threshold: float = 0.1) -> np.ndarray:
    """Voxels whose noise-free root-sum-of-squares reaches ``threshold`` of its maximum."""
    if not 0 < threshold <= 1:
        raise PhantomError(f"threshold must lie in (0, 1], got {threshold}")
    r = rss(d.truth_image)
    return r >= threshold * r.max()


def crop_kspace(s: np.ndarray, grid) -> np.ndarray:
    """Central k-space crop over the grid axes."""
    nx, ny = s.shape[-3:-1]
    mx, my = grid
    if mx > nx or my > ny or mx % 2 or my % 2:
        raise TensorError(f"cannot crop {(nx, ny)} to {tuple(grid)}")
    x0, y0 = nx // 2 - mx // 2, ny // 2 - my // 2
    return s[..., x0 : x0 + mx, y0 : y0 + my, :]


def lowres(d: Dataset, grid, R: int = 1) -> Dataset:
    """Central k-space crop of a dataset for low-resolution noise analysis.

    k-space samples (and hence their noise) are kept as is.  Truth images
    follow the cropped noise-free k-space; sensitivities are low-passed
    with their amplitude preserved.  ``R`` is only used to check that the
    crop keeps the sampling comb aligned.
    """
    nx, ny = d.grid
    mx, my = grid
    if (ny // 2 - my // 2) % R:
        raise PhantomError(f"crop {tuple(grid)} breaks the R={R} comb alignment")
    truth = idft2(crop_kspace(dft2(d.truth_image), grid))
    scale = np.sqrt(nx * ny / (mx * my))
    sens = idft2(crop_kspace(dft2(d.sensitivities), grid)) / scale
    return replace(
        d,
        full_kspace=crop_kspace(d.full_kspace, grid).copy(),
        truth_image=truth,
        sensitivities=sens,
        meta={**d.meta, "cropped_from": [nx, ny]},
    )
