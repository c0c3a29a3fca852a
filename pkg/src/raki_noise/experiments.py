"""End-to-end pipelines shared by the command line, demos and tests.

Calibration and training run at full resolution.  Noise analysis runs on
a central k-space crop (the analysis grid), where kernels are reused and
activation masks are measured afresh from a low-resolution inference.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import grappa, imagespace, jacobian, noise, raki
from .io import load_tensor, save_tensor, write_json
from .phantom import Dataset, PhantomSpec, SamplingPattern, add_noise, lowres, roi_mask, undersample
from .tensor import NoiseModel, comb_kspace, idft2

RECON_METHODS = ("grappa", "raki", "raki-linear")


def train_method(d: Dataset, method: str, R: int, spec: raki.NetworkSpec | None = None,
                 cfg: raki.TrainConfig | None = None, footprint=(5, 4), lam: float = 1e-6,
                 n_acs: int | None = None) -> raki.TrainedNetwork:
    """Calibrate GRAPPA or train RAKI on the ACS of ``d``; GRAPPA comes back as a network."""
    if method not in RECON_METHODS:
        raise ValueError(f"method must be one of {RECON_METHODS}")
    pattern = SamplingPattern.centered(d.grid, R, n_acs)
    _, acs = undersample(d, pattern)
    if method == "grappa":
        return raki.grappa_as_network(grappa.calibrate(acs, R, *footprint, lam=lam))
    spec = spec or raki.NetworkSpec()
    act = "identity" if method == "raki-linear" else "clrelu"
    spec = raki.NetworkSpec(spec.channels, spec.kernel_sizes, spec.slope, act)
    return raki.train(acs, R, spec, cfg or raki.TrainConfig())


@dataclass
class Analysis:
    """A trained reconstruction frozen at the measured data on some grid."""

    net: raki.TrainedNetwork
    data: Dataset
    s0: np.ndarray  # comb k-space [Nx, Ny, C]
    p: np.ndarray
    roi: np.ndarray
    params: imagespace.ImageSpaceParams
    timings: dict = field(default_factory=dict)

    @property
    def R(self) -> int:
        return self.net.R

    @property
    def grid(self) -> tuple[int, int]:
        return tuple(self.s0.shape[:2])

    @property
    def comb_mask(self) -> np.ndarray:
        return (np.arange(self.grid[1]) % self.R == 0)[None, :, None]

    def frozen(self, kspace: np.ndarray) -> np.ndarray:
        """Combined images of a batch of k-space arrays with the frozen masks."""
        x0 = idft2(comb_kspace(kspace, self.R, 0))
        return imagespace.combine(imagespace.unfold(x0, self.params), self.p)

    def recompute(self, kspace: np.ndarray) -> np.ndarray:
        """Combined images rerunning the k-space network (masks follow the data)."""
        return imagespace.combine(idft2(raki.infer_kspace(kspace, self.net)), self.p)

    def fully_sampled(self, kspace: np.ndarray) -> np.ndarray:
        return imagespace.combine(idft2(kspace), self.p)

    def reference(self) -> np.ndarray:
        """Noise-free combined truth."""
        return imagespace.combine(self.data.truth_image, self.p)

    def image(self) -> np.ndarray:
        return self.frozen(self.s0[None])[0]


def analyse(d: Dataset, net: raki.TrainedNetwork, grid=None) -> Analysis:
    """Freeze ``net`` on (a central crop of) the whitened dataset ``d``."""
    if grid is not None and tuple(grid) != tuple(d.grid):
        d = lowres(d, grid, net.R)
    s0 = comb_kspace(d.full_kspace, net.R, 0)
    roi = roi_mask(d)
    p = imagespace.coil_combine_weights(d, roi)
    masks = imagespace.masks_for(net, s0)
    params = imagespace.to_image_space(net, masks, d.grid, p)
    return Analysis(net, d, s0, p, roi, params)


def analytical_gfactor(a: Analysis, batch: int | None = None, budget: int = jacobian.DEFAULT_BUDGET) -> noise.GFactorMap:
    t0 = time.perf_counter()
    J = jacobian.combined_jacobian(a.params, a.p, batch=batch, budget=budget)
    g = noise.gfactor_analytical(J, a.p, a.R, roi=a.roi)
    a.timings["analytical"] = time.perf_counter() - t0
    return g


def fd_gfactor(a: Analysis, h: float = 1e-5, batch: int = 32) -> noise.GFactorMap:
    """g from a frozen-map central-difference Jacobian combined with ``p``."""
    t0 = time.perf_counter()
    x0 = idft2(a.s0)
    fd = jacobian.fd_jacobian(lambda x: imagespace.combine(imagespace.unfold(x, a.params), a.p)[..., None],
                              x0, h, "frozen", batch)
    J = fd.complex[:, 0]
    g = noise.gfactor_analytical(J, a.p, a.R, roi=a.roi, method="finite-difference")
    a.timings["finite-difference"] = time.perf_counter() - t0
    return g


def montecarlo(a: Analysis, n: int = 1000, sigma: float = 1.0, seed: int = 0, mode: str = "frozen",
               threads: int = 1, chunk: int = 25):
    """Pseudo-replica g-factor; returns the map, both stacks and the variance/SNR maps."""
    if mode not in ("frozen", "recompute"):
        raise ValueError("mode must be 'frozen' or 'recompute'")
    t0 = time.perf_counter()
    recon = a.frozen if mode == "frozen" else a.recompute
    acc = noise.run_replicas(recon, a.s0, n, sigma, seed, 0, mode, chunk, threads, a.comb_mask)
    full = noise.run_replicas(a.fully_sampled, a.data.full_kspace, n, sigma, seed, 1, "full", chunk, threads)
    g, maps = noise.gfactor_montecarlo(acc, full, a.R, a.roi)
    a.timings["monte-carlo"] = time.perf_counter() - t0
    return g, acc, full, maps


def compare_maps(ga: noise.GFactorMap, gb: noise.GFactorMap, roi=None) -> dict:
    """Per-voxel relative gap and correlation of two g-maps inside the ROI."""
    roi = ga.roi if roi is None else roi
    a, b = ga.values[roi], gb.values[roi]
    gap = np.abs(b - a) / np.abs(a)
    return {
        "median_gap": float(np.median(gap)),
        "p95_gap": float(np.percentile(gap, 95)),
        "pearson": float(np.corrcoef(a, b)[0, 1]) if a.size > 1 and a.std() > 0 and b.std() > 0 else float("nan"),
        "methods": [ga.method, gb.method],
    }


def noisier(d: Dataset, factor: float, seed: int) -> Dataset:
    """``d`` with total noise level ``factor`` times the original (``factor >= 1``)."""
    if factor < 1:
        raise ValueError("noise factors below 1 cannot be reached by adding noise")
    if factor == 1:
        return d
    sigma0 = d.spec.noise_level
    return add_noise(d, sigma0 * np.sqrt(factor**2 - 1), seed)


# --- persistence ---------------------------------------------------------


def save_network(path, net: raki.TrainedNetwork, extra: dict | None = None) -> list:
    """Per-layer tensor files plus ``manifest.json``; returns every written path."""
    path = Path(path)
    files = []
    layers = []
    for n, k in enumerate(net.kernels):
        stem = path / f"layer{n}"
        files += save_tensor(stem, k.taps, "kernel", description=f"taps [kx, ky, cin, cout] of layer {n}")
        layers.append({"file": stem.name, "dilation": list(k.dilation), "shape": list(k.shape)})
    manifest = {
        "R": net.R,
        "ncoils": net.ncoils,
        "spec": {"channels": list(net.spec.channels), "kernel_sizes": [list(k) for k in net.spec.kernel_sizes],
                 "slope": net.spec.slope, "activation": net.spec.activation},
        "layers": layers,
        "losses": net.losses,
        "final_loss": float(net.losses[-1]) if net.losses.size else None,
        "epochs": max(int(net.losses.size) - 1, 0),
        **(extra or {}),
    }
    files.append(write_json(path / "manifest.json", manifest))
    return files


def load_network(path) -> raki.TrainedNetwork:
    path = Path(path)
    m = json.loads((path / "manifest.json").read_text())
    spec = raki.NetworkSpec(tuple(m["spec"]["channels"]), tuple(tuple(k) for k in m["spec"]["kernel_sizes"]),
                            m["spec"]["slope"], m["spec"]["activation"])
    kernels = [raki.ConvKernel(load_tensor(path / L["file"])[0], tuple(L["dilation"])) for L in m["layers"]]
    return raki.TrainedNetwork(m["R"], m["ncoils"], kernels[:-1], kernels[-1], spec, np.asarray(m["losses"], float))


def save_grappa(path, gk: grappa.GrappaKernels) -> list:
    path = Path(path)
    files, offsets = [], {}
    for r, k in gk.kernels.items():
        files += save_tensor(path / f"kernel_r{r}", k.taps, "kernel", description=f"GRAPPA kernel for offset {r}")
        offsets[str(r)] = {"file": f"kernel_r{r}", "dilation": list(k.dilation), "target_shift": gk.shifts[r]}
    manifest = {"R": gk.R, "ncoils": gk.ncoils, "footprint": list(gk.footprint), "lam": gk.lam,
                "residuals": gk.residuals, "offsets": offsets}
    files.append(write_json(path / "manifest.json", manifest))
    return files


def load_grappa(path) -> grappa.GrappaKernels:
    path = Path(path)
    m = json.loads((path / "manifest.json").read_text())
    kernels = {int(r): raki.ConvKernel(load_tensor(path / o["file"])[0], tuple(o["dilation"]))
               for r, o in m["offsets"].items()}
    residuals = {int(r): v for r, v in m["residuals"].items()}
    return grappa.GrappaKernels(m["R"], m["ncoils"], kernels, tuple(m["footprint"]), m["lam"], residuals)


def save_params(path, params: imagespace.ImageSpaceParams) -> list:
    """Image-space parameters, enough to run inference without the k-space network."""
    path = Path(path)
    files = []
    for n, (w, k) in enumerate(zip(params.hidden_multipliers, params.image_kernels)):
        files += save_tensor(path / f"multiplier{n}", w, "image", description=f"hidden multiplier {n}")
        files += save_tensor(path / f"mask_kernel{n}", k, "image", description=f"activation image kernel {n}")
    files += save_tensor(path / "final_multiplier", params.final_multiplier, "image")
    if params.combine is not None:
        files += save_tensor(path / "combine", params.combine, "image", description="coil combination weights")
    manifest = {"R": params.R, "ncoils": params.ncoils, "n_hidden": len(params.hidden_multipliers),
                "shifts": params.shifts, "fingerprint": params.fingerprint, "grid": list(params.grid)}
    files.append(write_json(path / "manifest.json", manifest))
    return files


def load_params(path) -> imagespace.ImageSpaceParams:
    path = Path(path)
    m = json.loads((path / "manifest.json").read_text())
    hidden = [load_tensor(path / f"multiplier{n}")[0] for n in range(m["n_hidden"])]
    kernels = [load_tensor(path / f"mask_kernel{n}")[0] for n in range(m["n_hidden"])]
    combine = load_tensor(path / "combine")[0] if (path / "combine.json").exists() else None
    return imagespace.ImageSpaceParams(m["R"], m["ncoils"], hidden, kernels, load_tensor(path / "final_multiplier")[0],
                                       {int(r): d for r, d in m["shifts"].items()}, combine, m["fingerprint"])


def save_dataset(path, d: Dataset) -> list:
    path = Path(path)
    seed = d.spec.seed
    files = save_tensor(path / "kspace", d.full_kspace, "kspace", seed, "noisy fully sampled multi-coil k-space")
    files += save_tensor(path / "truth", d.truth_image, "image", None, "noise-free coil images")
    files += save_tensor(path / "sensitivities", d.sensitivities, "image", None, "coil sensitivities")
    files += save_tensor(path / "noise_covariance", d.noise_model.covariance, "coil", None, "coil noise covariance")
    files.append(write_json(path / "phantom.json", d.spec.to_dict()))
    return files


def load_dataset(path) -> Dataset:
    path = Path(path)
    spec = PhantomSpec.from_json(path / "phantom.json")
    cov = load_tensor(path / "noise_covariance")[0]
    return Dataset(load_tensor(path / "kspace")[0], load_tensor(path / "truth")[0],
                   load_tensor(path / "sensitivities")[0], NoiseModel(cov), spec, meta={"seed": spec.seed})


# --- noise-level sweep ---------------------------------------------------


def snr_sweep(d: Dataset, method: str, R: int, factors=(1, 3, 5), grid=(32, 32), n_replicas: int = 1000,
              seed: int = 0, threads: int = 1, **train_kw) -> list[dict]:
    """Retrain and re-estimate g at noise levels ``factor * sigma0``.

    ``d`` must be whitened.  Extra noise is drawn from a stream keyed by
    the phantom seed and the factor, so every factor shares the phantom.
    A factor of 0 keeps the data and injects no replica noise, which gives
    a degenerate (flagged) Monte-Carlo map.
    """
    sigma0 = d.spec.noise_level
    out = []
    for f in factors:
        if 0 < f < 1:
            raise ValueError(f"noise factor {f} is below the acquired noise level")
        df = d if f in (0, 1) else noisier(d, f, [d.spec.seed, int(round(1000 * f))])
        net = train_method(df, method, R, **train_kw)
        a = analyse(df, net, grid)
        g_ana = analytical_gfactor(a)
        g_mc, acc, full, maps = montecarlo(a, n_replicas, f * sigma0, seed, threads=threads)
        image = a.image()
        out.append({
            "factor": f,
            "net": net,
            "analysis": a,
            "g_analytical": g_ana,
            "g_mc": g_mc,
            "maps": maps,
            "image": image,
            "error": np.abs(image) - np.abs(a.reference()),
            "comparison": None if g_mc.degenerate else compare_maps(g_ana, g_mc),
        })
    return out
