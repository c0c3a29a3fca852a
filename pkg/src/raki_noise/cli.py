"""Command line entry points.

    python3 -m raki_noise.cli generate    --config cfg.json --out runs/a
    python3 -m raki_noise.cli reconstruct --config cfg.json --out runs/a
    python3 -m raki_noise.cli gfactor     --config cfg.json --out runs/a
    python3 -m raki_noise.cli normality   --config cfg.json --out runs/a
    python3 -m raki_noise.cli snr-sweep   --config cfg.json --out runs/a

Every command writes ``<out>/<command>/config.resolved.json`` (all
defaults expanded) and ``<out>/<command>/manifest.json`` listing every
file it produced.  Wall-clock figures go to ``timings.json`` so the
remaining outputs are bit-identical for identical configs.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np

from . import experiments as ex
from . import metrics, noise, raki
from .imagespace import FingerprintError, coil_combine_weights, combine, reconstruct_image_space
from .io import append_csv, save_tensor, write_csv, write_json, write_pgm16
from .jacobian import BudgetError
from .phantom import PhantomError, PhantomSpec, SamplingPattern, generate, roi_mask, undersample
from .tensor import TensorError, idft2

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_BUDGET = 0, 2, 3, 4, 5

DEFAULTS = {
    "phantom": {},
    "method": "raki",
    "R": [4],
    "sigma": [1, 3, 5],
    "replicas": 1000,
    "ks_replicas": 10000,
    "analysis_grid": [32, 32],
    "n_acs": None,
    "mc_seed": 0,
    "mc_mode": "frozen",
    "finite_difference": True,
    "network": {"channels": [128, 64], "kernel_sizes": [[5, 2], [1, 1], [3, 2]], "slope": 0.1},
    "train": {"lr": 3e-3, "epochs": 500, "seed": 0},
    "grappa": {"kx": 5, "ky": 4, "lam": 1e-6},
    "budget": 4 * 2**30,
    "threads": 1,
}

_int_pair = {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2}

SCHEMA = {
    "type": "object",
    "required": ["method", "R"],
    "additionalProperties": False,
    "properties": {
        "phantom": {"type": "object"},
        "method": {"enum": list(ex.RECON_METHODS)},
        "R": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "sigma": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
        "replicas": {"type": "integer", "minimum": 2},
        "ks_replicas": {"type": "integer", "minimum": 50},
        "analysis_grid": _int_pair,
        "n_acs": {"type": ["integer", "null"], "minimum": 2},
        "mc_seed": {"type": "integer", "minimum": 0},
        "mc_mode": {"enum": ["frozen", "recompute"]},
        "finite_difference": {"type": "boolean"},
        "network": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "channels": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "kernel_sizes": {"type": "array", "items": _int_pair},
                "slope": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "epochs": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "beta1": {"type": "number"},
                "beta2": {"type": "number"},
                "eps": {"type": "number"},
            },
        },
        "grappa": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kx": {"type": "integer", "minimum": 1},
                "ky": {"type": "integer", "minimum": 1},
                "lam": {"type": "number", "minimum": 0},
            },
        },
        "budget": {"type": "integer", "minimum": 1},
        "threads": {"type": "integer", "minimum": 1},
    },
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def resolve_config(raw: dict, seed=None, threads=None, budget=None) -> dict:
    """Validate ``raw`` and expand every default; command line overrides win."""
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {e.message}") from None
    cfg = _merge(DEFAULTS, raw)
    try:
        phantom = PhantomSpec.from_dict(cfg["phantom"])
    except (PhantomError, TypeError) as e:
        raise ConfigError(f"config error at phantom: {e}") from None
    if seed is not None:
        phantom = PhantomSpec.from_dict({**phantom.to_dict(), "seed": int(seed)})
    cfg["phantom"] = phantom.to_dict()
    if threads is not None:
        cfg["threads"] = int(threads)
    if budget is not None:
        cfg["budget"] = int(budget)
    return cfg


class Run:
    """Collects outputs of one command and writes its manifest."""

    def __init__(self, out: Path, command: str, cfg: dict):
        self.root = out
        self.dir = out / command
        self.dir.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.files: list[Path] = []
        self.summary: dict = {}
        self.timings: dict = {}
        self.add(write_json(self.dir / "config.resolved.json", cfg))

    def add(self, *paths):
        for p in paths:
            self.files.extend(p if isinstance(p, list) else [p])

    def finish(self):
        self.add(write_json(self.dir / "summary.json", self.summary))
        self.add(write_json(self.dir / "timings.json", self.timings))
        rel = sorted(str(Path(f).relative_to(self.root)) for f in self.files)
        write_json(self.dir / "manifest.json", {"command": self.command, "files": rel})


def _phantom(cfg) -> PhantomSpec:
    return PhantomSpec.from_dict(cfg["phantom"])


def _dataset(run: Run, cfg):
    path = run.root / "generate" / "dataset"
    if not (path / "kspace.json").exists():
        raise FileNotFoundError(f"no dataset under {path}; run 'generate' first")
    d = ex.load_dataset(path)
    if d.spec != _phantom(cfg):
        raise FileNotFoundError("stored dataset was generated from a different phantom config; rerun 'generate'")
    return d.prewhitened()


def _net_kwargs(cfg) -> dict:
    n, t, g = cfg["network"], cfg["train"], cfg["grappa"]
    return {
        "spec": raki.NetworkSpec(tuple(n["channels"]), tuple(tuple(k) for k in n["kernel_sizes"]), n["slope"]),
        "cfg": raki.TrainConfig(**t),
        "footprint": (g["kx"], g["ky"]),
        "lam": g["lam"],
        "n_acs": cfg["n_acs"],
    }


def _model_dir(root: Path, method: str, R: int) -> Path:
    return root / "reconstruct" / "models" / f"{method}_R{R}"


def _load_model(root: Path, method: str, R: int) -> raki.TrainedNetwork:
    path = _model_dir(root, method, R)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"no trained {method} model for R={R} under {path}; run 'reconstruct' first")
    return ex.load_network(path)


def cmd_generate(run: Run, cfg) -> None:
    d = generate(_phantom(cfg))
    run.add(ex.save_dataset(run.dir / "dataset", d))
    run.summary = {"grid": list(d.grid), "ncoils": d.ncoils, "seed": d.spec.seed}


def cmd_reconstruct(run: Run, cfg) -> None:
    d = _dataset(run, cfg)
    method = cfg["method"]
    roi = roi_mask(d)
    p = coil_combine_weights(d, roi)
    ref = combine(d.truth_image, p)
    results = {}
    for R in cfg["R"]:
        t0 = time.perf_counter()
        net = ex.train_method(d, method, R, **_net_kwargs(cfg))
        run.timings[f"train_R{R}"] = time.perf_counter() - t0
        run.add(ex.save_network(_model_dir(run.root, method, R), net, {"method": method}))
        s0, _ = undersample(d, SamplingPattern.centered(d.grid, R, cfg["n_acs"]))
        k_img = idft2(raki.infer_kspace(s0, net))
        unf, _, params = reconstruct_image_space(s0, net, p)
        deviation = float(np.abs(k_img - unf).max() / np.abs(k_img).max())
        image = combine(unf, p)
        rep = metrics.report(image, ref, roi)
        err = np.abs(image) - np.abs(ref)
        tag = f"{method}_R{R}"
        run.add(save_tensor(run.dir / f"{tag}_image", image, "image", cfg["phantom"]["seed"], "combined reconstruction"))
        run.add(save_tensor(run.dir / f"{tag}_error", err, "image", cfg["phantom"]["seed"], "magnitude error map"))
        run.add(ex.save_params(run.dir / f"{tag}_params", params))
        scale = float(np.abs(ref[roi]).max())
        run.add(write_pgm16(run.dir / f"{tag}_image.pgm", np.abs(image), 0, scale))
        run.add(write_pgm16(run.dir / f"{tag}_error.pgm", np.abs(err), 0, 0.2 * scale))
        row = ["reconstruct", method, R, cfg["phantom"]["noise_level"], cfg["phantom"]["seed"],
               rep.nmse, rep.ssim, rep.psnr, deviation]
        results[R] = {**rep.to_dict(), "domain_deviation": deviation}
        run.add(append_csv(run.root / "metrics.csv",
                           ["experiment", "method", "R", "sigma", "seed", "nmse", "ssim", "psnr", "domain_deviation"], row))
    run.summary = {"method": method, "results": results}


def _gmaps_out(run: Run, tag: str, maps: dict, roi) -> None:
    for name, g in maps.items():
        run.add(save_tensor(run.dir / f"{tag}_g_{name}", g.values, "image", None, f"g-factor ({g.method})"))
        run.add(write_pgm16(run.dir / f"{tag}_g_{name}.pgm", np.where(roi, g.values, 0), 0, 2.0))


def cmd_gfactor(run: Run, cfg) -> None:
    d = _dataset(run, cfg)
    grid = tuple(cfg["analysis_grid"])
    out = {}
    for R in cfg["R"]:
        net = _load_model(run.root, cfg["method"], R)
        a = ex.analyse(d, net, grid)
        maps = {"analytical": ex.analytical_gfactor(a, budget=cfg["budget"])}
        g_mc, _, _, extra = ex.montecarlo(a, cfg["replicas"], d.spec.noise_level, cfg["mc_seed"], cfg["mc_mode"],
                                          cfg["threads"])
        maps["montecarlo"] = g_mc
        if cfg["finite_difference"]:
            maps["fd"] = ex.fd_gfactor(a)
        tag = f"{cfg['method']}_R{R}"
        _gmaps_out(run, tag, maps, a.roi)
        run.add(save_tensor(run.dir / f"{tag}_snr", extra["snr"], "image", cfg["mc_seed"], "Monte-Carlo SNR map"))
        vox = np.flatnonzero(a.roi)
        cols = [vox, maps["analytical"].values.ravel()[vox], maps["montecarlo"].values.ravel()[vox]]
        header = ["voxel_index", "g_analytical", "g_mc"]
        if "fd" in maps:
            cols.append(maps["fd"].values.ravel()[vox])
            header.append("g_fd")
        run.add(write_csv(run.dir / f"{tag}_scatter.csv", header, zip(*cols)))
        summary = {"analytical_vs_mc": ex.compare_maps(maps["analytical"], maps["montecarlo"])}
        summary["analytical_vs_mc"]["agree_5pct"] = summary["analytical_vs_mc"]["median_gap"] < 0.05
        if "fd" in maps:
            summary["analytical_vs_fd_max_abs"] = float(np.abs(maps["fd"].values - maps["analytical"].values)[a.roi].max())
        order = sorted(a.timings, key=a.timings.get)
        summary["fastest"] = order[0]
        run.timings[f"R{R}"] = dict(a.timings)
        out[R] = summary
    run.summary = {"method": cfg["method"], "grid": list(grid), "results": out}


def _marked_voxels(report: noise.NormalityReport, roi) -> list[int]:
    # deterministic: lowest and highest p inside the ROI, ROI centroid, first ROI voxel
    p = np.where(roi & ~report.degenerate, report.p, np.nan).ravel()
    idx = np.flatnonzero(np.isfinite(p))
    rows, cols = np.nonzero(roi)
    centroid = int(round(rows.mean())) * roi.shape[1] + int(round(cols.mean()))
    picks = [int(idx[np.argmin(p[idx])]), int(idx[np.argmax(p[idx])]), centroid, int(idx[0])]
    return picks


def cmd_normality(run: Run, cfg) -> None:
    d = _dataset(run, cfg)
    grid = tuple(cfg["analysis_grid"])
    n = cfg["ks_replicas"]
    results = {}
    for R in cfg["R"]:
        net = _load_model(run.root, cfg["method"], R)
        a = ex.analyse(d, net, grid)
        recon = a.frozen if cfg["mc_mode"] == "frozen" else a.recompute
        t0 = time.perf_counter()
        stack = noise.run_replicas(recon, a.s0, n, d.spec.noise_level, cfg["mc_seed"], 0, cfg["mc_mode"], 25,
                                   cfg["threads"], a.comb_mask)
        mags = np.abs(stack.images)
        rep = noise.ks_normality(mags, a.roi)
        run.timings[f"R{R}"] = time.perf_counter() - t0
        tag = f"{cfg['method']}_R{R}"
        run.add(save_tensor(run.dir / f"{tag}_pvalue", rep.p, "image", cfg["mc_seed"], "KS p-value map"))
        run.add(save_tensor(run.dir / f"{tag}_sigma", rep.sigma, "image", cfg["mc_seed"], "replica magnitude std"))
        run.add(write_pgm16(run.dir / f"{tag}_pvalue.pgm", np.nan_to_num(rep.p), 0, 1))
        run.add(write_pgm16(run.dir / f"{tag}_pass.pgm", (rep.passing & a.roi).astype(float), 0, 1))
        run.add(write_pgm16(run.dir / f"{tag}_sigma.pgm", rep.sigma))
        rows = []
        for v in _marked_voxels(rep, a.roi):
            x, y = divmod(v, grid[1])
            counts, edges = np.histogram(mags[:, x, y], bins=50)
            centers = 0.5 * (edges[1:] + edges[:-1])
            fit = n * np.diff(edges) * np.exp(-0.5 * ((centers - rep.mu[x, y]) / rep.sigma[x, y]) ** 2) / (
                rep.sigma[x, y] * np.sqrt(2 * np.pi))
            rows += [(v, c, k, f) for c, k, f in zip(centers, counts, fit)]
        run.add(write_csv(run.dir / f"{tag}_histograms.csv", ["voxel_index", "bin_center", "count", "normal_fit"], rows))
        vox = np.flatnonzero(a.roi)
        run.add(write_csv(run.dir / f"{tag}_normality.csv", ["voxel_index", "D", "p_value", "mu", "sigma"],
                          zip(vox, rep.D.ravel()[vox], rep.p.ravel()[vox], rep.mu.ravel()[vox], rep.sigma.ravel()[vox])))
        results[R] = {"passing_fraction": rep.fraction, "replicas": n, "marked_voxels": _marked_voxels(rep, a.roi)}
    run.summary = {"method": cfg["method"], "results": results}


def cmd_snr_sweep(run: Run, cfg) -> None:
    d = _dataset(run, cfg)
    kw = _net_kwargs(cfg)
    results = {}
    for R in cfg["R"]:
        sweep = ex.snr_sweep(d, cfg["method"], R, cfg["sigma"], tuple(cfg["analysis_grid"]), cfg["replicas"],
                             cfg["mc_seed"], cfg["threads"], **kw)
        per = []
        for s in sweep:
            tag = f"{cfg['method']}_R{R}_sigma{s['factor']:g}"
            a = s["analysis"]
            _gmaps_out(run, tag, {"analytical": s["g_analytical"], "montecarlo": s["g_mc"]}, a.roi)
            run.add(save_tensor(run.dir / f"{tag}_image", s["image"], "image", cfg["mc_seed"]))
            run.add(save_tensor(run.dir / f"{tag}_error", s["error"], "image", cfg["mc_seed"]))
            run.add(save_tensor(run.dir / f"{tag}_snr", s["maps"]["snr"], "image", cfg["mc_seed"]))
            cmp_ = s["comparison"]
            per.append({
                "sigma": s["factor"],
                "degenerate": s["g_mc"].degenerate,
                "comparison": cmp_,
                "agree_10pct": None if cmp_ is None else cmp_["median_gap"] < 0.10,
            })
            run.timings[tag] = dict(a.timings)
        results[R] = per
    run.summary = {"method": cfg["method"], "phantom_seed": cfg["phantom"]["seed"], "results": results}


COMMANDS = {
    "generate": cmd_generate,
    "reconstruct": cmd_reconstruct,
    "gfactor": cmd_gfactor,
    "normality": cmd_normality,
    "snr-sweep": cmd_snr_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="raki-noise", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", type=Path, help="JSON experiment config")
    ap.add_argument("--out", type=Path, default=Path("runs/default"))
    ap.add_argument("--seed", type=int, help="phantom noise seed override")
    ap.add_argument("--threads", type=int)
    ap.add_argument("--budget", type=int, help="peak bytes for Jacobian batches")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = json.loads(args.config.read_text()) if args.config else {"method": DEFAULTS["method"], "R": DEFAULTS["R"]}
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg = resolve_config(raw, args.seed, args.threads, args.budget)
    except (ConfigError, json.JSONDecodeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    run = Run(args.out, args.command, cfg)
    try:
        COMMANDS[args.command](run, cfg)
    except BudgetError as e:
        print(f"budget error: {e}; try a smaller analysis_grid or a larger --budget", file=sys.stderr)
        return EXIT_BUDGET
    except (FileNotFoundError, PhantomError, FingerprintError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, raki.TrainingError, TensorError, np.linalg.LinAlgError, ValueError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    run.finish()
    print(json.dumps({"command": args.command, "out": str(run.dir)}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
