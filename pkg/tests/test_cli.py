import json
import subprocess
import sys

import pytest

from raki_noise import cli

TINY = {
    "phantom": {"grid": [32, 32], "ncoils": 4, "seed": 3},
    "method": "raki",
    "R": [2],
    "sigma": [1, 3],
    "replicas": 30,
    "ks_replicas": 60,
    "analysis_grid": [16, 16],
    "network": {"channels": [4, 2], "kernel_sizes": [[5, 2], [1, 1], [3, 2]]},
    "train": {"epochs": 15},
}


def _write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_schema_error_names_missing_field(tmp_path, capsys):
    bad = {k: v for k, v in TINY.items() if k != "R"}
    code = cli.main(["generate", "--config", str(_write(tmp_path, bad)), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_CONFIG
    assert "'R'" in capsys.readouterr().err


def test_schema_error_points_at_path(tmp_path, capsys):
    bad = {**TINY, "network": {"slope": 2}}
    assert cli.main(["generate", "--config", str(_write(tmp_path, bad))]) == cli.EXIT_CONFIG
    assert "network/slope" in capsys.readouterr().err


def test_unknown_phantom_key_and_negative_seed(tmp_path):
    bad = {**TINY, "phantom": {"colour": 1}}
    assert cli.main(["generate", "--config", str(_write(tmp_path, bad))]) == cli.EXIT_CONFIG
    assert cli.main(["generate", "--config", str(_write(tmp_path, TINY)), "--seed", "-1"]) == cli.EXIT_CONFIG


def test_resolved_config_expands_defaults():
    cfg = cli.resolve_config({"method": "grappa", "R": [2]}, seed=9, threads=2)
    assert cfg["phantom"]["seed"] == 9 and cfg["threads"] == 2
    assert cfg["grappa"] == cli.DEFAULTS["grappa"] and tuple(cfg["phantom"]["grid"]) == (64, 64)


def test_generate_is_byte_identical(tmp_path):
    cfg = _write(tmp_path, TINY)
    for out in ("a", "b"):
        assert cli.main(["generate", "--config", str(cfg), "--out", str(tmp_path / out)]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    a.pop("generate/timings.json"), b.pop("generate/timings.json")
    assert a == b


def test_seed_override_changes_only_kspace(tmp_path):
    cfg = _write(tmp_path, TINY)
    cli.main(["generate", "--config", str(cfg), "--out", str(tmp_path / "a")])
    cli.main(["generate", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "11"])
    a, b = _files(tmp_path / "a" / "generate" / "dataset"), _files(tmp_path / "b" / "generate" / "dataset")
    changed = {k for k in a if a[k] != b[k]}
    assert "kspace.bin" in changed
    assert changed <= {"kspace.bin", "kspace.json", "phantom.json"}


def test_missing_model_is_a_data_error(tmp_path, capsys):
    cfg = _write(tmp_path, TINY)
    out = str(tmp_path / "o")
    assert cli.main(["gfactor", "--config", str(cfg), "--out", out]) == cli.EXIT_DATA
    assert cli.main(["generate", "--config", str(cfg), "--out", out]) == 0
    assert cli.main(["gfactor", "--config", str(cfg), "--out", out]) == cli.EXIT_DATA
    assert "reconstruct" in capsys.readouterr().err


def test_budget_error_exit_code(tmp_path):
    cfg = _write(tmp_path, TINY)
    out = str(tmp_path / "o")
    cli.main(["generate", "--config", str(cfg), "--out", out])
    cli.main(["reconstruct", "--config", str(cfg), "--out", out])
    assert cli.main(["gfactor", "--config", str(cfg), "--out", out, "--budget", "1000"]) == cli.EXIT_BUDGET


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = _write(root, TINY)
    codes = {c: cli.main([c, "--config", str(cfg), "--out", str(root / "run")])
             for c in ("generate", "reconstruct", "gfactor", "normality", "snr-sweep")}
    return root / "run", codes


def test_pipeline_runs(pipeline):
    root, codes = pipeline
    assert all(c == 0 for c in codes.values()), codes
    s = json.loads((root / "reconstruct" / "summary.json").read_text())
    assert s["results"]["2"]["domain_deviation"] < 1e-10
    g = json.loads((root / "gfactor" / "summary.json").read_text())["results"]["2"]
    assert g["analytical_vs_fd_max_abs"] < 1e-6
    sweep = json.loads((root / "snr-sweep" / "summary.json").read_text())["results"]["2"]
    assert [p["sigma"] for p in sweep] == [1, 3]
    assert (root / "metrics.csv").read_text().startswith("experiment,method,R")


def test_manifests_cover_every_output(pipeline):
    root, _ = pipeline
    for cmd in ("generate", "gfactor", "normality", "snr-sweep"):
        listed = set(json.loads((root / cmd / "manifest.json").read_text())["files"])
        on_disk = {p.relative_to(root).as_posix() for p in (root / cmd).rglob("*") if p.is_file()}
        assert on_disk - listed == {f"{cmd}/manifest.json"}
    rec = set(json.loads((root / "reconstruct" / "manifest.json").read_text())["files"])
    assert any(f.startswith("reconstruct/models/") for f in rec)


def test_threads_do_not_change_outputs(pipeline, tmp_path):
    root, _ = pipeline
    cfg = _write(tmp_path, TINY)
    import shutil

    other = tmp_path / "run"
    shutil.copytree(root / "generate", other / "generate")
    shutil.copytree(root / "reconstruct", other / "reconstruct")
    assert cli.main(["normality", "--config", str(cfg), "--out", str(other), "--threads", "3"]) == 0
    a, b = _files(root / "normality"), _files(other / "normality")
    for name in a:
        if name in ("timings.json", "config.resolved.json"):
            continue
        assert a[name] == b[name], name


def test_module_invocation(tmp_path):
    res = subprocess.run([sys.executable, "-m", "raki_noise.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "snr-sweep" in res.stdout
