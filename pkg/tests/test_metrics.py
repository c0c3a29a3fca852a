import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from raki_noise import metrics
from raki_noise.metrics import SSIMConfig


@pytest.fixture
def pair(rng):
    ref = np.abs(rng.standard_normal((24, 24))) + 1.0
    return ref + 0.1 * rng.standard_normal((24, 24)), ref


def test_nmse_closed_forms(pair):
    _, ref = pair
    assert metrics.nmse(ref, ref) == 0
    assert metrics.nmse(np.zeros_like(ref), ref) == pytest.approx(1.0)
    off = metrics.nmse(ref + 0.5, ref)
    assert off == pytest.approx(0.25 * ref.size / np.sum(ref**2))
    with pytest.raises(ValueError, match="zero energy"):
        metrics.nmse(ref, np.zeros_like(ref))


def test_psnr_closed_forms(pair):
    x, ref = pair
    assert metrics.psnr(ref, ref) == float("inf")
    err = x - ref
    gain = metrics.psnr(ref + err / 2, ref) - metrics.psnr(ref + err, ref)
    assert gain == pytest.approx(20 * np.log10(2), abs=1e-9)
    mse = np.mean(err**2)
    assert metrics.psnr(x, ref) == pytest.approx(10 * np.log10(ref.max() ** 2 / mse))


def test_metrics_use_magnitudes(pair):
    x, ref = pair
    ph = np.exp(1j * np.linspace(0, 6, x.size)).reshape(x.shape)
    for f in (metrics.nmse, metrics.psnr, metrics.ssim):
        assert f(x * ph, ref) == pytest.approx(f(x, ref))


def _ssim_loop(x, ref, L, cfg=SSIMConfig()):
    """Explicit windowed SSIM with reflected borders, one voxel at a time."""
    r = cfg.window // 2
    t = np.arange(-r, r + 1)
    g1 = np.exp(-0.5 * (t / cfg.sigma) ** 2)
    w = np.outer(g1, g1) / g1.sum() ** 2
    pad = lambda im: np.pad(im, r, mode="symmetric")
    xp, yp = pad(x), pad(ref)
    c1, c2 = (cfg.k1 * L) ** 2, (cfg.k2 * L) ** 2
    out = np.empty(x.shape)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            a, b = xp[i:i + 2 * r + 1, j:j + 2 * r + 1], yp[i:i + 2 * r + 1, j:j + 2 * r + 1]
            ma, mb = (w * a).sum(), (w * b).sum()
            va, vb = (w * a * a).sum() - ma**2, (w * b * b).sum() - mb**2
            cv = (w * a * b).sum() - ma * mb
            out[i, j] = (2 * ma * mb + c1) * (2 * cv + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2))
    return out


def test_ssim_matches_explicit_window_loop(rng):
    # scipy's "reflect" repeats the edge sample, as numpy's "symmetric" pad does;
    # the 8x8 toy is smaller than the window, so reflection wraps more than once
    cfg = SSIMConfig(window=5, sigma=1.0)
    ref = rng.uniform(1, 2, (8, 8))
    x = ref + 0.2 * rng.standard_normal((8, 8))
    fast = metrics.ssim_map(x, ref, ref.max(), cfg)
    assert np.allclose(fast, _ssim_loop(x, ref, ref.max(), cfg), atol=1e-12)
    assert metrics.ssim(x, ref, cfg=cfg) == pytest.approx(fast.mean())


def test_ssim_default_window_loop(pair):
    x, ref = pair
    assert np.allclose(metrics.ssim_map(x, ref, ref.max()), _ssim_loop(x, ref, ref.max()), atol=1e-12)


def test_ssim_properties(pair):
    x, ref = pair
    assert metrics.ssim(ref, ref) == pytest.approx(1.0)
    assert metrics.ssim(0.7 * ref, ref) < 1.0
    L = 3.0
    assert metrics.ssim(x, ref, data_range=L) == pytest.approx(metrics.ssim(ref, x, data_range=L))


def test_ssim_roi_checks(pair):
    x, ref = pair
    small = np.zeros(ref.shape, bool)
    small[:5, :5] = True
    with pytest.raises(ValueError, match="window"):
        metrics.ssim(x, ref, small)
    with pytest.raises(ValueError, match="shape"):
        metrics.ssim(x, ref[:-1])


def test_report_roundtrip(pair):
    x, ref = pair
    rep = metrics.report(x, ref)
    assert rep.roi_voxels == ref.size and not rep.psnr_infinite
    assert metrics.report(ref, ref).psnr_infinite
    assert set(rep.to_dict()) == {"nmse", "ssim", "psnr", "psnr_infinite", "roi_voxels"}


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 0.1))
def test_nmse_monotone_in_error(scale):
    rng = np.random.default_rng(0)
    ref = rng.uniform(1, 2, (16, 16))
    e = rng.standard_normal((16, 16))
    assert metrics.nmse(ref + scale * e, ref) < metrics.nmse(ref + 2 * scale * e, ref)
