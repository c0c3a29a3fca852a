import numpy as np
import pytest

from raki_noise import grappa, phantom
from raki_noise.grappa import CalibrationError
from raki_noise.tensor import apply_multiplier, comb_kspace, idft2, tap_offsets

from conftest import crandn


def test_recovers_generating_kernel(rng):
    # ACS obeying s[p] = s[p-1] W0 + s[p+1] W1 at every line: the R=2 kernel
    # (kx=1, ky=2, taps at -1 and +1, target shift 0) is exactly identifiable
    nc = 2
    W0 = 0.2 * crandn(rng, nc, nc)
    W1 = np.eye(nc) + 0.1 * crandn(rng, nc, nc)
    inv = np.linalg.inv(W1)
    acs = np.empty((6, 16, nc), complex)
    acs[:, :2] = crandn(rng, 6, 2, nc)
    for p in range(1, 15):
        acs[:, p + 1] = (acs[:, p] - acs[:, p - 1] @ W0) @ inv
    est = grappa.calibrate(acs, 2, 1, 2, lam=0)
    assert est.shifts == {1: 0}
    assert np.allclose(est.kernels[1].taps[0, 0], W0, atol=1e-8)
    assert np.allclose(est.kernels[1].taps[0, 1], W1, atol=1e-8)
    assert est.residuals[1] < 1e-10


def test_matches_loop_least_squares(rng):
    acs = crandn(rng, 8, 16, 2)
    R, kx, ky = 2, 3, 2
    est = grappa.calibrate(acs, R, kx, ky, lam=0)
    ox, oy = tap_offsets(kx, 1), tap_offsets(ky, R)
    d = est.shifts[1]
    rows, rhs = [], []
    for x in range(8):
        for p in range(16):
            ys = p + oy
            if ys.min() < 0 or ys.max() >= 16 or not 0 <= p + d < 16:
                continue
            rows.append([acs[(x + i) % 8, y, c] for i in ox for y in ys for c in range(2)])
            rhs.append(acs[x, p + d])
    w = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)[0]
    assert np.allclose(est.kernels[1].taps.reshape(-1, 2), w, atol=1e-10)


def test_calibration_errors(rng):
    with pytest.raises(CalibrationError, match="equations"):
        grappa.calibrate(crandn(rng, 4, 10, 4), 4, 5, 4)
    rank_deficient = np.repeat(crandn(rng, 16, 24, 1), 2, axis=2)
    with pytest.raises(CalibrationError, match="rank"):
        grappa.calibrate(rank_deficient, 2, 3, 2, lam=0)
    gk = grappa.calibrate(crandn(rng, 16, 24, 2), 2, 3, 2)
    with pytest.raises(CalibrationError, match="coils"):
        grappa.infer_kspace(np.zeros((16, 24, 3)), gk)


def test_r1_passthrough(rng):
    s = crandn(rng, 8, 8, 2)
    gk = grappa.calibrate(s, 1)
    assert np.array_equal(grappa.infer_kspace(s, gk), s)
    assert np.allclose(grappa.image_space_weights(gk, (8, 8)), np.eye(2))


def test_acquired_lines_pass_through(small_data):
    pat = phantom.SamplingPattern.centered(small_data.grid, 2)
    s0, acs = phantom.undersample(small_data, pat)
    out = grappa.infer_kspace(s0, grappa.calibrate(acs, 2, 3, 2))
    comb = pat.comb_lines
    assert np.array_equal(out[:, comb], s0[:, comb])
    # ACS lines off the comb are predictions, not measurements
    off = pat.acs_lines & ~comb
    assert not np.allclose(out[:, off], s0[:, off])


@pytest.mark.parametrize("R", [2, 4])
def test_image_space_weights_match_kspace(small_data, R):
    pat = phantom.SamplingPattern.centered(small_data.grid, R)
    s0, acs = phantom.undersample(small_data, pat)
    gk = grappa.calibrate(acs, R, 3, 2)
    k_img = idft2(grappa.infer_kspace(s0, gk))
    i_img = apply_multiplier(idft2(comb_kspace(s0, R, 0)), grappa.image_space_weights(gk, small_data.grid))
    assert np.abs(k_img - i_img).max() / np.abs(k_img).max() < 1e-12


def test_calibration_on_phantom_is_accurate():
    d = phantom.generate(phantom.PhantomSpec(noise_level=0.0)).prewhitened()
    pat = phantom.SamplingPattern.centered(d.grid, 2)
    s0, acs = phantom.undersample(d, pat)
    gk = grappa.calibrate(acs, 2)
    err = np.linalg.norm(grappa.infer_kspace(s0, gk) - d.full_kspace) / np.linalg.norm(d.full_kspace)
    assert err < 0.05
