import numpy as np
import pytest

from raki_noise import grappa, imagespace as ims, jacobian as jac, phantom, raki
from raki_noise.raki import NetworkSpec
from raki_noise.tensor import ConvKernel, comb_image, dft2, idft2

from conftest import crandn


def _params(net, s0):
    return ims.to_image_space(net, ims.masks_for(net, s0), s0.shape[:2])


@pytest.fixture(scope="module")
def tiny_params(tiny_net, tiny_comb):
    return _params(tiny_net, tiny_comb)


def test_identity_network_r1_gives_identity():
    net = raki.init_network(1, 2, NetworkSpec((3,), ((3, 2), (3, 2))))
    s0 = crandn(np.random.default_rng(0), 4, 4, 2)
    J = jac.chain_jacobian(_params(net, s0))
    assert np.array_equal(J.reshape(32, 32), np.eye(32))


def test_layer_jacobian_identity_and_hand_circulant():
    spec = NetworkSpec((1,), ((1, 1), (1, 1)), slope=1.0)
    delta = ConvKernel(np.ones((1, 1, 1, 1)))
    net = raki.TrainedNetwork(2, 1, [delta], ConvKernel(np.zeros((1, 1, 1, 1))), spec)
    s0 = np.zeros((4, 2, 1), complex)
    s0[:, 0] = 1
    params = _params(net, s0)
    assert np.allclose(jac.layer_jacobian(params, 1).entries.reshape(8, 8), np.eye(8))
    # 4x1 grid (one y column), hand-sized multiplier and kernel
    K = np.array([1.0, 2.0, 3.0, 4.0])[:, None, None] + 0j
    w = np.array([1.0, -1.0, 2.0, 0.5])[:, None, None, None] + 0j
    p2 = ims.ImageSpaceParams(2, 1, [w], [K], np.zeros((4, 1, 1, 1)), {1: 0}, None, "")
    J = jac.layer_jacobian(p2, 1).entries.reshape(4, 4)
    circ = np.array([[1, 4, 3, 2], [2, 1, 4, 3], [3, 2, 1, 4], [4, 3, 2, 1]], float)
    assert np.allclose(J, circ * np.array([1.0, -1.0, 2.0, 0.5])[None, :])


def test_layer_jacobian_columns_are_layer_responses(tiny_params, rng):
    J = jac.layer_jacobian(tiny_params, 1).entries  # [64, 3, 64, 2]
    w, K = tiny_params.hidden_multipliers[0], tiny_params.image_kernels[0]
    from raki_noise.tensor import apply_multiplier, image_conv

    for m, n in [(0, 0), (9, 1), (63, 0)]:
        e = np.zeros((8, 8, 2), complex)
        e[m // 8, m % 8, n] = 1
        col = image_conv(apply_multiplier(e, w), K).reshape(64, 3)
        assert np.allclose(J[:, :, m, n], col, atol=1e-12)


def test_chain_columns_match_frozen_map(tiny_params):
    J = jac.chain_jacobian(tiny_params)
    for m, n in [(0, 0), (17, 1), (40, 0)]:
        e = np.zeros((8, 8, 2), complex)
        e[m // 8, m % 8, n] = 1
        assert np.allclose(J[:, :, m, n], ims.unfold(e, tiny_params).reshape(64, 2), atol=1e-10)


def test_chain_equals_layer_product(tiny_params):
    N = 64
    J = jac.chain_jacobian(tiny_params).reshape(2 * N, 2 * N)
    L1 = jac.layer_jacobian(tiny_params, 1).entries.reshape(3 * N, 2 * N)
    L2 = jac.layer_jacobian(tiny_params, 2).entries.reshape(2 * N, 3 * N)
    F = np.zeros((N, 2, N, 2), complex)
    wf = tiny_params.folded_final.reshape(N, 2, 2)
    for v in range(N):
        F[v, :, v, :] = wf[v].T
    assert np.allclose(J, np.eye(2 * N) + F.reshape(2 * N, 2 * N) @ L2 @ L1, atol=1e-12)


def test_linearity_certified_by_jacobian(tiny_params, tiny_comb, rng):
    J = jac.chain_jacobian(tiny_params).reshape(128, 128)
    x0 = idft2(tiny_comb)
    delta = 50 * crandn(rng, 8, 8, 2)
    lhs = ims.unfold(x0 + delta, tiny_params) - ims.unfold(x0, tiny_params)
    assert np.abs(lhs.ravel() - J @ delta.ravel()).max() < 1e-10 * np.abs(lhs).max()


def test_batched_and_unbatched_bitwise(tiny_params):
    a = jac.chain_jacobian(tiny_params, batch=1)
    b = jac.chain_jacobian(tiny_params, batch=7)
    c = jac.chain_jacobian(tiny_params, batch=128)
    assert np.array_equal(a, b) and np.array_equal(a, c)
    p = crandn(np.random.default_rng(0), 8, 8, 2)
    assert np.array_equal(jac.combined_jacobian(tiny_params, p, batch=1),
                          jac.combined_jacobian(tiny_params, p, batch=64))


def test_combined_equals_apply_combine(tiny_params, rng):
    p = crandn(rng, 8, 8, 2)
    J = jac.chain_jacobian(tiny_params)
    assert np.allclose(jac.combined_jacobian(tiny_params, p), jac.apply_combine(J, p), atol=1e-12)
    sub = jac.combined_jacobian(tiny_params, p, voxels=[3, 10])
    assert np.allclose(sub, jac.apply_combine(J, p)[[3, 10]], atol=1e-12)


def test_apply_combine_examples(rng):
    J = crandn(rng, 6, 3, 6, 3)
    p = crandn(rng, 6, 3)
    loop = np.zeros((6, 6, 3), complex)
    for l in range(6):
        for c in range(3):
            loop[l] += p[l, c] * J[l, c]
    assert np.allclose(jac.apply_combine(J, p), loop)
    e1 = np.zeros((6, 3))
    e1[:, 1] = 1
    assert np.array_equal(jac.apply_combine(J, e1), J[:, 1])
    with pytest.raises(ValueError):
        jac.apply_combine(J, np.ones((6, 2)))


def test_single_coil_combine_collapses(rng):
    J = crandn(rng, 4, 1, 4, 1)
    assert np.array_equal(jac.apply_combine(J, np.ones((4, 1))), J[:, 0])


def test_budget_errors(tiny_params):
    with pytest.raises(jac.BudgetError):
        jac.chain_jacobian(tiny_params, budget=1000)
    with pytest.raises(jac.BudgetError, match="row"):
        jac.combined_jacobian(tiny_params, np.ones((8, 8, 2)), budget=1000)
    with pytest.raises(jac.BudgetError):
        jac.layer_jacobian(tiny_params, 1, budget=10)


def test_grappa_jacobian_is_the_multiplier(small_data):
    s0, acs = phantom.undersample(small_data, phantom.SamplingPattern.centered(small_data.grid, 2))
    low = phantom.lowres(small_data, (16, 16), 2)
    gk = grappa.calibrate(acs, 2, 3, 2)
    net = raki.grappa_as_network(gk)
    s_low = low.full_kspace * (np.arange(16) % 2 == 0)[None, :, None]
    J = jac.chain_jacobian(_params(net, s_low))
    W = grappa.image_space_weights(gk, (16, 16)).reshape(256, 4, 4)
    E = np.zeros_like(J)
    for v in range(256):
        E[v, :, v, :] = W[v].T
    assert np.abs(J - E).max() <= 1e-12 * np.abs(E).max()
    fd = jac.fd_jacobian(jac.frozen_map(_params(net, s_low)), idft2(s_low))
    assert np.abs(fd.re - J).max() < 1e-6 * np.abs(J).max()


def test_fd_frozen_matches_analytical(tiny_params, tiny_comb):
    J = jac.chain_jacobian(tiny_params)
    fd = jac.fd_jacobian(jac.frozen_map(tiny_params), idft2(tiny_comb))
    assert np.abs(fd.re - J).max() < 1e-6 * np.abs(J).max()
    assert np.abs(fd.anti).max() < 1e-6 * np.abs(J).max()


def test_true_branch_agrees_when_branches_agree(tiny_net, tiny_comb):
    # slope 1: every pre-activation has M_re == M_im, so the true map is the
    # frozen map composed with the comb projection
    spec = NetworkSpec(tiny_net.spec.channels, tiny_net.spec.kernel_sizes, 1.0)
    net = raki.TrainedNetwork(2, 2, tiny_net.hidden, tiny_net.final, spec)
    params = _params(net, tiny_comb)
    J = jac.chain_jacobian(params).reshape(128, 128)
    P = np.stack([comb_image(e.reshape(8, 8, 2), 2, 0).ravel() for e in np.eye(128)], axis=1)
    true = lambda x: idft2(raki.infer_kspace(dft2(x), net))
    fd = jac.fd_jacobian(true, idft2(tiny_comb), mode="true-branch")
    assert np.abs(fd.anti).max() < 1e-8
    assert np.abs(fd.re.reshape(128, 128) - J @ P).max() < 1e-8


def test_true_branch_is_real_linear_for_clrelu(tiny_net, tiny_comb):
    true = lambda x: idft2(raki.infer_kspace(dft2(x), tiny_net))
    fd = jac.fd_jacobian(true, idft2(tiny_comb), mode="true-branch")
    assert np.abs(fd.anti).max() > 1e-3
