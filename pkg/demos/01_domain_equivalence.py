"""
Same network, two domains
=========================

Train a small RAKI network on the seeded phantom, then run it once as a
k-space CNN and once as per-voxel multipliers plus activation
convolutions in image space.  The two reconstructions agree to rounding.
"""

import numpy as np

from raki_noise import experiments as ex, imagespace as ims, metrics, phantom, raki
from raki_noise.tensor import apply_multiplier, comb_kspace, idft2

R = 4
data = phantom.generate(phantom.PhantomSpec()).prewhitened()
s0, acs = phantom.undersample(data, phantom.SamplingPattern.centered(data.grid, R))
print("grid", data.grid, "coils", data.ncoils, "ACS lines", acs.shape[1])

# --- train (a lighter network than the default keeps this under a minute) ---
spec = raki.NetworkSpec(channels=(32, 16))
net = ex.train_method(data, "raki", R, spec=spec, cfg=raki.TrainConfig(epochs=300))
print(f"loss {net.losses[0]:.3e} -> {net.losses[-1]:.3e}")

# --- k-space inference vs image-space inference ---
k_img = idft2(raki.infer_kspace(s0, net))
unf, _, params = ims.reconstruct_image_space(s0, net)
print("max relative deviation:", np.abs(k_img - unf).max() / np.abs(k_img).max())

# the activation masks turn into small image-space kernels
for n, k in enumerate(params.image_kernels, 1):
    energy = np.abs(k) ** 2
    print(f"layer {n}: {100 * energy[0, 0].sum() / energy.sum():.1f}% of mask kernel energy at the origin")

# --- quality against the noise-free truth ---
roi = phantom.roi_mask(data)
p = ims.coil_combine_weights(data, roi)
ref = ims.combine(data.truth_image, p)
print("RAKI  ", metrics.report(ims.combine(unf, p), ref, roi))

g_net = ex.train_method(data, "grappa", R)
g_unf, _, _ = ims.reconstruct_image_space(s0, g_net)
print("GRAPPA", metrics.report(ims.combine(g_unf, p), ref, roi))

# --- without activations the whole pipeline is a single per-voxel matrix ---
lin = ex.train_method(data, "raki-linear", R, spec=spec, cfg=raki.TrainConfig(epochs=300))
l_unf, _, l_params = ims.reconstruct_image_space(s0, lin)
x0 = idft2(comb_kspace(s0, R, 0))
single = apply_multiplier(x0, ims.effective_multiplier(l_params))
print("linear network as one multiplier, deviation:", np.abs(single - l_unf).max() / np.abs(l_unf).max())
