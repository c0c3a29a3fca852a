"""
g-factor at lower SNR
=====================

Add noise to reach 3x and 5x the acquired level, retrain, and compare the
analytical and Monte-Carlo maps at each level.
"""

from raki_noise import experiments as ex, raki
from raki_noise.phantom import PhantomSpec, generate

data = generate(PhantomSpec()).prewhitened()
sweep = ex.snr_sweep(data, "raki", 4, factors=(1, 3, 5), grid=(32, 32), n_replicas=500,
                     spec=raki.NetworkSpec(channels=(32, 16)), cfg=raki.TrainConfig(epochs=300))

for s in sweep:
    c = s["comparison"]
    g = s["g_analytical"].in_roi()
    print(f"noise x{s['factor']}: mean g {g.mean():.3f}, median gap {c['median_gap']:.3f}, "
          f"p95 {c['p95_gap']:.3f}, final loss {s['net'].losses[-1]:.3e}")
