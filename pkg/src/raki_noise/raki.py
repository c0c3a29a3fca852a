"""RAKI: a complex-valued CNN interpolating missing k-space lines.

The network is a stack of circular correlations with complex leaky ReLU
(CLReLU) activations after every hidden layer and a linear final layer
whose ``C * (R - 1)`` output channels hold, for every coil ``c`` and
offset ``r``, the prediction of line ``p + delta_r`` made at aligned line
``p``.  Channel ``c * (R - 1) + (r - 1)`` belongs to ``(c, r)``.

Training is full-batch ADAM on the ACS block with hand-written
backpropagation.  The network has no biases and CLReLU is positively
homogeneous, so the ACS is rescaled to unit peak magnitude for training
without changing the learned map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    AXES,
    ConvKernel,
    aligned_residue,
    comb_kspace,
    kspace_shift,
    tap_offsets,
    target_shift,
)

ACTIVATIONS = ("clrelu", "identity")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    channels: tuple[int, ...] = (128, 64)
    kernel_sizes: tuple[tuple[int, int], ...] = ((5, 2), (1, 1), (3, 2))
    slope: float = 0.1
    activation: str = "clrelu"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "kernel_sizes", tuple(tuple(int(k) for k in ks) for ks in self.kernel_sizes))
        if len(self.kernel_sizes) != len(self.channels) + 1:
            raise ValueError(f"need {len(self.channels) + 1} kernel sizes (hidden layers + final), got {len(self.kernel_sizes)}")
        if not 0 < self.slope <= 1:
            raise ValueError(f"slope must lie in (0, 1], got {self.slope}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0:
            raise ValueError("need epochs >= 1 and lr > 0")


@dataclass
class TrainedNetwork:
    R: int
    ncoils: int
    hidden: list
    final: ConvKernel
    spec: NetworkSpec
    losses: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def kernels(self) -> list:
        return list(self.hidden) + [self.final]

    @property
    def residue(self) -> int:
        return aligned_residue(self.kernels, self.R)

    @property
    def shifts(self) -> dict:
        q = self.residue
        return {r: target_shift(r, q, self.R) for r in range(1, self.R)}

    def channel(self, c: int, r: int) -> int:
        return c * (self.R - 1) + (r - 1)

    def with_activation(self, activation: str) -> "TrainedNetwork":
        spec = NetworkSpec(self.spec.channels, self.spec.kernel_sizes, self.spec.slope, activation)
        return TrainedNetwork(self.R, self.ncoils, list(self.hidden), self.final, spec, self.losses)


def clrelu(s: np.ndarray, a: float) -> np.ndarray:
    """Leaky ReLU applied separately to real and imaginary parts."""
    re, im = s.real, s.imag
    return np.where(re > 0, re, a * re) + 1j * np.where(im > 0, im, a * im)


def clrelu_masks(s: np.ndarray, a: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-part slopes: 1 where the part is positive, ``a`` otherwise."""
    return np.where(s.real > 0, 1.0, a), np.where(s.imag > 0, 1.0, a)


def _dilations(spec: NetworkSpec, R: int) -> list[tuple[int, int]]:
    # every multi-tap ky kernel is dilated by R so all taps stay on the comb
    return [(1, R if ky > 1 else 1) for _, ky in spec.kernel_sizes]


def init_network(R: int, ncoils: int, spec: NetworkSpec = NetworkSpec(), seed: int = 0) -> TrainedNetwork:
    """Complex Glorot initialisation (independent real/imag, variance 1/(fan_in + fan_out))."""
    rng = np.random.default_rng(seed)
    chans = [ncoils, *spec.channels, ncoils * (R - 1)]
    kernels = []
    for n, ((kx, ky), dil) in enumerate(zip(spec.kernel_sizes, _dilations(spec, R))):
        shape = (kx, ky, chans[n], chans[n + 1])
        std = np.sqrt(1.0 / (kx * ky * (chans[n] + chans[n + 1])))
        taps = std * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
        kernels.append(ConvKernel(taps, dil))
    return TrainedNetwork(R, ncoils, kernels[:-1], kernels[-1], spec)


def _correlate(s, taps, offsets):
    ox, oy = offsets
    out = np.zeros(s.shape[:-1] + (taps.shape[3],), dtype=np.complex128)
    for i, dx in enumerate(ox):
        for j, dy in enumerate(oy):
            out += np.roll(s, (-dx, -dy), axis=AXES) @ taps[i, j]
    return out


def _correlate_grads(s, g_out, taps, offsets):
    ox, oy = offsets
    g_taps = np.empty_like(taps)
    g_s = np.zeros_like(s)
    cin, cout = taps.shape[2:]
    g_flat = g_out.reshape(-1, cout)
    for i, dx in enumerate(ox):
        for j, dy in enumerate(oy):
            shifted = np.roll(s, (-dx, -dy), axis=AXES).reshape(-1, cin)
            g_taps[i, j] = shifted.conj().T @ g_flat
            g_s += np.roll(g_out @ taps[i, j].conj().T, (dx, dy), axis=AXES)
    return g_taps, g_s


def forward(s0: np.ndarray, net: TrainedNetwork) -> tuple[np.ndarray, list]:
    """Run the network on ``s0 [..., Nx, Ny, C]``.

    Returns the final-layer output and the hidden-layer pre-activations.
    """
    if s0.shape[-1] != net.ncoils:
        raise ValueError(f"data has {s0.shape[-1]} coils, network expects {net.ncoils}")
    x = s0
    pre = []
    for k in net.hidden:
        if x.shape[-1] != k.cin:
            raise ValueError(f"layer expects {k.cin} channels, got {x.shape[-1]}")
        k.check_fits(x.shape[-3:-1])
        z = _correlate(x, k.taps, k.offsets)
        pre.append(z)
        x = clrelu(z, net.spec.slope) if net.spec.activation == "clrelu" else z
    net.final.check_fits(x.shape[-3:-1])
    return _correlate(x, net.final.taps, net.final.offsets), pre


def reassemble(s0: np.ndarray, s_int: np.ndarray, net: TrainedNetwork) -> np.ndarray:
    """Comb lines of ``s0`` plus each offset channel moved onto its missing lines."""
    R = net.R
    out = comb_kspace(s0, R, 0)
    for r, d in net.shifts.items():
        idx = [net.channel(c, r) for c in range(net.ncoils)]
        out = out + comb_kspace(kspace_shift(s_int[..., idx], d), R, r)
    return out


def infer_kspace(s0: np.ndarray, net: TrainedNetwork) -> np.ndarray:
    """Full k-space from zero-filled ``s0``; ACS lines off the comb are not reinserted."""
    comb = comb_kspace(s0, net.R, 0)
    if net.R == 1:
        return comb
    s_int, _ = forward(comb, net)
    return reassemble(comb, s_int, net)


def training_pairs(acs: np.ndarray, net: TrainedNetwork) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inputs, targets and 0/1 loss weights on the ACS block.

    Every ky position whose receptive field and target line lie inside the
    block is used; the dilated taps see exactly the lines an aligned
    position would see after undersampling.
    """
    nx, nacs, nc = acs.shape
    lo = sum(int(k.offsets[1].min()) for k in net.kernels)
    hi = sum(int(k.offsets[1].max()) for k in net.kernels)
    p = np.arange(nacs)
    targets = np.zeros((nx, nacs, nc * (net.R - 1)), dtype=np.complex128)
    weights = np.zeros((nacs, nc * (net.R - 1)))
    for r, d in net.shifts.items():
        ok = (p + lo >= 0) & (p + hi < nacs) & (p + d >= 0) & (p + d < nacs)
        for c in range(nc):
            ch = net.channel(c, r)
            targets[:, ok, ch] = acs[:, p[ok] + d, c]
            weights[ok, ch] = 1.0
    if not weights.any():
        raise TrainingError(f"receptive field (ky span {hi - lo + 1}) does not fit the {nacs}-line ACS")
    return acs.copy(), targets, np.broadcast_to(weights, targets.shape).copy()


def loss_and_grads(taps: list, net: TrainedNetwork, inputs, targets, weights) -> tuple[float, list]:
    """Weighted mean squared complex error and its gradients w.r.t. every tap array.

    Gradients use the ``dL/dRe + i dL/dIm`` convention; the CLReLU
    sub-derivative at exactly zero is the slope ``a``.
    """
    a = net.spec.slope
    offsets = [k.offsets for k in net.kernels]
    xs, pres = [inputs], []
    x = inputs
    for n in range(len(taps) - 1):
        z = _correlate(x, taps[n], offsets[n])
        pres.append(z)
        x = clrelu(z, a) if net.spec.activation == "clrelu" else z
        xs.append(x)
    out = _correlate(x, taps[-1], offsets[-1])
    m = weights.sum()
    err = weights * (out - targets)
    loss = float(np.sum(np.abs(err) ** 2) / m)
    g = 2.0 * err / m
    grads = [None] * len(taps)
    for n in range(len(taps) - 1, -1, -1):
        grads[n], g = _correlate_grads(xs[n], g, taps[n], offsets[n])
        if n > 0 and net.spec.activation == "clrelu":
            m_re, m_im = clrelu_masks(pres[n - 1], a)
            g = m_re * g.real + 1j * (m_im * g.imag)
    return loss, grads


class Adam:
    """ADAM on complex arrays, treating real and imaginary parts as separate parameters."""

    def __init__(self, params: list, lr=3e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(p.shape + (2,)) for p in params]
        self.v = [np.zeros(p.shape + (2,)) for p in params]
        self.t = 0

    def step(self, grads: list) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            gr = g.view(np.float64).reshape(m.shape)
            m *= self.beta1
            m += (1.0 - self.beta1) * gr
            v *= self.beta2
            v += (1.0 - self.beta2) * gr * gr
            p.view(np.float64).reshape(m.shape)[...] -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def fit(net: TrainedNetwork, inputs, targets, weights, cfg: TrainConfig) -> TrainedNetwork:
    """Full-batch ADAM from the weights in ``net``; returns a new network."""
    taps = [np.ascontiguousarray(k.taps).copy() for k in net.kernels]
    opt = Adam(taps, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    losses = np.empty(cfg.epochs + 1)
    for epoch in range(cfg.epochs):
        loss, grads = loss_and_grads(taps, net, inputs, targets, weights)
        if not np.isfinite(loss):
            raise TrainingError(f"training diverged at epoch {epoch} (loss {loss})")
        losses[epoch] = loss
        opt.step(grads)
    losses[-1] = loss_and_grads(taps, net, inputs, targets, weights)[0]
    if not np.isfinite(losses[-1]):
        raise TrainingError(f"training diverged at epoch {cfg.epochs}")
    kernels = [ConvKernel(t, k.dilation) for t, k in zip(taps, net.kernels)]
    return TrainedNetwork(net.R, net.ncoils, kernels[:-1], kernels[-1], net.spec, losses)


def train(acs: np.ndarray, R: int, spec: NetworkSpec = NetworkSpec(), cfg: TrainConfig = TrainConfig()) -> TrainedNetwork:
    """Scan-specific training on a fully sampled ACS block ``[Nx, n_acs, C]``."""
    acs = np.asarray(acs, dtype=np.complex128)
    net = init_network(R, acs.shape[-1], spec, cfg.seed)
    if R == 1:
        return net
    peak = np.abs(acs).max()
    scale = peak if peak > 0 else 1.0
    inputs, targets, weights = training_pairs(acs / scale, net)
    return fit(net, inputs, targets, weights, cfg)


def receptive_span(net: TrainedNetwork) -> int:
    """Number of ky lines covered by the network's receptive field."""
    return sum(int(np.ptp(tap_offsets(k.taps.shape[1], k.dilation[1]))) for k in net.kernels) + 1


def compose_linear(net: TrainedNetwork) -> ConvKernel:
    """Brute-force composition of all layers into one undilated kernel.

    Only meaningful for identity activation: correlating with ``w1`` then
    ``w2`` equals correlating once with taps ``sum w1[o1] @ w2[o2]`` at
    offset ``o1 + o2``.
    """
    taps = {(0, 0): np.eye(net.ncoils, dtype=np.complex128)}
    for k in net.kernels:
        ox, oy = k.offsets
        nxt = {}
        for (x0, y0), t in taps.items():
            for i, dx in enumerate(ox):
                for j, dy in enumerate(oy):
                    key = (x0 + int(dx), y0 + int(dy))
                    nxt[key] = nxt.get(key, 0) + t @ k.taps[i, j]
        taps = nxt
    xs = [o[0] for o in taps]
    ys = [o[1] for o in taps]
    hx = max(max(xs), -min(xs))
    hy = max(max(ys), -min(ys))
    out = np.zeros((2 * hx + 1, 2 * hy + 1, net.ncoils, net.final.cout), dtype=np.complex128)
    for (x, y), t in taps.items():
        out[x + hx, y + hy] = t
    return ConvKernel(out, (1, 1))


def grappa_as_network(gk) -> TrainedNetwork:
    """A GRAPPA kernel set as a network with no hidden layers."""
    nc, R = gk.ncoils, gk.R
    kx, ky = gk.footprint
    taps = np.zeros((kx, ky, nc, nc * max(R - 1, 0)), dtype=np.complex128)
    for r, k in gk.kernels.items():
        for c in range(nc):
            taps[..., c * (R - 1) + (r - 1)] = k.taps[..., c]
    spec = NetworkSpec((), ((kx, ky),), activation="identity")
    return TrainedNetwork(R, nc, [], ConvKernel(taps, (1, R if ky > 1 else 1)), spec)
