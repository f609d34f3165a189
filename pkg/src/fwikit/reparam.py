"""CNN generator that maps a fixed latent vector to a velocity model.

Layer stack for B blocks:

    z (100) -> dense -> leaky_relu(0.1) -> reshape (c0, ceil(nz/2^B), ceil(nx/2^B))
    B x [upsample2x -> conv4x4 -> leaky_relu(0.1) -> dropout]
    conv4x4 (1 channel) -> center crop to (nz, nx) -> tanh -> affine map to [v_min, v_max]
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .metrics import mape
from .optimizers import OptimizerConfig, Optimizer

LATENT = 100
SLOPE = 0.1
KERNEL = 4

# dense width and conv channels per block count
ARCHITECTURES = {
    2: (4, (4, 32)),
    3: (16, (16, 32, 16)),
    4: (64, (64, 32, 16, 16)),
    5: (256, (256, 32, 32, 32, 16)),
}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int = 0
    p: float = 0.0


@dataclass
class GeneratorNetwork:
    num_blocks: int
    target_shape: tuple
    v_bounds: tuple
    dropout_p: float
    latent: np.ndarray
    params: dict
    layers: list = field(default_factory=list)

    @property
    def base_shape(self):
        nz, nx = self.target_shape
        s = 2 ** self.num_blocks
        return math.ceil(nz / s), math.ceil(nx / s)

    def n_parameters(self) -> int:
        return int(sum(a.size for a in self.params.values()))


def build_generator(num_blocks: int, target_shape, v_bounds, dropout_p: float = 0.1,
                    seed: int = 0, init: str = "uniform") -> GeneratorNetwork:
    """Weights uniform in +-sqrt(1/fan_in) (or all zero with init="zeros")."""
    if num_blocks not in ARCHITECTURES:
        raise ValueError(f"num_blocks must be one of {sorted(ARCHITECTURES)}")
    nz, nx = target_shape
    if nz < 2 ** num_blocks or nx < 2 ** num_blocks:
        raise ValueError(f"target {target_shape} too small for {num_blocks} halvings")
    v_min, v_max = v_bounds
    if not v_min < v_max:
        raise ValueError("v_bounds must satisfy v_min < v_max")
    if not 0 <= dropout_p < 1:
        raise ValueError("dropout p must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    c0, chans = ARCHITECTURES[num_blocks]
    h0, w0 = math.ceil(nz / 2 ** num_blocks), math.ceil(nx / 2 ** num_blocks)

    def uni(shape, fan_in):
        if init == "zeros":
            return np.zeros(shape)
        lim = math.sqrt(1.0 / fan_in)
        return rng.uniform(-lim, lim, shape)

    params = {"dense_w": uni((c0 * h0 * w0, LATENT), LATENT),
              "dense_b": uni((c0 * h0 * w0,), LATENT)}
    layers = [LayerSpec("dense", c0 * h0 * w0), LayerSpec("leaky_relu"), LayerSpec("reshape", c0)]
    cin = c0
    for i, cout in enumerate(chans):
        fan = cin * KERNEL * KERNEL
        params[f"conv{i}_w"] = uni((cout, cin, KERNEL, KERNEL), fan)
        params[f"conv{i}_b"] = uni((cout,), fan)
        layers += [LayerSpec("upsample2x"), LayerSpec("conv4x4", cout), LayerSpec("leaky_relu"),
                   LayerSpec("dropout", p=dropout_p)]
        cin = cout
    fan = cin * KERNEL * KERNEL
    params["out_w"] = uni((1, cin, KERNEL, KERNEL), fan)
    params["out_b"] = uni((1,), fan)
    layers += [LayerSpec("conv4x4", 1), LayerSpec("tanh")]
    latent = np.random.default_rng(seed + 1).standard_normal(LATENT)
    return GeneratorNetwork(num_blocks, tuple(target_shape), (float(v_min), float(v_max)),
                            dropout_p, latent, params, layers)


def sample_masks(net: GeneratorNetwork, rng, p: float | None = None) -> list:
    """One 0/1 keep-mask per dropout layer."""
    p = net.dropout_p if p is None else p
    h, w = net.base_shape
    _, chans = ARCHITECTURES[net.num_blocks]
    masks = []
    for i, c in enumerate(chans):
        s = 2 ** (i + 1)
        masks.append((rng.random((c, h * s, w * s)) >= p).astype(np.float64))
    return masks


def generate(net: GeneratorNetwork, weights: dict | None = None, masks=None,
             p: float | None = None) -> Tensor:
    """Velocity field from the network; `weights` maps names to (possibly tracked) tensors."""
    wts = weights if weights is not None else {k: Tensor(v) for k, v in net.params.items()}
    p = net.dropout_p if p is None else p
    c0, chans = ARCHITECTURES[net.num_blocks]
    h, w = net.base_shape
    x = ad.dense(Tensor(net.latent), wts["dense_w"], wts["dense_b"])
    x = ad.reshape(ad.leaky_relu(x, SLOPE), (c0, h, w))
    for i in range(len(chans)):
        x = ad.conv2d(ad.upsample2x(x), wts[f"conv{i}_w"], wts[f"conv{i}_b"])
        x = ad.leaky_relu(x, SLOPE)
        if masks is not None and p > 0:
            x = ad.dropout(x, masks[i], p)
    x = ad.conv2d(x, wts["out_w"], wts["out_b"])
    nz, nx = net.target_shape
    H, W = x.shape[1:]
    z0, x0 = (H - nz) // 2, (W - nx) // 2
    raw = ad.reshape(x[0:1, z0:z0 + nz, x0:x0 + nx], (nz, nx))
    v_min, v_max = net.v_bounds
    v = ad.add(ad.scale(ad.add(ad.tanh(raw), 1.0), 0.5 * (v_max - v_min)), v_min)
    # guards the last ulp of the affine map; identity (and unit gradient) inside the range
    return ad.clamp(v, v_min, v_max)


def forward(net: GeneratorNetwork, train_mode: bool = False, rng=None) -> np.ndarray:
    masks = sample_masks(net, rng if rng is not None else np.random.default_rng()) \
        if train_mode and net.dropout_p > 0 else None
    with ad.finite_checks(True):
        return generate(net, masks=masks).data


def value_and_weight_grad(net: GeneratorNetwork, loss_fn, masks=None):
    """loss_fn(velocity Tensor) -> scalar Tensor; returns (loss, velocity, grads by name)."""
    with Tape() as tape:
        wts = {k: tape.variable(v) for k, v in net.params.items()}
        v = generate(net, wts, masks)
        loss = loss_fn(v)
    g = ad.backward(tape, loss, list(wts.values()))
    return loss.item(), v.data, {k: g[t.node] for k, t in wts.items()}


@dataclass
class PretrainReport:
    iterations: int
    mape: float
    converged: bool


def pretrain(net: GeneratorNetwork, m0, max_iters: int = 2000, tol: float = 1.0,
             eta: float = 1e-3) -> PretrainReport:
    """Fit forward(net) to m0 with Adam on 1/2 ||forward - m0||^2 (dropout off).

    `tol` is a MAPE in percent.  The network is updated in place.
    """
    m0 = np.asarray(m0, dtype=np.float64)
    if m0.shape != tuple(net.target_shape):
        raise ValueError(f"m0 shape {m0.shape} != target {net.target_shape}")
    # normalise so the loss scale does not depend on velocity units
    scale = 1.0 / (net.v_bounds[1] - net.v_bounds[0])
    target = Tensor(m0)

    def loss_fn(v):
        r = ad.scale(ad.sub(v, target), scale)
        return ad.scale(ad.tsum(r * r), 0.5)

    opt = Optimizer(OptimizerConfig(kind="Adam", eta=eta))
    err = mape(m0, forward(net))
    it = 0
    while err >= tol and it < max_iters:
        _, _, grads = value_and_weight_grad(net, loss_fn)
        net.params = opt.update(net.params, grads)
        it += 1
        err = mape(m0, forward(net))
    return PretrainReport(it, err, err < tol)


def dropout_uncertainty(net: GeneratorNetwork, p: float, n_samples: int, seed: int = 0):
    """Pointwise mean and population std over n_samples dropout realisations."""
    if not 0 <= p < 1:
        raise ValueError("p must lie in [0, 1)")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    acc = np.zeros(net.target_shape)
    acc2 = np.zeros(net.target_shape)
    with ad.finite_checks(True):
        for _ in range(n_samples):
            masks = sample_masks(net, rng, p) if p > 0 else None
            v = generate(net, masks=masks, p=p).data
            acc += v
            acc2 += v * v
    mean = acc / n_samples
    var = np.maximum(acc2 / n_samples - mean * mean, 0.0)
    if p == 0:
        var[:] = 0.0
    return mean, np.sqrt(var)


def parameter_count_audit(num_blocks: int, target_shape) -> dict:
    """Parameter count of the built network and of the alternative layout.

    The alternative reads the dense layer as bias-free with output
    (c0, ceil(nz/2^(B-1)), ceil(nx/2^(B-1))), drops the first block's conv and
    uses bias-free convs for the rest.
    """
    nz, nx = target_shape
    c0, chans = ARCHITECTURES[num_blocks]
    net = build_generator(num_blocks, target_shape, (0.0, 1.0), init="zeros")
    B = num_blocks
    alt = LATENT * c0 * math.ceil(nz / 2 ** (B - 1)) * math.ceil(nx / 2 ** (B - 1))
    chain = [c0] + list(chans[1:]) + [1]
    alt += sum(KERNEL * KERNEL * a * b for a, b in zip(chain[:-1], chain[1:]))
    return {"built": net.n_parameters(), "alternative": alt}
