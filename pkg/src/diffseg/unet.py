"""Tiny 3D U-net denoiser conditioned on image, noisy mask and timestep."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Params = dict[str, Tensor]


@dataclass
class UNetConfig:
    num_classes: int = 4
    channels: tuple[int, ...] = (8, 16)
    time_dim: int = 16
    time_hidden: int = 32
    instance_norm: bool = False
    dtype: str = "float32"

    @property
    def levels(self) -> int:
        return len(self.channels)

    @property
    def in_channels(self) -> int:
        return 1 + self.num_classes

    def check_spatial(self, shape) -> None:
        factor = 2 ** (self.levels - 1)
        if any(n % factor for n in shape):
            raise ValueError(
                f"spatial shape {tuple(shape)} must be divisible by {factor} for {self.levels} levels"
            )


def sinusoidal_time_embedding(k, dim: int) -> np.ndarray:
    """``[sin(k w_0), cos(k w_0), sin(k w_1), ...]`` with ``w_i = 10000**(-2i/dim)``.

    ``k`` may be a scalar (returns ``[dim]``) or a 1-D array (``[len(k), dim]``).
    """
    if dim % 2:
        raise ValueError(f"embedding dimension must be even, got {dim}")
    k_arr = np.asarray(k, dtype=np.float64)
    freqs = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    angles = k_arr[..., None] * freqs
    out = np.empty(k_arr.shape + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def _blocks(cfg: UNetConfig) -> list[tuple[str, int, int]]:
    """(name, in_channels, out_channels) for every double-conv block."""
    ch = cfg.channels
    blocks = [("enc0", cfg.in_channels, ch[0])]
    blocks += [(f"enc{i}", ch[i - 1], ch[i]) for i in range(1, cfg.levels)]
    blocks += [(f"dec{i}", 2 * ch[i], ch[i]) for i in range(cfg.levels - 2, -1, -1)]
    return blocks


def init_params(cfg: UNetConfig, seed: int) -> Params:
    """Fan-in scaled uniform weights, zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(cfg.dtype)
    params: Params = {}

    def conv(name, cin, cout, k=3):
        bound = np.sqrt(6.0 / (cin * k**3))
        params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, (cout, cin, k, k, k)).astype(dtype))
        params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=dtype))

    def dense(name, cin, cout):
        bound = np.sqrt(6.0 / cin)
        params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, (cin, cout)).astype(dtype))
        params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=dtype))

    dense("time.fc", cfg.time_dim, cfg.time_hidden)
    ch = cfg.channels
    for name, cin, cout in _blocks(cfg):
        conv(f"{name}.conv_a", cin, cout)
        dense(f"{name}.time", cfg.time_hidden, cout)
        conv(f"{name}.conv_b", cout, cout)
    for i in range(cfg.levels - 1):
        conv(f"down{i}", ch[i], ch[i])
        conv(f"up{i}", ch[i + 1], ch[i])
    conv("out", ch[0], cfg.num_classes, k=1)
    return params


def count_params(params: Params) -> int:
    return int(sum(p.size for p in params.values()))


def _conv(params: Params, name: str, x: Tensor, stride: int = 1) -> Tensor:
    return ad.conv3d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride)


def _block(params, cfg, name, x, temb):
    n = x.shape[0]
    h = _conv(params, f"{name}.conv_a", x)
    t = ad.add(ad.matmul(temb, params[f"{name}.time.w"]), params[f"{name}.time.b"])
    h = ad.add(h, ad.reshape(t, (n, -1, 1, 1, 1)))
    if cfg.instance_norm:
        h = ad.instance_norm(h)
    h = ad.silu(h)
    h = _conv(params, f"{name}.conv_b", h)
    if cfg.instance_norm:
        h = ad.instance_norm(h)
    return ad.silu(h)


def unet_apply(params: Params, cfg: UNetConfig, image: Tensor, x_t: Tensor, t) -> Tensor:
    """Forward pass.

    ``image`` is ``[N, 1, D, H, W]`` and ``x_t`` is ``[N, C, D, H, W]``
    (unbatched inputs get a batch axis added and removed). ``t`` holds one
    timestep per case. Output has ``C`` channels: logits or a noise estimate.
    """
    unbatched = image.ndim == 4
    if unbatched:
        image = ad.reshape(image, (1,) + image.shape)
        x_t = ad.reshape(x_t, (1,) + x_t.shape)
    cfg.check_spatial(image.shape[2:])
    n = image.shape[0]
    t = np.broadcast_to(np.asarray(t), (n,))
    dtype = params["out.w"].dtype
    temb = Tensor(sinusoidal_time_embedding(t, cfg.time_dim).astype(dtype))
    temb = ad.silu(ad.add(ad.matmul(temb, params["time.fc.w"]), params["time.fc.b"]))

    h = ad.concat([image, x_t], axis=1)
    skips = []
    for i in range(cfg.levels):
        if i > 0:
            h = ad.silu(_conv(params, f"down{i - 1}", h, stride=2))
        h = _block(params, cfg, f"enc{i}", h, temb)
        skips.append(h)
    for i in range(cfg.levels - 2, -1, -1):
        up = ad.silu(_conv(params, f"up{i}", ad.upsample_nearest(h)))
        h = _block(params, cfg, f"dec{i}", ad.concat([skips[i], up], axis=1), temb)
    out = _conv(params, "out", h)
    if unbatched:
        out = ad.reshape(out, out.shape[1:])
    return out


def make_denoiser(params: Params, cfg: UNetConfig):
    """Bind parameters into a ``(image, x_t, t) -> output`` callable."""

    def denoiser(image: Tensor, x_t: Tensor, t) -> Tensor:
        return unet_apply(params, cfg, image, x_t, t)

    return denoiser


def baseline_apply(params: Params, cfg: UNetConfig, image: Tensor) -> Tensor:
    """Non-diffusion use of the same network: zero mask channels, timestep 0."""
    shape = list(image.shape)
    shape[image.ndim - 4] = cfg.num_classes
    zeros = Tensor(np.zeros(shape, dtype=image.dtype))
    n = image.shape[0] if image.ndim == 5 else 1
    return unet_apply(params, cfg, image, zeros, np.zeros(n, dtype=np.int64))
