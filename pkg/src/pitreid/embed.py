"""Patch embedding and the initial token sequence (class, position, camera)."""
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .tensor import Tensor


def trunc_normal(rng, shape, std=0.02, bound=2.0):
    """Normal(0, std) truncated to +-bound*std by resampling the tails."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


@dataclass(frozen=True)
class EmbedConfig:
    image_height: int = 256
    image_width: int = 128
    channels_in: int = 3
    kernel: int = 16
    stride: int = 12
    embed_dim: int = 768
    lambda1: float = 1.0
    lambda2: float = 1.5
    num_cameras: int = 6

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1:
            raise ValueError("kernel and stride must be positive")
        if self.grid_height < 1 or self.grid_width < 1:
            raise ValueError(
                f"image {self.image_height}x{self.image_width} smaller than kernel {self.kernel}")
        if self.num_cameras < 1:
            raise ValueError("num_cameras must be >= 1")

    @property
    def grid_height(self):
        return (self.image_height - self.kernel) // self.stride + 1

    @property
    def grid_width(self):
        return (self.image_width - self.kernel) // self.stride + 1

    @property
    def num_patches(self):
        return self.grid_height * self.grid_width


class EmbedParams:
    def __init__(self, conv_weight, conv_bias, cls_token, pos_embed, cam_embed):
        self.conv_weight = conv_weight
        self.conv_bias = conv_bias
        self.cls_token = cls_token
        self.pos_embed = pos_embed
        self.cam_embed = cam_embed

    @classmethod
    def init(cls, config, rng):
        c, k = config.embed_dim, config.kernel
        return cls(
            conv_weight=Tensor(trunc_normal(rng, (c, config.channels_in, k, k)), requires_grad=True),
            conv_bias=Tensor(np.zeros(c), requires_grad=True),
            cls_token=Tensor(np.zeros((1, c)), requires_grad=True),
            pos_embed=Tensor(trunc_normal(rng, (config.num_patches + 1, c)), requires_grad=True),
            cam_embed=Tensor(trunc_normal(rng, (config.num_cameras, c)), requires_grad=True),
        )

    def named_parameters(self, prefix="embed."):
        return [(prefix + name, getattr(self, name))
                for name in ("conv_weight", "conv_bias", "cls_token", "pos_embed", "cam_embed")]


def patchify(images, params, config):
    """Strided convolution producing the feature map ``f`` of shape [h, w, c].

    Accepts one image [C, H, W] or a batch [B, C, H, W]; batched input gives
    [B, h, w, c]. Flattening ``f`` row-major yields the patch tokens in scan
    order (top-left first, rows first).
    """
    x = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    expected = (config.channels_in, config.image_height, config.image_width)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise T.ShapeError(f"image shape {x.shape[-3:]} does not match config {expected}")
    k, s = config.kernel, config.stride
    h, w = config.grid_height, config.grid_width
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :h, :w]
    # [B, C, h, w, k, k] -> [B, h, w, C*k*k]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(x.shape[0], h, w, -1)
    weight = params.conv_weight.reshape(config.embed_dim, -1).transpose()
    f = T.matmul(Tensor(cols), weight) + params.conv_bias
    return f[0] if single else f


def assemble_z0(f, camera_ids, params, config):
    """Token sequence [cls; p_1..p_N] + l1*pos + l2*camera (row-broadcast)."""
    single = f.ndim == 3
    if single:
        f = f.reshape((1,) + f.shape)
    cams = np.atleast_1d(np.asarray(camera_ids, dtype=np.intp))
    b, h, w, c = f.shape
    if cams.shape != (b,):
        raise T.ShapeError(f"expected {b} camera ids, got {cams.shape}")
    if cams.min() < 0 or cams.max() >= config.num_cameras:
        raise ValueError(f"camera id out of range [0, {config.num_cameras}): {cams.tolist()}")
    tokens = f.reshape(b, h * w, c)
    cls = T.broadcast_to(params.cls_token.reshape(1, 1, c), (b, 1, c))
    seq = T.concat([cls, tokens], axis=1)
    view = T.take(params.cam_embed, cams, axis=0).reshape(b, 1, c)
    z0 = seq + config.lambda1 * params.pos_embed + config.lambda2 * view
    return z0[0] if single else z0
