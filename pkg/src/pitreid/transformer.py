"""Pre-norm transformer encoder layers and the shared trunk."""
import math

import numpy as np

from . import tensor as T
from .embed import trunc_normal
from .tensor import Tensor

_NAMES = ("ln1_gain", "ln1_bias", "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o",
          "ln2_gain", "ln2_bias", "w_fc1", "b_fc1", "w_fc2", "b_fc2")


class EncoderLayerParams:
    """Weights of one encoder layer; linear maps act as ``x @ w + b``."""

    def __init__(self, num_heads, **tensors):
        self.num_heads = num_heads
        for name in _NAMES:
            setattr(self, name, tensors[name])
        c = self.w_q.shape[0]
        if c % num_heads:
            raise ValueError(f"embed_dim {c} not divisible by num_heads {num_heads}")

    @classmethod
    def init(cls, embed_dim, num_heads, mlp_dim, rng):
        c = embed_dim

        def p(arr):
            return Tensor(arr, requires_grad=True)

        return cls(
            num_heads,
            ln1_gain=p(np.ones(c)), ln1_bias=p(np.zeros(c)),
            w_q=p(trunc_normal(rng, (c, c))), b_q=p(np.zeros(c)),
            w_k=p(trunc_normal(rng, (c, c))), b_k=p(np.zeros(c)),
            w_v=p(trunc_normal(rng, (c, c))), b_v=p(np.zeros(c)),
            w_o=p(trunc_normal(rng, (c, c))), b_o=p(np.zeros(c)),
            ln2_gain=p(np.ones(c)), ln2_bias=p(np.zeros(c)),
            w_fc1=p(trunc_normal(rng, (c, mlp_dim))), b_fc1=p(np.zeros(mlp_dim)),
            w_fc2=p(trunc_normal(rng, (mlp_dim, c))), b_fc2=p(np.zeros(c)),
        )

    @property
    def embed_dim(self):
        return self.w_q.shape[0]

    def named_parameters(self, prefix=""):
        return [(prefix + name, getattr(self, name)) for name in _NAMES]


def self_attention(x, params, return_attention=False):
    """Full multi-head self-attention over the token axis of x [..., T, c]."""
    *lead, t, c = x.shape
    heads = params.num_heads
    d = c // heads

    def split(y):
        # [..., T, c] -> [..., H, T, d]
        y = y.reshape(tuple(lead) + (t, heads, d))
        axes = tuple(range(len(lead))) + tuple(len(lead) + i for i in (1, 0, 2))
        return y.transpose(axes)

    q = split(x @ params.w_q + params.b_q)
    k = split(x @ params.w_k + params.b_k)
    v = split(x @ params.w_v + params.b_v)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d))
    attn = T.softmax(scores, axis=-1)
    ctx = attn @ v
    axes = tuple(range(len(lead))) + tuple(len(lead) + i for i in (1, 0, 2))
    ctx = ctx.transpose(axes).reshape(tuple(lead) + (t, c))
    out = ctx @ params.w_o + params.b_o
    if return_attention:
        return out, attn
    return out


def encoder_layer(z, params, eps=1e-6, return_attention=False):
    """z' = z + MSA(LN(z)); out = z' + MLP(LN(z')). Shape-preserving for any T."""
    if z.ndim < 2 or z.shape[-1] != params.embed_dim:
        raise T.ShapeError(f"encoder_layer expects [..., T, {params.embed_dim}], got {z.shape}")
    h = T.layer_norm(z, params.ln1_gain, params.ln1_bias, eps)
    msa = self_attention(h, params, return_attention)
    if return_attention:
        msa, attn = msa
    z1 = z + msa
    h = T.layer_norm(z1, params.ln2_gain, params.ln2_bias, eps)
    out = z1 + (T.gelu(h @ params.w_fc1 + params.b_fc1) @ params.w_fc2 + params.b_fc2)
    if return_attention:
        return out, attn
    return out


class TrunkParams:
    def __init__(self, layers, final_norm=None):
        self.layers = list(layers)
        # optional (gain, bias) applied after the last layer; off by default
        self.final_norm = final_norm

    @classmethod
    def init(cls, depth, embed_dim, num_heads, mlp_dim, rng, final_norm=False):
        layers = [EncoderLayerParams.init(embed_dim, num_heads, mlp_dim, rng) for _ in range(depth)]
        norm = None
        if final_norm:
            norm = (Tensor(np.ones(embed_dim), requires_grad=True),
                    Tensor(np.zeros(embed_dim), requires_grad=True))
        return cls(layers, norm)

    def __len__(self):
        return len(self.layers)

    def named_parameters(self, prefix="trunk."):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_parameters(f"{prefix}{i}."))
        if self.final_norm is not None:
            out.append((prefix + "norm_gain", self.final_norm[0]))
            out.append((prefix + "norm_bias", self.final_norm[1]))
        return out


def run_trunk(z0, trunk, eps=1e-6):
    z = z0
    for layer in trunk.layers:
        z = encoder_layer(z, layer, eps)
    if trunk.final_norm is not None:
        z = T.layer_norm(z, trunk.final_norm[0], trunk.final_norm[1], eps)
    return z
