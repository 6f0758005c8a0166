"""Multi-direction token division and per-image feature pyramids.

Patch tokens coming out of the trunk are laid back onto their h x w grid and
cut four ways: not at all (global), into vertical bands, into horizontal
stripes, and into rectangular blocks. Every part gets its own copy of the
class token and goes through the direction's shared encoder layer; only the
class-token outputs are kept.

Division strings follow the ablation notation, e.g. ``1x210_105x2_3x70_6p``:

* ``1x<N>``            no division
* ``<t>x<n>``          vertical, n parts of t tokens (written tokens-first)
* ``<n>x<t>``          horizontal, n parts of t tokens (written parts-first)
* ``<n>p``             n rectangular blocks
* a trailing ``v``/``h`` forces the direction when ``t`` and ``n`` alone do not
  say it (the unsuffixed form is vertical when the first number is larger).
"""
import re
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .transformer import EncoderLayerParams, encoder_layer

GLOBAL, VERTICAL, HORIZONTAL, PATCH = "global", "vertical", "horizontal", "patch"
KINDS = (GLOBAL, VERTICAL, HORIZONTAL, PATCH)


class DivisionError(ValueError):
    pass


# index arithmetic ------------------------------------------------------------

def vertical_indices(h, w, parts):
    """[parts, N/parts] token indices; column-major flatten cut into equal chunks."""
    n = h * w
    if parts < 1 or n % parts:
        raise DivisionError(f"vertical division: N={n} (h={h}, w={w}) not divisible by D_v={parts}")
    return np.arange(n).reshape(h, w).T.reshape(parts, n // parts)


def horizontal_indices(h, w, parts):
    """[parts, N/parts] token indices; row-major flatten cut into equal chunks."""
    n = h * w
    if parts < 1 or n % parts:
        raise DivisionError(f"horizontal division: N={n} (h={h}, w={w}) not divisible by D_h={parts}")
    return np.arange(n).reshape(parts, n // parts)


def patch_indices(h, w, d_v, d_h):
    """[D_v*D_h, N/D_p] indices of rectangular blocks, row-major inside a block.

    Blocks are ordered by row band first, then by column band.
    """
    if d_v < 1 or w % d_v:
        raise DivisionError(f"patch division: w={w} not divisible by D_v={d_v}")
    if d_h < 1 or h % d_h:
        raise DivisionError(f"patch division: h={h} not divisible by D_h={d_h}")
    grid = np.arange(h * w).reshape(d_h, h // d_h, d_v, w // d_v)
    return grid.transpose(0, 2, 1, 3).reshape(d_h * d_v, -1)


# division spec ----------------------------------------------------------------

@dataclass(frozen=True)
class DivisionLayer:
    kind: str
    parts: int
    tokens: int = None  # tokens per part as written; None for patch layers

    def __str__(self):
        if self.kind == GLOBAL:
            return f"1x{self.tokens}"
        if self.kind == PATCH:
            return f"{self.parts}p"
        if self.kind == VERTICAL:
            return f"{self.tokens}x{self.parts}" + ("" if self.tokens > self.parts else "v")
        return f"{self.parts}x{self.tokens}" + ("" if self.parts < self.tokens else "h")


_TOKEN = re.compile(r"^(?:(\d+)[x×X](\d+)([vh]?)|(\d+)p)$")


@dataclass(frozen=True)
class DivisionSpec:
    layers: tuple

    @classmethod
    def parse(cls, text, num_tokens=None):
        text = text.strip()
        if not text:
            raise DivisionError("empty division spec")
        layers = []
        for tok in text.split("_"):
            m = _TOKEN.match(tok)
            if m is None:
                raise DivisionError(f"bad division token {tok!r} in {text!r}")
            if m.group(4) is not None:
                n = int(m.group(4))
                if n < 1:
                    raise DivisionError(f"patch part count must be positive in {tok!r}")
                layers.append(DivisionLayer(PATCH, n))
                continue
            a, b, suffix = int(m.group(1)), int(m.group(2)), m.group(3)
            if a < 1 or b < 1:
                raise DivisionError(f"zero extent in {tok!r}")
            if suffix == "v":
                layer = DivisionLayer(VERTICAL, b, a)
            elif suffix == "h":
                layer = DivisionLayer(HORIZONTAL, a, b)
            elif a == 1:
                layer = DivisionLayer(GLOBAL, 1, b)
            elif a > b:
                layer = DivisionLayer(VERTICAL, b, a)
            elif a < b:
                layer = DivisionLayer(HORIZONTAL, a, b)
            else:
                raise DivisionError(f"{tok!r} is ambiguous; add a 'v' or 'h' suffix")
            if num_tokens is not None and layer.parts * layer.tokens != num_tokens:
                raise DivisionError(
                    f"{tok!r}: {layer.parts} parts x {layer.tokens} tokens != N={num_tokens}")
            layers.append(layer)
        return cls(tuple(layers))

    @classmethod
    def standard(cls, num_tokens, d_v, d_h, d_p=None, enabled=KINDS):
        """The four-layer global/vertical/horizontal/patch pyramid (or a subset)."""
        layers = []
        if GLOBAL in enabled:
            layers.append(DivisionLayer(GLOBAL, 1, num_tokens))
        for kind, d in ((VERTICAL, d_v), (HORIZONTAL, d_h)):
            if kind in enabled:
                if num_tokens % d:
                    raise DivisionError(f"N={num_tokens} not divisible by {d} ({kind})")
                layers.append(DivisionLayer(kind, d, num_tokens // d))
        if PATCH in enabled:
            layers.append(DivisionLayer(PATCH, d_p if d_p is not None else d_v * d_h))
        return cls(tuple(layers))

    def __str__(self):
        return "_".join(str(layer) for layer in self.layers)

    def _first(self, kind):
        for layer in self.layers:
            if layer.kind == kind:
                return layer.parts
        return 0

    @property
    def d_v(self):
        return self._first(VERTICAL)

    @property
    def d_h(self):
        return self._first(HORIZONTAL)

    @property
    def d_p(self):
        return self._first(PATCH)

    @property
    def enabled_layers(self):
        return frozenset(layer.kind for layer in self.layers)

    @property
    def num_entries(self):
        return sum(layer.parts for layer in self.layers)

    def patch_factors(self, parts, h, w):
        """Pick (D_v, D_h) with D_v | w, D_h | h and D_v*D_h == parts.

        Pairs built from this spec's own vertical and horizontal layers win;
        otherwise the aligned factorisation must be unique.
        """
        aligned = [(dv, parts // dv) for dv in range(1, parts + 1)
                   if parts % dv == 0 and w % dv == 0 and h % (parts // dv) == 0]
        if not aligned:
            raise DivisionError(f"{parts}p cannot be aligned to a {h}x{w} grid")
        own_v = {l.parts for l in self.layers if l.kind == VERTICAL}
        own_h = {l.parts for l in self.layers if l.kind == HORIZONTAL}
        preferred = [pair for pair in aligned if pair[0] in own_v and pair[1] in own_h]
        if len(preferred) == 1:
            return preferred[0]
        if len(aligned) == 1:
            return aligned[0]
        raise DivisionError(f"{parts}p is ambiguous on a {h}x{w} grid: {aligned}")

    def resolve(self, h, w):
        """Token index arrays for every layer, validated against an h x w grid."""
        n = h * w
        out = []
        for layer in self.layers:
            if layer.tokens is not None and layer.parts * layer.tokens != n:
                raise DivisionError(f"{layer}: expects N={layer.parts * layer.tokens}, grid has N={n}")
            if layer.kind == GLOBAL:
                idx = np.arange(n)[None]
            elif layer.kind == VERTICAL:
                idx = vertical_indices(h, w, layer.parts)
            elif layer.kind == HORIZONTAL:
                idx = horizontal_indices(h, w, layer.parts)
            else:
                idx = patch_indices(h, w, *self.patch_factors(layer.parts, h, w))
            out.append((layer, idx))
        return out

    def labels(self):
        counts = {}
        for layer in self.layers:
            counts[layer.kind] = counts.get(layer.kind, 0) + 1
        labels = []
        seen = {}
        for layer in self.layers:
            seen[layer.kind] = seen.get(layer.kind, 0) + 1
            if layer.kind == GLOBAL:
                base = GLOBAL if counts[GLOBAL] == 1 else f"{GLOBAL}{seen[GLOBAL]}"
                labels.append(base)
                continue
            base = layer.kind if counts[layer.kind] == 1 else f"{layer.kind}{layer.parts}"
            labels.extend(f"{base}_{j + 1}" for j in range(layer.parts))
        return tuple(labels)


# grid and division ops ---------------------------------------------------------

@dataclass
class TokenGrid:
    grid: T.Tensor  # [..., h, w, c]
    cls: T.Tensor = None  # [..., 1, c]

    @property
    def h(self):
        return self.grid.shape[-3]

    @property
    def w(self):
        return self.grid.shape[-2]

    def flatten(self):
        *lead, h, w, c = self.grid.shape
        return self.grid.reshape(tuple(lead) + (h * w, c))


def rearrange(patches, h, w, cls=None):
    """Lay the N patch tokens [..., N, c] back onto their h x w grid."""
    *lead, n, c = patches.shape
    if n != h * w:
        raise DivisionError(f"cannot rearrange N={n} tokens into {h}x{w}")
    return TokenGrid(patches.reshape(tuple(lead) + (h, w, c)), cls)


def _gather(grid, idx):
    return T.take(grid.flatten(), idx, axis=-2)


def divide_vertical(grid, d_v):
    """[..., D_v, N/D_v, c]: column bands, each read top-to-bottom, column by column."""
    return _gather(grid, vertical_indices(grid.h, grid.w, d_v))


def divide_horizontal(grid, d_h):
    """[..., D_h, N/D_h, c]: contiguous row-major stripes."""
    return _gather(grid, horizontal_indices(grid.h, grid.w, d_h))


def divide_patch(grid, d_v, d_h):
    """[..., D_v*D_h, N/D_p, c]: rectangular blocks, row-major inside each block."""
    return _gather(grid, patch_indices(grid.h, grid.w, d_v, d_h))


# heads ---------------------------------------------------------------------------

class HeadParams:
    """One stack of encoder layers per division layer, shared by all its parts."""

    def __init__(self, stacks):
        self.stacks = [list(s) for s in stacks]

    @classmethod
    def init(cls, spec, embed_dim, num_heads, mlp_dim, rng, depth=1):
        return cls([[EncoderLayerParams.init(embed_dim, num_heads, mlp_dim, rng) for _ in range(depth)]
                    for _ in spec.layers])

    def __len__(self):
        return len(self.stacks)

    def named_parameters(self, spec, prefix="heads."):
        out = []
        for i, (layer, stack) in enumerate(zip(spec.layers, self.stacks)):
            for j, params in enumerate(stack):
                out.extend(params.named_parameters(f"{prefix}{i}_{layer.kind}.{j}."))
        return out


def run_head(cls, parts, layers, eps=1e-6, return_attention=False):
    """Prepend a class-token copy to every part, run the layers, keep row 0.

    ``parts`` is [..., n, c] or [..., D, n, c]; ``cls`` is [..., 1, c] (without
    the part axis). Returns [..., c] or [..., D, c].
    """
    if isinstance(layers, EncoderLayerParams):
        layers = [layers]
    c = parts.shape[-1]
    extra = parts.ndim - cls.ndim
    cls = cls.reshape(cls.shape[:-2] + (1,) * extra + (1, c))
    cls = T.broadcast_to(cls, parts.shape[:-2] + (1, c))
    z = T.concat([cls, parts], axis=-2)
    attn = None
    for params in layers:
        if return_attention:
            z, attn = encoder_layer(z, params, eps, return_attention=True)
        else:
            z = encoder_layer(z, params, eps)
    out = z[(Ellipsis, 0, slice(None))]
    if return_attention:
        return out, attn
    return out


@dataclass
class FeaturePyramid:
    """Stacked class-token features [..., E, c] with one label per entry."""
    labels: tuple
    features: T.Tensor

    def __len__(self):
        return len(self.labels)

    def entry(self, label):
        return self.features[(Ellipsis, self.labels.index(label), slice(None))]


VideoPyramid = FeaturePyramid


def build_pyramid(zm, spec, heads, grid_hw, eps=1e-6, return_attention=False):
    """Run every division layer on z^m [..., N+1, c] and stack the class features.

    The global layer sees z^m unchanged; the others see the divided parts.
    With ``return_attention`` also returns, per division layer, the last head
    layer's attention [..., D, heads, n+1, n+1] and the token index array.
    """
    h, w = grid_hw
    resolved = spec.resolve(h, w)
    if len(heads) != len(resolved):
        raise DivisionError(f"{len(heads)} head stacks for {len(resolved)} division layers")
    cls = zm[(Ellipsis, slice(0, 1), slice(None))]
    grid = rearrange(zm[(Ellipsis, slice(1, None), slice(None))], h, w, cls)
    feats, attns = [], []
    for (layer, idx), stack in zip(resolved, heads.stacks):
        if layer.kind == GLOBAL:
            parts = grid.flatten().reshape(grid.flatten().shape[:-2] + (1, h * w, zm.shape[-1]))
        else:
            parts = _gather(grid, idx)
        res = run_head(cls, parts, stack, eps, return_attention)
        if return_attention:
            res, attn = res
            attns.append((layer, idx, attn))
        feats.append(res)
    pyramid = FeaturePyramid(spec.labels(), T.concat(feats, axis=-2))
    if return_attention:
        return pyramid, attns
    return pyramid
