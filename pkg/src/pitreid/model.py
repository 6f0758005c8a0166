"""The full network: patch embedding, trunk, pyramid heads and branch heads."""
from contextlib import contextmanager

import numpy as np

from . import tensor as T
from .embed import EmbedParams, assemble_z0, patchify
from .pyramid import FeaturePyramid, HeadParams, build_pyramid
from .training import BranchHeads
from .transformer import TrunkParams, run_trunk
from .video import fuse_features


class PiTModel:
    def __init__(self, config, num_classes, seed=None):
        self.config = config
        self.embed_config = config.embed_config()
        self.spec = config.division_spec()
        self.grid_hw = (self.embed_config.grid_height, self.embed_config.grid_width)
        rng = np.random.default_rng(config.seed if seed is None else seed)
        c = config.embed_dim
        self.embed = EmbedParams.init(self.embed_config, rng)
        self.trunk = TrunkParams.init(config.depth, c, config.num_heads, config.mlp_dim, rng,
                                      final_norm=config.trunk_final_norm)
        self.heads = HeadParams.init(self.spec, c, config.num_heads, config.mlp_dim, rng,
                                     depth=config.head_depth)
        self.branch = BranchHeads(self.spec.num_entries, c, num_classes, rng,
                                  momentum=config.bn_momentum, eps=config.bn_eps)
        self.labels = self.spec.labels()

    @property
    def num_classes(self):
        return self.branch.num_classes

    # parameter bookkeeping
    def named_parameters(self):
        return (self.embed.named_parameters() + self.trunk.named_parameters()
                + self.heads.named_parameters(self.spec) + self.branch.named_parameters())

    def named_buffers(self):
        return self.branch.named_buffers()

    def trainable_names(self, frozen):
        """All parameter names, or only the branch heads while frozen."""
        names = [n for n, _ in self.named_parameters()]
        if frozen:
            return [n for n in names if n.startswith("branch.")]
        return names

    @contextmanager
    def freeze(self, frozen=True):
        """Stop recording gradients for everything but the branch heads."""
        if not frozen:
            yield
            return
        held = [p for n, p in self.named_parameters() if not n.startswith("branch.")]
        for p in held:
            p.requires_grad = False
        try:
            yield
        finally:
            for p in held:
                p.requires_grad = True

    # forward passes
    def frame_pyramid(self, images, cameras, return_attention=False):
        """Per-image pyramids for images [n, C, H, W] -> FeaturePyramid [n, E, c]."""
        eps = self.config.ln_eps
        f = patchify(images, self.embed, self.embed_config)
        z0 = assemble_z0(f, cameras, self.embed, self.embed_config)
        zm = run_trunk(z0, self.trunk, eps)
        return build_pyramid(zm, self.spec, self.heads, self.grid_hw, eps, return_attention)

    def encode(self, frames, cameras):
        """Fused video features [B, E, c] for keyframes [B, K, C, H, W]."""
        frames = np.asarray(frames, dtype=np.float64)
        b, k = frames.shape[:2]
        cams = np.repeat(np.asarray(cameras, dtype=np.intp), k)
        pyr = self.frame_pyramid(frames.reshape((b * k,) + frames.shape[2:]), cams)
        return fuse_features(pyr.features, k)

    def video_pyramid(self, frames, cameras):
        return FeaturePyramid(self.labels, self.encode(frames, cameras))

    def embed_videos(self, frames, cameras, batch_size=16):
        """Evaluation-mode post-BatchNorm features [B, E, c] as a numpy array."""
        frames = np.asarray(frames, dtype=np.float64)
        cameras = np.asarray(cameras, dtype=np.intp)
        out = []
        with T.no_grad():
            for start in range(0, len(frames), batch_size):
                sl = slice(start, start + batch_size)
                feats = self.encode(frames[sl], cameras[sl])
                out.append(self.branch.batchnorm(feats, training=False).data)
        if not out:
            return np.zeros((0, len(self.labels), self.config.embed_dim))
        return np.concatenate(out, axis=0)
