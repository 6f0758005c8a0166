"""Keyframe selection and video-level fusion of frame pyramids."""
import numpy as np

from . import tensor as T
from .pyramid import FeaturePyramid


def keyframe_indices(num_frames, k):
    """First frame of each of ``k`` near-equal contiguous snippets.

    Snippet lengths differ by at most one; a video shorter than ``k`` frames
    is padded by repeating its last frame.
    """
    if num_frames < 1:
        raise ValueError("video has no frames")
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if num_frames < k:
        return np.concatenate([np.arange(num_frames), np.full(k - num_frames, num_frames - 1)])
    sizes = np.full(k, num_frames // k)
    sizes[: num_frames % k] += 1
    return np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.intp)


def select_keyframes(frames, k):
    frames = list(frames) if not isinstance(frames, np.ndarray) else frames
    if len(frames) == 0:
        raise ValueError("video has no frames")
    idx = keyframe_indices(len(frames), k)
    if isinstance(frames, np.ndarray):
        return frames[idx]
    return [frames[i] for i in idx]


def fuse_features(frame_features, k):
    """[B*K, E, c] frame features -> [B, E, c] video features (mean over K).

    The mean is taken around the first frame, f_0 + sum(f_i - f_0) / K, which
    is the plain average in exact arithmetic and returns K identical frames
    bit-exactly.
    """
    n, e, c = frame_features.shape
    if n % k:
        raise ValueError(f"{n} frame features do not split into videos of {k}")
    stacked = frame_features.reshape(n // k, k, e, c)
    anchor = stacked[:, 0]
    if k == 1:
        return anchor
    dev = stacked - anchor.reshape(n // k, 1, e, c)
    return anchor + T.tsum(dev, axis=1) / float(k)


def fuse(pyramids):
    """Entry-wise mean of the K frame pyramids of one video."""
    pyramids = list(pyramids)
    if not pyramids:
        raise ValueError("nothing to fuse")
    labels = pyramids[0].labels
    for p in pyramids[1:]:
        if p.labels != labels or p.features.shape != pyramids[0].features.shape:
            raise ValueError("frame pyramids have different branch structures")
    shape = pyramids[0].features.shape
    stacked = T.stack([p.features for p in pyramids], axis=0)
    flat = stacked.reshape(len(pyramids), -1, shape[-1])
    return FeaturePyramid(labels, fuse_features(flat, len(pyramids)).reshape(shape))
