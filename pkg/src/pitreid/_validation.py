"""Input checks shared by the estimator and the CLI."""
import numpy as np
from sklearn.utils.validation import check_array, column_or_1d


def check_videos(X, channels, height, width):
    """Return a list of float64 [n_frames, C, H, W] arrays.

    ``X`` may be a 5-d array [n_videos, n_frames, C, H, W] or a sequence of
    per-video 4-d arrays with varying frame counts.
    """
    videos = list(X)
    if not videos:
        raise ValueError("no videos given")
    out = []
    for i, v in enumerate(videos):
        v = check_array(v, allow_nd=True, ensure_2d=False, dtype=np.float64,
                        ensure_min_samples=1, input_name=f"video {i}")
        if v.ndim != 4 or v.shape[1:] != (channels, height, width):
            raise ValueError(f"video {i}: expected frames of shape ({channels}, {height}, {width}), "
                             f"got array of shape {v.shape}")
        out.append(v)
    return out


def check_ids(values, n, name):
    values = column_or_1d(np.asarray(values), warn=False)
    if len(values) != n:
        raise ValueError(f"{name}: expected {n} entries, got {len(values)}")
    return values


def check_cameras(cameras, n, num_cameras):
    if cameras is None:
        return np.zeros(n, dtype=np.intp)
    cams = check_ids(cameras, n, "cameras").astype(np.intp)
    if cams.min() < 0 or cams.max() >= num_cameras:
        raise ValueError(f"camera ids must lie in [0, {num_cameras}), got {np.unique(cams).tolist()}")
    return cams
