import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pitreid.pyramid import FeaturePyramid
from pitreid.tensor import Tensor
from pitreid.video import fuse, fuse_features, keyframe_indices, select_keyframes


def pyr(values, labels=None):
    values = np.asarray(values, dtype=float)
    labels = labels or tuple(f"b{i}" for i in range(len(values)))
    return FeaturePyramid(labels, Tensor(values))


def test_keyframes_examples():
    assert keyframe_indices(16, 8).tolist() == [0, 2, 4, 6, 8, 10, 12, 14]
    assert keyframe_indices(5, 1).tolist() == [0]
    assert keyframe_indices(8, 8).tolist() == list(range(8))


def test_uneven_split_and_padding():
    assert keyframe_indices(10, 4).tolist() == [0, 3, 6, 8]
    assert keyframe_indices(3, 5).tolist() == [0, 1, 2, 2, 2]


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 60), st.integers(1, 12))
def test_keyframe_properties(n, k):
    idx = keyframe_indices(n, k)
    assert len(idx) == k and idx[0] == 0 and idx.max() < n
    if n >= k:
        assert np.all(np.diff(idx) > 0)
        sizes = np.diff(np.append(idx, n))
        assert sizes.max() - sizes.min() <= 1


def test_select_keyframes_errors():
    with pytest.raises(ValueError, match="no frames"):
        select_keyframes(np.zeros((0, 1, 2, 2)), 2)
    with pytest.raises(ValueError):
        keyframe_indices(4, 0)


def test_select_keyframes_array_and_list():
    frames = np.arange(16)[:, None] * np.ones((16, 3))
    assert select_keyframes(frames, 4)[:, 0].tolist() == [0, 4, 8, 12]
    assert select_keyframes(list("abcd"), 2) == ["a", "c"]


def test_fuse_examples():
    one = pyr([[1.0, 2.0]])
    assert np.array_equal(fuse([one]).features.data, one.features.data)
    v = np.array([[1.0, -2.0], [0.5, 3.0]])
    assert np.array_equal(fuse([pyr(v), pyr(-v)]).features.data, np.zeros((2, 2)))
    out = fuse([pyr([[1.0, 3.0]]), pyr([[5.0, 7.0]])]).features.data
    assert out.tolist() == [[3.0, 5.0]]


def test_fuse_structure_mismatch():
    with pytest.raises(ValueError, match="branch structures"):
        fuse([pyr([[1.0]]), pyr([[1.0]], labels=("other",))])
    with pytest.raises(ValueError):
        fuse([])


@pytest.mark.parametrize("k", [1, 2, 3, 5, 7, 8, 11])
def test_fuse_copies_is_exact(k, rng):
    p = pyr(rng.normal(size=(12, 8)) * 10.0 ** rng.integers(-3, 4, size=(12, 1)))
    assert np.array_equal(fuse([p] * k).features.data, p.features.data)


def test_fuse_permutation_invariant(rng):
    frames = [pyr(rng.normal(size=(3, 4))) for _ in range(6)]
    base = fuse(frames).features.data
    for perm in (rng.permutation(6) for _ in range(5)):
        np.testing.assert_allclose(fuse([frames[i] for i in perm]).features.data, base, rtol=0, atol=1e-14)


def test_fuse_features_batched(rng):
    x = rng.normal(size=(6, 4, 5))
    out = fuse_features(Tensor(x), 3).data
    assert out.shape == (2, 4, 5)
    np.testing.assert_allclose(out, x.reshape(2, 3, 4, 5).mean(axis=1), atol=1e-14)
    with pytest.raises(ValueError):
        fuse_features(Tensor(x), 4)


def test_fuse_gradient_reaches_every_frame():
    x = Tensor(np.ones((4, 2, 3)), requires_grad=True)
    fuse_features(x, 4).sum().backward()
    assert np.array_equal(x.grad, np.full((4, 2, 3), 0.25))
