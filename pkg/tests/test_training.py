import math

import numpy as np
import pytest
from scipy.stats import special_ortho_group

from _helpers import gradient_setup
from pitreid import tensor as T
from pitreid.config import toy_config
from pitreid.data import VideoBatch
from pitreid.gradcheck import numerical_grad, relative_error
from pitreid.model import PiTModel
from pitreid.tensor import Tensor
from pitreid.training import (SGD, BranchHeads, OptimState, classification_loss, cosine_lr,
                              total_loss, train_epoch, train_step, triplet_loss)

LN2 = 0.69314718055994530942
LN4_OVER_4 = 0.34657359027997265471
SOFTPLUS_MINUS_10 = 4.5398899216864646769e-05
LABELS = np.array([0, 0, 1, 1, 2, 2])


def test_perfect_predictions():
    logits = np.full((3, 4, 4), -1e4)
    labels = np.array([0, 3, 1, 2])
    logits[:, np.arange(4), labels] = 1e4
    assert classification_loss(Tensor(logits), labels).item() == 0.0


def test_uniform_predictions():
    loss = classification_loss(Tensor(np.zeros((1, 5, 4))), np.array([0, 1, 2, 3, 0]))
    assert abs(loss.item() - LN4_OVER_4) <= 1e-15


def test_duplicated_branches_do_not_change_loss(rng):
    one = rng.normal(size=(1, 6, 4))
    labels = rng.integers(0, 4, 6)
    a = classification_loss(Tensor(one), labels).item()
    b = classification_loss(Tensor(np.concatenate([one, one])), labels).item()
    assert abs(a - b) <= 1e-15


def test_label_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        classification_loss(Tensor(np.zeros((1, 2, 3))), np.array([0, 3]))


def test_shift_invariance(rng):
    logits = rng.normal(size=(2, 6, 5))
    shift = rng.normal(size=(2, 6, 1)) * 100
    a = classification_loss(Tensor(logits), LABELS).item()
    b = classification_loss(Tensor(logits + shift), LABELS).item()
    assert abs(a - b) < 1e-12


def test_identical_features_give_ln2():
    loss = triplet_loss(Tensor(np.ones((3, 6, 4))), LABELS)
    assert abs(loss.item() - LN2) <= 1e-12


def test_separated_features():
    feats = np.zeros((1, 6, 2))
    feats[0, LABELS == 1, 0] = 10.0
    feats[0, LABELS == 2, 1] = 10.0
    loss = triplet_loss(Tensor(feats), LABELS).item()
    assert abs(loss - SOFTPLUS_MINUS_10) <= 1e-15


def test_scaling_reduces_loss_when_separated(rng):
    centres = rng.normal(size=(3, 4)) * 5
    feats = centres[LABELS] + rng.normal(size=(6, 4)) * 0.1
    base = triplet_loss(Tensor(feats[None]), LABELS).item()
    for lam in (1.5, 3.0):
        assert triplet_loss(Tensor(lam * feats[None]), LABELS).item() < base


def test_rigid_motion_invariance(rng):
    feats = rng.normal(size=(2, 6, 5))
    rot = special_ortho_group.rvs(5, random_state=3)
    moved = feats @ rot.T + rng.normal(size=5)
    a = triplet_loss(Tensor(feats), LABELS).item()
    b = triplet_loss(Tensor(moved), LABELS).item()
    assert abs(a - b) < 1e-12


@pytest.mark.parametrize("labels", [[0, 0, 0, 0], [0, 0, 1, 2]])
def test_triplet_batch_contract(labels):
    with pytest.raises(ValueError):
        triplet_loss(Tensor(np.zeros((1, 4, 2))), np.array(labels))


def test_total_loss_examples(rng):
    logits = np.full((1, 4, 2), -1e4)
    logits[0, [0, 1], 0] = logits[0, [2, 3], 1] = 1e4
    labels = np.array([0, 0, 1, 1])
    total, cls, tri = total_loss(Tensor(logits), Tensor(np.ones((1, 4, 3))), labels)
    assert cls.item() == 0.0 and abs(total.item() - LN2) <= 1e-12
    feats = np.zeros((1, 4, 2))
    feats[0, 2:, 0] = 1e3
    total, _, _ = total_loss(Tensor(logits), Tensor(feats), labels)
    assert total.item() == 0.0


def test_total_loss_recomputation(rng):
    """Independent numpy computation of both terms on a random batch."""
    logits, feats = rng.normal(size=(3, 6, 4)), rng.normal(size=(3, 6, 5))
    total = total_loss(Tensor(logits), Tensor(feats), LABELS)[0].item()
    logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    cls = -sum(logp[t, b, LABELS[b]] for t in range(3) for b in range(6)) / (3 * 4 * 6)
    tri = 0.0
    for t in range(3):
        for a in range(6):
            d = [np.linalg.norm(feats[t, a] - feats[t, j]) for j in range(6)]
            pos = max(d[j] for j in range(6) if LABELS[j] == LABELS[a] and j != a)
            neg = min(d[j] for j in range(6) if LABELS[j] != LABELS[a])
            tri += math.log1p(math.exp(pos - neg))
    assert abs(total - (cls + tri / 18)) < 1e-12


def test_cosine_schedule():
    assert cosine_lr(0.01, 0, 120) == 0.01
    assert abs(cosine_lr(0.01, 120, 120)) < 1e-18
    lrs = [cosine_lr(0.01, e, 120) for e in range(120)]
    assert all(a > b for a, b in zip(lrs, lrs[1:])) and min(lrs) > 0
    assert abs(cosine_lr(0.01, 60, 120) - 0.005) < 1e-15


def test_sgd_momentum():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = SGD([("p", p)], lr=0.1, momentum=0.9)
    for expected in (0.9, 0.71):
        p.grad = np.array([1.0])
        opt.step()
        np.testing.assert_allclose(p.data, [expected])


def test_sgd_zero_lr_changes_nothing(rng):
    params = [(f"p{i}", Tensor(rng.normal(size=3), requires_grad=True)) for i in range(3)]
    before = [p.data.copy() for _, p in params]
    opt = SGD(params, lr=0.0, weight_decay=0.1)
    for _, p in params:
        p.grad = rng.normal(size=3)
    opt.step()
    assert all(np.array_equal(b, p.data) for b, (_, p) in zip(before, params))


def test_branch_heads_shapes(rng):
    heads = BranchHeads(12, 8, 5, rng)
    normed = heads.batchnorm(Tensor(rng.normal(size=(4, 12, 8))), training=True)
    assert heads.logits(normed).shape == (12, 4, 5)
    np.testing.assert_allclose(normed.data.mean(0), 0, atol=1e-12)


def test_batchnorm_running_statistics(rng):
    heads = BranchHeads(1, 2, 3, rng, momentum=0.1)
    x = rng.normal(size=(5, 1, 2))
    heads.batchnorm(Tensor(x), training=True)
    np.testing.assert_allclose(heads.running_mean, 0.1 * x.mean(0), atol=1e-15)
    np.testing.assert_allclose(heads.running_var, 0.9 + 0.1 * x.var(0, ddof=1), atol=1e-15)
    out = heads.batchnorm(Tensor(x), training=False).data
    np.testing.assert_allclose(out, (x - heads.running_mean) / np.sqrt(heads.running_var + 1e-5))


def toy_batch(cfg, rng, n_ids=2, per_id=2):
    b = n_ids * per_id
    frames = rng.uniform(0, 1, (b, cfg.num_frames, cfg.channels, cfg.image_height, cfg.image_width))
    return VideoBatch(frames, np.repeat(np.arange(n_ids), per_id), np.arange(b) % cfg.num_cameras)


def test_freeze_keeps_trunk_bit_identical(rng):
    cfg = toy_config(num_frames=2, freeze_epochs=5)
    model = PiTModel(cfg, 2)
    opt = SGD(model.named_parameters(), lr=0.1, momentum=0.9)
    state = OptimState(opt, 0.1, 10, 5)
    state.epoch = 3
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    train_step(model, toy_batch(cfg, rng), state)
    for name, p in model.named_parameters():
        same = np.array_equal(before[name], p.data)
        assert same != name.startswith("branch."), name
    assert all(p.requires_grad for _, p in model.named_parameters())


def test_unfrozen_step_moves_trunk(rng):
    cfg = toy_config(num_frames=2, freeze_epochs=0)
    model = PiTModel(cfg, 2)
    state = OptimState(SGD(model.named_parameters(), lr=0.1), 0.1, 10, 0)
    before = model.trunk.layers[0].w_q.data.copy()
    train_step(model, toy_batch(cfg, rng), state)
    assert not np.array_equal(before, model.trunk.layers[0].w_q.data)


def test_train_epoch_advances_schedule(rng):
    cfg = toy_config(num_frames=2)
    model = PiTModel(cfg, 2)
    state = OptimState(SGD(model.named_parameters()), 0.01, 4, 1)
    seen = []
    metrics = train_epoch(model, [toy_batch(cfg, rng)] * 2, state, lambda *a: seen.append(a))
    assert state.epoch == 1 and state.step_count == 2 and metrics["steps"] == 2
    assert len(seen) == 2 and seen[0][2] == 0.01
    assert state.lr() == cosine_lr(0.01, 1, 4)
    with pytest.raises(ValueError):
        train_epoch(model, [], state)


def test_loss_gradients_sampled_entries():
    model, loss = gradient_setup(seed=3)
    loss().backward()
    rng = np.random.default_rng(0)
    for name, p in model.named_parameters():
        idx = rng.choice(p.data.size, size=min(4, p.data.size), replace=False)
        num = numerical_grad(loss, p, indices=idx).reshape(-1)[idx]
        assert relative_error(p.grad.reshape(-1)[idx], num) < 1e-4, name


def test_no_grad_inference_matches_training_graph(rng):
    cfg = toy_config(num_frames=2)
    model = PiTModel(cfg, 2)
    batch = toy_batch(cfg, rng)
    a = model.encode(batch.frames, batch.cameras).data
    with T.no_grad():
        b = model.encode(batch.frames, batch.cameras).data
    assert np.array_equal(a, b)
