"""Branch heads, the classification + batch-hard triplet objective, and SGD."""
import logging
import math

import numpy as np

from . import tensor as T
from .embed import trunc_normal
from .tensor import Tensor

log = logging.getLogger(__name__)


class BranchHeads:
    """BatchNorm + linear classifier for every pyramid entry, evaluated together.

    Parameters are stacked along the branch axis: ``bn_gain``/``bn_bias`` are
    [E, c], ``weight`` is [E, N_c, c] and ``bias`` is [E, N_c].
    """

    def __init__(self, num_branches, embed_dim, num_classes, rng, momentum=0.1, eps=1e-5):
        e, c = num_branches, embed_dim
        self.momentum = momentum
        self.eps = eps
        self.bn_gain = Tensor(np.ones((e, c)), requires_grad=True)
        self.bn_bias = Tensor(np.zeros((e, c)), requires_grad=True)
        self.weight = Tensor(trunc_normal(rng, (e, num_classes, c), std=0.001), requires_grad=True)
        self.bias = Tensor(np.zeros((e, num_classes)), requires_grad=True)
        self.running_mean = np.zeros((e, c))
        self.running_var = np.ones((e, c))

    @property
    def num_branches(self):
        return self.weight.shape[0]

    @property
    def num_classes(self):
        return self.weight.shape[1]

    def named_parameters(self, prefix="branch."):
        return [(prefix + n, getattr(self, n)) for n in ("bn_gain", "bn_bias", "weight", "bias")]

    def named_buffers(self, prefix="branch."):
        return [(prefix + "running_mean", self.running_mean), (prefix + "running_var", self.running_var)]

    def batchnorm(self, features, training):
        """features [B, E, c]; batch statistics when training, running ones otherwise."""
        if training:
            b = features.shape[0]
            if b < 2:
                raise ValueError("batch statistics need at least two samples")
            mu = features.mean(axis=0, keepdims=True)
            centred = features - mu
            var = (centred * centred).mean(axis=0, keepdims=True)
            normed = centred / T.sqrt(var + self.eps)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu.data[0]
            self.running_var = (1 - m) * self.running_var + m * var.data[0] * b / (b - 1)
        else:
            normed = (features - self.running_mean) / np.sqrt(self.running_var + self.eps)
        return normed * self.bn_gain + self.bn_bias

    def logits(self, normed):
        """[B, E, c] -> [E, B, N_c]."""
        x = normed.transpose(1, 0, 2)
        return x @ self.weight.transpose(0, 2, 1) + self.bias.reshape(self.num_branches, 1, -1)


def classification_loss(logits, labels):
    """Cross-entropy over branches: -(1 / (T N_c B)) sum log p[t, b, y_b].

    ``logits`` is [T, B, N_c]; the per-branch softmax is taken here.
    """
    labels = np.asarray(labels, dtype=np.intp)
    t, b, n_c = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= n_c:
        raise ValueError(f"label out of range [0, {n_c}): {labels.tolist()}")
    logp = T.log_softmax(logits, axis=-1)
    picked = logp[:, np.arange(b), labels]
    return -picked.sum() / float(t * n_c * b)


def pairwise_distances(features, floor=1e-12):
    """Euclidean distances [..., B, B] between rows of [..., B, c].

    Coincident rows get distance exactly 0 and a zero gradient; the floor
    only keeps the square root differentiable.
    """
    diff = features.reshape(features.shape[:-1] + (1, features.shape[-1])) - \
        features.reshape(features.shape[:-2] + (1,) + features.shape[-2:])
    sq = (diff * diff).sum(axis=-1)
    return T.sqrt(T.clamp_min(sq, floor)) * (sq.data > 0)


def check_batch(labels):
    labels = np.asarray(labels)
    ids, counts = np.unique(labels, return_counts=True)
    if len(ids) < 2:
        raise ValueError("triplet loss needs at least two identities in the batch")
    if counts.min() < 2:
        raise ValueError(f"identity {ids[counts.argmin()]} has no positive in the batch")
    return labels


def triplet_loss(features, labels, big=1e12):
    """Batch-hard soft-margin triplet loss, averaged over anchors and branches.

    ``features`` is [T, B, c]. For each anchor the farthest same-label sample
    and the nearest other-label sample enter ln(1 + exp(d_pos - d_neg)).
    """
    labels = check_batch(labels)
    if features.shape[-2] != len(labels):
        raise ValueError(f"{features.shape[-2]} features vs {len(labels)} labels")
    dist = pairwise_distances(features)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    neg = ~same
    hardest_pos = T.amax(dist + np.where(pos, 0.0, -big), axis=-1)
    hardest_neg = T.amin(dist + np.where(neg, 0.0, big), axis=-1)
    return T.softplus(hardest_pos - hardest_neg).mean()


def total_loss(logits, features, labels):
    """Unweighted sum; returns (total, classification, triplet)."""
    cls = classification_loss(logits, labels)
    tri = triplet_loss(features, labels)
    return cls + tri, cls, tri


def cosine_lr(base_lr, epoch, total_epochs):
    """Cosine annealing from ``base_lr`` at epoch 0 to 0 at ``total_epochs``."""
    if total_epochs <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * epoch / total_epochs))


class SGD:
    """SGD with momentum: buf = mu * buf + (g + wd * p); p -= lr * buf."""

    def __init__(self, named_params, lr=0.01, momentum=0.9, weight_decay=0.0):
        self.params = dict(named_params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, names=None):
        names = self.params if names is None else names
        for name in names:
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            buf = self.buffers.get(name)
            buf = g.copy() if buf is None else self.momentum * buf + g
            self.buffers[name] = buf
            p.data -= self.lr * buf

    def state(self):
        return {name: buf for name, buf in sorted(self.buffers.items())}


class OptimState:
    """Epoch counter plus the learning-rate and freeze schedule."""

    def __init__(self, optimizer, base_lr, total_epochs, freeze_epochs=5):
        self.optimizer = optimizer
        self.base_lr = base_lr
        self.total_epochs = total_epochs
        self.freeze_epochs = freeze_epochs
        self.epoch = 0
        self.step_count = 0

    def lr(self, epoch=None):
        return cosine_lr(self.base_lr, self.epoch if epoch is None else epoch, self.total_epochs)

    @property
    def frozen(self):
        return self.epoch < self.freeze_epochs


def train_step(model, batch, optim_state):
    """One SGD step on a PK batch; returns (total, cls, tri) floats."""
    frozen = optim_state.frozen
    trainable = model.trainable_names(frozen)
    with model.freeze(frozen):
        feats = model.encode(batch.frames, batch.cameras)
        normed = model.branch.batchnorm(feats, training=True)
        logits = model.branch.logits(normed)
        loss, cls, tri = total_loss(logits, feats.transpose(1, 0, 2), batch.labels)
        opt = optim_state.optimizer
        opt.zero_grad()
        loss.backward()
    opt.lr = optim_state.lr()
    opt.step(trainable)
    optim_state.step_count += 1
    return loss.item(), cls.item(), tri.item()


def train_epoch(model, batches, optim_state, log_fn=None):
    """Run one epoch of PK batches and advance the schedule.

    During the first ``freeze_epochs`` only the BatchNorm and classifier
    parameters move; everything else is bit-identical across the epoch.
    """
    losses = []
    for batch in batches:
        values = train_step(model, batch, optim_state)
        losses.append(values)
        if log_fn is not None:
            log_fn(optim_state.epoch, optim_state.step_count, optim_state.lr(), *values)
    optim_state.epoch += 1
    if not losses:
        raise ValueError("epoch produced no batches")
    arr = np.asarray(losses)
    return {"loss": float(arr[:, 0].mean()), "cls": float(arr[:, 1].mean()),
            "tri": float(arr[:, 2].mean()), "steps": len(losses)}
