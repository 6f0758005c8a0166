"""scikit-learn style front end: fit on labelled videos, transform to features."""
import logging

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import checkpoint
from ._validation import check_cameras, check_ids, check_videos
from .config import PiTConfig
from .data import VideoBatch, pk_batches
from .model import PiTModel
from .retrieval import evaluate
from .training import SGD, OptimState, train_epoch
from .video import select_keyframes

log = logging.getLogger(__name__)


class PiTReID(TransformerMixin, BaseEstimator):
    """Pyramid-in-transformer video re-identification model.

    ``fit(X, y, cameras=...)`` trains on videos given as arrays of frames;
    ``transform`` returns the flattened post-BatchNorm video pyramid (one
    row per video), suitable for Euclidean retrieval.
    """

    def __init__(self, image_height=256, image_width=128, channels=3, kernel=16, stride=12,
                 embed_dim=768, lambda1=1.0, lambda2=1.5, num_cameras=6, depth=11, num_heads=12,
                 mlp_dim=3072, head_depth=1, trunk_final_norm=False, ln_eps=1e-6,
                 division="1x210_105x2_3x70_6p", num_frames=8, ids_per_batch=4, videos_per_id=4,
                 lr=0.01, momentum=0.9, weight_decay=0.0, epochs=120, freeze_epochs=5,
                 bn_momentum=0.1, bn_eps=1e-5, checkpoint_every=0, distance="concat", seed=0):
        self.image_height = image_height
        self.image_width = image_width
        self.channels = channels
        self.kernel = kernel
        self.stride = stride
        self.embed_dim = embed_dim
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.num_cameras = num_cameras
        self.depth = depth
        self.num_heads = num_heads
        self.mlp_dim = mlp_dim
        self.head_depth = head_depth
        self.trunk_final_norm = trunk_final_norm
        self.ln_eps = ln_eps
        self.division = division
        self.num_frames = num_frames
        self.ids_per_batch = ids_per_batch
        self.videos_per_id = videos_per_id
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.freeze_epochs = freeze_epochs
        self.bn_momentum = bn_momentum
        self.bn_eps = bn_eps
        self.checkpoint_every = checkpoint_every
        self.distance = distance
        self.seed = seed

    @classmethod
    def from_config(cls, config):
        return cls(**config.to_dict())

    def get_config(self):
        return PiTConfig(**self.get_params())

    # input handling
    def _keyframes(self, X):
        videos = check_videos(X, self.channels, self.image_height, self.image_width)
        return np.stack([select_keyframes(v, self.num_frames) for v in videos])

    # training
    def fit(self, X, y, cameras=None, epoch_callback=None, step_callback=None):
        """Train from scratch.

        ``epoch_callback(estimator, epoch, metrics)`` runs after every epoch;
        ``step_callback(epoch, step, lr, loss, cls, tri)`` after every step.
        """
        config = self.get_config()
        frames = self._keyframes(X)
        pids = check_ids(y, len(frames), "y")
        cams = check_cameras(cameras, len(frames), config.num_cameras)
        self.classes_, labels = np.unique(pids, return_inverse=True)
        self.model_ = PiTModel(config, len(self.classes_))
        self.optimizer_ = SGD(self.model_.named_parameters(), lr=config.lr,
                              momentum=config.momentum, weight_decay=config.weight_decay)
        self.optim_state_ = OptimState(self.optimizer_, config.lr, config.epochs, config.freeze_epochs)
        self.history_ = []
        sampler = np.random.default_rng([config.seed, 1])
        for _ in range(config.epochs):
            batches = (VideoBatch(frames[idx], labels[idx], cams[idx])
                       for idx in pk_batches(labels, config.ids_per_batch, config.videos_per_id, sampler))
            metrics = train_epoch(self.model_, batches, self.optim_state_, step_callback)
            metrics["epoch"] = self.optim_state_.epoch
            self.history_.append(metrics)
            log.info("epoch %d loss %.6f", self.optim_state_.epoch, metrics["loss"])
            if epoch_callback is not None:
                epoch_callback(self, self.optim_state_.epoch, metrics)
        return self

    @property
    def epoch_(self):
        check_is_fitted(self, "model_")
        return self.optim_state_.epoch

    # inference
    def transform_pyramid(self, X, cameras=None):
        """Post-BatchNorm video pyramids [n_videos, E, c]."""
        check_is_fitted(self, "model_")
        frames = self._keyframes(X)
        cams = check_cameras(cameras, len(frames), self.num_cameras)
        return self.model_.embed_videos(frames, cams)

    def transform(self, X, cameras=None):
        feats = self.transform_pyramid(X, cameras)
        return feats.reshape(len(feats), -1)

    def retrieval_report(self, query, query_ids, query_cams, gallery, gallery_ids, gallery_cams,
                         gallery_vids=None):
        q = self.transform_pyramid(query, query_cams)
        g = self.transform_pyramid(gallery, gallery_cams)
        return evaluate(q, query_ids, query_cams, g, gallery_ids, gallery_cams,
                        gallery_vids=gallery_vids, mode=self.distance)

    def score(self, X, y, cameras=None):
        """Cross-camera mAP with every video querying all the others."""
        feats = self.transform_pyramid(X, cameras)
        cams = check_cameras(cameras, len(feats), self.num_cameras)
        ids = check_ids(y, len(feats), "y")
        return evaluate(feats, ids, cams, feats, ids, cams, mode=self.distance).mAP

    # persistence
    def state_tensors(self):
        check_is_fitted(self, "model_")
        out = [("param/" + n, p.data) for n, p in self.model_.named_parameters()]
        out += [("buffer/" + n, b) for n, b in self.model_.named_buffers()]
        out += [("optim/" + n, b) for n, b in self.optimizer_.state().items()]
        return out

    def save(self, path, extra=None):
        meta = {"classes": [int(c) for c in self.classes_]}
        meta.update(extra or {})
        checkpoint.save(path, self.get_config().to_dict(), self.state_tensors(), self.epoch_, meta)

    @classmethod
    def load(cls, path):
        header, tensors = checkpoint.load(path)
        config = PiTConfig.from_dict(header["config"])
        est = cls.from_config(config)
        classes = np.asarray(header["extra"]["classes"])
        est.classes_ = classes
        est.model_ = PiTModel(config, len(classes))
        params = dict(est.model_.named_parameters())
        for name, p in params.items():
            arr = tensors.get("param/" + name)
            if arr is None or arr.shape != p.shape:
                raise checkpoint.CheckpointError(f"checkpoint lacks parameter {name} {p.shape}")
            p.data = arr.copy()
        branch = est.model_.branch
        branch.running_mean = tensors["buffer/branch.running_mean"].copy()
        branch.running_var = tensors["buffer/branch.running_var"].copy()
        est.optimizer_ = SGD(est.model_.named_parameters(), lr=config.lr,
                             momentum=config.momentum, weight_decay=config.weight_decay)
        est.optimizer_.buffers = {n[len("optim/"):]: a.copy() for n, a in tensors.items()
                                  if n.startswith("optim/")}
        est.optim_state_ = OptimState(est.optimizer_, config.lr, config.epochs, config.freeze_epochs)
        est.optim_state_.epoch = int(header["epoch"])
        est.history_ = []
        est.checkpoint_extra_ = header["extra"]
        return est
