"""Scikit-learn style facade over the trainer: fit on labeled frames,
predict rescored confidences."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .features import NormConfig
from .supervision import default_thresholds
from .trainer import (Frame, Rescorer, TrainConfig, build_training_set,
                      train)


class GaceRescorer(BaseEstimator):
    """Confidence rescorer for black-box 3D detector outputs.

    fit() consumes frames carrying detections and ground truth; predict()
    returns one new score array per frame, order-preserving. Boxes and
    classes are never modified.

    Parameters mirror the training recipe; defaults are the standard
    recipe (5 epochs, Adam at lr 0.001, lambda_iou 0.5, 40 m radius).
    """

    def __init__(self, epochs=5, lr=0.001, lambda_iou=0.5, radius=40.0,
                 batch_frames=8, seed=0, focal_gamma=2.0, focal_alpha=0.25,
                 class_count=3, max_range=80.0, z_range=(-3.0, 8.0),
                 max_dims=(25.0, 5.0, 8.0), max_points=4096,
                 use_elongation=True, thresholds=None, hidden=256,
                 f_i_dim=128, f_c_dim=64, ablate=(), use_instance=True,
                 use_context=True, detach_context=False, n_threads=None):
        self.epochs = epochs
        self.lr = lr
        self.lambda_iou = lambda_iou
        self.radius = radius
        self.batch_frames = batch_frames
        self.seed = seed
        self.focal_gamma = focal_gamma
        self.focal_alpha = focal_alpha
        self.class_count = class_count
        self.max_range = max_range
        self.z_range = z_range
        self.max_dims = max_dims
        self.max_points = max_points
        self.use_elongation = use_elongation
        self.thresholds = thresholds
        self.hidden = hidden
        self.f_i_dim = f_i_dim
        self.f_c_dim = f_c_dim
        self.ablate = ablate
        self.use_instance = use_instance
        self.use_context = use_context
        self.detach_context = detach_context
        self.n_threads = n_threads

    def _norm_config(self) -> NormConfig:
        return NormConfig(max_range=self.max_range,
                          z_range=tuple(self.z_range),
                          max_dims=tuple(self.max_dims),
                          max_points=self.max_points, radius=self.radius,
                          class_count=self.class_count,
                          use_elongation=self.use_elongation)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, epochs=self.epochs, lr=self.lr,
                           lambda_iou=self.lambda_iou, radius=self.radius,
                           batch_frames=self.batch_frames,
                           focal_gamma=self.focal_gamma,
                           focal_alpha=self.focal_alpha, hidden=self.hidden,
                           f_i_dim=self.f_i_dim, f_c_dim=self.f_c_dim,
                           ablate=tuple(self.ablate),
                           use_instance=self.use_instance,
                           use_context=self.use_context,
                           detach_context=self.detach_context)

    def fit(self, X, y=None):
        """Train on frames with ground truth.

        Args:
            X: sequence of Frame, each with detections and ground truth.
            y: ignored; targets come from the frames themselves.
        """
        thresholds = self.thresholds
        if thresholds is None:
            thresholds = default_thresholds(self.class_count)
        store = build_training_set(X, thresholds=thresholds,
                                   norm_config=self._norm_config(),
                                   n_threads=self.n_threads)
        self.model_, self.history_ = train(store, self._train_config())
        self._rescorer_ = Rescorer(self.model_)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this GaceRescorer is not fitted yet; call fit() first")

    def predict(self, X):
        """New confidence scores.

        A single Frame yields one array; a sequence of frames yields a
        list of arrays, one per frame in order.
        """
        self._check_fitted()
        if isinstance(X, Frame):
            return self._rescorer_.rescore(X)
        return self._rescorer_.rescore_many(X, n_threads=self.n_threads)

    def transform(self, X):
        """Frames with detections rescored in place of the originals."""
        self._check_fitted()
        frames = [X] if isinstance(X, Frame) else list(X)
        out = []
        for frame, scores in zip(frames,
                                 self._rescorer_.rescore_many(
                                     frames, n_threads=self.n_threads)):
            dets = [type(d)(d.box, d.class_id, float(s))
                    for d, s in zip(frame.detections, scores)]
            out.append(Frame(frame.frame_id, frame.points, dets,
                             frame.ground_truth))
        return out[0] if isinstance(X, Frame) else out

    def fit_predict(self, X, y=None):
        return self.fit(X).predict(X)
