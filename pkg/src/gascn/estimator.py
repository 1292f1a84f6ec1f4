"""scikit-learn style wrapper around the completion network.

Samples are point clouds of varying size, so ``X`` is a sequence of ``(m_i, 3)``
arrays (or :class:`PointCloud` objects) rather than a 2-D matrix.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .geometry import PointCloud, as_points, chamfer_distance
from .model import ModelConfig, forward, init_params
from .training import Instance, TrainConfig, evaluate, prepare_instance, train


def check_clouds(X, min_points: int = 1, name: str = "X") -> list[np.ndarray]:
    """Validate a batch of clouds and return them as float64 ``(m, 3)`` arrays."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    if isinstance(X, (str, bytes)) or not hasattr(X, "__len__"):
        raise TypeError(f"{name} must be a sequence of point clouds")
    if len(X) == 0:
        raise ValueError(f"{name} is empty")
    out = []
    for i, cloud in enumerate(X):
        try:
            pts = as_points(cloud)
        except ValueError as exc:
            raise ValueError(f"{name}[{i}]: {exc}") from None
        if pts.shape[0] < min_points:
            raise ValueError(f"{name}[{i}] has {pts.shape[0]} points, needs at least {min_points}")
        out.append(pts)
    return out


def check_paired(X, y) -> tuple[list[np.ndarray], list[np.ndarray]]:
    xs, ys = check_clouds(X, name="X"), check_clouds(y, name="y")
    if len(xs) != len(ys):
        raise ValueError(f"X and y have different lengths ({len(xs)} vs {len(ys)})")
    return xs, ys


class ShapeCompleter(BaseEstimator, TransformerMixin):
    """Completes partial point clouds.

    ``fit`` trains on (partial, ground truth) pairs, ``predict`` returns fine
    completions in each input's own coordinates and ``transform`` returns the
    latent code of each input.
    """

    def __init__(self, variant="full", n_coarse=64, grid_n=6, grid_l=0.1, latent_dim=256,
                 input_k=20, num_gat_layers=1, epochs=200, batch_size=8, lr=1e-3, lr_decay=0.985,
                 max_input_points=3000, random_state=0):
        self.variant = variant
        self.n_coarse = n_coarse
        self.grid_n = grid_n
        self.grid_l = grid_l
        self.latent_dim = latent_dim
        self.input_k = input_k
        self.num_gat_layers = num_gat_layers
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay = lr_decay
        self.max_input_points = max_input_points
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return ModelConfig(variant=self.variant, n_coarse=self.n_coarse, grid_n=self.grid_n, grid_l=self.grid_l,
                           latent_dim=self.latent_dim, input_k=self.input_k, num_gat_layers=self.num_gat_layers)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr_initial=self.lr,
                           lr_decay=self.lr_decay, seed=self.random_state,
                           max_input_points=self.max_input_points, eval_every=0)

    def _instances(self, X, y=None) -> list[Instance]:
        xs = check_clouds(X, min_points=self.input_k + 1)
        ys = check_clouds(y, name="y") if y is not None else xs
        if len(ys) != len(xs):
            raise ValueError(f"X and y have different lengths ({len(xs)} vs {len(ys)})")
        return [prepare_instance(PointCloud(p), PointCloud(g), self.max_input_points, self.random_state + i, shape_id=i)
                for i, (p, g) in enumerate(zip(xs, ys))]

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted; call fit first")

    def fit(self, X, y):
        self.model_config_ = self._model_config()
        instances = self._instances(X, y)
        self.params_ = init_params(self.model_config_, self.random_state)
        result = train(self.params_, instances, self.model_config_, self._train_config(), one_view_per_shape=False)
        self.history_ = result.history
        self.n_features_in_ = 3
        return self

    def _forward_all(self, X):
        self._check_fitted()
        return [(inst, forward(inst.points, self.params_, self.model_config_, inst.graph(self.model_config_.input_k)))
                for inst in self._instances(X)]

    def predict(self, X) -> list[np.ndarray]:
        """Fine completions, mapped back to the coordinates of each input."""
        return [inst.to_object_frame(out.fine.data) for inst, out in self._forward_all(X)]

    def predict_coarse(self, X) -> list[np.ndarray]:
        return [inst.to_object_frame(out.coarse.data) for inst, out in self._forward_all(X)]

    def transform(self, X) -> np.ndarray:
        """Latent code per input, shape ``(n_samples, latent_dim)``."""
        return np.stack([out.latent.data.reshape(-1) for _, out in self._forward_all(X)])

    def score(self, X, y) -> float:
        """Negative mean Chamfer distance of the fine completions (higher is better)."""
        self._check_fitted()
        instances = self._instances(X, y)
        return -evaluate(self.params_, instances, self.model_config_).overall


def chamfer_scores(pred: Sequence, truth: Sequence, squared: bool = False) -> np.ndarray:
    """Per-pair Chamfer distance between two equally long cloud sequences."""
    ps, ts = check_paired(pred, truth)
    return np.array([chamfer_distance(p, t, squared=squared)[0] for p, t in zip(ps, ts)])
