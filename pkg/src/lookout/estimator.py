"""Scikit-learn style front end for the failure predictor.

``FailurePredictor`` is a BaseEstimator: constructor arguments are plain
hyperparameters (so ``get_params`` / ``set_params`` / ``clone`` work), and
``fit`` consumes a list of simulator episodes whose frames already carry
labels. ``predict_proba`` returns per-frame failure probabilities over the
prediction horizon.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .experiments import evaluate_anomaly, evaluate_occlusion
from .training import TrainConfig, train
from .world import Episode

__all__ = ["FailurePredictor", "check_episodes"]


def check_episodes(X) -> list[Episode]:
    """Validate a fit/predict input: a non-empty list of consistent episodes."""
    if isinstance(X, Episode):
        X = [X]
    episodes = list(X)
    if not episodes:
        raise ValueError("expected at least one episode")
    for ep in episodes:
        if not isinstance(ep, Episode):
            raise TypeError(f"expected Episode instances, got {type(ep).__name__}")
    reference = episodes[0].config
    for ep in episodes:
        cfg = ep.config
        if (
            cfg.lidar_beams != reference.lidar_beams
            or cfg.image_height != reference.image_height
            or cfg.image_width != reference.image_width
            or cfg.horizon != reference.horizon
        ):
            raise ValueError("episodes disagree on sensor dimensions or horizon")
        for fr in ep.frames:
            if fr.y_future.shape != (cfg.horizon,):
                raise ValueError("frame label length does not match the horizon")
    return episodes


class FailurePredictor(BaseEstimator):
    """Occlusion-aware recurrent anomaly predictor with a fit/predict API.

    Parameters mirror :class:`lookout.training.TrainConfig`; ``random_state``
    seeds initialization, shuffling, rebalancing, and dropout, making fits
    bit-reproducible.
    """

    def __init__(
        self,
        variant: str = "full",
        epochs: int = 20,
        batch_size: int = 16,
        seq_len: int = 8,
        lr: float = 5e-4,
        weight_decay: float = 1.5e-4,
        alpha: float = 6.21,
        beta: float = 0.621,
        gamma: float = 0.621,
        rebalance_ratio: float = 0.3,
        use_best_epoch: bool = False,
        random_state: int = 0,
    ):
        self.variant = variant
        self.epochs = epochs
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.lr = lr
        self.weight_decay = weight_decay
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.rebalance_ratio = rebalance_ratio
        self.use_best_epoch = use_best_epoch
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            alpha=self.alpha,
            beta=self.beta,
            gamma=self.gamma,
            lr=self.lr,
            weight_decay=self.weight_decay,
            seq_len=self.seq_len,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.random_state,
            variant=self.variant,
            rebalance_ratio=self.rebalance_ratio,
        )

    def fit(self, X, y=None):
        """Train on labeled episodes; ``y`` is ignored (labels live in frames)."""
        episodes = check_episodes(X)
        result = train(self._train_config(), episodes)
        if self.use_best_epoch:
            result.use_best()
        self.result_ = result
        self.model_ = result.model
        self.history_ = result.history
        self.world_config_ = episodes[0].config
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this FailurePredictor has not been fitted yet")

    def predict_proba(self, X):
        """Per-frame failure probabilities, one (n_frames, horizon) array per episode."""
        self._require_fitted()
        episodes = check_episodes(X)
        result = self.model_.run_episodes(episodes)
        out = [result["y_hat"][lo:hi] for _, lo, hi in result["episode_slices"]]
        return out[0] if isinstance(X, Episode) else out

    def predict(self, X, threshold: float = 0.5):
        """Boolean failure flags at the given probability threshold."""
        probs = self.predict_proba(X)
        if isinstance(probs, np.ndarray):
            return probs > threshold
        return [p > threshold for p in probs]

    def predict_occlusion(self, X):
        """Per-frame occlusion probabilities: dict with 'camera' and 'lidar'."""
        self._require_fitted()
        episodes = check_episodes(X)
        result = self.model_.run_episodes(episodes)
        return {"camera": result["y_camera"], "lidar": result["y_lidar"]}

    def score(self, X, y=None) -> float:
        """PR-AUC of pooled (frame, horizon-step) failure predictions."""
        self._require_fitted()
        return evaluate_anomaly(self.model_, check_episodes(X)).pr_auc

    def occlusion_score(self, X) -> dict[str, float]:
        self._require_fitted()
        return evaluate_occlusion(self.model_, check_episodes(X))
