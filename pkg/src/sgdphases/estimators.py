"""scikit-learn style wrappers around the training loop and the loss mixture."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .cleaner import cleaning_threshold, fit_gmm_em
from .data import NoisyDataset, RawDataset
from .model import MlpConfig, per_sample_losses, predict_log_proba
from .trainer import TrainConfig, train


class SGDPhaseClassifier(ClassifierMixin, BaseEstimator):
    """Fully-connected softmax classifier trained by plain minibatch SGD.

    Inputs must already be scaled to [0, 1].  After ``fit`` the per-epoch
    metrics (and order parameters, if ``probe_every > 0``) are in
    ``trajectory_``.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
    activation : {"relu", "tanh", "sigmoid"}
    learning_rate : float
    batch_size : int
    epochs : int
    probe_every : int
        Epoch period of ensemble probes (0 disables them).
    random_state : int
    """

    def __init__(self, hidden_layer_sizes=(30, 30), activation="relu", learning_rate=0.01,
                 batch_size=25, epochs=100, probe_every=0, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.probe_every = probe_every
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        model = MlpConfig((X.shape[1], *self.hidden_layer_sizes, len(self.classes_)),
                          self.activation)
        config = TrainConfig(alpha=self.learning_rate, B=self.batch_size, epochs=self.epochs,
                             probe_every=self.probe_every, seed=self.random_state)
        data = NoisyDataset.clean(RawDataset(X, codes, len(self.classes_)))
        result = train(config, model, data)
        self.weights_ = result.weights
        self.trajectory_ = result.trajectory
        return self

    def predict_log_proba(self, X):
        check_is_fitted(self, "weights_")
        X = check_array(X, dtype=np.float64)
        return predict_log_proba(self.weights_, X)

    def predict_proba(self, X):
        return np.exp(self.predict_log_proba(X))

    def predict(self, X):
        codes = self.predict_log_proba(X).argmax(axis=1)
        return self.classes_[codes]

    def sample_losses(self, X, y):
        """Per-sample cross-entropy against the labels ``y``."""
        check_is_fitted(self, "weights_")
        X, y = check_X_y(X, y, dtype=np.float64)
        codes = np.searchsorted(self.classes_, y)
        if np.any(codes >= len(self.classes_)) or np.any(self.classes_[codes] != y):
            raise ValueError("y contains labels unseen during fit")
        return per_sample_losses(self.weights_, X, codes)[0]


class LossMixture(BaseEstimator):
    """Two-component Gaussian mixture over per-sample losses.

    ``predict`` flags samples whose loss exceeds the fitted threshold, i.e.
    the suspected mislabels.
    """

    def __init__(self, threshold_rule="midpoint", max_iter=500, tol=None):
        self.threshold_rule = threshold_rule
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, losses, y=None):
        x = check_array(np.asarray(losses, dtype=np.float64).reshape(-1, 1)).ravel()
        self.gmm_ = fit_gmm_em(x, self.tol, self.max_iter)
        self.threshold_ = (np.inf if self.gmm_.degenerate
                           else cleaning_threshold(self.gmm_, self.threshold_rule))
        return self

    def predict(self, losses):
        check_is_fitted(self, "gmm_")
        return np.asarray(losses, dtype=np.float64).ravel() > self.threshold_

    def predict_proba(self, losses):
        """Responsibility of the high-loss component for each loss."""
        check_is_fitted(self, "gmm_")
        x = np.asarray(losses, dtype=np.float64).ravel()
        if self.gmm_.degenerate:
            return np.zeros_like(x)
        return self.gmm_.predict_proba(x)

