"""scikit-learn wrapper around the encoder network."""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ..validation import check_sequences
from .network import EncoderNet, ModelConfig
from .training import OptimizerConfig, evaluate, train_local


class ChargeLocationClassifier(ClassifierMixin, BaseEstimator):
    """Next-charge-community classifier over token windows.

    ``X`` has shape (n_samples, window_len, 7) as produced by
    :func:`fedmob.seqmodel.build_samples`; ``y`` holds community ids
    ``1..n_communities``. ``init_weights`` warm-starts from an existing
    bundle (e.g. a community model) instead of a fresh initialisation.

    Attributes
    ----------
    weights_ : WeightBundle
    history_ : TrainHistory
    classes_ : ndarray of community ids
    """

    def __init__(self, n_communities=77, battery_buckets=10, window_len=32,
                 d_model=32, n_layers=2, n_heads=2, d_ff=64, dropout=0.0,
                 lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, batch_floor=64,
                 epochs=10, init_weights=None, random_state=0):
        self.n_communities = n_communities
        self.battery_buckets = battery_buckets
        self.window_len = window_len
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.dropout = dropout
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.batch_floor = batch_floor
        self.epochs = epochs
        self.init_weights = init_weights
        self.random_state = random_state

    def model_config(self):
        return ModelConfig(self.n_communities, self.battery_buckets, self.d_model,
                           self.n_layers, self.n_heads, self.d_ff, self.dropout,
                           self.window_len)

    def optimizer_config(self):
        return OptimizerConfig(self.lr, self.beta1, self.beta2, self.eps, self.batch_floor)

    def fit(self, X, y):
        X, y = check_sequences(X, y, n_communities=self.n_communities,
                               battery_buckets=self.battery_buckets)
        self.net_ = EncoderNet(self.model_config())
        start = (self.init_weights if self.init_weights is not None
                 else self.net_.init_weights(self.random_state))
        self.weights_, self.history_ = train_local(
            self.net_, start, (X, y), self.epochs, self.optimizer_config(), self.random_state)
        self.classes_ = np.arange(1, self.n_communities + 1)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "weights_")
        X = check_sequences(X, n_communities=self.n_communities,
                            battery_buckets=self.battery_buckets)
        return self.net_.forward(self.weights_, X)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(1, keepdims=True)

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(1)]

    def score(self, X, y, sample_weight=None):
        if sample_weight is not None:
            return super().score(X, y, sample_weight)
        check_is_fitted(self, "weights_")
        X, y = check_sequences(X, y, n_communities=self.n_communities,
                               battery_buckets=self.battery_buckets)
        return evaluate(self.net_, self.weights_, (X, y))
