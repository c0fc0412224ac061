"""scikit-learn compatible wrapper around the trainer.

Follows the semi-supervised convention of ``sklearn.semi_supervised``:
targets equal to ``-1`` mark unlabeled samples.
"""
import numpy as np
from scipy.special import softmax
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .data import AugmentSpec, LabeledDataset
from .diffnet import NetworkConfig, forward
from .geometry import project_to_sphere
from .losses import HcrConfig, SimilarityConfig
from .trainer import TrainConfig, train

UNLABELED = -1


class HCRClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Shared-encoder classifier trained with CE, a contrastive term and HCR.

    Parameters
    ----------
    encoder_widths : tuple of int
        Hidden widths of the encoder before the feature layer.
    feature_dim, projection_dim : int
        Encoder output size and projection-head output size.
    hcr_weight : float
        Weight of the hyperspherical consistency term; 0 disables it.
    gradient_flow : {"classifier_only", "both"}
        Whether HCR also back-propagates into the projection head.
    hcr_sigma : float
        Kernel width shared by both similarity metrics.
    unsupervised : {"none", "info_nce", "pgc"}
        Contrastive term computed on two augmented views.
    lambda_u, tau : float
        Contrastive weight and temperature.
    learning_rate, momentum, batch_size, epochs :
        SGD settings.
    jitter_sigma, scale_range :
        Feature-space augmentation.
    precision : {"float64", "float32"}
    random_state : int

    Attributes
    ----------
    classes_ : ndarray
    params_ : NetworkParams
    history_ : list of MetricsRecord
    n_features_in_ : int

    ``transform`` returns the unit-norm projection-head embedding.
    """

    def __init__(self, encoder_widths=(64,), feature_dim=32, projection_dim=16,
                 activation="tanh", hcr_weight=1.0, gradient_flow="classifier_only",
                 hcr_sigma=2 ** -0.5, unsupervised="info_nce", lambda_u=1.0,
                 tau=0.07, learning_rate=0.02, momentum=0.9, batch_size=64,
                 epochs=50, jitter_sigma=0.1, scale_range=(0.8, 1.25),
                 precision="float64", random_state=0):
        self.encoder_widths = encoder_widths
        self.feature_dim = feature_dim
        self.projection_dim = projection_dim
        self.activation = activation
        self.hcr_weight = hcr_weight
        self.gradient_flow = gradient_flow
        self.hcr_sigma = hcr_sigma
        self.unsupervised = unsupervised
        self.lambda_u = lambda_u
        self.tau = tau
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.epochs = epochs
        self.jitter_sigma = jitter_sigma
        self.scale_range = scale_range
        self.precision = precision
        self.random_state = random_state

    def _train_config(self, n_features, n_classes):
        sim = SimilarityConfig(sigma=self.hcr_sigma)
        return TrainConfig(
            network=NetworkConfig(
                input_dim=n_features,
                encoder_widths=tuple(self.encoder_widths),
                feature_dim=self.feature_dim,
                num_classes=n_classes,
                projection_dim=self.projection_dim,
                activation=self.activation,
            ),
            hcr=HcrConfig(similarity_g=sim, similarity_h=sim,
                          gradient_flow=self.gradient_flow, weight=self.hcr_weight),
            tau=self.tau,
            lambda_u=self.lambda_u,
            unsupervised_kind=self.unsupervised,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=0 if self.random_state is None else int(self.random_state),
            precision=self.precision,
            augment=AugmentSpec(self.jitter_sigma, tuple(self.scale_range)),
        )

    def fit(self, X, y):
        """Fit on ``X``; entries of ``y`` equal to -1 are treated as unlabeled."""
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ValueError(f"y must have shape ({X.shape[0]},), got {y.shape}")
        check_classification_targets(y)
        labeled = y != UNLABELED
        if not labeled.any():
            raise ValueError("fit needs at least one labeled sample")
        self.classes_ = np.unique(y[labeled])
        if self.classes_.size < 2:
            raise ValueError("fit needs at least two classes")
        self.n_features_in_ = X.shape[1]

        encoded = np.zeros(X.shape[0], dtype=np.int64)
        encoded[labeled] = np.searchsorted(self.classes_, y[labeled])
        ds = LabeledDataset(X, encoded, encoded, labeled, self.classes_.size)
        cfg = self._train_config(X.shape[1], self.classes_.size)
        self.history_, self.params_ = train(cfg, ds)
        return self

    def _check_input(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, model was fitted with {self.n_features_in_}"
            )
        return X

    def decision_function(self, X):
        X = self._check_input(X)
        return forward(self.params_, X).logits

    def predict_proba(self, X):
        return softmax(self.decision_function(X), axis=1)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def transform(self, X):
        X = self._check_input(X)
        return forward(self.params_, X).projections

    def sphere_logits(self, X):
        """Classifier outputs mapped onto the unit sphere."""
        return project_to_sphere(self.decision_function(X))
