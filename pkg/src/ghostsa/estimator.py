"""scikit-learn style wrappers around the network and the shift quantizer."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import DTYPE, softmax
from .datasets import DatasetHandle
from .exceptions import ValidationError
from .ghost import build_network, count_parameters
from .netspec import NetworkSpec, toy_mnist_spec
from .shift import P_MAX, P_MIN, densify, quantize_shift_array
from .training import TrainConfig, evaluate, train


def as_images(X, image_shape=None):
    """Coerce ``X`` to float32 NCHW.

    Accepts (N, C, H, W), (N, H, W) (one channel) or flat (N, D) together with
    ``image_shape=(C, H, W)``.
    """
    X = check_array(X, allow_nd=True, dtype=DTYPE, ensure_min_samples=1)
    if X.ndim == 4:
        out = X
    elif X.ndim == 3:
        out = X[:, None]
    elif image_shape is not None:
        c, h, w = image_shape
        if X.shape[1] != c * h * w:
            raise ValidationError(f"{X.shape[1]} features cannot form images of shape {image_shape}")
        out = X.reshape(len(X), c, h, w)
    else:
        side = int(round(np.sqrt(X.shape[1])))
        if side * side != X.shape[1]:
            raise ValidationError("flat input needs image_shape unless D is a perfect square")
        out = X.reshape(len(X), 1, side, side)
    if image_shape is not None and out.shape[1:] != tuple(image_shape):
        raise ValidationError(f"images have shape {out.shape[1:]}, expected {tuple(image_shape)}")
    if out.shape[2] != out.shape[3]:
        raise ValidationError(f"images must be square, got {out.shape[2]}x{out.shape[3]}")
    return np.ascontiguousarray(out)


class GhostSANetClassifier(ClassifierMixin, BaseEstimator):
    """Multiplication-free image classifier trained with momentum SGD.

    ``network`` may be a :class:`NetworkSpec`; by default the small three-stage
    toy backbone is sized to the input.  ``classes``, ``in_channels`` and
    ``input_size`` are always taken from the data.
    """

    def __init__(self, network=None, gamma=2, alpha=1.0, epochs=3, batch_size=32, lr=0.05,
                 momentum=0.9, weight_decay=1e-4, adder_eta=0.2, image_shape=None,
                 random_state=0):
        self.network = network
        self.gamma = gamma
        self.alpha = alpha
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.adder_eta = adder_eta
        self.image_shape = image_shape
        self.random_state = random_state

    def _spec(self, images, n_classes):
        base = self.network if self.network is not None else toy_mnist_spec(self.gamma, self.alpha)
        if not isinstance(base, NetworkSpec):
            raise ValidationError("network must be a NetworkSpec or None")
        return replace(base, classes=n_classes, in_channels=images.shape[1],
                       input_size=images.shape[2]).validate()

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=DTYPE)
        check_classification_targets(y)
        images = as_images(X, self.image_shape)
        self.label_encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.label_encoder_.classes_
        if len(self.classes_) < 2:
            raise ValidationError("need at least two classes")
        seed = 0 if self.random_state is None else int(self.random_state)
        self.model_ = build_network(self._spec(images, len(self.classes_)), seed=seed)
        config = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, base_lr=self.lr,
                             momentum=self.momentum, weight_decay=self.weight_decay,
                             adder_eta=self.adder_eta, seed=seed)
        data = DatasetHandle(images, self.label_encoder_.transform(y), "train", len(self.classes_))
        self.history_ = train(self.model_, data, None, config).history
        self.input_shape_ = images.shape[1:]
        self.n_params_ = count_parameters(self.model_)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        images = as_images(X, self.input_shape_)
        return self.model_.predict_logits(images)

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def top1(self, X, y):
        """Accuracy in percent, computed the same way as the training loop's evaluation."""
        check_is_fitted(self, "model_")
        images = as_images(X, self.input_shape_)
        labels = self.label_encoder_.transform(np.asarray(y))
        return evaluate(self.model_, DatasetHandle(images, labels, "eval", len(self.classes_)))


class PowerOfTwoQuantizer(TransformerMixin, BaseEstimator):
    """Rounds every value to the nearest ``s * 2**p`` with ``p`` in ``[p_min, p_max]``.

    Stateless apart from input validation; ``transform`` returns float32 values.
    """

    def __init__(self, p_min=P_MIN, p_max=P_MAX):
        self.p_min = p_min
        self.p_max = p_max

    def fit(self, X, y=None):
        if self.p_min > self.p_max:
            raise ValidationError(f"p_min {self.p_min} > p_max {self.p_max}")
        X = check_array(X, allow_nd=True, dtype=DTYPE)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, allow_nd=True, dtype=DTYPE)
        if X.shape[1] != self.n_features_in_:
            raise ValidationError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return densify(*self.sign_exponent(X))

    def sign_exponent(self, X):
        """The int8 ``(s, p)`` pair behind :meth:`transform`."""
        X = check_array(X, allow_nd=True, dtype=DTYPE)
        return quantize_shift_array(X, self.p_min, self.p_max)
