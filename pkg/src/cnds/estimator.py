"""scikit-learn compatible front ends for deep supervision."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted

from . import network as nw
from .data import Dataset
from .evaluation import strip_branches
from .supervision import BranchTemplate, ProbeConfig, attach_branch, probe_vanishing
from .trainer import TrainingConfig, train


def _as_images(X, input_shape):
    """Validate ``X`` and reshape it to ``(n, C, H, W)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        if input_shape is None:
            raise ValueError("input_shape is required for flattened 2-d input")
        X = X.reshape((X.shape[0],) + tuple(input_shape))
    elif X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected 2-d, 3-d or 4-d input, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("found an empty array")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains NaN or infinity")
    return X


def _encode(y):
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"y must be 1-d, got shape {y.shape}")
    check_classification_targets(y)
    classes, encoded = np.unique(y, return_inverse=True)
    return classes, encoded


class DeeplySupervisedClassifier(ClassifierMixin, BaseEstimator):
    """Convolutional classifier trained with auxiliary branch losses.

    ``spec`` is a :class:`~cnds.network.NetworkSpec` whose main head has one
    output per class; its branches are trained with weights decaying from
    ``alpha0`` to zero.  ``attach_points`` adds branches built from
    ``branch_template`` on top of those already in ``spec``.  After
    :meth:`fit` the branches are stripped unless ``keep_branches`` is set;
    predictions always use the main head.
    """

    def __init__(self, spec=None, input_shape=None, attach_points=(), branch_template=None,
                 alpha0=0.3, epochs=10, batch_size=128, learning_rate=0.01, momentum=0.9,
                 weight_decay=5e-4, lr_schedule=None, init_std=0.01, random_state=0,
                 keep_branches=False):
        self.spec = spec
        self.input_shape = input_shape
        self.attach_points = attach_points
        self.branch_template = branch_template
        self.alpha0 = alpha0
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_schedule = lr_schedule
        self.init_std = init_std
        self.random_state = random_state
        self.keep_branches = keep_branches

    def _training_spec(self, n_classes, image_shape):
        if self.spec is None:
            raise ValueError("spec must be a NetworkSpec")
        spec = self.spec
        if spec.main[-1].classes != n_classes:
            raise ValueError(
                f"main head has {spec.main[-1].classes} outputs but y has {n_classes} classes"
            )
        template = self.branch_template or BranchTemplate(n_classes)
        for point in self.attach_points:
            spec = attach_branch(spec, point, template, self.alpha0, image_shape)
        return spec

    def fit(self, X, y, X_val=None, y_val=None):
        X = _as_images(X, self.input_shape)
        self.classes_, encoded = _encode(y)
        if len(encoded) != len(X):
            raise ValueError(f"X has {len(X)} samples but y has {len(encoded)}")
        k = len(self.classes_)
        spec = self._training_spec(k, X.shape[1:])
        val = None
        if X_val is not None:
            Xv = _as_images(X_val, self.input_shape)
            yv = np.searchsorted(self.classes_, np.asarray(y_val))
            val = Dataset(Xv, yv, k)
        cfg = TrainingConfig(
            epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
            momentum=self.momentum, weight_decay=self.weight_decay, alpha0=self.alpha0,
            seed=self.random_state, init_std=self.init_std,
            lr_schedule=None if self.lr_schedule is None else tuple(self.lr_schedule),
        )
        params, self.metrics_ = train(spec, Dataset(X, encoded, k), val, cfg)
        if not self.keep_branches:
            spec, params = strip_branches(spec, params)
        self.spec_, self.params_ = spec, params
        self.network_ = nw.build(spec, X.shape[1:])
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = _as_images(X, self.input_shape)
        return nw.predict_proba(self.network_, self.params_, X)

    def predict(self, X):
        check_is_fitted(self, "params_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def strip(self):
        """Remove any retained branches in place; returns ``self``."""
        check_is_fitted(self, "params_")
        self.spec_, self.params_ = strip_branches(self.spec_, self.params_)
        self.network_ = nw.build(self.spec_, self.network_.input_shape)
        return self


class GradientProbe(BaseEstimator):
    """Estimator wrapper around :func:`~cnds.supervision.probe_vanishing`.

    ``fit`` stores the report in ``report_`` and the recommended attach
    points in ``attach_points_``.
    """

    def __init__(self, spec=None, input_shape=None, iterations=30, threshold=1e-7,
                 batch_size=128, learning_rate=0.01, momentum=0.9, weight_decay=5e-4,
                 init_std=0.01, spacing=3, random_state=0):
        self.spec = spec
        self.input_shape = input_shape
        self.iterations = iterations
        self.threshold = threshold
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.init_std = init_std
        self.spacing = spacing
        self.random_state = random_state

    def fit(self, X, y):
        X = _as_images(X, self.input_shape)
        classes, encoded = _encode(y)
        cfg = ProbeConfig(
            iterations=self.iterations, threshold=self.threshold, batch_size=self.batch_size,
            seed=self.random_state, learning_rate=self.learning_rate, momentum=self.momentum,
            weight_decay=self.weight_decay, init_std=self.init_std, spacing=self.spacing,
        )
        k = max(len(classes), self.spec.main[-1].classes)
        self.report_ = probe_vanishing(self.spec, Dataset(X, encoded, k), cfg)
        self.attach_points_ = list(self.report_.recommended_attach_points)
        return self
