"""scikit-learn style classifier backed by a tiled iterated block map."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .autodiff import softmax
from .constructors import build_tiled_map, make_layered_tiling, make_random_tiling
from .mnist import MNIST_MEAN, MNIST_STD, ImageSet, preprocess
from .training import AdamConfig, TrainConfig, predict_logits, train

__all__ = ["ImagePreprocessor", "TiledMapClassifier"]


class TiledMapClassifier(ClassifierMixin, BaseEstimator):
    """Classifier whose forward pass is ``iterations`` applications of one tiled map.

    ``hidden`` lists the hidden layer widths; input and output widths come from
    the data. ``architecture="random"`` scatters the same number of trainable
    tiles over the eligible grid instead of the layer-to-layer blocks.

    >>> clf = TiledMapClassifier(hidden=(8,), tile=4, epochs=2)   # doctest: +SKIP
    >>> clf.fit(X, y).score(X_test, y_test)                       # doctest: +SKIP
    """

    def __init__(self, hidden=(128, 64), tile=32, architecture="layered", iterations=None,
                 epochs=10, batch_size=64, lr=1e-3, seed=0, budget=None, max_depth="auto"):
        self.hidden = hidden
        self.tile = tile
        self.architecture = architecture
        self.iterations = iterations
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.budget = budget
        self.max_depth = max_depth

    def _grid(self, dims):
        if self.architecture == "layered":
            return make_layered_tiling(dims, self.tile)
        if self.architecture == "random":
            depth = self.iterations_ if self.max_depth == "auto" else self.max_depth
            return make_random_tiling(dims, self.tile, self.budget, self.seed, max_depth=depth)
        raise ValueError(f"architecture must be 'layered' or 'random', got {self.architecture!r}")

    def fit(self, X, y, eval_sets=None):
        """Train on ``X`` (examples as rows); ``eval_sets`` maps split names to ``(X, y)``."""
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        dims = [X.shape[1], *map(int, self.hidden), len(self.classes_)]
        self.iterations_ = self.iterations or len(dims) - 1
        self.grid_ = self._grid(dims)
        m = build_tiled_map(self.grid_, seed=self.seed)
        cfg = TrainConfig(iterations=self.iterations_, epochs=self.epochs,
                          batch_size=self.batch_size, seed=self.seed,
                          optimizer=AdamConfig(lr=self.lr))
        extra = {}
        for name, (Xs, ys) in (eval_sets or {}).items():
            Xs = check_array(Xs, dtype=np.float64)
            extra[name] = (Xs, np.searchsorted(self.classes_, ys))
        result = train(m, self.grid_, (X, codes), cfg, extra, model=self.architecture)
        self.map_ = result.map
        self.log_ = result.log
        return self

    def decision_function(self, X):
        check_is_fitted(self, "map_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        logits = predict_logits(self.map_, X, self.iterations_, self.grid_.dims[-1])
        return logits.T

    def predict_proba(self, X):
        return softmax(self.decision_function(X).T).T

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class ImagePreprocessor(TransformerMixin, BaseEstimator):
    """Resize, erase and normalize square images given as flattened rows.

    Erased rectangles depend on ``seed`` and the row index, so transforming the
    same array twice gives the same output.
    """

    def __init__(self, side=None, erase=(0.02, 0.05), seed=0, mean=MNIST_MEAN, std=MNIST_STD):
        self.side = side
        self.erase = erase
        self.seed = seed
        self.mean = mean
        self.std = std

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        side = int(round(np.sqrt(X.shape[1])))
        if side * side != X.shape[1]:
            raise ValueError(f"{X.shape[1]} features do not form a square image")
        self.in_side_ = side
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "in_side_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        s = self.in_side_
        images = ImageSet(X.reshape(-1, s, s), np.zeros(X.shape[0], dtype=np.uint8))
        size = None if self.side is None else (self.side, self.side)
        out = preprocess(images, size, self.erase, self.seed, self.mean, self.std)
        return out.flat()
