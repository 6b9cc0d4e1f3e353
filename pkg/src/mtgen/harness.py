"""The model under test: a dense classifier with one dropout site.

Dropout sits between the feature body and the linear head, so Monte-Carlo
passes only need to re-run the head. The same class doubles as the FID
feature extractor (``transform`` returns the penultimate activations).
"""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import diffnum as dn
from ._validation import check_images, check_labels, check_random_state
from .datasets import BatchIterator, split
from .errors import NonFiniteError, ParameterError, TrainingDivergedError, UsageError


def entropy(probs):
    """Shannon entropy (nats) of each row of ``probs``; ``0 log 0 = 0``."""
    p = np.asarray(probs, dtype=np.float64)
    logs = np.log(np.where(p > 0, p, 1.0))
    h = -(p * logs).sum(axis=-1)
    return np.clip(h, 0.0, np.log(p.shape[-1]))


@dataclass
class UncertaintyEstimate:
    sigma: float
    mean_probs: np.ndarray
    passes: int


@dataclass
class TrainingReport:
    train_accuracy: float
    val_accuracy: float
    losses: list = field(default_factory=list)


class _Network(dn.Module):
    def __init__(self, input_dim, hidden, num_classes, rng):
        self.body = dn.MLP([input_dim, *hidden], rng, output_activation="relu")
        self.head = dn.Dense(hidden[-1], num_classes, rng)


class DropoutClassifier(ClassifierMixin, BaseEstimator):
    """Dense ReLU classifier trained with dropout; supports MC-dropout uncertainty."""

    def __init__(self, hidden=(256, 128), dropout=0.5, epochs=30, batch_size=64, lr=1e-3,
                 num_classes=None, random_state=0):
        self.hidden = hidden
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.num_classes = num_classes
        self.random_state = random_state

    def fit(self, X, y):
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError(f"dropout must be in [0, 1), got {self.dropout}")
        flat, self.image_shape_ = check_images(X, dtype=dn.get_dtype())
        if flat.shape[0] == 0:
            raise UsageError("cannot train on an empty set")
        n_classes = self.num_classes or int(np.max(y)) + 1
        y = check_labels(y, flat.shape[0], n_classes)
        init_rng, batch_rng, drop_rng = np.random.default_rng(self.random_state).spawn(3)
        self.net_ = _Network(flat.shape[1], tuple(self.hidden), n_classes, init_rng)
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = flat.shape[1]
        params = self.net_.parameters()
        opt = dn.Adam(params, lr=self.lr)
        batches = BatchIterator(flat.shape[0], self.batch_size, seed=batch_rng)
        self.losses_ = []
        for epoch in range(self.epochs):
            total = 0.0
            for idx in batches.epoch():
                try:
                    h = dn.dropout(self.net_.body(flat[idx]), self.dropout, "train", drop_rng)
                    loss = dn.cross_entropy(self.net_.head(h), y[idx])
                    dn.backward(loss, params)
                except NonFiniteError as exc:
                    raise TrainingDivergedError(f"classifier diverged at epoch {epoch}: {exc}") from exc
                opt.step()
                total += loss.item() * len(idx)
            self.losses_.append(total / flat.shape[0])
        return self

    @property
    def num_classes_(self):
        return len(self.classes_)

    def _flat(self, X):
        check_is_fitted(self, "net_")
        flat, _ = check_images(X, dtype=dn.get_dtype())
        if flat.shape[1] != self.n_features_in_:
            raise dn.DimensionError(f"expected {self.n_features_in_} input features, got {flat.shape[1]}")
        return flat

    def transform(self, X):
        """Penultimate-layer features (dropout off)."""
        with dn.no_grad():
            return self.net_.body(self._flat(X)).data

    def predict_proba(self, X):
        with dn.no_grad():
            return dn.softmax(self.net_.head(self.transform(X))).data

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def mc_probs(self, X, passes, rng=None, rngs=None):
        """Softmax outputs of ``passes`` dropout-active forward passes, ``[n, passes, C]``.

        Masks come from ``rng`` for the whole batch, or from ``rngs[i]`` for
        row ``i`` so each input can own an independent stream.
        """
        if passes < 1:
            raise ParameterError(f"pass count must be >= 1, got {passes}")
        feats = self.transform(X)
        n, width = feats.shape
        if rngs is not None:
            if len(rngs) != n:
                raise ParameterError(f"{len(rngs)} rngs for {n} inputs")
            keep = np.stack([r.random((passes, width)) >= self.dropout for r in rngs]) \
                if n else np.zeros((0, passes, width), dtype=bool)
        else:
            keep = check_random_state(rng).random((n, passes, width)) >= self.dropout
        scale = keep.astype(feats.dtype) / feats.dtype.type(1.0 - self.dropout)
        dropped = (feats[:, None, :] * scale).reshape(n * passes, width)
        with dn.no_grad():
            probs = dn.softmax(self.net_.head(dropped)).data
        return probs.reshape(n, passes, -1)

    def predict_uncertainty(self, X, passes=32, rng=None, rngs=None):
        """Return ``(sigma, mean_probs)``: entropy of the MC-averaged softmax per input."""
        mean_probs = self.mc_probs(X, passes, rng=rng, rngs=rngs).mean(axis=1)
        return entropy(mean_probs), mean_probs

    def metadata(self):
        return {
            "kind": "classifier",
            "input_dim": int(self.n_features_in_),
            "image_shape": list(self.image_shape_),
            "hidden": list(self.hidden),
            "num_classes": int(self.num_classes_),
            "dropout": float(self.dropout),
        }

    def save(self, path, **extra):
        dn.checkpoint.save(path, self.net_.state_dict(), {**self.metadata(), **extra})

    def to_bytes(self, **extra):
        return dn.checkpoint.dumps(self.net_.state_dict(), {**self.metadata(), **extra})

    @classmethod
    def from_checkpoint(cls, tensors, meta):
        if meta.get("kind") != "classifier":
            raise UsageError(f"checkpoint holds {meta.get('kind')!r}, not a classifier")
        clf = cls(hidden=tuple(meta["hidden"]), dropout=meta["dropout"], num_classes=meta["num_classes"])
        clf.net_ = _Network(meta["input_dim"], tuple(meta["hidden"]), meta["num_classes"], np.random.default_rng(0))
        clf.net_.load_state_dict(tensors)
        clf.classes_ = np.arange(meta["num_classes"])
        clf.n_features_in_ = meta["input_dim"]
        clf.image_shape_ = tuple(meta["image_shape"])
        return clf

    @classmethod
    def load(cls, path):
        return cls.from_checkpoint(*dn.checkpoint.load(path))


@dataclass
class ClassifierConfig:
    hidden: tuple = (256, 128)
    dropout: float = 0.5
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    val_fraction: float = 0.2


def train_classifier(dataset, config=None, rng=None, validation=None):
    """Train on ``dataset`` and report train/validation accuracy.

    Without an explicit ``validation`` set, ``config.val_fraction`` of the
    data is held out. Returns ``(classifier, report, validation_set)``.
    """
    config = config or ClassifierConfig()
    rng = check_random_state(rng)
    if len(dataset) == 0:
        raise UsageError("cannot train on an empty dataset")
    train = dataset
    if validation is None:
        train, validation = split(dataset, config.val_fraction, seed=rng.integers(2**63))
    clf = DropoutClassifier(hidden=config.hidden, dropout=config.dropout, epochs=config.epochs,
                            batch_size=config.batch_size, lr=config.lr,
                            num_classes=dataset.num_classes, random_state=rng.integers(2**63))
    clf.fit(train.images, train.labels)
    clf.report_ = TrainingReport(
        train_accuracy=float(clf.score(train.images, train.labels)),
        val_accuracy=float(clf.score(validation.images, validation.labels)),
        losses=list(clf.losses_),
    )
    return clf, clf.report_, validation


def predict(x, model):
    """Dropout-off prediction for one image or a batch: ``(label(s), probabilities)``."""
    x = np.asarray(x)
    single = x.ndim == len(model.image_shape_) and x.shape == tuple(model.image_shape_)
    batch = x[None] if single else x
    probs = model.predict_proba(batch)
    labels = np.argmax(probs, axis=1)
    return (int(labels[0]), probs[0]) if single else (labels, probs)


def mc_uncertainty(x, model, passes=32, rng=None):
    """MC-dropout uncertainty of a single image."""
    if passes < 1:
        raise ParameterError(f"pass count must be >= 1, got {passes}")
    x = np.asarray(x)
    sigma, mean_probs = model.predict_uncertainty(x[None], passes, rngs=[check_random_state(rng)])
    return UncertaintyEstimate(float(sigma[0]), mean_probs[0], passes)


class StubClassifier:
    """Test double that sees the conditioning label and is always right or always wrong.

    The generator passes expected labels to models whose ``label_aware`` is
    true; real classifiers never see them.
    """

    label_aware = True

    def __init__(self, behavior, num_classes):
        if behavior not in ("always-right", "always-wrong"):
            raise ParameterError(f"unknown stub behavior {behavior!r}")
        self.behavior = behavior
        self.classes_ = np.arange(num_classes)
        self.dropout = 0.0

    @property
    def num_classes_(self):
        return len(self.classes_)

    def predict(self, X, expected):
        expected = np.asarray(expected, dtype=np.int64)
        if self.behavior == "always-right":
            return expected.copy()
        return (expected + 1) % self.num_classes_

    def predict_uncertainty(self, X, passes=32, rng=None, rngs=None):
        n = len(X)
        probs = np.full((n, self.num_classes_), 1.0 / self.num_classes_)
        return entropy(probs), probs
