"""Scikit-learn style front door.

Three estimators cover the pipeline: :class:`SignalTextPretrainer` learns the
dual-branch representation (``fit``) and produces frozen embeddings
(``transform``); :class:`LinearProbe` is a multi-label linear readout
(``fit`` / ``predict_proba``); :class:`ZeroShotClassifier` scores records
against embedded class descriptions with no task training.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ecgtext.evaluation import (
    embed_class_descriptions,
    embed_dataset,
    fit_linear_head,
)
from ecgtext.exceptions import IncompatibleCheckpointError
from ecgtext.objectives import ObjectiveConfig
from ecgtext.training import (
    Checkpoint,
    TrainConfig,
    encoder_config_for,
    normalize_objective,
    pretrain,
)
from ecgtext.validation import check_binary_labels, check_dataset, check_embeddings

__all__ = ["SignalTextPretrainer", "LinearProbe", "ZeroShotClassifier"]


class SignalTextPretrainer(BaseEstimator, TransformerMixin):
    """Self-supervised pretrainer for paired (signal, report) records.

    Parameters mirror the training, architecture, and objective knobs; see
    the package README for the objective arms.  ``fit`` expects a
    :class:`~ecgtext.datasets.Dataset` (or a dataset directory path);
    ``transform`` returns the frozen pooled signal embeddings
    ``[n_records, d_model]``.

    Attributes
    ----------
    checkpoint_ : Checkpoint
        Full parameter and optimizer state after ``fit``.
    history_ : list of str
        One tab-separated log line per epoch:
        ``epoch  total  alignment  reconstruction_or_bottleneck  lr``.
    """

    def __init__(
        self,
        objective: str = "merit",
        epochs: int = 20,
        batch_size: int = 128,
        lr_max: float = 1e-3,
        lr_min: float = 0.0,
        weight_decay: float = 1e-5,
        beta1: float = 0.9,
        beta2: float = 0.999,
        adam_eps: float = 1e-8,
        mask_ratio: float = 0.75,
        grad_clip: float = 0.0,
        tau: float = 0.07,
        lambda_ib: float = 0.1,
        rec_scope: str = "masked_only",
        patch_len: int = 50,
        d_model: int = 64,
        n_heads: int = 4,
        depth_ecg: int = 2,
        depth_text: int = 2,
        depth_dec: int = 1,
        d_proj: int = 32,
        activation: str = "gelu",
        seed: int = 0,
    ):
        self.objective = objective
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.adam_eps = adam_eps
        self.mask_ratio = mask_ratio
        self.grad_clip = grad_clip
        self.tau = tau
        self.lambda_ib = lambda_ib
        self.rec_scope = rec_scope
        self.patch_len = patch_len
        self.d_model = d_model
        self.n_heads = n_heads
        self.depth_ecg = depth_ecg
        self.depth_text = depth_text
        self.depth_dec = depth_dec
        self.d_proj = d_proj
        self.activation = activation
        self.seed = seed

    def _configs(self, dataset):
        enc = encoder_config_for(
            dataset,
            p=self.patch_len,
            d_model=self.d_model,
            n_heads=self.n_heads,
            depth_ecg=self.depth_ecg,
            depth_text=self.depth_text,
            depth_dec=self.depth_dec,
            d_proj=self.d_proj,
            activation=self.activation,
        )
        obj = ObjectiveConfig(
            tau=self.tau, lambda_ib=self.lambda_ib, rec_scope=self.rec_scope
        ).validate()
        train = TrainConfig(
            objective=self.objective,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_max=self.lr_max,
            lr_min=self.lr_min,
            weight_decay=self.weight_decay,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            seed=self.seed,
            mask_ratio=self.mask_ratio,
            grad_clip=self.grad_clip,
        ).validate()
        return enc, obj, train

    def fit(self, X, y=None):
        dataset = check_dataset(X)
        enc, obj, train = self._configs(dataset)
        history: list[str] = []
        self.checkpoint_ = pretrain(dataset, enc, obj, train, log=history.append)
        self.history_ = history
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "checkpoint_")
        pooled, _ = embed_dataset(self.checkpoint_, check_dataset(X))
        return pooled

    def transform_projected(self, X) -> np.ndarray:
        """Unit-norm shared-space embeddings ``[n_records, d_proj]``."""
        check_is_fitted(self, "checkpoint_")
        _, projected = embed_dataset(self.checkpoint_, check_dataset(X))
        return projected


class LinearProbe(BaseEstimator, ClassifierMixin):
    """Multi-label linear readout of frozen embeddings.

    Trains one sigmoid output per label column with binary cross-entropy at
    a fixed learning rate; the encoder that produced the embeddings stays
    untouched.
    """

    def __init__(self, lr: float = 0.001, batch_size: int = 64, epochs: int = 100, seed: int = 0):
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed

    def fit(self, X, y):
        X = check_embeddings(X)
        y = check_binary_labels(y, X.shape[0])
        self.coef_, self.intercept_ = fit_linear_head(
            X, y, lr=self.lr, batch_size=self.batch_size, epochs=self.epochs, seed=self.seed
        )
        self.n_labels_ = y.shape[1]
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "coef_")
        X = check_embeddings(X)
        return X.astype(np.float32) @ self.coef_ + self.intercept_

    def predict_proba(self, X) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.decision_function(X)))

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(np.int64)


class ZeroShotClassifier(BaseEstimator):
    """Score records against class descriptions in the shared space.

    ``fit`` embeds the class description token sequences with the
    checkpoint's text branch and stores per-class mean-score thresholds from
    the given records; ``decision_function`` returns cosine scores.
    """

    def __init__(self, checkpoint: Checkpoint | None = None):
        self.checkpoint = checkpoint

    def fit(self, X, y=None):
        if self.checkpoint is None:
            raise ValueError("ZeroShotClassifier needs a pretrained checkpoint")
        if normalize_objective(self.checkpoint.train_config.objective) == "mse":
            raise IncompatibleCheckpointError(
                "checkpoint has no text branch trained; zero-shot unavailable"
            )
        dataset = check_dataset(X)
        self.class_embeddings_ = embed_class_descriptions(
            self.checkpoint, dataset.manifest.class_descriptions
        )
        self.thresholds_ = self.decision_function(dataset).mean(axis=0)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "class_embeddings_")
        dataset = check_dataset(X)
        _, projected = embed_dataset(self.checkpoint, dataset)
        return projected @ self.class_embeddings_.T

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "thresholds_")
        return (self.decision_function(X) >= self.thresholds_[None, :]).astype(np.int64)
