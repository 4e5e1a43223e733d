"""scikit-learn style wrappers around the training pipeline.

The estimators accept records as a list of dicts, a pandas DataFrame, or a
2-D array (columns named ``x0, x1, ...``), and hold their trained state as
pipeline checkpoints in ``checkpoint_``.
"""
from __future__ import annotations

from typing import Any, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import Checkpoint
from .data import PairedDataset
from .exceptions import ContractViolation, DataError
from .evaluation import auroc
from .pipeline import (
    RunConfig,
    embed_rows,
    predict,
    run_contrastive_pretrain,
    run_finetune,
    run_masked_pretrain,
)
from .tabular import FeatureSchema, build_schema, encode_rows


def check_rows(X) -> list[dict[str, Any]]:
    """Coerce ``X`` to a non-empty list of row dicts."""
    if hasattr(X, "to_dict") and hasattr(X, "columns"):
        rows = X.to_dict(orient="records")
    elif isinstance(X, np.ndarray):
        if X.ndim != 2:
            raise ContractViolation(f"expected a 2-D array, got shape {X.shape}")
        names = [f"x{j}" for j in range(X.shape[1])]
        rows = [dict(zip(names, r.tolist())) for r in X]
    elif isinstance(X, Sequence) and not isinstance(X, (str, bytes)):
        rows = list(X)
        if not all(isinstance(r, Mapping) for r in rows):
            raise ContractViolation("rows must be mappings of column name to value")
        rows = [dict(r) for r in rows]
    else:
        raise ContractViolation(f"unsupported input type {type(X).__name__}")
    if not rows:
        raise DataError("no rows given")
    return rows


def check_binary(y, n: int) -> list[int]:
    arr = np.asarray(y)
    if arr.ndim != 1 or len(arr) != n:
        raise ContractViolation(f"expected {n} labels, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise DataError("labels must be 0/1")
    return arr.astype(int).tolist()


def check_notes(notes, n: int) -> list[str]:
    notes = list(notes)
    if len(notes) != n or not all(isinstance(t, str) for t in notes):
        raise ContractViolation(f"expected {n} note strings")
    return notes


class TabularEncoderTransformer(TransformerMixin, BaseEstimator):
    """Ordinal codes for categoricals followed by standardized numericals."""

    def __init__(self, exclude: Sequence[str] = ()):
        self.exclude = exclude

    def fit(self, X, y=None):
        self.schema_ = build_schema(check_rows(X), self.exclude)
        self.feature_names_out_ = np.array(
            [c.name for c in self.schema_.categorical] + [c.name for c in self.schema_.numerical]
        )
        return self

    def transform(self, X):
        check_is_fitted(self, "schema_")
        b = encode_rows(self.schema_, check_rows(X))
        return np.hstack([b.cat.numpy().astype(np.float64), b.num.double().numpy()])

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "schema_")
        return self.feature_names_out_


class _CheckpointEncoder(TransformerMixin, BaseEstimator):
    def transform(self, X):
        """128-d tabular representations."""
        check_is_fitted(self, "checkpoint_")
        return embed_rows(self.checkpoint_, check_rows(X))

    @property
    def schema_(self) -> FeatureSchema:
        check_is_fitted(self, "checkpoint_")
        return FeatureSchema.from_dict(self.checkpoint_.schema)


class MaskedPretrainer(_CheckpointEncoder):
    def __init__(self, epochs=20, lr=1e-3, weight_decay=1e-4, batch_size=64, mask_rate=0.25,
                 n_d=64, n_a=64, n_steps=3, seed=0, exclude: Sequence[str] = ()):
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.mask_rate = mask_rate
        self.n_d = n_d
        self.n_a = n_a
        self.n_steps = n_steps
        self.seed = seed
        self.exclude = exclude

    def _config(self) -> RunConfig:
        return RunConfig.for_stage(
            "pretrain-masked", epochs=self.epochs, lr=self.lr, weight_decay=self.weight_decay,
            batch_size=self.batch_size, mask_rate=self.mask_rate, n_d=self.n_d, n_a=self.n_a,
            n_steps=self.n_steps, seed=self.seed)

    def fit(self, X, y=None):
        self.checkpoint_ = run_masked_pretrain(self._config(), check_rows(X), self.exclude)
        self.history_ = self.checkpoint_.meta["history"]
        return self


class ContrastivePretrainer(_CheckpointEncoder):
    """Aligns records with their notes; ``fit(X, notes)``.

    ``init`` is a masked checkpoint or a fitted :class:`MaskedPretrainer`;
    when ``None`` a masked pretrainer with default settings is fitted first.
    """

    def __init__(self, init=None, epochs=13, lr=1e-4, weight_decay=1e-4, batch_size=64, tau=0.1,
                 text_frozen=2, holdout=100, seed=0):
        self.init = init
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.tau = tau
        self.text_frozen = text_frozen
        self.holdout = holdout
        self.seed = seed

    def fit(self, X, notes):
        rows = check_rows(X)
        notes = check_notes(notes, len(rows))
        init = self.init
        if init is None:
            init = MaskedPretrainer(seed=self.seed).fit(rows).checkpoint_
        elif isinstance(init, MaskedPretrainer):
            check_is_fitted(init, "checkpoint_")
            init = init.checkpoint_
        cfg = RunConfig.for_stage(
            "pretrain-cl", epochs=self.epochs, lr=self.lr, weight_decay=self.weight_decay,
            batch_size=self.batch_size, tau=self.tau, text_frozen=self.text_frozen,
            holdout=self.holdout, seed=self.seed)
        ds = PairedDataset([str(i) for i in range(len(rows))], rows, notes, {}, "estimator")
        self.checkpoint_ = run_contrastive_pretrain(cfg, ds, init)
        self.history_ = self.checkpoint_.meta["history"]
        return self


class EHRClassifier(ClassifierMixin, BaseEstimator):
    """Binary classifier fine-tuned from a pretrained tabular encoder.

    ``init`` is a pretraining checkpoint or a fitted pretrainer estimator.
    A seeded ``validation_fraction`` of the rows picks the best epoch by AUC.
    """

    def __init__(self, init=None, epochs=15, lr=5e-4, weight_decay=1e-4, batch_size=64,
                 validation_fraction=0.2, data_parallel=1, seed=0):
        self.init = init
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.validation_fraction = validation_fraction
        self.data_parallel = data_parallel
        self.seed = seed

    def _init_checkpoint(self) -> Checkpoint:
        init = self.init
        if isinstance(init, _CheckpointEncoder):
            check_is_fitted(init, "checkpoint_")
            return init.checkpoint_
        if not isinstance(init, Checkpoint):
            raise ContractViolation("init must be a pretraining checkpoint or a fitted pretrainer")
        return init

    def fit(self, X, y):
        rows = check_rows(X)
        labels = check_binary(y, len(rows))
        self.classes_ = np.array([0, 1])
        cfg = RunConfig.for_stage(
            "finetune", epochs=self.epochs, lr=self.lr, weight_decay=self.weight_decay,
            batch_size=self.batch_size, data_parallel=self.data_parallel, seed=self.seed)
        n_val = int(round(len(rows) * self.validation_fraction))
        if n_val:
            perm = np.random.default_rng(self.seed).permutation(len(rows))
            val, train = perm[:n_val], perm[n_val:]
            self.checkpoint_ = run_finetune(
                cfg, [rows[i] for i in train], [labels[i] for i in train], self._init_checkpoint(),
                "estimator", [rows[i] for i in val], [labels[i] for i in val])
        else:
            self.checkpoint_ = run_finetune(cfg, rows, labels, self._init_checkpoint(), "estimator")
        self.history_ = self.checkpoint_.meta["history"]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "checkpoint_")
        p = predict(self.checkpoint_, check_rows(X))
        return np.column_stack([1 - p, p])

    def decision_function(self, X):
        p = np.clip(self.predict_proba(X)[:, 1], 1e-12, 1 - 1e-12)
        return np.log(p) - np.log1p(-p)

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def score_auroc(self, X, y) -> float:
        rows = check_rows(X)
        return auroc(self.predict_proba(rows)[:, 1], check_binary(y, len(rows)))
