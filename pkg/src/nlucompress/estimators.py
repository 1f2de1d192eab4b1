"""scikit-learn style wrappers: compressors as transformers, the NLU model as an estimator.

Each wrapper stores constructor arguments verbatim (so ``get_params`` and
``clone`` work) and keeps fitted state in trailing-underscore attributes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import dccl
from . import metrics as mx
from . import quant8
from . import svdcomp
from . import train as tr
from .validation import check_codes, check_fraction, check_matrix, check_positive, check_range


class DCCLCompressor(TransformerMixin, BaseEstimator):
    """Task-agnostic compositional codes: rows of ``X`` -> ``M`` codes in ``[0, K)``."""

    def __init__(self, M=8, K=16, H=None, tau=1.0, epochs=300, learning_rate=1e-4, batch_size=64, seed=0):
        self.M = M
        self.K = K
        self.H = H
        self.tau = tau
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y=None):
        X = check_matrix(X)
        check_positive(self.M, "M", integer=True)
        check_range(self.K, "K", 2, 1 << 16)
        cfg = tr.TrainConfig(regime="dccl_autoencoder", M=self.M, K=self.K, H=self.H, tau=self.tau,
                             epochs=self.epochs, learning_rate=self.learning_rate,
                             batch_size=self.batch_size, seed=self.seed)
        self.autoencoder_, self.report_ = tr.train_dccl_autoencoder(X, cfg)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "autoencoder_")
        X = check_matrix(X, n_cols=self.n_features_in_)
        return self.autoencoder_.encoder.codes(X)

    def inverse_transform(self, codes):
        check_is_fitted(self, "autoencoder_")
        codes = check_codes(codes, self.K, self.M)
        return dccl.reconstruct(codes, self.autoencoder_.books.value)

    def codebooks(self) -> dccl.CodebookSet:
        check_is_fitted(self, "autoencoder_")
        return self.autoencoder_.codebook_set()

    def score(self, X, y=None) -> float:
        """Negative mean squared reconstruction error (higher is better)."""
        X = check_matrix(X, n_cols=getattr(self, "n_features_in_", None))
        rec = self.inverse_transform(self.transform(X))
        return -float(mx.per_word_mse(X, rec).mean())


class SVDCompressor(TransformerMixin, BaseEstimator):
    """Truncated SVD keeping a fraction ``n`` of the components."""

    def __init__(self, n=0.1):
        self.n = n

    def fit(self, X, y=None):
        X = check_matrix(X)
        check_fraction(self.n, "n")
        self.factors_ = svdcomp.svd_truncate(X, self.n)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        """Coordinates in the retained right-singular basis, ``X Vt^T``."""
        check_is_fitted(self, "factors_")
        X = check_matrix(X, n_cols=self.n_features_in_)
        return X @ self.factors_.Vt.T

    def inverse_transform(self, Z):
        check_is_fitted(self, "factors_")
        Z = check_matrix(Z, "Z", n_cols=self.factors_.r)
        return Z @ self.factors_.Vt


class LinearQuantizer(TransformerMixin, BaseEstimator):
    """Per-tensor affine quantization to ``bins`` levels fitted on the training matrix."""

    def __init__(self, bins=256):
        self.bins = bins

    def fit(self, X, y=None):
        X = check_matrix(X)
        self.quantized_ = quant8.quantize(X, self.bins)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        """Bin indices of ``X`` under the fitted range (values outside it clip)."""
        check_is_fitted(self, "quantized_")
        X = check_matrix(X, n_cols=self.n_features_in_)
        q = self.quantized_
        if q.bin_width == 0.0:
            return np.zeros(X.shape, dtype=np.uint8)
        idx = np.floor((X - q.min) / q.bin_width + 0.5)
        return np.clip(idx, 0, q.bins - 1).astype(np.uint8)

    def inverse_transform(self, idx):
        check_is_fitted(self, "quantized_")
        q = self.quantized_
        return q.min + np.asarray(idx, dtype=np.float64) * q.bin_width


class NLUEstimator(BaseEstimator):
    """MT-RNN trained from a corpus; ``predict`` returns ``(domain, intent, slots)`` per utterance.

    ``fit(X)`` takes a training :class:`~nlucompress.datagen.Corpus`; the
    labels live in the corpus, so ``y`` is ignored.
    """

    def __init__(self, embeddings=None, hidden=64, epochs=25, learning_rate=1e-4, batch_size=32,
                 patience=3, dropout=0.0, seed=0):
        self.embeddings = embeddings
        self.hidden = hidden
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.patience = patience
        self.dropout = dropout
        self.seed = seed

    def fit(self, X, y=None, validation=None):
        if self.embeddings is None:
            raise ValueError("embeddings are required")
        W = check_matrix(getattr(self.embeddings, "weights", self.embeddings), "embeddings")
        if W.shape[0] != len(X.vocab):
            raise ValueError(f"embeddings have {W.shape[0]} rows, corpus vocabulary has {len(X.vocab)}")
        cfg = tr.TrainConfig(regime="nlu_baseline", hidden=self.hidden, epochs=self.epochs,
                             learning_rate=self.learning_rate, batch_size=self.batch_size,
                             patience=self.patience, dropout=self.dropout, seed=self.seed)
        self.model_, self.report_ = tr.train_nlu_baseline(X, validation, W, cfg)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        utts = X.utterances if hasattr(X, "utterances") else list(X)
        return self.model_.predict_batch(utts)

    def score(self, X, y=None) -> float:
        """``1 - IRER`` on corpus ``X``."""
        check_is_fitted(self, "model_")
        irer = mx.evaluate(self.model_, X).irer
        return float("nan") if irer is None else 1.0 - irer
