"""scikit-learn style wrapper: ``fit`` learns the model on a NaN-coded
matrix, ``transform`` returns it with the NaNs replaced by SNIS means."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted, validate_data

from .datagen import DataTable, fit_standardizer
from .exceptions import DomainError
from .imputer import ImputeConfig, generate, impute
from .model import ModelConfig, importance_weights, objective_lhat_k
from .nn import derive_seed, make_rng
from .trainer import TrainConfig, train


class IMIWAEImputer(TransformerMixin, BaseEstimator):
    """Deep latent variable imputer for data missing not at random.

    Parameters
    ----------
    latent_dim, missing_latent_dim : int
        Dimensions of the data latent ``z`` and the missingness latent ``zt``.
    hidden, layers : int
        Width and depth of the encoder and decoder networks.
    missingness : {"linear", "nonlinear"}
        Form of the missingness decoder.
    no_self_censoring : bool
        Keep each indicator independent of its own variable.
    n_importance : int
        Importance samples per row during training.
    batch_size, lr, max_epochs, early_stopping : training controls.
    n_impute_samples : int
        Importance samples per row at imputation.
    mode : {"mnar", "mar"}
        Imputation weights with or without the missingness factor.
    dtype : {"float64", "float32"}
    random_state : int
    """

    def __init__(self, latent_dim=3, missing_latent_dim=1, hidden=128, layers=2,
                 missingness="linear", no_self_censoring=True, n_importance=20,
                 batch_size=16, lr=1e-3, max_epochs=10000, early_stopping=True,
                 n_impute_samples=10000, mode="mnar", dtype="float64", random_state=0):
        self.latent_dim = latent_dim
        self.missing_latent_dim = missing_latent_dim
        self.hidden = hidden
        self.layers = layers
        self.missingness = missingness
        self.no_self_censoring = no_self_censoring
        self.n_importance = n_importance
        self.batch_size = batch_size
        self.lr = lr
        self.max_epochs = max_epochs
        self.early_stopping = early_stopping
        self.n_impute_samples = n_impute_samples
        self.mode = mode
        self.dtype = dtype
        self.random_state = random_state

    def _table(self, X):
        return DataTable.from_nan(X)

    def fit(self, X, y=None):
        X = validate_data(self, X, ensure_all_finite="allow-nan", dtype=np.float64)
        table, dropped = self._table(X).drop_fully_missing()
        if table.n == 0:
            raise DomainError("every row is fully missing")
        self.standardizer_ = fit_standardizer(table)
        std = DataTable(self.standardizer_.transform(table.values), table.mask)
        self.model_config_ = ModelConfig(
            p=X.shape[1], latent_dim=self.latent_dim, missing_latent_dim=self.missing_latent_dim,
            hidden=self.hidden, encoder_layers=self.layers, decoder_layers=self.layers,
            missingness=self.missingness, no_self_censoring=self.no_self_censoring,
            n_importance=self.n_importance, dtype=self.dtype)
        tc = TrainConfig(batch_size=self.batch_size, lr=self.lr, max_epochs=self.max_epochs,
                         early_stopping=self.early_stopping, seed=derive_seed(self.random_state, 0))
        self.params_, self.trace_ = train(std, self.model_config_, tc)
        self.n_dropped_rows_ = dropped
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = validate_data(self, X, ensure_all_finite="allow-nan", dtype=np.float64, reset=False)
        table = self._table(X)
        std = DataTable(self.standardizer_.transform(np.where(table.mask == 1, X, 0.0)), table.mask)
        cfg = ImputeConfig(B=self.n_impute_samples, mode=self.mode,
                           seed=derive_seed(self.random_state, 1))
        filled = self.standardizer_.inverse(impute(self.params_, std, cfg).values)
        return np.where(table.mask == 1, X, filled)

    def sample(self, n, random_state=None):
        """Draw ``n`` rows from the fitted generative model (original scale)."""
        check_is_fitted(self, "params_")
        seed = derive_seed(self.random_state if random_state is None else random_state, 2)
        return self.standardizer_.inverse(generate(self.params_, n, seed).values)

    def score_samples(self, X):
        """Per-row importance-weighted lower bound on the log-likelihood of
        the observed entries and the mask (standardised scale)."""
        check_is_fitted(self, "params_")
        X = validate_data(self, X, ensure_all_finite="allow-nan", dtype=np.float64, reset=False)
        table = self._table(X)
        std = np.where(table.mask == 1, self.standardizer_.transform(np.where(table.mask == 1, X, 0.0)), 0.0)
        batch = importance_weights(self.params_, std, table.mask, make_rng(self.random_state, 3))
        return objective_lhat_k(batch).astype(np.float64)

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))
