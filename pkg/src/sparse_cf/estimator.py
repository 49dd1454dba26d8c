"""Scikit-learn style wrapper around training and scoring."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .corpus import ItemBatch, ItemCatalog
from .evaluation import rank_candidates
from .exceptions import ConfigError
from .nn import DcfConfig, IndicatorPairFeatures, BagPairFeatures, DcfModel, LinearModel, init_model
from .train import PairData, TrainConfig, fit, score_positions
from .validation import (
    check_choice,
    check_fraction,
    check_known_items,
    check_pairs,
    check_positive_int,
    check_stats,
)

ARCHS = ("linear", "dcf-mean", "dcf-rnn")


class LogCosineRecommender(BaseEstimator):
    """Learns ``h(s, r)`` approximating the log-cosine of co-purchase behaviour.

    ``fit`` takes ``(user, item, timestamp)`` records, a transaction log or
    precomputed statistics.  Content models (``dcf-*``, and ``linear`` when a
    catalog is given) score any catalog item, including ones never purchased;
    the ``linear`` model without a catalog uses one indicator per item pair.

    Parameters mirror :class:`~sparse_cf.train.TrainConfig` and
    :class:`~sparse_cf.nn.DcfConfig`.
    """

    def __init__(self, arch="dcf-mean", loss_mode="per_seed", k_cp=200000, k_s=0, k_r=4,
                 learning_rate=0.1, max_epochs=1000, patience=10, validation_fraction=0.05,
                 batch_size=1, d_emb=200, d_hidden=400, d_head=1200, d_rnn=200, tied=False,
                 emb_init=0.5, seed=0):
        self.arch = arch
        self.loss_mode = loss_mode
        self.k_cp = k_cp
        self.k_s = k_s
        self.k_r = k_r
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.batch_size = batch_size
        self.d_emb = d_emb
        self.d_hidden = d_hidden
        self.d_head = d_head
        self.d_rnn = d_rnn
        self.tied = tied
        self.emb_init = emb_init
        self.seed = seed

    def _train_config(self):
        check_choice(self.arch, "arch", ARCHS)
        check_positive_int(self.max_epochs, "max_epochs", allow_zero=True)
        check_fraction(self.validation_fraction, "validation_fraction")
        return TrainConfig(
            loss_mode=self.loss_mode, k_cp=self.k_cp, k_s=self.k_s, k_r=self.k_r,
            learning_rate=self.learning_rate, max_epochs=self.max_epochs, patience=self.patience,
            seed=self.seed, validation_fraction=self.validation_fraction, batch_size=self.batch_size,
        )

    def _build_model(self, stats, catalog):
        if self.arch == "linear":
            if catalog is None:
                return LinearModel(IndicatorPairFeatures(stats.n_items))
            return LinearModel(BagPairFeatures(catalog.vocab_sizes))
        if catalog is None:
            raise ConfigError(f"arch {self.arch!r} needs an item catalog")
        config = DcfConfig.from_catalog(
            catalog, arch=self.arch, d_emb=self.d_emb, d_hidden=self.d_hidden,
            d_head=self.d_head, d_rnn=self.d_rnn, tied=self.tied, emb_init=self.emb_init,
        )
        return init_model(config, self.seed)

    def fit(self, X, y=None, catalog: ItemCatalog | None = None, monitor=None):
        config = self._train_config()
        stats = check_stats(X)
        features = None
        if catalog is not None:
            check_known_items(stats.items, catalog, "training item")
            features = catalog.feature_matrix(stats.items)
        model = self._build_model(stats, catalog)
        self.model_, self.history_ = fit(model, PairData(stats, features), config, monitor=monitor)
        self.stats_ = stats
        self.catalog_ = catalog
        self.items_ = list(stats.items)
        return self

    # -- scoring ----------------------------------------------------------
    def _uses_content(self):
        return not (isinstance(self.model_, LinearModel) and isinstance(self.model_.featurizer, IndicatorPairFeatures))

    def predict(self, X):
        """Scores ``h(s, r)`` for an iterable of ``(seed_id, candidate_id)`` pairs."""
        check_is_fitted(self, "model_")
        pairs = check_pairs(X)
        if not pairs:
            return np.zeros(0)
        seeds = [s for s, _ in pairs]
        cands = [r for _, r in pairs]
        if self._uses_content():
            check_known_items(seeds + cands, self.catalog_)
            return self.model_.score_batches(
                ItemBatch.from_features([self.catalog_[t] for t in seeds]),
                ItemBatch.from_features([self.catalog_[t] for t in cands]),
            )
        check_known_items(seeds + cands, self.stats_)
        s_pos = np.array([self.stats_.index(t) for t in seeds])
        r_pos = np.array([self.stats_.index(t) for t in cands])
        return score_positions(self.model_, PairData(self.stats_), s_pos, r_pos)

    def predict_cosine(self, X):
        """``exp(h)``: the cosine estimate (exact only for an unshifted objective)."""
        return np.exp(self.predict(X))

    def transform(self, X):
        """Seed-side item embeddings, one row per item id."""
        check_is_fitted(self, "model_")
        if not isinstance(self.model_, DcfModel):
            raise ConfigError("only neural models produce item embeddings")
        items = list(X)
        check_known_items(items, self.catalog_)
        return self.model_.embed(ItemBatch.from_features([self.catalog_[t] for t in items]))

    def rank(self, seed, candidates):
        """Candidates by descending score, ties by ascending id."""
        candidates = list(candidates)
        scores = self.predict([(seed, c) for c in candidates])
        ordered, _ = rank_candidates(scores, candidates)
        return ordered
