"""scikit-learn style wrappers around the training loops.

Both estimators take a :class:`~leaprec.data.TimeSlicedDataset` in ``fit``
and report test NDCG@5 from ``score``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .baseline import MFParams, train_mf
from .data import DataError, TimeSlicedDataset
from .evaluation import ModelScorer, evaluate
from .meta import SMALL_SCALE, TrainConfig, TrainResult, deployment_context, train


def check_dataset(dataset, need_test: bool = False) -> TimeSlicedDataset:
    if not isinstance(dataset, TimeSlicedDataset):
        raise TypeError(f"expected a TimeSlicedDataset, got {type(dataset).__name__}")
    if dataset.num_slices == 0:
        raise DataError("dataset has no training slices")
    if need_test and len(dataset.test_idx) == 0:
        raise DataError("dataset has no test interactions")
    return dataset


def check_pairs(users, items, num_users: int, num_items: int):
    """Integer arrays of equal shape with every index in range."""
    users = np.asarray(users)
    items = np.asarray(items)
    for name, a, n in (("user", users, num_users), ("item", items, num_items)):
        if a.size and not np.issubdtype(a.dtype, np.integer):
            raise TypeError(f"{name} indices must be integers, got {a.dtype}")
        if a.size and (a.min() < 0 or a.max() >= n):
            raise IndexError(f"{name} index out of range [0, {n})")
    return users.astype(np.int64), items.astype(np.int64)


class _RankingMixin:
    """``score``/``recommend`` on top of a ``_scorer()`` returning a callable."""

    def _allow_short(self) -> bool:
        return False

    def predict_scores(self, users, items):
        """Scores for ``items`` (shape ``(n, m)`` or ``(n,)``) of each user."""
        check_is_fitted(self)
        users, items = check_pairs(users, items, self.num_users_, self.num_items_)
        squeeze = items.ndim == 1
        cands = items[:, None] if squeeze else items
        out = self._scorer()(users, cands)
        return out[:, 0] if squeeze else out

    def recommend(self, users, k: int = 10, exclude_seen: bool = True):
        """Top-``k`` item indices per user, best first."""
        check_is_fitted(self)
        users, _ = check_pairs(users, [], self.num_users_, self.num_items_)
        all_items = np.broadcast_to(np.arange(self.num_items_), (len(users), self.num_items_))
        scores = np.array(self._scorer()(users, all_items), dtype=np.float64)
        if exclude_seen:
            keys = self.dataset_.train_keys()
            for row, u in enumerate(users):
                lo, hi = np.searchsorted(keys, [u * self.num_items_, (u + 1) * self.num_items_])
                scores[row, keys[lo:hi] - u * self.num_items_] = -np.inf
        k = min(k, self.num_items_)
        top = np.argpartition(-scores, k - 1, axis=1)[:, :k]
        order = np.argsort(-np.take_along_axis(scores, top, axis=1), axis=1, kind="stable")
        return np.take_along_axis(top, order, axis=1)

    def evaluate(self, dataset: TimeSlicedDataset | None = None, part: str = "test",
                 seed: int = 0, num_negatives: int = 99):
        check_is_fitted(self)
        dataset = check_dataset(dataset if dataset is not None else self.dataset_)
        users, items, _ = dataset.part(part)
        return evaluate(self._scorer(), users, items, dataset.all_keys(), dataset.num_items,
                        seed=seed, num_negatives=num_negatives, allow_short=self._allow_short())

    def score(self, dataset: TimeSlicedDataset, y=None) -> float:
        """Test-period NDCG@5 against 99 sampled negatives."""
        return self.evaluate(check_dataset(dataset, need_test=True)).metrics["NDCG@5"]


class LeapRec(_RankingMixin, BaseEstimator):
    """GTL + OTL recommender meta-trained over time slices.

    Hyperparameters mirror :class:`~leaprec.meta.TrainConfig`; ``None`` keeps
    that class's default.  ``preset="small"`` starts from settings suited to
    logs with a few hundred users.
    """

    def __init__(self, d_gtl=None, d_otl=None, inner_lr=None, gtl_meta_lr=None,
                 otl_meta_lr=None, inner_steps=None, epochs=None, batch_size=None,
                 gnn_layers=None, sa_layers=None, max_seq_len=None, dropout=None,
                 gnn_dropout=None, init_std=None, meta_optimizer=None, meta_mode=None,
                 patience=None, normalize_otl_meta=None, literal_bpr=None, literal_attn=None,
                 extend_history_through_val=None, allow_short_negatives=None, preset=None,
                 seed=0):
        self.d_gtl = d_gtl
        self.d_otl = d_otl
        self.inner_lr = inner_lr
        self.gtl_meta_lr = gtl_meta_lr
        self.otl_meta_lr = otl_meta_lr
        self.inner_steps = inner_steps
        self.epochs = epochs
        self.batch_size = batch_size
        self.gnn_layers = gnn_layers
        self.sa_layers = sa_layers
        self.max_seq_len = max_seq_len
        self.dropout = dropout
        self.gnn_dropout = gnn_dropout
        self.init_std = init_std
        self.meta_optimizer = meta_optimizer
        self.meta_mode = meta_mode
        self.patience = patience
        self.normalize_otl_meta = normalize_otl_meta
        self.literal_bpr = literal_bpr
        self.literal_attn = literal_attn
        self.extend_history_through_val = extend_history_through_val
        self.allow_short_negatives = allow_short_negatives
        self.preset = preset
        self.seed = seed

    def make_config(self, granularity_months: int = 1) -> TrainConfig:
        if self.preset not in (None, "small"):
            raise ValueError(f"unknown preset {self.preset!r}")
        values = dict(SMALL_SCALE) if self.preset == "small" else {}
        for k, v in self.get_params().items():
            if k != "preset" and v is not None:
                values[k] = v
        return TrainConfig(granularity_months=granularity_months, **values)

    def fit(self, dataset: TimeSlicedDataset, y=None, validate: bool = True,
            record_slice_params: bool = False):
        dataset = check_dataset(dataset)
        config = self.make_config(dataset.granularity_months)
        result = train(dataset, config, validate=validate,
                       record_slice_params=record_slice_params)
        self._set_fitted(dataset, result)
        return self

    def _set_fitted(self, dataset: TimeSlicedDataset, result: TrainResult):
        self.config_ = result.config
        self.result_ = result
        self.deployment_ = result.deployment
        self.dataset_ = dataset
        self.num_users_ = dataset.num_users
        self.num_items_ = dataset.num_items
        self.best_epoch_ = result.best_epoch
        self._cached_scorer = None

    def _allow_short(self) -> bool:
        return self.config_.allow_short_negatives

    def _scorer(self):
        if getattr(self, "_cached_scorer", None) is None:
            ctx = deployment_context(self.dataset_, self.config_)
            self._cached_scorer = ModelScorer(self.deployment_["gtl"], self.deployment_["otl"],
                                              ctx, self.config_.options())
        return self._cached_scorer


class BPRMF(_RankingMixin, BaseEstimator):
    """Static BPR matrix factorisation on all pre-cut interactions."""

    def __init__(self, dim=32, lr=0.003, epochs=60, batch_size=256, l2=1e-4, patience=5,
                 init_std=0.01, allow_short_negatives=False, seed=0):
        self.dim = dim
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.l2 = l2
        self.patience = patience
        self.init_std = init_std
        self.allow_short_negatives = allow_short_negatives
        self.seed = seed

    def fit(self, dataset: TimeSlicedDataset, y=None):
        dataset = check_dataset(dataset)
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        self.params_, self.val_history_ = train_mf(
            dataset, dim=self.dim, lr=self.lr, epochs=self.epochs, batch_size=self.batch_size,
            l2=self.l2, seed=self.seed, patience=self.patience, init_std=self.init_std,
            allow_short=self.allow_short_negatives)
        self.dataset_ = dataset
        self.num_users_ = dataset.num_users
        self.num_items_ = dataset.num_items
        return self

    def _allow_short(self) -> bool:
        return self.allow_short_negatives

    def _scorer(self) -> MFParams:
        return self.params_
