"""Static BPR matrix factorisation trained on pooled pre-cut data."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .data import TimeSlicedDataset, sample_bpr_batch
from .meta import Adam

log = logging.getLogger(__name__)


def _mf_loss(tape, p, batch):
    u = dc.gather(p["user"], batch.users)
    pos = dc.rowdot(u, dc.gather(p["item"], batch.pos))
    neg = dc.rowdot(u, dc.gather(p["item"], batch.neg))
    pos = dc.add(pos, dc.gather(p["bias"], batch.pos))
    neg = dc.add(neg, dc.gather(p["bias"], batch.neg))
    return dc.neg(dc.mean(dc.log_sigmoid(dc.sub(pos, neg))))


@dataclass
class MFParams:
    user: np.ndarray
    item: np.ndarray
    bias: np.ndarray

    def __call__(self, users, items):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        return np.einsum("nd,nmd->nm", self.user[users], self.item[items]) + self.bias[items]


def train_mf(dataset: TimeSlicedDataset, dim: int = 32, lr: float = 0.003, epochs: int = 60,
             batch_size: int = 256, l2: float = 1e-4, seed: int = 0, patience: int | None = 5,
             num_negatives: int = 99, init_std: float = 0.01,
             allow_short: bool = False) -> tuple[MFParams, list]:
    """BPR-MF with Adam; keeps the epoch with the best validation NDCG@5."""
    from .evaluation import evaluate

    rng = np.random.default_rng(seed)
    users, items, _ = dataset.part("train")
    keys = dataset.train_keys()
    params = {"user": rng.normal(0, init_std, (dataset.num_users, dim)),
              "item": rng.normal(0, init_std, (dataset.num_items, dim)),
              "bias": np.zeros(dataset.num_items)}
    opt = Adam(lr)
    val_u, val_i, _ = dataset.part("val")
    all_keys = dataset.all_keys()
    steps = max(1, len(users) // batch_size)
    history, best, since = [], (-np.inf, None), 0
    for epoch in range(1, epochs + 1):
        for _ in range(steps):
            batch = sample_bpr_batch(users, items, batch_size, rng, keys, dataset.num_items)
            _, grads = dc.value_and_grad(_mf_loss, params, batch)
            if l2:
                grads = {k: g + l2 * params[k] for k, g in grads.items()}
            params = opt.step(params, grads)
        model = MFParams(**{k: v.copy() for k, v in params.items()})
        if len(val_u) == 0:
            best = (np.nan, model)
            continue
        ndcg = evaluate(model, val_u, val_i, all_keys, dataset.num_items, seed=seed,
                        num_negatives=num_negatives, allow_short=allow_short).metrics["NDCG@5"]
        history.append((epoch, ndcg))
        if ndcg > best[0]:
            best, since = (ndcg, model), 0
        else:
            since += 1
            if patience and since >= patience:
                break
    return best[1], history
