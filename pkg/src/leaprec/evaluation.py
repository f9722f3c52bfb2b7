"""Sampled-negative top-K metrics and training diagnostics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import DataError, TimeSlicedDataset
from .model import ModelOptions, ParameterSet, ScoringContext, user_and_item_vectors

DEFAULT_KS = (1, 5)


# ---------------------------------------------------------------- ranking

def ranks(pos_scores, neg_scores) -> np.ndarray:
    """1 + number of negatives scoring at least as high as the positive."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if neg.shape[-1] == 0:
        raise ValueError("no negatives to rank against")
    return 1 + (neg >= pos[..., None]).sum(axis=-1)


def metrics_from_ranks(r, ks: Sequence[int] = DEFAULT_KS) -> dict[str, np.ndarray]:
    r = np.asarray(r, dtype=np.float64)
    out = {}
    for k in ks:
        hit = r <= k
        out[f"HR@{k}"] = hit.astype(np.float64)
        out[f"NDCG@{k}"] = np.where(hit, 1.0 / np.log2(r + 1.0), 0.0)
    out["MRR"] = 1.0 / r
    return out


def rank_metrics(pos_score: float, neg_scores, ks: Sequence[int] = DEFAULT_KS) -> dict[str, float]:
    """Per-interaction HR@K, NDCG@K and reciprocal rank; ties count against the positive."""
    r = ranks(np.asarray([pos_score]), np.asarray(neg_scores)[None, :])
    return {k: float(v[0]) for k, v in metrics_from_ranks(r, ks).items()}


@dataclass
class EvalReport:
    metrics: dict[str, float]
    n_evaluated: int
    seed: int
    negatives_per_positive: int
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def sample_negatives(users, observed_keys, num_items: int, num_negatives: int,
                     rng: np.random.Generator, allow_short: bool = False) -> np.ndarray:
    """``num_negatives`` distinct unobserved items per row, drawn uniformly.

    A user with fewer unobserved items raises :class:`DataError`, unless
    ``allow_short`` is set: then all of them are used and the row is padded
    with -1.
    """
    users = np.asarray(users, dtype=np.int64)
    keys = np.asarray(observed_keys)
    out = np.full((len(users), num_negatives), -1, dtype=np.int64)
    all_items = np.arange(num_items)
    cache = {}
    for row, u in enumerate(users):
        cands = cache.get(u)
        if cands is None:
            lo, hi = np.searchsorted(keys, [u * num_items, (u + 1) * num_items])
            cands = cache[u] = np.setdiff1d(all_items, keys[lo:hi] - u * num_items,
                                            assume_unique=True)
        if len(cands) < num_negatives:
            if not allow_short:
                raise DataError(f"user {u} has only {len(cands)} unobserved items, "
                                f"{num_negatives} negatives requested")
            out[row, :len(cands)] = rng.permutation(cands)
        else:
            out[row] = rng.choice(cands, size=num_negatives, replace=False)
    return out


Scorer = Callable[[np.ndarray, np.ndarray], np.ndarray]


def evaluate(scorer: Scorer, users, items, observed_keys, num_items: int, seed: int = 0,
             num_negatives: int = 99, ks: Sequence[int] = DEFAULT_KS,
             allow_short: bool = False) -> EvalReport:
    """Rank each held-out (user, item) among sampled unobserved items.

    ``scorer(users[n], items[n, m]) -> scores[n, m]``.  Negatives exclude
    everything in ``observed_keys`` (sorted ``user * num_items + item``).
    With ``allow_short``, users lacking enough unobserved items are ranked
    against all they have.
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if len(users) == 0:
        raise DataError("empty evaluation set")
    if num_negatives < 1:
        raise ValueError("need at least one negative")
    rng = np.random.default_rng(seed)
    negs = sample_negatives(users, observed_keys, num_items, num_negatives, rng, allow_short)
    pad = negs < 0
    cands = np.concatenate([items[:, None], np.where(pad, items[:, None], negs)], axis=1)
    scores = np.asarray(scorer(users, cands), dtype=np.float64)
    if not np.isfinite(scores).all():
        raise FloatingPointError("scorer produced non-finite scores")
    neg_scores = np.where(pad, -np.inf, scores[:, 1:])
    per = metrics_from_ranks(ranks(scores[:, 0], neg_scores), ks)
    extra = {"short_rows": int(pad.any(axis=1).sum())} if allow_short else {}
    return EvalReport({k: float(v.mean()) for k, v in per.items()}, len(users), seed,
                      num_negatives, extra)


class ModelScorer:
    """Scores for the summed GTL + OTL recommender, with vectors cached."""

    def __init__(self, gtl: ParameterSet, otl: ParameterSet, ctx: ScoringContext,
                 options: ModelOptions | None = None):
        options = options or ModelOptions()
        self.parts = [user_and_item_vectors(p, ctx, options) for p in (gtl, otl) if not p.unused]

    def __call__(self, users, items):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        total = np.zeros(items.shape)
        for uv, iv in self.parts:
            total += np.einsum("nd,nmd->nm", uv[users], iv[items])
        return total


class RandomScorer:
    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def __call__(self, users, items):
        return self.rng.random(np.shape(items))


# ------------------------------------------------------------- diagnostics

def path_length(record) -> float:
    """Cumulative chordal distance: sum_k ||dtheta_k||^2 + dL_k^2."""
    if len(record) < 1:
        raise ValueError("empty trajectory")
    total = 0.0
    for d_loss, delta in zip(record.loss_deltas, record.deltas):
        total += sum(float(np.dot(v.ravel(), v.ravel())) for v in delta.values())
        total += d_loss * d_loss
    return total


def item_vectors(params: ParameterSet | np.ndarray, num_users: int | None = None) -> np.ndarray:
    """Item rows of the embedding table (or pass a ready item matrix through)."""
    if isinstance(params, ParameterSet):
        return params["E"][params.dims.num_users:]
    return np.asarray(params)


@dataclass
class ShiftResult:
    values: dict        # group -> mean shift
    skipped: dict       # group -> number of zero-norm items left out


def embedding_shift(prev, cur, item_groups: Mapping) -> ShiftResult:
    """Mean ||e_cur/|e_cur| - e_prev/|e_prev|||^2 per item group."""
    a, b = item_vectors(prev), item_vectors(cur)
    if a.shape != b.shape:
        raise ValueError(f"item representations differ in shape: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    values, skipped = {}, {}
    for g, members in item_groups.items():
        members = np.asarray(members, dtype=np.int64)
        ok = members[(na[members] > 0) & (nb[members] > 0)]
        skipped[g] = int(len(members) - len(ok))
        if len(ok) == 0:
            values[g] = float("nan")
            continue
        diff = b[ok] / nb[ok, None] - a[ok] / na[ok, None]
        values[g] = float(np.mean((diff * diff).sum(axis=1)))
    return ShiftResult(values, skipped)


def shift_series(slice_params: Sequence[ParameterSet], item_groups: Mapping) -> dict:
    """group -> list of (slice, shift) for slices 1..T-1 (0-based)."""
    out = {g: [] for g in item_groups}
    for t in range(1, len(slice_params)):
        res = embedding_shift(slice_params[t - 1], slice_params[t], item_groups)
        for g, v in res.values.items():
            out[g].append((t, v))
    return out


@dataclass
class PopularityGroups:
    groups: dict          # peak slice -> item indices
    counts: np.ndarray    # items x slices
    relative: dict        # peak slice -> per-slice share of that slice's interactions


def popularity_groups(dataset: TimeSlicedDataset, top_n: int = 100) -> PopularityGroups:
    """Group each slice's top ``top_n`` items among those peaking in that slice.

    An item's peak is the slice with its largest interaction count, earliest
    slice on ties.
    """
    T = dataset.num_slices
    counts = np.zeros((dataset.num_items, T))
    for t, sl in enumerate(dataset.slices):
        counts[:, t] = np.bincount(sl.items, minlength=dataset.num_items)
    active = counts.sum(axis=1) > 0
    peak = np.argmax(counts, axis=1)
    totals = counts.sum(axis=0)
    groups, relative = {}, {}
    for t in range(T):
        members = np.flatnonzero(active & (peak == t))
        if len(members) == 0:
            continue
        order = np.lexsort((members, -counts[members, t]))
        members = np.sort(members[order][:top_n])
        groups[t] = members
        relative[t] = counts[members].sum(axis=0) / np.maximum(totals, 1)
    return PopularityGroups(groups, counts, relative)


def write_series_csv(path, rows: Sequence[tuple], header=("group", "slice", "value")) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(x) for x in row) + "\n")
