"""Synthetic interaction logs with controllable popularity drift.

Each event picks a user uniformly, then either an item from the user's
stable taste cluster or, otherwise, an item group from that month's
popularity mixture and a uniform item inside it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import InteractionLog, add_months, parse_time, write_log


@dataclass
class ItemGroup:
    name: str
    size: int
    weights: list[float]      # popularity weight per month


@dataclass
class SyntheticSpec:
    num_users: int = 300
    num_items: int = 200
    num_slices: int = 8
    interactions_per_slice: int = 1500
    groups: list[ItemGroup] = field(default_factory=list)
    drift: str = "drifting"
    preference_weight: float = 0.4
    num_clusters: int = 6
    cluster_items: int = 12
    seed: int = 0
    start: str = "2020-01"

    def validate(self):
        if self.num_items < 1 or self.num_users < 1:
            raise ValueError("need at least one user and one item")
        if self.num_slices < 1:
            raise ValueError("need at least one slice")
        if self.drift not in ("drifting", "stationary"):
            raise ValueError(f"unknown drift profile {self.drift!r}")
        if sum(g.size for g in self.groups) > self.num_items:
            raise ValueError("groups use more items than exist")
        for g in self.groups:
            if len(g.weights) != self.num_slices:
                raise ValueError(f"group {g.name!r} needs {self.num_slices} weights")
            if min(g.weights) < 0:
                raise ValueError(f"group {g.name!r} has a negative weight")
        if not 0.0 <= self.preference_weight <= 1.0:
            raise ValueError("preference_weight must be in [0, 1]")

    def mixture(self) -> np.ndarray:
        """groups x months matrix, columns summing to 1."""
        w = np.array([g.weights for g in self.groups], dtype=np.float64)
        if self.drift == "stationary":
            w = np.repeat(w.mean(axis=1, keepdims=True), self.num_slices, axis=1)
        total = w.sum(axis=0)
        if (total <= 0).any():
            raise ValueError("some month has no popularity mass")
        return w / total


@dataclass
class SyntheticData:
    log: InteractionLog
    group_items: dict[str, np.ndarray]      # group -> item indices (log index space)
    item_group: dict[str, str]              # raw item id -> group
    month_starts: list[int]
    spec: SyntheticSpec | None = None
    user_taste: dict[int, np.ndarray] | None = None   # user index -> taste item indices

    def cut_time(self, train_slices: int) -> int:
        return self.month_starts[train_slices]

    def true_probabilities(self, month: int) -> np.ndarray:
        """users x items probability of the next event in ``month`` (ignoring repeat rejection)."""
        spec = self.spec
        mix = spec.mixture()[:, month]
        probs = np.zeros((self.log.num_users, self.log.num_items))
        for g, w in zip(spec.groups, mix):
            members = self.group_items[g.name]
            if len(members):
                probs[:, members] += (1 - spec.preference_weight) * w / g.size
        for u, taste in self.user_taste.items():
            probs[u, taste] += spec.preference_weight / len(taste)
        return probs


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    spec.validate()
    if not spec.groups:
        spec = SyntheticSpec(**{**spec.__dict__, "groups": [
            ItemGroup("all", spec.num_items, [1.0] * spec.num_slices)]})
    rng = np.random.default_rng(spec.seed)
    mix = spec.mixture()
    perm = rng.permutation(spec.num_items)
    members, pos = [], 0
    for g in spec.groups:
        members.append(perm[pos:pos + g.size])
        pos += g.size
    # taste items come only from groups that are never switched off, so a
    # zero popularity weight really means zero interactions
    always_on = np.setdiff1d(np.arange(spec.num_items), np.concatenate(
        [m for m, w in zip(members, mix) if w.min() <= 0] or [np.empty(0, dtype=np.int64)]))
    cluster_of = rng.integers(0, spec.num_clusters, size=spec.num_users)
    taste = [rng.choice(always_on, size=min(spec.cluster_items, len(always_on)), replace=False)
             for _ in range(spec.num_clusters)]

    start = parse_time(spec.start)
    month_starts = [add_months(start, m) for m in range(spec.num_slices + 1)]
    seen: set[tuple[int, int]] = set()
    rows = []
    for m in range(spec.num_slices):
        lo, hi = month_starts[m], month_starts[m + 1]
        for _ in range(spec.interactions_per_slice):
            u = int(rng.integers(spec.num_users))
            for _attempt in range(20):
                if len(always_on) and rng.random() < spec.preference_weight:
                    item = int(rng.choice(taste[cluster_of[u]]))
                else:
                    g = int(rng.choice(len(spec.groups), p=mix[:, m]))
                    item = int(rng.choice(members[g]))
                if (u, item) not in seen:
                    break
            seen.add((u, item))
            rows.append((f"u{u}", f"i{item}", int(rng.integers(lo, hi))))
    log = InteractionLog.from_raw(rows)
    index = {raw: k for k, raw in enumerate(log.item_ids)}
    group_items, item_group = {}, {}
    for g, ids in zip(spec.groups, members):
        present = [index[f"i{i}"] for i in ids if f"i{i}" in index]
        group_items[g.name] = np.array(sorted(present), dtype=np.int64)
        item_group.update({f"i{i}": g.name for i in ids})
    uindex = {raw: k for k, raw in enumerate(log.user_ids)}
    user_taste = {uindex[f"u{u}"]: np.array(sorted(index[f"i{i}"] for i in taste[cluster_of[u]]
                                                   if f"i{i}" in index), dtype=np.int64)
                  for u in range(spec.num_users) if f"u{u}" in uindex}
    return SyntheticData(log, group_items, item_group, month_starts, spec, user_taste)


def write_synthetic(data: SyntheticData, path) -> None:
    """Interaction file plus ``<stem>.groups.tsv`` (item, group)."""
    path = Path(path)
    write_log(data.log, path)
    with path.with_suffix(".groups.tsv").open("w", encoding="utf-8") as fh:
        for raw, g in sorted(data.item_group.items()):
            fh.write(f"{raw}\t{g}\n")


def drifting_spec(seed: int = 0, num_users: int = 300, num_items: int = 200,
                  train_slices: int = 6, eval_slices: int = 3, onset: int = 4,
                  interactions_per_slice: int = 1000, drift: str = "drifting",
                  group_size: int = 10, peak_weight: float = 0.6, faded_weight: float = 0.05,
                  preference_weight: float = 0.5, num_clusters: int = 3,
                  cluster_items: int = 20) -> SyntheticSpec:
    """Three item groups over ``train_slices + eval_slices`` months.

    ``early`` is popular before ``onset`` (1-based slice) and fades after it,
    ``trend`` has zero weight before ``onset`` and stays popular afterwards,
    ``background`` takes the remaining mass.
    """
    n = train_slices + eval_slices
    early = [peak_weight if m + 1 < onset else faded_weight for m in range(n)]
    trend = [0.0 if m + 1 < onset else peak_weight for m in range(n)]
    background = [1.0 - e - t for e, t in zip(early, trend)]
    groups = [ItemGroup("early", group_size, early), ItemGroup("trend", group_size, trend),
              ItemGroup("background", num_items - 2 * group_size, background)]
    return SyntheticSpec(num_users=num_users, num_items=num_items, num_slices=n,
                         interactions_per_slice=interactions_per_slice, groups=groups,
                         drift=drift, preference_weight=preference_weight,
                         num_clusters=num_clusters, cluster_items=cluster_items, seed=seed)


def stationary_spec(seed: int = 0, **kw) -> SyntheticSpec:
    return drifting_spec(seed=seed, drift="stationary", **kw)
