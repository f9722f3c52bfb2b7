"""Leap meta-optimisation over time slices.

Two branches are trained jointly on every slice:

* ``gtl`` restarts from its meta-parameters at every slice;
* ``otl`` starts each epoch from its meta-parameters and carries its final
  inner parameters from one slice into the next.

Inner loops are plain SGD on the joint BPR loss.  After each pass over the
slices both meta-parameter sets move along the accumulated trajectory
meta-gradient (or the FOMAML gradient in the ablation mode).

Parameters are handled as ``{branch: {name: ndarray}}`` so the same loop can
drive a toy task in tests.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Protocol

import numpy as np

from . import diffcore as dc
from .data import (BprBatch, TimeSlice, TimeSlicedDataset, build_graph, pad_sequences,
                   sample_bpr_batch, user_sequences)
from .model import (ModelDims, ModelOptions, ParameterSet, ScoringContext, init_params,
                    joint_loss)

log = logging.getLogger(__name__)

BRANCHES = ("gtl", "otl")
Params = dict[str, np.ndarray]


class NumericalError(FloatingPointError):
    pass


# Settings for few-hundred-user logs (the synthetic generator's scale), where
# the full-size defaults under-train: smaller branches, one GCN layer, no
# dropout, larger initial embeddings and Reptile-sized meta steps.
SMALL_SCALE = dict(inner_lr=1.0, gtl_meta_lr=1.0, otl_meta_lr=0.5, inner_steps=10,
                   d_gtl=16, d_otl=16, gnn_layers=1, sa_layers=1, max_seq_len=20,
                   dropout=0.0, gnn_dropout=0.0, init_std=0.3)


@dataclass
class TrainConfig:
    inner_lr: float = 0.05
    gtl_meta_lr: float = 0.01
    otl_meta_lr: float = 0.01
    inner_steps: int = 40
    batch_size: int = 256
    epochs: int = 20
    granularity_months: int = 1
    d_gtl: int = 64
    d_otl: int = 64
    gnn_layers: int = 2
    sa_layers: int = 1
    max_seq_len: int = 50
    dropout: float = 0.2
    gnn_dropout: float = 0.2
    init_std: float = 0.01
    seed: int = 0
    meta_optimizer: str = "sgd"
    meta_mode: str = "leap"
    literal_bpr: bool = False
    literal_attn: bool = False
    normalize_otl_meta: bool = False
    patience: int = 5
    eval_negatives: int = 99
    allow_short_negatives: bool = False
    extend_history_through_val: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("inner_lr", "gtl_meta_lr", "otl_meta_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.d_gtl < 0 or self.d_otl < 0 or self.d_gtl + self.d_otl == 0:
            raise ValueError("need d_gtl, d_otl >= 0 with at least one branch in use")
        if self.meta_optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown meta_optimizer {self.meta_optimizer!r}")
        if self.meta_mode not in ("leap", "fomaml"):
            raise ValueError(f"unknown meta_mode {self.meta_mode!r}")

    def options(self) -> ModelOptions:
        return ModelOptions(dropout=self.dropout, gnn_dropout=self.gnn_dropout,
                            literal_attn=self.literal_attn, literal_bpr=self.literal_bpr)

    def dims(self, num_users: int, num_items: int) -> dict[str, ModelDims]:
        return {"gtl": ModelDims(num_users, num_items, self.d_gtl, self.gnn_layers, self.sa_layers),
                "otl": ModelDims(num_users, num_items, self.d_otl, self.gnn_layers, self.sa_layers)}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def small_scale(cls, **overrides) -> "TrainConfig":
        return cls(**{**SMALL_SCALE, **overrides})

    @classmethod
    def from_dict(cls, values: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


# ------------------------------------------------------------------ tasks

class Task(Protocol):
    """One time slice seen as a meta-learning task."""

    def sample(self, rng: np.random.Generator): ...

    def value_and_grad(self, params: Mapping[str, Params], batch, seed) -> tuple[float, dict[str, Params]]: ...

    def value(self, params: Mapping[str, Params], batch, seed) -> float: ...


class SliceTask:
    """BPR on one slice for the summed GTL + OTL recommender."""

    def __init__(self, time_slice: TimeSlice, ctx: ScoringContext, dims: Mapping[str, ModelDims],
                 options: ModelOptions, observed_keys: np.ndarray, batch_size: int):
        self.slice = time_slice
        self.ctx = ctx
        self.dims = dict(dims)
        self.options = options
        self.observed_keys = observed_keys
        self.batch_size = batch_size

    def sample(self, rng) -> BprBatch:
        num_items = next(iter(self.dims.values())).num_items
        return sample_bpr_batch(self.slice.users, self.slice.items, self.batch_size, rng,
                                self.observed_keys, num_items)

    def _flat(self, params):
        return {f"{b}/{k}": v for b, p in params.items() for k, v in p.items()}

    def value_and_grad(self, params, batch, seed):
        loss, flat = dc.value_and_grad(joint_loss, self._flat(params), self.dims, self.ctx,
                                       batch, self.options, True, seed)
        grads = {b: {} for b in params}
        for key, g in flat.items():
            b, k = key.split("/", 1)
            grads[b][k] = g
        return loss, grads

    def value(self, params, batch, seed):
        tape = dc.Tape()
        bound = {k: tape.constant(v) for k, v in self._flat(params).items()}
        return float(joint_loss(tape, bound, self.dims, self.ctx, batch, self.options,
                                True, seed).value)


# ------------------------------------------------------------ trajectories

@dataclass
class TrajectoryRecord:
    """Inner-loop path of one branch on one slice.

    ``losses[k]`` is the joint loss at step k on batch k and
    ``next_losses[k]`` the loss after the step on the same batch.
    """

    losses: list[float] = field(default_factory=list)
    next_losses: list[float] = field(default_factory=list)
    grads: list[Params] = field(default_factory=list)
    deltas: list[Params] = field(default_factory=list)

    def __len__(self):
        return len(self.grads)

    @property
    def loss_deltas(self) -> list[float]:
        return [b - a for a, b in zip(self.losses, self.next_losses)]

    def append(self, loss, next_loss, grad, delta):
        self.losses.append(float(loss))
        self.next_losses.append(float(next_loss))
        self.grads.append(grad)
        self.deltas.append(delta)


@dataclass
class StepRecord:
    loss: float
    next_loss: float
    grads: dict[str, Params]
    deltas: dict[str, Params]


def inner_step(gtl: Params, otl: Params, batch, lr: float, task: Task, seed=None):
    """One simultaneous SGD step of both branches on the joint loss.

    Returns the new parameters and a :class:`StepRecord`; the post-step loss
    is re-evaluated on the same batch with the same dropout seed.
    """
    if len(batch) == 0:
        raise ValueError("inner_step on an empty batch")
    params = {"gtl": gtl, "otl": otl}
    loss, grads = task.value_and_grad(params, batch, seed)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite inner loss {loss}")
    deltas = {b: {k: -lr * g for k, g in grads[b].items()} for b in params}
    new = {b: {k: v + deltas[b][k] for k, v in params[b].items()} for b in params}
    next_loss = task.value(new, batch, seed)
    if not np.isfinite(next_loss):
        raise NumericalError(f"non-finite loss after inner step: {next_loss}")
    return new["gtl"], new["otl"], StepRecord(loss, next_loss, grads, deltas)


@dataclass
class SliceResult:
    trajectories: dict[str, TrajectoryRecord]
    gtl_start: Params
    otl_start: Params
    gtl_final: Params
    otl_final: Params

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.trajectories["gtl"].losses))


def run_slice(state: "MetaState", task: Task, carried_otl: Params, steps: int, lr: float,
              rng: np.random.Generator) -> SliceResult:
    """``steps`` inner updates: GTL from its meta-parameters, OTL from ``carried_otl``."""
    gtl = {k: v.copy() for k, v in state.gtl.items()}
    otl = carried_otl
    gtl_start, otl_start = gtl, otl
    traj = {b: TrajectoryRecord() for b in BRANCHES}
    for _ in range(steps):
        batch = task.sample(rng)
        seed = int(rng.integers(2**63))
        gtl, otl, rec = inner_step(gtl, otl, batch, lr, task, seed)
        for b in BRANCHES:
            traj[b].append(rec.loss, rec.next_loss, rec.grads[b], rec.deltas[b])
    return SliceResult(traj, gtl_start, otl_start, gtl, otl)


# ---------------------------------------------------------- meta gradients

def leap_accumulate(acc: Params, record: TrajectoryRecord, steps: int | None = None) -> Params:
    """acc += sum_k -(dL_k * grad_k + dtheta_k)."""
    if steps is not None and len(record) != steps:
        raise ValueError(f"trajectory has {len(record)} steps, expected {steps}")
    for d_loss, grad, delta in zip(record.loss_deltas, record.grads, record.deltas):
        for k in acc:
            acc[k] -= d_loss * grad[k] + delta[k]
    return acc


def fomaml_accumulate(acc: Params, record: TrajectoryRecord, steps: int | None = None) -> Params:
    """acc += gradient recorded at the last inner step."""
    if steps is not None and len(record) != steps:
        raise ValueError(f"trajectory has {len(record)} steps, expected {steps}")
    if len(record) == 0:
        raise ValueError("empty trajectory")
    for k in acc:
        acc[k] += record.grads[-1][k]
    return acc


ACCUMULATORS: dict[str, Callable] = {"leap": leap_accumulate, "fomaml": fomaml_accumulate}


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: Params = {}
        self.v: Params = {}

    def step(self, params: Params, grads: Params) -> Params:
        self.t += 1
        out = {}
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(k, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            out[k] = params[k] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


@dataclass
class MetaState:
    gtl: Params
    otl: Params
    gtl_acc: Params = field(default_factory=dict)
    otl_acc: Params = field(default_factory=dict)
    epoch: int = 0
    optimizers: dict = field(default_factory=dict)

    def zero_accumulators(self):
        self.gtl_acc = {k: np.zeros_like(v) for k, v in self.gtl.items()}
        self.otl_acc = {k: np.zeros_like(v) for k, v in self.otl.items()}

    def snapshot(self) -> "MetaState":
        return MetaState({k: v.copy() for k, v in self.gtl.items()},
                         {k: v.copy() for k, v in self.otl.items()}, epoch=self.epoch)


def meta_update(state: MetaState, num_slices: int, gtl_lr: float, otl_lr: float,
                optimizer: str = "sgd", normalize_otl: bool = False) -> MetaState:
    """gtl_meta -= (gtl_lr / T) * acc_gtl;  otl_meta -= otl_lr * acc_otl.

    With ``normalize_otl`` the OTL accumulator is also divided by T.  The Adam
    variant feeds the same scaled gradients through per-branch Adam states.
    """
    g_gtl = {k: v / num_slices for k, v in state.gtl_acc.items()}
    otl_div = num_slices if normalize_otl else 1
    g_otl = {k: v / otl_div for k, v in state.otl_acc.items()}
    if optimizer == "sgd":
        state.gtl = {k: v - gtl_lr * g_gtl[k] for k, v in state.gtl.items()}
        state.otl = {k: v - otl_lr * g_otl[k] for k, v in state.otl.items()}
    elif optimizer == "adam":
        opt_g = state.optimizers.setdefault("gtl", Adam(gtl_lr))
        opt_o = state.optimizers.setdefault("otl", Adam(otl_lr))
        state.gtl = opt_g.step(state.gtl, g_gtl)
        state.otl = opt_o.step(state.otl, g_otl)
    else:
        raise ValueError(f"unknown optimizer {optimizer!r}")
    return state


# --------------------------------------------------------------- training

@dataclass
class TrainResult:
    config: TrainConfig
    meta_state: MetaState
    deployment: dict[str, ParameterSet]
    dims: dict[str, ModelDims]
    loss_records: list[tuple[int, int, int, float]]
    path_records: list[tuple[int, int, str, float]]
    val_history: list[tuple[int, float]]
    best_epoch: int
    slice_params: list[dict[str, ParameterSet]] = field(default_factory=list)
    elapsed: float = 0.0

    def slice_losses(self, epoch: int) -> np.ndarray:
        """Mean recorded inner loss per slice for one epoch."""
        rows = [r for r in self.loss_records if r[0] == epoch]
        n = max(r[1] for r in rows) + 1
        return np.array([np.mean([r[3] for r in rows if r[1] == t]) for t in range(n)])

    def path_lengths(self, epoch: int, branch: str) -> np.ndarray:
        return np.array([r[3] for r in self.path_records if r[0] == epoch and r[2] == branch])

    @property
    def epochs_run(self) -> int:
        return max(r[0] for r in self.loss_records)


def run_epoch(state: MetaState, tasks, config: TrainConfig,
              rng: np.random.Generator) -> list[SliceResult]:
    """One pass over the slices in order followed by one meta update.

    Every slice starts GTL from ``state.gtl``; OTL starts the first slice
    from ``state.otl`` and each later slice from the previous slice's end.
    """
    accumulate = ACCUMULATORS[config.meta_mode]
    state.zero_accumulators()
    carried = state.otl
    results = []
    for task in tasks:
        res = run_slice(state, task, carried, config.inner_steps, config.inner_lr, rng)
        accumulate(state.gtl_acc, res.trajectories["gtl"], config.inner_steps)
        accumulate(state.otl_acc, res.trajectories["otl"], config.inner_steps)
        carried = res.otl_final
        results.append(res)
    meta_update(state, len(tasks), config.gtl_meta_lr, config.otl_meta_lr,
                config.meta_optimizer, config.normalize_otl_meta)
    return results


def build_slice_tasks(dataset: TimeSlicedDataset, config: TrainConfig, dims) -> list[SliceTask]:
    """One task per training slice; histories are cut at each slice's start."""
    users, items, ts = dataset.part("train")
    graph = build_graph(users, items, dataset.num_users, dataset.num_items)
    keys = dataset.train_keys()
    tasks = []
    for sl in dataset.slices:
        seqs = user_sequences(users, items, ts, sl.start, config.max_seq_len)
        ctx = ScoringContext(graph, pad_sequences(seqs, dataset.num_users, config.max_seq_len))
        tasks.append(SliceTask(sl, ctx, dims, config.options(), keys, config.batch_size))
    return tasks


def deployment_context(dataset: TimeSlicedDataset, config: TrainConfig) -> ScoringContext:
    """Graph and histories used when serving: frozen at the cut unless extended through validation."""
    horizon = dataset.val_end if config.extend_history_through_val else dataset.cut_time
    mask = dataset.log.timestamps < horizon
    users, items, ts = dataset.log.subset(mask)
    graph = build_graph(users, items, dataset.num_users, dataset.num_items)
    seqs = user_sequences(users, items, ts, horizon, config.max_seq_len)
    return ScoringContext(graph, pad_sequences(seqs, dataset.num_users, config.max_seq_len))


def to_parameter_sets(params: Mapping[str, Params], dims: Mapping[str, ModelDims]) -> dict[str, ParameterSet]:
    return {b: ParameterSet(dims[b], params[b]) for b in BRANCHES}


def train(dataset: TimeSlicedDataset, config: TrainConfig, *, validate: bool = True,
          record_slice_params: bool = False, initial: MetaState | None = None) -> TrainResult:
    """Meta-train both branches; returns meta-parameters and deployment parameters.

    The outer loop runs ``config.epochs`` passes.  When ``validate`` is set and
    a validation period exists, deployment parameters are scored by NDCG@5
    after every pass; the best pass is kept and training stops after
    ``config.patience`` passes without improvement.
    """
    from .evaluation import ModelScorer, evaluate

    config.validate()
    if dataset.num_slices < 1:
        raise ValueError("dataset has no training slices")
    started = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    dims = config.dims(dataset.num_users, dataset.num_items)
    if initial is None:
        gtl0 = init_params(dims["gtl"], rng, config.init_std)
        otl0 = init_params(dims["otl"], rng, config.init_std)
        state = MetaState(dict(gtl0.arrays), dict(otl0.arrays))
    else:
        state = initial
    tasks = build_slice_tasks(dataset, config, dims)

    val_users, val_items, _ = dataset.part("val")
    do_val = validate and len(val_users) > 0
    serve_ctx = deployment_context(dataset, config) if do_val else None
    all_keys = dataset.all_keys() if do_val else None

    loss_records, path_records, val_history = [], [], []
    best = (-np.inf, 0, None, None, None)
    since_best = 0
    slice_params = []
    from .evaluation import path_length

    for epoch in range(1, config.epochs + 1):
        state.epoch = epoch
        results = run_epoch(state, tasks, config, rng)
        for t, res in enumerate(results):
            for k, loss in enumerate(res.trajectories["gtl"].losses):
                loss_records.append((epoch, t, k, loss))
            for b in BRANCHES:
                if dims[b].dim:
                    path_records.append((epoch, t, b, path_length(res.trajectories[b])))
        final = [{"gtl": r.gtl_final, "otl": r.otl_final} for r in results]
        deployment = to_parameter_sets(final[-1], dims)
        if record_slice_params:
            slice_params = [to_parameter_sets(f, dims) for f in final]
        last = np.mean([r[3] for r in loss_records if r[0] == epoch])
        log.info("epoch %d: mean inner loss %.4f", epoch, last)

        if do_val:
            scorer = ModelScorer(deployment["gtl"], deployment["otl"], serve_ctx, config.options())
            report = evaluate(scorer, val_users, val_items, all_keys, dataset.num_items,
                              seed=config.seed, num_negatives=config.eval_negatives,
                              allow_short=config.allow_short_negatives)
            ndcg = report.metrics["NDCG@5"]
            val_history.append((epoch, ndcg))
            if ndcg > best[0]:
                best = (ndcg, epoch, deployment, state.snapshot(), slice_params)
                since_best = 0
            else:
                since_best += 1
                if config.patience and since_best >= config.patience:
                    log.info("early stop at epoch %d (best %d)", epoch, best[1])
                    break
        else:
            best = (np.nan, epoch, deployment, state, slice_params)

    _, best_epoch, deployment, best_state, best_slices = best
    return TrainResult(config, best_state, deployment, dims, loss_records, path_records,
                       val_history, best_epoch, best_slices or [],
                       time.perf_counter() - started)
