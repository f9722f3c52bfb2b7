"""Neural recommender: embedding table, GCN propagation, position-free
self-attention over user histories, and dot-product scoring."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .data import BprBatch, InteractionGraph, PaddedSequences


@dataclass(frozen=True)
class ModelDims:
    num_users: int
    num_items: int
    dim: int
    gnn_layers: int = 2
    sa_layers: int = 1

    @property
    def num_nodes(self):
        return self.num_users + self.num_items


@dataclass(frozen=True)
class ModelOptions:
    dropout: float = 0.2
    gnn_dropout: float = 0.2
    literal_attn: bool = False
    literal_bpr: bool = False
    positional_sa: bool = False

    def __post_init__(self):
        if self.positional_sa:
            raise NotImplementedError("positional self-attention is not implemented")


class ParameterSet:
    """Named arrays for one recommender branch.  ``dim == 0`` means unused."""

    def __init__(self, dims: ModelDims, arrays: Mapping[str, np.ndarray]):
        self.dims = dims
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    def __getitem__(self, name):
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self):
        return len(self.arrays)

    def items(self):
        return self.arrays.items()

    @property
    def unused(self) -> bool:
        return self.dims.dim == 0

    @property
    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.dims, {k: v.copy() for k, v in self.arrays.items()})

    def replace(self, arrays: Mapping[str, np.ndarray]) -> "ParameterSet":
        return ParameterSet(self.dims, arrays)

    def equals(self, other: "ParameterSet") -> bool:
        return (self.dims == other.dims and self.arrays.keys() == other.arrays.keys()
                and all(np.array_equal(v, other.arrays[k]) for k, v in self.arrays.items()))

    def __repr__(self):
        return f"ParameterSet(dim={self.dims.dim}, params={self.num_parameters})"


def param_layout(dims: ModelDims) -> list[tuple[str, tuple[int, ...]]]:
    d = dims.dim
    if d == 0:
        return []
    layout = [("E", (dims.num_nodes, d))]
    for layer in range(dims.gnn_layers):
        layout += [(f"gnn{layer}.W_self", (d, d)), (f"gnn{layer}.W_neigh", (d, d))]
    for layer in range(dims.sa_layers):
        p = f"sa{layer}."
        layout += [(p + "W_query", (d, d)), (p + "W_key", (d, d)), (p + "W_value", (d, d)),
                   (p + "ln_attn.gain", (d,)), (p + "ln_attn.bias", (d,)),
                   (p + "ffn.W1", (d, d)), (p + "ffn.b1", (d,)),
                   (p + "ffn.W2", (d, d)), (p + "ffn.b2", (d,)),
                   (p + "ln_ffn.gain", (d,)), (p + "ln_ffn.bias", (d,))]
    return layout


def init_params(dims: ModelDims, rng: np.random.Generator, init_std: float = 0.01) -> ParameterSet:
    """Normal(0, init_std^2) embeddings, Xavier-uniform matrices, unit LayerNorm."""
    arrays = {}
    for name, shape in param_layout(dims):
        if name == "E":
            arrays[name] = rng.normal(0.0, init_std, size=shape)
        elif name.endswith(".gain"):
            arrays[name] = np.ones(shape)
        elif len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = rng.uniform(-limit, limit, size=shape)
    return ParameterSet(dims, arrays)


# ---------------------------------------------------------------- forward

@dataclass
class ScoringContext:
    """What a forward pass needs besides parameters."""

    graph: InteractionGraph
    sequences: PaddedSequences
    _self_coef: np.ndarray | None = field(default=None, repr=False)

    @property
    def self_coef(self):
        if self._self_coef is None:
            self._self_coef = self.graph.self_coef[:, None]
        return self._self_coef


class _Masks:
    """Draws dropout masks from a single seed; ``None`` in evaluation mode."""

    def __init__(self, seed, train: bool):
        self.rng = np.random.default_rng(seed) if train else None

    def __call__(self, shape, rate):
        if self.rng is None or rate == 0.0:
            return None
        return dc.dropout_mask(shape, rate, self.rng.integers(2**63))


def gnn_forward(p: Mapping[str, dc.Tensor], ctx: ScoringContext, dims: ModelDims,
                masks=None, rate: float = 0.0) -> dc.Tensor:
    """e_m <- relu(a_mm e_m W_self + sum_n a_mn e_n W_neigh), per layer."""
    h = p["E"]
    graph = ctx.graph
    if graph.num_nodes != h.shape[0]:
        raise dc.ShapeError(f"graph has {graph.num_nodes} nodes, embedding table {h.describe()}")
    for layer in range(dims.gnn_layers):
        own = dc.mul(dc.matmul(h, p[f"gnn{layer}.W_self"]), ctx.self_coef)
        neigh = dc.spmm(graph.adjacency, dc.matmul(h, p[f"gnn{layer}.W_neigh"]))
        h = dc.relu(dc.add(own, neigh))
        if masks is not None:
            h = dc.dropout(h, masks(h.shape, rate))
    return h


def sequence_tokens(users, sequences: PaddedSequences, num_users: int):
    """Token rows into the (U+I) table and a validity mask, user token last."""
    users = np.asarray(users, dtype=np.int64)
    lengths = sequences.lengths[users]
    width = int(lengths.max()) if len(users) else 0
    total = sequences.items.shape[1]
    hist = sequences.items[users, total - width:] + num_users
    tokens = np.concatenate([hist, users[:, None]], axis=1)
    pos = np.arange(width)
    valid = np.concatenate([pos[None, :] >= (width - lengths)[:, None],
                            np.ones((len(users), 1), dtype=bool)], axis=1)
    tokens[:, :width][~valid[:, :width]] = 0
    return tokens, valid


def sa_forward(p: Mapping[str, dc.Tensor], refined: dc.Tensor, users, ctx: ScoringContext,
               dims: ModelDims, options: ModelOptions, masks=None) -> dc.Tensor:
    """User vectors from attention over (history items ..., user).

    Only the user token's output is returned, so the last layer computes just
    that query; earlier layers update every position.
    """
    users = np.asarray(users, dtype=np.int64)
    uniq, inverse = np.unique(users, return_inverse=True)
    tokens, valid = sequence_tokens(uniq, ctx.sequences, dims.num_users)
    x = dc.gather(refined, tokens)
    inv_sqrt_d = 1.0 / np.sqrt(dims.dim)
    for layer in range(dims.sa_layers):
        pre = f"sa{layer}."
        last = layer == dims.sa_layers - 1
        k = dc.matmul(x, p[pre + "W_key"])
        v = dc.matmul(x, p[pre + "W_value"])
        if last:
            x = dc.index(x, (slice(None), slice(-1, None), slice(None)))
        q = dc.matmul(x, p[pre + "W_query"])
        logits = dc.scale(dc.matmul(q, dc.swap_last(k)), inv_sqrt_d)
        key_mask = valid[:, None, :]
        if options.literal_attn:
            masked = dc.mul(logits, key_mask.astype(np.float64))
            weights = dc.div(masked, dc.sum(masked, axis=-1, keepdims=True))
        else:
            weights = dc.softmax(logits, axis=-1, mask=key_mask)
        z = dc.matmul(weights, v)
        if masks is not None:
            z = dc.dropout(z, masks(z.shape, options.dropout))
        x = dc.layer_norm(dc.add(z, x), p[pre + "ln_attn.gain"], p[pre + "ln_attn.bias"])
        hidden = dc.relu(dc.add(dc.matmul(x, p[pre + "ffn.W1"]), p[pre + "ffn.b1"]))
        f = dc.add(dc.matmul(hidden, p[pre + "ffn.W2"]), p[pre + "ffn.b2"])
        if masks is not None:
            f = dc.dropout(f, masks(f.shape, options.dropout))
        x = dc.layer_norm(dc.add(f, x), p[pre + "ln_ffn.gain"], p[pre + "ln_ffn.bias"])
    if dims.sa_layers == 0:
        x = dc.index(x, (slice(None), slice(-1, None), slice(None)))
    out = dc.index(x, (slice(None), 0, slice(None)))
    if len(uniq) == len(users) and np.array_equal(uniq, users):
        return out
    return dc.gather(out, inverse)


def score(user_vec, refined, items, num_users: int) -> dc.Tensor:
    """<e_u, e_i> for matching rows of ``user_vec`` and ``items``."""
    items = np.asarray(items, dtype=np.int64)
    return dc.rowdot(user_vec, dc.gather(refined, items + num_users))


def branch_scores(p, ctx, dims, options, users, item_sets, train=False, seed=None):
    """Scores of one branch for each array in ``item_sets`` (each shaped like users)."""
    masks = _Masks(seed, train) if train else None
    refined = gnn_forward(p, ctx, dims, masks, options.gnn_dropout)
    user_vec = sa_forward(p, refined, users, ctx, dims, options, masks)
    return [score(user_vec, refined, items, dims.num_users) for items in item_sets]


def bpr_loss(pos, neg, literal: bool = False) -> dc.Tensor:
    """Mean of -log sigmoid(pos - neg); ``literal`` uses -sigmoid(pos - neg)."""
    if pos.value.size == 0:
        raise ValueError("bpr_loss on an empty batch")
    if pos.shape != neg.shape:
        raise dc.ShapeError(f"bpr_loss: {pos.describe()} vs {neg.describe()}")
    margin = dc.sub(pos, neg)
    per = dc.sigmoid(margin) if literal else dc.log_sigmoid(margin)
    return dc.neg(dc.mean(per))


def joint_loss(tape: dc.Tape, bound: Mapping[str, dc.Tensor], branches: Mapping[str, ModelDims],
               ctx: ScoringContext, batch: BprBatch, options: ModelOptions,
               train: bool = True, seed=None) -> dc.Tensor:
    """BPR loss on the summed scores of all non-empty branches.

    ``bound`` holds tape tensors named ``"<branch>/<param>"``.
    """
    pos_total = neg_total = None
    for b, (name, dims) in enumerate(branches.items()):
        if dims.dim == 0:
            continue
        p = {k.split("/", 1)[1]: t for k, t in bound.items() if k.startswith(name + "/")}
        branch_seed = None if seed is None else [seed, b]
        pos, neg = branch_scores(p, ctx, dims, options, batch.users, (batch.pos, batch.neg),
                                 train=train, seed=branch_seed)
        pos_total = pos if pos_total is None else dc.add(pos_total, pos)
        neg_total = neg if neg_total is None else dc.add(neg_total, neg)
    if pos_total is None:
        zero = tape.constant(np.zeros(len(batch)))
        pos_total = neg_total = zero
    return bpr_loss(pos_total, neg_total, literal=options.literal_bpr)


def flatten_branches(branches: Mapping[str, ParameterSet]) -> dict[str, np.ndarray]:
    return {f"{name}/{k}": v for name, ps in branches.items() for k, v in ps.items()}


def split_branches(flat: Mapping[str, np.ndarray], names) -> dict[str, dict[str, np.ndarray]]:
    out = {n: {} for n in names}
    for key, v in flat.items():
        name, k = key.split("/", 1)
        out[name][k] = v
    return out


# -------------------------------------------------------- numpy inference

def user_and_item_vectors(params: ParameterSet, ctx: ScoringContext, options: ModelOptions,
                          users=None, chunk: int = 1024):
    """Evaluation-mode user vectors (for ``users``) and refined item vectors."""
    dims = params.dims
    if users is None:
        users = np.arange(dims.num_users)
    users = np.asarray(users, dtype=np.int64)
    if params.unused:
        return np.zeros((len(users), 0)), np.zeros((dims.num_items, 0))
    tape = dc.Tape()
    p = {k: tape.constant(v, name=k) for k, v in params.items()}
    refined = gnn_forward(p, ctx, dims)
    parts = [sa_forward(p, refined, users[s:s + chunk], ctx, dims, options).value
             for s in range(0, len(users), chunk)]
    user_vec = np.concatenate(parts) if parts else np.zeros((0, dims.dim))
    return user_vec, refined.value[dims.num_users:]


def score_combined(gtl: ParameterSet, otl: ParameterSet, ctx: ScoringContext,
                   options: ModelOptions, users, items) -> np.ndarray:
    """f(u, i) = f_gtl(u, i) + f_otl(u, i); an unused branch contributes 0."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    total = np.zeros(np.broadcast_shapes(users.shape, items.shape))
    uniq, inv = np.unique(users, return_inverse=True)
    for params in (gtl, otl):
        if params.unused:
            continue
        uv, iv = user_and_item_vectors(params, ctx, options, uniq)
        total = total + np.einsum("...d,...d->...", uv[inv.reshape(users.shape)], iv[items])
    return total


# ------------------------------------------------------------- checkpoint

CHECKPOINT_MAGIC = b"LEAPREC\x00"
CHECKPOINT_VERSION = 1


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, branches: Mapping[str, ParameterSet], config: Mapping | None = None,
                    kind: str = "deployment", extra: Mapping | None = None) -> None:
    """JSON header followed by little-endian float32 arrays in header order."""
    config = dict(config or {})
    header = {"version": CHECKPOINT_VERSION, "kind": kind,
              "config_hash": config_hash(config), "config": config,
              "extra": dict(extra or {}), "branches": {}}
    blobs = []
    for name, ps in branches.items():
        entries = []
        for k, v in ps.items():
            entries.append({"name": k, "shape": list(v.shape)})
            blobs.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
        header["branches"][name] = {"dims": asdict(ps.dims), "arrays": entries}
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, ParameterSet], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, head_len = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + head_len].decode("utf-8"))
    offset = 16 + head_len
    branches = {}
    for name, spec in header["branches"].items():
        arrays = {}
        for entry in spec["arrays"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape))
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=n, offset=offset) \
                .reshape(shape).astype(np.float64)
            offset += 4 * n
        branches[name] = ParameterSet(ModelDims(**spec["dims"]), arrays)
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return branches, header
