"""Small shared fixtures built from the package's own data containers."""
import numpy as np

from leaprec import diffcore as dc
from leaprec.data import BprBatch, build_graph, pad_sequences, user_sequences
from leaprec.model import (ModelDims, ModelOptions, ScoringContext, flatten_branches,
                           init_params, joint_loss)


def tiny_instance(seed=0, U=6, I=8, d=4, gnn_layers=1, sa_layers=1, seq_len=5, branches=("gtl",),
                  init_std=0.5, batch=8, dropout=0.0):
    """Random interactions, graph, histories, parameters and one BPR batch."""
    rng = np.random.default_rng(seed)
    u = rng.integers(0, U, 24)
    i = rng.integers(0, I, 24)
    t = rng.integers(0, 100, 24)
    ctx = ScoringContext(build_graph(u, i, U, I),
                         pad_sequences(user_sequences(u, i, t, 101, seq_len), U, seq_len))
    dims = {b: ModelDims(U, I, d, gnn_layers, sa_layers) for b in branches}
    params = {b: init_params(dims[b], rng, init_std) for b in branches}
    bpr = BprBatch(rng.integers(0, U, batch), rng.integers(0, I, batch), rng.integers(0, I, batch))
    options = ModelOptions(dropout=dropout, gnn_dropout=dropout)
    return ctx, dims, params, bpr, options


def loss_fn(ctx, dims, bpr, options, train=False, seed=None):
    """Plain-numpy loss closure over flat ``"<branch>/<name>"`` arrays."""
    def f(flat):
        tape = dc.Tape()
        bound = {k: tape.constant(v) for k, v in flat.items()}
        return float(joint_loss(tape, bound, dims, ctx, bpr, options, train, seed).value)
    return f


def loss_and_grad(flat, ctx, dims, bpr, options, train=False, seed=None):
    return dc.value_and_grad(joint_loss, flat, dims, ctx, bpr, options, train, seed)


def random_full_loss_point(seed, branches=("gtl", "otl")):
    """Every array drawn at random, so no bias sits exactly on a ReLU kink."""
    ctx, dims, params, bpr, options = tiny_instance(seed, branches=branches, dropout=0.2)
    rng = np.random.default_rng([seed, 1])
    flat = {}
    for k, v in flatten_branches(params).items():
        if k.endswith(".gain"):
            flat[k] = rng.normal(1.0, 0.3, v.shape)
        else:
            flat[k] = rng.normal(0.0, 0.5, v.shape)
    return flat, ctx, dims, bpr, options


def spot_check_gradient(flat, f, grads, rng, directions=4, coordinates=12, h=1e-6):
    """Relative error between ``grads`` and central differences of ``f``.

    Probes are random unit directions plus randomly chosen coordinates; the
    error is ||numeric - analytic|| / max(||numeric||, ||analytic||) over the
    vector of probe derivatives.
    """
    keys = sorted(flat)
    sizes = [flat[k].size for k in keys]
    theta = np.concatenate([flat[k].ravel() for k in keys])
    g = np.concatenate([grads[k].ravel() for k in keys])

    def at(x):
        parts = np.split(x, np.cumsum(sizes)[:-1])
        return f({k: p.reshape(flat[k].shape) for k, p in zip(keys, parts)})

    vecs = [v / np.linalg.norm(v) for v in rng.normal(size=(directions, theta.size))]
    for j in rng.choice(theta.size, size=min(coordinates, theta.size), replace=False):
        e = np.zeros(theta.size)
        e[j] = 1.0
        vecs.append(e)
    numeric = np.array([(at(theta + h * v) - at(theta - h * v)) / (2 * h) for v in vecs])
    analytic = np.array([g @ v for v in vecs])
    scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-8)
    return float(np.linalg.norm(numeric - analytic) / scale)


class ScalarTask:
    """Toy slice: L = a/2 * (w_gtl + w_otl - c)^2, ignoring the batch."""

    def __init__(self, a, c):
        self.a, self.c = a, c

    def sample(self, rng):
        return np.zeros(1)

    def value(self, params, batch, seed):
        w = params["gtl"]["w"] + params["otl"]["w"]
        return float(0.5 * self.a * (w - self.c) ** 2)

    def value_and_grad(self, params, batch, seed):
        w = params["gtl"]["w"] + params["otl"]["w"]
        g = self.a * (w - self.c)
        return self.value(params, batch, seed), {"gtl": {"w": g.copy()}, "otl": {"w": g.copy()}}


def tiny_dataset(seed=0, num_users=40, num_items=60, per_slice=200, train_slices=4):
    from leaprec.data import slice_by_time
    from leaprec.synthetic import drifting_spec, generate_synthetic

    data = generate_synthetic(drifting_spec(seed=seed, num_users=num_users, num_items=num_items,
                                            train_slices=train_slices, eval_slices=2, onset=3,
                                            interactions_per_slice=per_slice, group_size=8,
                                            cluster_items=10))
    return data, slice_by_time(data.log, 1, data.cut_time(train_slices), val_window_months=1)
