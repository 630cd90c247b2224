"""GCN and GIN backbones with mean readout and a linear classifier.

Forward passes run batched over padded node dimensions on the autodiff
tape, so gradients with respect to all parameters (and, where needed, the
graph embeddings) come from the same recorded computation.
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np

from . import tape
from .errors import InvalidArgumentError, NumericalError, ShapeError
from .tape import Tensor


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "gcn"  # gcn | gin
    feature_dim: int = 8
    layer_dims: tuple = (16, 16)
    gin_eps: float = 0.0  # fixed, not learned
    activation: str = "relu"

    def __post_init__(self):
        if self.backbone not in ("gcn", "gin"):
            raise InvalidArgumentError(f"unknown backbone {self.backbone!r}")
        if not self.layer_dims:
            raise InvalidArgumentError("layer_dims must be non-empty")
        if self.activation != "relu":
            raise InvalidArgumentError("only relu activation is supported")

    @property
    def embedding_dim(self):
        return self.layer_dims[-1]


@dataclass
class RepresentationBatch:
    """Per-graph embeddings: row i of Z belongs to graph_ids[i]."""

    Z: np.ndarray  # (N, d)
    graph_ids: list

    def __post_init__(self):
        if self.Z.ndim != 2 or self.Z.shape[0] != len(self.graph_ids):
            raise ShapeError("Z must be (N, d) with one row per graph id")
        if not np.all(np.isfinite(self.Z)):
            raise NumericalError("non-finite embedding values")


def _glorot(rng, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_params(config, seed):
    """Seeded Glorot-uniform weights, zero biases, as named leaf tensors."""
    rng = np.random.default_rng(seed)
    params = {}
    dims = (config.feature_dim,) + tuple(config.layer_dims)
    for i in range(len(config.layer_dims)):
        fi, fo = dims[i], dims[i + 1]
        if config.backbone == "gcn":
            params[f"layer{i}.W"] = Tensor(_glorot(rng, fi, fo))
        else:
            params[f"layer{i}.W1"] = Tensor(_glorot(rng, fi, fo))
            params[f"layer{i}.b1"] = Tensor(np.zeros(fo))
            params[f"layer{i}.W2"] = Tensor(_glorot(rng, fo, fo))
            params[f"layer{i}.b2"] = Tensor(np.zeros(fo))
    d = config.embedding_dim
    params["clf.W"] = Tensor(_glorot(rng, d, 2))
    params["clf.b"] = Tensor(np.zeros(2))
    return params


_PROP_CACHE = {"gcn": weakref.WeakKeyDictionary(),
               "gin": weakref.WeakKeyDictionary()}


def propagation_matrix(graph, config):
    """Per-graph aggregation operator, cached per graph object.

    gcn: symmetric-normalized adjacency with self-loops,
         D^{-1/2} (A + I) D^{-1/2}.
    gin: A + (1 + eps) I, so one matmul computes
         (1 + eps) h_v + sum of neighbor features.
    """
    cache = _PROP_CACHE[config.backbone]
    key = config.gin_eps if config.backbone == "gin" else 0.0
    hit = cache.get(graph)
    if hit is not None and hit[0] == key:
        return hit[1]
    a = graph.adjacency()
    n = graph.node_count
    if config.backbone == "gcn":
        a_hat = a + np.eye(n)
        d_inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=1))
        s = a_hat * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]
    else:
        s = a + (1.0 + config.gin_eps) * np.eye(n)
    cache[graph] = (key, s)
    return s


def _pad_batch(graphs, config):
    """Stack propagation matrices, features, and readout masks with padding."""
    b = len(graphs)
    n_max = max(g.node_count for g in graphs)
    f = graphs[0].feature_dim
    s = np.zeros((b, n_max, n_max))
    x = np.zeros((b, n_max, f))
    mask = np.zeros((b, n_max, 1))
    inv_n = np.zeros((b, 1))
    for i, g in enumerate(graphs):
        if g.feature_dim != config.feature_dim:
            raise ShapeError(
                f"graph feature dim {g.feature_dim} != config {config.feature_dim}"
            )
        n = g.node_count
        s[i, :n, :n] = propagation_matrix(g, config)
        x[i, :n, :] = g.features
        mask[i, :n, 0] = 1.0
        inv_n[i, 0] = 1.0 / n
    return s, x, mask, inv_n


def _gcn_layer(s, h, w, activation=tape.relu, preacts=None):
    out = tape.matmul(s, tape.matmul(h, w))
    if preacts is not None:
        preacts.append(out.data)
    return activation(out) if activation is not None else out


def _gin_layer(s, h, w1, b1, w2, b2, preacts=None):
    agg = tape.matmul(s, h)
    pre = tape.add(tape.matmul(agg, w1), b1)
    if preacts is not None:
        preacts.append(pre.data)
    hidden = tape.relu(pre)
    return tape.add(tape.matmul(hidden, w2), b2)


def forward_from_pads(pads, params, config, _preacts=None):
    """Forward pass over pre-padded (S, X, mask, inv_n) arrays."""
    s, x, mask, inv_n = pads
    h = tape.constant(x)
    s = tape.constant(s)
    for i in range(len(config.layer_dims)):
        if config.backbone == "gcn":
            h = _gcn_layer(s, h, params[f"layer{i}.W"], preacts=_preacts)
        else:
            h = _gin_layer(
                s, h,
                params[f"layer{i}.W1"], params[f"layer{i}.b1"],
                params[f"layer{i}.W2"], params[f"layer{i}.b2"],
                preacts=_preacts,
            )
    pooled = tape.sum_(tape.mul(h, mask), axis=1)  # (B, d)
    return tape.mul(pooled, inv_n)


def forward_batch(graphs, params, config, _preacts=None):
    """Embed a list of graphs; returns a (B, d) tensor on the tape.

    Padded rows are masked out of the mean readout, and padded columns of
    the propagation matrices are zero, so padding never leaks into real
    nodes.
    """
    if not graphs:
        raise InvalidArgumentError("forward_batch requires at least one graph")
    return forward_from_pads(_pad_batch(graphs, config), params, config,
                             _preacts=_preacts)


def relu_kink_margin(graphs, params, config):
    """Smallest |pre-activation| feeding any relu, over real nodes.

    Central finite differences are only a valid gradient oracle when no
    relu input sits within the probe step of its kink; gradient checks
    should skip instances with a small margin.
    """
    preacts = []
    s, x, mask, inv_n = _pad_batch(graphs, config)
    del s, x, inv_n
    forward_batch(graphs, params, config, _preacts=preacts)
    real = mask.astype(bool)[:, :, 0]
    return min(float(np.abs(p[real]).min()) for p in preacts)


def forward(graph, params, config):
    """Embedding row for one graph (length d), connected to the tape."""
    z = forward_batch([graph], params, config)
    return tape.reshape(z, (config.embedding_dim,))


def batch_embed(graphs, params, config, graph_ids=None, chunk=256):
    """Detached embeddings for a dataset slice, rows in slice order."""
    if graph_ids is None:
        graph_ids = list(range(len(graphs)))
    rows = []
    for start in range(0, len(graphs), chunk):
        z = forward_batch(graphs[start:start + chunk], params, config)
        rows.append(z.data)
    return RepresentationBatch(np.concatenate(rows, axis=0), list(graph_ids))


def classifier_logits(z, params):
    """Linear map d -> 2 on top of graph embeddings."""
    return tape.add(tape.matmul(z, params["clf.W"]), params["clf.b"])


def weighted_loss(logits, labels, weights):
    """Weighted mean softmax cross-entropy.

    loss = (1/N) * sum_n w_n * (logsumexp(logits_n) - logits_n[y_n]).
    `weights` may be a tape tensor (live) or an array (constant); entries
    must be non-negative.
    """
    w_data = weights.data if isinstance(weights, Tensor) else np.asarray(weights)
    labels = np.asarray(labels, dtype=np.intp)
    n = labels.shape[0]
    if w_data.shape != (n,):
        raise ShapeError(f"weights shape {w_data.shape} != ({n},)")
    if np.any(w_data < 0):
        raise InvalidArgumentError("weights must be non-negative")
    per_sample = tape.sub(tape.logsumexp(logits, axis=1),
                          tape.select_index(logits, labels))
    return tape.div(tape.sum_(tape.mul(weights, per_sample)), float(n))


def predict(graphs, params, config, chunk=256):
    """Argmax class per graph, computed without building gradient state."""
    out = []
    detached = {k: tape.constant(v.data) for k, v in params.items()}
    for start in range(0, len(graphs), chunk):
        z = forward_batch(graphs[start:start + chunk], detached, config)
        logits = classifier_logits(z, detached)
        out.append(np.argmax(logits.data, axis=1))
    return np.concatenate(out)


def sgd_step(params, grads, lr):
    """Plain gradient descent: p <- p - lr * g. Mutates params in place."""
    for name, p in params.items():
        g = grads[name]
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
        p.data = p.data - lr * g


def collect_grads(params):
    return {name: p.grad for name, p in params.items()}


def gradcheck(loss_fn, params, h=1e-4):
    """Compare tape gradients against central finite differences.

    loss_fn() must rebuild the loss from the current parameter values.
    Returns the largest per-component deviation, normalized by the overall
    gradient scale (max-abs over all components of either gradient).
    """
    tape.zero_grads(params.values())
    loss = loss_fn()
    tape.backward(loss)
    analytic = {k: np.array(p.grad if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    numeric = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        fd = np.zeros(flat.size)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            up = loss_fn().item()
            flat[idx] = orig - h
            down = loss_fn().item()
            flat[idx] = orig
            fd[idx] = (up - down) / (2.0 * h)
        numeric[name] = fd.reshape(p.data.shape)

    scale = max(
        max((np.max(np.abs(g)) for g in analytic.values() if g.size), default=0.0),
        max((np.max(np.abs(g)) for g in numeric.values() if g.size), default=0.0),
        1e-12,
    )
    worst = 0.0
    for name in params:
        err = np.max(np.abs(analytic[name] - numeric[name])) / scale
        worst = max(worst, float(err))
    return worst
