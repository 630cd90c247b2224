"""Alternating bi-level training loop.

Model parameters take gradient steps on the weighted prediction loss over
training batches. Per-graph weights take gradient steps on the
decorrelation objective, evaluated over the momentum queues (filled from
validation batches) concatenated with the current training batch, whose
weight entries are the live variables. Joint mode collapses the two loops
onto training data with no validation split, which is the over-fitting
baseline the bi-level scheme exists to avoid.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import gnn, tape
from .decorrelation import (
    ClusterAssignment, CorrelationProfile, RFFBank, RHO_UNIFORM,
    cluster_variables, decor_loss, update_profile, weight_values,
)
from .errors import InvalidArgumentError, NumericalError, ShapeError
from .gnn import (
    ModelConfig, classifier_logits, collect_grads, forward_batch, init_params,
    sgd_step, weighted_loss,
)
from .tape import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    eta_theta: float = 1e-2
    eta_w: float = 1e-2
    eps: float = 1e-2  # relative scale of the hypergradient finite difference
    order: str = "first"  # first | second | joint
    epochs: int = 100
    batch_size: int = 32
    queue_count: int = 4
    momentum: tuple = (0.9, 0.9, 0.9, 0.9)
    n_clusters: int = 4
    recluster_every: int = 5
    seed: int = 0
    decor_enabled: bool = True  # False = plain backbone / no-decor ablation
    penalize_within: bool = False
    w_pred_coef: float = 0.0  # optional prediction term in the weight objective
    divergence_threshold: float = 1e6

    def __post_init__(self):
        if self.order not in ("first", "second", "joint"):
            raise InvalidArgumentError(f"unknown order {self.order!r}")
        if self.eta_theta < 0 or self.eta_w < 0 or self.eps <= 0:
            raise InvalidArgumentError("learning rates must be >= 0 and eps > 0")
        if self.batch_size < 2:
            raise InvalidArgumentError("batch_size must be at least 2")
        if self.epochs <= 0 or self.queue_count <= 0 or self.n_clusters <= 0:
            raise InvalidArgumentError("epochs, queues, and clusters must be positive")
        alphas = self.alphas
        if any(not 0.0 <= a < 1.0 for a in alphas):
            raise InvalidArgumentError("momentum coefficients must lie in [0, 1)")

    @property
    def alphas(self):
        m = self.momentum
        if isinstance(m, (int, float)):
            return (float(m),) * self.queue_count
        if len(m) != self.queue_count:
            return tuple(float(m[i % len(m)]) for i in range(self.queue_count))
        return tuple(float(a) for a in m)


class QueueState:
    """Momentum memory of past mini-batch embeddings and weights.

    Holds queue_count blocks, each (B, d) plus a length-B weight vector.
    Warm-up fills the queues with the first k offered blocks; afterwards
    every offer momentum-mixes the current block into all queues.
    """

    def __init__(self, queue_count, alphas, batch_size, dim):
        self.queue_count = queue_count
        self.alphas = tuple(alphas)
        self.batch_size = batch_size
        self.dim = dim
        self.blocks_z = []
        self.blocks_w = []

    @property
    def ready(self):
        return len(self.blocks_z) == self.queue_count

    def offer(self, z_block, w_block):
        z_block = np.asarray(z_block, dtype=np.float64)
        w_block = np.asarray(w_block, dtype=np.float64)
        if z_block.shape != (self.batch_size, self.dim):
            raise ShapeError(
                f"queue block shape {z_block.shape} != ({self.batch_size}, {self.dim})"
            )
        if w_block.shape != (self.batch_size,):
            raise ShapeError("weight block length mismatch")
        if not self.ready:
            self.blocks_z.append(z_block.copy())
            self.blocks_w.append(w_block.copy())
            return
        momentum_update(self, z_block, w_block)

    def concat(self):
        return np.concatenate(self.blocks_z, axis=0), np.concatenate(self.blocks_w)


def momentum_update(queues, z_block, w_block):
    """Mix the current block into every queue: q <- a*q + (1-a)*block."""
    z_block = np.asarray(z_block, dtype=np.float64)
    w_block = np.asarray(w_block, dtype=np.float64)
    if not queues.ready:
        raise InvalidArgumentError("queues must be warm before momentum updates")
    if z_block.shape != (queues.batch_size, queues.dim):
        raise ShapeError(
            f"block shape {z_block.shape} != ({queues.batch_size}, {queues.dim})"
        )
    if w_block.shape != (queues.batch_size,):
        raise ShapeError("weight block length mismatch")
    for i, a in enumerate(queues.alphas):
        queues.blocks_z[i] = a * queues.blocks_z[i] + (1.0 - a) * z_block
        queues.blocks_w[i] = a * queues.blocks_w[i] + (1.0 - a) * w_block
    return queues


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_decor_loss: float
    val_pred_loss: float
    test_acc: float
    w_min: float
    w_med: float
    w_max: float
    w_var: float
    step_ms: float


CSV_HEADER = ("epoch,train_loss,val_decor_loss,val_pred_loss,test_acc,"
              "w_min,w_med,w_max,w_var,step_ms")


@dataclass
class RunMetrics:
    records: list = field(default_factory=list)
    aborted: str = ""  # empty = clean finish; otherwise the abort reason

    def append(self, rec):
        self.records.append(rec)

    def final(self):
        return self.records[-1]

    def to_csv(self, path, config_hash="", seed=None):
        with open(path, "w") as fh:
            if config_hash or seed is not None:
                fh.write(f"# config_hash={config_hash} seed={seed}\n")
            fh.write(CSV_HEADER + "\n")
            for r in self.records:
                fh.write(
                    f"{r.epoch},{r.train_loss:.6f},{r.val_decor_loss:.6g},"
                    f"{r.val_pred_loss:.6f},{r.test_acc:.4f},{r.w_min:.6f},"
                    f"{r.w_med:.6f},{r.w_max:.6f},{r.w_var:.6g},{r.step_ms:.3f}\n"
                )


@dataclass
class TrainResult:
    params: dict
    model_config: ModelConfig
    rho: np.ndarray
    bank: RFFBank
    clusters: ClusterAssignment
    metrics: RunMetrics
    config: TrainConfig

    def weights(self):
        """Per-training-graph weights, unit mean over the whole set."""
        return weight_values(self.rho)


# ---------------------------------------------------------------------------
# single steps


def batch_weights(rho, ids):
    """Positive unit-mean weights for one batch (numpy, detached)."""
    raw = np.logaddexp(0.0, rho[ids])
    return raw / raw.mean()


def outer_step_theta(params, model_config, graphs, labels, weights, eta_theta,
                     divergence_threshold=1e6):
    """One gradient step of the model parameters on the weighted loss.

    Returns the loss value. Raises NumericalError on a non-finite loss or
    gradient; the caller decides whether to abort the run.
    """
    tape.zero_grads(params.values())
    z = forward_batch(graphs, params, model_config)
    logits = classifier_logits(z, params)
    loss = weighted_loss(logits, labels, weights)
    val = loss.item()
    if not np.isfinite(val):
        raise NumericalError(f"non-finite training loss {val}")
    tape.backward(loss)
    sgd_step(params, collect_grads(params), eta_theta)
    return val


def second_order_correction(grad_w_train_at, theta, grad_theta_val,
                            eta_theta, eps_rel):
    """Finite-difference response of the weight gradient of the training
    loss to a parameter perturbation along the weight objective's
    parameter gradient.

    grad_w_train_at: callable(theta_dict) -> gradient w.r.t. the free
    weight parameters (numpy). theta and grad_theta_val are dicts of
    arrays. The perturbation size is eps_rel divided by the gradient norm.
    Returns the correction term to add to the direct weight gradient;
    identically zero when eta_theta is zero.
    """
    gnorm = np.sqrt(sum(float((g * g).sum()) for g in grad_theta_val.values()))
    eps_abs = eps_rel / max(gnorm, 1e-30)
    theta_plus = {k: v + eps_abs * grad_theta_val[k] for k, v in theta.items()}
    g_plus = grad_w_train_at(theta_plus)
    g_base = grad_w_train_at(theta)
    return -(eta_theta / eps_abs) * (g_plus - g_base)


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    """Owns all mutable training state; one instance per run."""

    def __init__(self, config, model_config, train_ds, val_ds, test_ds):
        if config.decor_enabled and config.order != "joint" and len(val_ds) == 0:
            raise InvalidArgumentError("bi-level orders require a validation split")
        self.config = config
        self.model_config = model_config
        self.train_ds = train_ds
        self.val_ds = val_ds
        self.test_ds = test_ds

        # salted so trainer streams never coincide with dataset-generation
        # streams spawned from the same user seed
        root = np.random.SeedSequence((config.seed, 0x5452414E))
        s_init, s_train, s_val, s_bank, s_cluster = root.spawn(5)
        self.params = init_params(model_config, s_init)
        self.bank = RFFBank.create(seed=s_bank)
        self.rho = np.full(len(train_ds), RHO_UNIFORM)
        self.rng_train = np.random.default_rng(s_train)
        self.rng_val = np.random.default_rng(s_val)
        self.cluster_seeds = s_cluster.spawn(config.epochs)

        d = model_config.embedding_dim
        self.batch_size = min(config.batch_size, len(train_ds),
                              len(val_ds) if len(val_ds) else len(train_ds))
        self.clusters = ClusterAssignment.round_robin(d, config.n_clusters)
        self.queues = QueueState(config.queue_count, config.alphas,
                                 self.batch_size, d)
        self.profile = CorrelationProfile(d)

        self.train_labels = train_ds.labels()
        self.val_labels = val_ds.labels() if len(val_ds) else np.zeros(0, dtype=np.intp)
        self._val_order = []
        # fixed evaluation sets: pad once, reuse every epoch
        self._test_pads = self._chunk_pads(test_ds)
        self._val_pads = self._chunk_pads(val_ds)
        self._test_labels = test_ds.labels()

    def _chunk_pads(self, dataset, chunk=256):
        from .gnn import _pad_batch
        pads = []
        for start in range(0, len(dataset), chunk):
            graphs = dataset.graphs[start:start + chunk]
            pads.append((len(graphs), _pad_batch(graphs, self.model_config)))
        return pads

    # -- batching ---------------------------------------------------------

    def _train_batches(self):
        order = self.rng_train.permutation(len(self.train_ds))
        b = self.batch_size
        for start in range(0, len(order) - b + 1, b):
            yield order[start:start + b]

    def _next_val_batch(self):
        while len(self._val_order) < self.batch_size:
            self._val_order.extend(
                self.rng_val.permutation(len(self.val_ds)).tolist())
        ids = self._val_order[:self.batch_size]
        del self._val_order[:self.batch_size]
        return np.array(ids, dtype=np.intp)

    def _detached_params(self):
        return {k: tape.constant(v.data) for k, v in self.params.items()}

    def _embed(self, dataset, ids, params=None):
        graphs = [dataset[i] for i in ids]
        z = forward_batch(graphs, params or self._detached_params(),
                          self.model_config)
        return z.data

    # -- weight objective ---------------------------------------------------

    def _decor_graph(self, rho_leaf, z_current, queue_z, queue_w):
        """Decorrelation loss over queues + current block with live weights.

        Embedding variables are standardized over the pooled sample (with
        stop-grad statistics) before the cosine feature maps; the unit-scale
        frequencies of the bank assume unit-scale inputs.
        """
        w_hat_raw = tape.concat([tape.constant(queue_w),
                                 tape.softplus(rho_leaf)])
        w_hat = tape.div(w_hat_raw, tape.mean_(w_hat_raw))
        z_cur_data = z_current.data if isinstance(z_current, Tensor) else z_current
        pooled = np.concatenate([queue_z, z_cur_data], axis=0)
        mean = pooled.mean(axis=0, keepdims=True)
        inv_std = 1.0 / np.maximum(pooled.std(axis=0, keepdims=True), 1e-8)
        if isinstance(z_current, Tensor):
            z_hat = tape.concat([tape.constant(queue_z), z_current])
            z_hat = tape.mul(tape.sub(z_hat, mean), inv_std)
        else:
            z_hat = tape.constant((pooled - mean) * inv_std)
        return decor_loss(z_hat, w_hat, self.clusters, self.bank,
                          within=self.config.penalize_within)

    def _grad_rho_train(self, batch_ids, labels, params_data):
        """Gradient of the weighted training loss w.r.t. the batch's free
        weight parameters, at fixed model parameters."""
        detached = {k: tape.constant(v) for k, v in params_data.items()}
        rho_leaf = Tensor(self.rho[batch_ids])
        raw = tape.softplus(rho_leaf)
        w = tape.div(raw, tape.mean_(raw))
        graphs = [self.train_ds[i] for i in batch_ids]
        z = forward_batch(graphs, detached, self.model_config)
        logits = classifier_logits(z, detached)
        loss = weighted_loss(logits, labels, w)
        tape.backward(loss)
        return rho_leaf.grad if rho_leaf.grad is not None else np.zeros(len(batch_ids))

    def inner_step_w(self, batch_ids, val_ids):
        """One weight update: embed the validation batch into the queues,
        then step the current training batch's weight parameters on the
        decorrelation objective. Returns the objective value (nan while the
        queues are still warming up)."""
        cfg = self.config
        z_val = self._embed(self.val_ds, val_ids)
        self.queues.offer(z_val, np.ones(self.batch_size))
        if not self.queues.ready:
            return float("nan")

        z_cur = self._embed(self.train_ds, batch_ids)
        queue_z, queue_w = self.queues.concat()
        rho_leaf = Tensor(self.rho[batch_ids])
        loss = self._decor_graph(rho_leaf, z_cur, queue_z, queue_w)
        if cfg.w_pred_coef > 0.0:
            raw = tape.softplus(rho_leaf)
            w_pred = tape.div(raw, tape.mean_(raw))
            detached = self._detached_params()
            graphs = [self.train_ds[i] for i in batch_ids]
            z = forward_batch(graphs, detached, self.model_config)
            logits = classifier_logits(z, detached)
            pred = weighted_loss(logits, self.train_labels[batch_ids], w_pred)
            loss = tape.add(loss, tape.mul(pred, cfg.w_pred_coef))
        val = loss.item()
        if loss.requires_grad:
            tape.backward(loss)
        g = rho_leaf.grad if rho_leaf.grad is not None else np.zeros(len(batch_ids))

        if cfg.order == "second":
            g = g + self._correction(batch_ids, queue_z, queue_w, g)

        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite weight gradient")
        self.rho[batch_ids] = self.rho[batch_ids] - cfg.eta_w * g

        update_profile(self.profile, z_cur, self.queues.blocks_z)
        return val

    def _correction(self, batch_ids, queue_z, queue_w, g_first):
        """Hypergradient correction: perturb the model parameters along the
        decorrelation objective's parameter gradient and difference the
        weight gradient of the training loss."""
        cfg = self.config
        # parameter gradient of the weight objective, weights held constant
        # at the same normalized values the live graph used
        tape.zero_grads(self.params.values())
        graphs = [self.train_ds[i] for i in batch_ids]
        z_live = forward_batch(graphs, self.params, self.model_config)
        raw = np.logaddexp(0.0, self.rho[batch_ids])
        w_all = np.concatenate([queue_w, raw])
        w_all = w_all / w_all.mean()
        pooled = np.concatenate([queue_z, z_live.data], axis=0)
        mean = pooled.mean(axis=0, keepdims=True)
        inv_std = 1.0 / np.maximum(pooled.std(axis=0, keepdims=True), 1e-8)
        z_hat = tape.concat([tape.constant(queue_z), z_live])
        z_hat = tape.mul(tape.sub(z_hat, mean), inv_std)
        loss = decor_loss(z_hat, w_all, self.clusters, self.bank,
                          within=cfg.penalize_within)
        if not loss.requires_grad:
            return np.zeros_like(g_first)
        tape.backward(loss)
        grad_theta_val = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                          for k, p in self.params.items()}
        theta = {k: p.data.copy() for k, p in self.params.items()}
        labels = self.train_labels[batch_ids]

        def grad_w_train_at(theta_dict):
            return self._grad_rho_train(batch_ids, labels, theta_dict)

        corr = second_order_correction(grad_w_train_at, theta, grad_theta_val,
                                       cfg.eta_theta, cfg.eps)
        n1, n2 = np.linalg.norm(corr), np.linalg.norm(g_first)
        if n1 > 1e3 * max(n2, 1e-30):
            warnings.warn("hypergradient correction dominated by finite-difference "
                          "noise; falling back to first order for this step")
            return np.zeros_like(g_first)
        return corr

    def joint_step(self, batch_ids):
        """Simultaneous update of parameters and weights on one training
        batch; no validation data involved."""
        cfg = self.config
        labels = self.train_labels[batch_ids]
        graphs = [self.train_ds[i] for i in batch_ids]
        w_const = batch_weights(self.rho, batch_ids)

        # parameter gradient at the current iterate
        tape.zero_grads(self.params.values())
        z = forward_batch(graphs, self.params, self.model_config)
        logits = classifier_logits(z, self.params)
        loss = weighted_loss(logits, labels, w_const)
        train_val = loss.item()
        if not np.isfinite(train_val):
            raise NumericalError(f"non-finite training loss {train_val}")
        tape.backward(loss)
        theta_grads = collect_grads(self.params)

        decor_val = float("nan")
        z_cur = z.data.copy()
        if self.queues.ready:
            queue_z, queue_w = self.queues.concat()
            rho_leaf = Tensor(self.rho[batch_ids])
            dloss = self._decor_graph(rho_leaf, z_cur, queue_z, queue_w)
            decor_val = dloss.item()
            if dloss.requires_grad:
                tape.backward(dloss)
            g = rho_leaf.grad if rho_leaf.grad is not None else np.zeros(len(batch_ids))
            if not np.all(np.isfinite(g)):
                raise NumericalError("non-finite weight gradient")
            self.rho[batch_ids] = self.rho[batch_ids] - cfg.eta_w * g
            update_profile(self.profile, z_cur, self.queues.blocks_z)

        sgd_step(self.params, theta_grads, cfg.eta_theta)
        self.queues.offer(z_cur, batch_weights(self.rho, batch_ids))
        return train_val, decor_val

    # -- epoch loop ---------------------------------------------------------

    def _val_pred_loss(self):
        if len(self.val_ds) == 0:
            return float("nan")
        detached = self._detached_params()
        total, n = 0.0, 0
        for size, pads in self._val_pads:
            labels = self.val_labels[n:n + size]
            z = gnn.forward_from_pads(pads, detached, self.model_config)
            logits = classifier_logits(z, detached)
            loss = weighted_loss(logits, labels, np.ones(size))
            total += loss.item() * size
            n += size
        return total / n

    def _test_accuracy(self):
        detached = self._detached_params()
        preds = []
        for size, pads in self._test_pads:
            z = gnn.forward_from_pads(pads, detached, self.model_config)
            logits = classifier_logits(z, detached)
            preds.append(np.argmax(logits.data, axis=1))
        preds = np.concatenate(preds)
        return float((preds == self._test_labels).mean())

    def _maybe_recluster(self, epoch):
        cfg = self.config
        if not cfg.decor_enabled or cfg.recluster_every <= 0:
            return
        if (epoch + 1) % cfg.recluster_every != 0:
            return
        if self.profile.n_subsets < 2:
            return
        self.clusters = cluster_variables(self.profile.dis_matrix(),
                                          min(cfg.n_clusters, self.profile.d),
                                          seed=self.cluster_seeds[epoch])

    def run(self):
        cfg = self.config
        metrics = RunMetrics()
        for epoch in range(cfg.epochs):
            t_losses, d_losses, times = [], [], []
            try:
                for batch_ids in self._train_batches():
                    t0 = time.perf_counter()
                    if cfg.decor_enabled and cfg.order == "joint":
                        tl, dl = self.joint_step(batch_ids)
                        t_losses.append(tl)
                        if np.isfinite(dl):
                            d_losses.append(dl)
                    else:
                        w = batch_weights(self.rho, batch_ids)
                        labels = self.train_labels[batch_ids]
                        graphs = [self.train_ds[i] for i in batch_ids]
                        tl = outer_step_theta(self.params, self.model_config,
                                              graphs, labels, w, cfg.eta_theta)
                        t_losses.append(tl)
                        if cfg.decor_enabled:
                            dl = self.inner_step_w(batch_ids,
                                                   self._next_val_batch())
                            if np.isfinite(dl):
                                d_losses.append(dl)
                    times.append(time.perf_counter() - t0)
                    if t_losses[-1] > cfg.divergence_threshold:
                        raise NumericalError(
                            f"training loss diverged: {t_losses[-1]:.3g}")
            except NumericalError as exc:
                metrics.aborted = str(exc)
                log.warning("aborting run at epoch %d: %s", epoch, exc)

            w_full = weight_values(self.rho)
            acc = self._test_accuracy()
            metrics.append(EpochRecord(
                epoch=epoch,
                train_loss=float(np.mean(t_losses)) if t_losses else float("nan"),
                val_decor_loss=float(np.mean(d_losses)) if d_losses else 0.0,
                val_pred_loss=self._val_pred_loss(),
                test_acc=acc,
                w_min=float(w_full.min()),
                w_med=float(np.median(w_full)),
                w_max=float(w_full.max()),
                w_var=float(w_full.var()),
                step_ms=float(np.mean(times) * 1e3) if times else 0.0,
            ))
            if metrics.aborted:
                break
            self._maybe_recluster(epoch)
        return TrainResult(self.params, self.model_config, self.rho, self.bank,
                           self.clusters, metrics, cfg)


def train(config, model_config, train_ds, val_ds, test_ds):
    """Run the full loop; returns final parameters, weights, and metrics."""
    return Trainer(config, model_config, train_ds, val_ds, test_ds).run()


# ---------------------------------------------------------------------------
# evaluation


def evaluate(params, model_config, dataset):
    """Accuracy plus per-class precision/recall and confusion counts."""
    if len(dataset) == 0:
        raise InvalidArgumentError("cannot evaluate an empty dataset")
    preds = gnn.predict(dataset.graphs, params, model_config)
    labels = dataset.labels()
    confusion = np.zeros((2, 2), dtype=int)
    for y, p in zip(labels, preds):
        confusion[y, p] += 1
    per_class = {}
    for c in (0, 1):
        tp = confusion[c, c]
        fn = confusion[c, 1 - c]
        fp = confusion[1 - c, c]
        per_class[c] = {
            "precision": tp / (tp + fp) if tp + fp else 0.0,
            "recall": tp / (tp + fn) if tp + fn else 0.0,
            "support": int(confusion[c].sum()),
        }
    return {
        "accuracy": float((preds == labels).mean()),
        "confusion": confusion.tolist(),
        "per_class": per_class,
    }
