"""Acceptance suite: one test per exit criterion, each printing a PASS line
with the numbers it measured. Experiment-style criteria pin their seeds and
configuration here so outcomes are reproducible run to run.
"""
import time

import numpy as np
import pytest

from l2rgnn import tape
from l2rgnn.bilevel import (TrainConfig, Trainer, second_order_correction,
                            train)
from l2rgnn.decorrelation import (ClusterAssignment, CorrelationProfile,
                                  RFFBank, RHO_UNIFORM, cluster_variables,
                                  decor_loss, partial_cross_cov, weight_map)
from l2rgnn.gnn import (ModelConfig, classifier_logits, forward_batch,
                        gradcheck, init_params, weighted_loss)
from l2rgnn.graphs import SyntheticSpec, generate_synthetic_dataset
from l2rgnn.tape import Tensor

# Desk-scale experiment configuration shared by the trend criteria
# (1, 2, 3). Calibrated once and frozen; see README for the rationale.
DATA = dict(n_train=400, n_val=96, n_test=320,
            base_graph_size_range=(2, 4), motif_size_range=(18, 26),
            edge_prob=0.05, feature_dim=8, test_bias_ratio=0.25)
MODEL = ModelConfig(feature_dim=8, layer_dims=(16, 16))
TRAIN = dict(batch_size=32, eta_theta=0.5, eta_w=0.5, n_clusters=4,
             recluster_every=5, queue_count=4, momentum=(0.9, 0.9, 0.9, 0.9))
EPOCHS = 260


def make_datasets(mu, seed, **overrides):
    spec_kw = dict(DATA, bias_ratio=mu, seed=seed)
    spec_kw.update(overrides)
    return generate_synthetic_dataset(SyntheticSpec(**spec_kw))


def run_training(mu, seed, decor, order="first", epochs=EPOCHS, eta_w=None,
                 datasets=None, **overrides):
    if datasets is None:
        datasets = make_datasets(mu, seed)
    kw = dict(TRAIN, epochs=epochs, order=order, seed=seed,
              decor_enabled=decor)
    if eta_w is not None:
        kw["eta_w"] = eta_w
    kw.update(overrides)
    return train(TrainConfig(**kw), MODEL, *datasets)


def report(criterion, passed, detail):
    status = "PASS" if passed else "FAIL"
    print(f"\n[{status}] criterion {criterion}: {detail}")
    assert passed, f"criterion {criterion}: {detail}"


# ---------------------------------------------------------------------------
# criterion 1: spurious-correlation mitigation across the bias sweep


def test_c01_spurious_correlation_mitigation():
    t0 = time.time()
    mus = (0.6, 0.7, 0.8, 0.9)
    seeds = range(5)
    backbone, reweighted = {}, {}
    for mu in mus:
        accs_b, accs_l = [], []
        for seed in seeds:
            datasets = make_datasets(mu, seed)
            accs_b.append(run_training(mu, seed, decor=False,
                                       datasets=datasets)
                          .metrics.final().test_acc)
            accs_l.append(run_training(mu, seed, decor=True,
                                       datasets=datasets)
                          .metrics.final().test_acc)
        backbone[mu] = float(np.mean(accs_b))
        reweighted[mu] = float(np.mean(accs_l))
    elapsed = time.time() - t0

    # (a) backbone mean accuracy non-increasing in mu, one inversion of at
    # most one point allowed
    inversions = [backbone[b] - backbone[a]
                  for a, b in zip(mus, mus[1:]) if backbone[b] > backbone[a]]
    ok_a = len(inversions) <= 1 and all(v <= 0.01 for v in inversions)

    # (b) reweighted >= backbone at every mu, and by >= 5 points at mu=0.9
    ok_b_every = all(reweighted[mu] >= backbone[mu] for mu in mus)
    ok_b_margin = reweighted[0.9] >= backbone[0.9] + 0.05
    ok_time = elapsed < 600.0

    detail = (f"backbone {[f'{backbone[m]:.3f}' for m in mus]}, reweighted "
              f"{[f'{reweighted[m]:.3f}' for m in mus]}, margin at 0.9 "
              f"{reweighted[0.9] - backbone[0.9]:+.3f} (need >= +0.050), "
              f"elapsed {elapsed:.0f}s (< 600)")
    report(1, ok_a and ok_b_every and ok_b_margin and ok_time, detail)


# ---------------------------------------------------------------------------
# criterion 2: bi-level training avoids the joint-mode over-fitting gap


def test_c02_overfitting_ablation():
    gaps = {}
    for order in ("first", "joint"):
        vals = []
        for seed in (0, 1, 2):
            datasets = make_datasets(0.8, seed, n_train=120, n_val=120,
                                     n_test=120)
            res = run_training(0.8, seed, decor=True, order=order,
                               epochs=800, eta_w=1.0, datasets=datasets)
            f = res.metrics.final()
            vals.append(f.val_pred_loss - f.train_loss)
        gaps[order] = float(np.mean(vals))
    ok = gaps["first"] <= 0.5 * gaps["joint"]
    report(2, ok, f"final (val - train) gap: first {gaps['first']:.4f}, "
                  f"joint {gaps['joint']:.4f} (need first <= 0.5 * joint)")


# ---------------------------------------------------------------------------
# criterion 3: weight-distribution diagnostics, biased vs unbiased


def test_c03_weight_distribution():
    stats = {}
    for mu in (0.8, 0.25):
        meds, variances = [], []
        for seed in (0, 1, 2):
            datasets = make_datasets(mu, seed, n_train=240, n_val=120,
                                     n_test=240)
            res = run_training(mu, seed, decor=True, epochs=200, eta_w=1.5,
                               datasets=datasets)
            w = res.weights()
            meds.append(float(np.median(w)))
            variances.append(float(w.var()))
        stats[mu] = (float(np.mean(meds)), float(np.mean(variances)))
    ok = stats[0.8][0] < stats[0.25][0] and stats[0.8][1] > stats[0.25][1]
    report(3, ok, f"biased (mu=0.8): median {stats[0.8][0]:.4f}, var "
                  f"{stats[0.8][1]:.4g}; unbiased (mu=0.25): median "
                  f"{stats[0.25][0]:.4f}, var {stats[0.25][1]:.4g} "
                  f"(need lower median and higher variance when biased)")


# ---------------------------------------------------------------------------
# criterion 4: gradient correctness


def test_c04_gradient_correctness():
    # Central differences with step 1e-4 are only a valid oracle away from
    # relu kinks; instances whose pre-activations sit within 1e-3 of a kink
    # are redrawn (the loss is not differentiable there).
    from l2rgnn.gnn import relu_kink_margin

    rng = np.random.default_rng(404)
    worst_theta, worst_rho = 0.0, 0.0
    checked = 0
    while checked < 20:
        seed = int(rng.integers(1_000_000))
        spec = SyntheticSpec(n_train=20, n_val=4, n_test=4, bias_ratio=0.5,
                             feature_dim=4, base_graph_size_range=(3, 5),
                             motif_size_range=(4, 6), seed=seed)
        tr, _, _ = generate_synthetic_dataset(spec)
        config = ModelConfig(feature_dim=4, layer_dims=(6, 8))
        params = init_params(config, seed)
        labels = tr.labels()
        weights = rng.uniform(0.2, 2.0, 20)
        if relu_kink_margin(tr.graphs, params, config) < 1e-3:
            continue
        checked += 1

        def theta_loss():
            z = forward_batch(tr.graphs, params, config)
            return weighted_loss(classifier_logits(z, params), labels, weights)

        worst_theta = max(worst_theta, gradcheck(theta_loss, params))

        z_data = rng.standard_normal((20, 8))
        bank = RFFBank.create(seed=seed)
        clusters = ClusterAssignment(3, np.arange(8) % 3, np.arange(3))
        rho = Tensor(rng.standard_normal(20))

        def rho_loss():
            return decor_loss(z_data, weight_map(rho), clusters, bank)

        worst_rho = max(worst_rho, gradcheck(rho_loss, {"rho": rho}))

    ok = worst_theta <= 1e-4 and worst_rho <= 1e-4
    report(4, ok, f"max rel err: theta {worst_theta:.2e}, rho {worst_rho:.2e} "
                  f"(tolerance 1e-4, 20 smooth instances each)")


# ---------------------------------------------------------------------------
# criterion 5: independence statistic oracle


def test_c05_independence_statistic():
    rng = np.random.default_rng(505)
    n = 10_000
    ind, ident = [], []
    for bank_seed in range(20):
        bank = RFFBank.create(seed=bank_seed)
        x = rng.standard_normal(n)
        y = rng.standard_normal(n)
        z_ind = np.stack([x, y], axis=1)
        z_same = np.stack([x, x], axis=1)
        w = np.ones(n)
        ind.append(float(np.sum(partial_cross_cov(z_ind, w, 0, 1, bank) ** 2)))
        ident.append(float(np.sum(partial_cross_cov(z_same, w, 0, 1, bank) ** 2)))
    mean_ind, mean_ident = np.mean(ind), np.mean(ident)
    ok = mean_ind <= 0.01 and mean_ident >= 10 * mean_ind
    report(5, ok, f"independent {mean_ind:.2e} (<= 0.01), identical "
                  f"{mean_ident:.2e} ({mean_ident / mean_ind:.0f}x, need >= 10x)")


# ---------------------------------------------------------------------------
# criterion 6: first-order reduction of the second-order step


def test_c06_second_order_reduces_to_first():
    datasets = make_datasets(0.8, seed=6,
                             n_train=96, n_val=64, n_test=32,
                             motif_size_range=(6, 9),
                             base_graph_size_range=(3, 5))
    # 96 graphs / batch 32 = 3 steps per epoch; 40 epochs = 120 inner steps
    runs = {}
    for order in ("first", "second"):
        res = run_training(0.8, seed=6, decor=True, order=order, epochs=40,
                           datasets=datasets, eta_theta=0.0, eta_w=0.1)
        runs[order] = res
    diff = float(np.max(np.abs(runs["first"].rho - runs["second"].rho)))
    steps = sum(1 for r in runs["first"].metrics.records) * 3
    ok = diff <= 1e-12
    report(6, ok, f"max |rho_first - rho_second| = {diff:.2e} over ~{steps} "
                  f"inner steps with eta_theta = 0 (tolerance 1e-12)")


# ---------------------------------------------------------------------------
# criterion 7: quadratic bilevel oracle


def test_c07_quadratic_bilevel_oracle():
    rng = np.random.default_rng(707)
    worst = 0.0
    for _ in range(10):
        m, p = 8, 5
        A = rng.standard_normal((m, p))
        b = rng.standard_normal(m)
        W = rng.standard_normal(p)
        theta = A @ W

        def grad_w_train_at(theta_dict):
            return -2.0 * A.T @ (theta_dict["theta"] - A @ W)

        hypergrad = second_order_correction(
            grad_w_train_at, {"theta": theta}, {"theta": 2.0 * (theta - b)},
            eta_theta=0.5, eps_rel=1e-2)
        expected = 2.0 * A.T @ (A @ W - b)
        rel = np.linalg.norm(hypergrad - expected) / np.linalg.norm(expected)
        worst = max(worst, float(rel))
    ok = worst <= 1e-3
    report(7, ok, f"max relative error vs closed form 2*A^T(AW-b): {worst:.2e} "
                  f"(tolerance 1e-3, 10 instances)")


# ---------------------------------------------------------------------------
# criterion 8: planted-cluster recovery


def planted_profile(seed, L=8, n=60):
    rng = np.random.default_rng(seed)
    p = CorrelationProfile(4)
    for ell in range(L):
        s = 1.0 if ell % 2 == 0 else -1.0
        x = rng.standard_normal(n)
        y = s * x + 0.1 * rng.standard_normal(n)
        p.append_subset(np.stack([
            x, x + 0.05 * rng.standard_normal(n),
            y, y + 0.05 * rng.standard_normal(n),
        ], axis=1))
    return p.dis_matrix()


def exhaustive_two_partition_cost(dm):
    from itertools import combinations
    items = list(range(dm.shape[0]))
    best = None
    for r in range(1, len(items) // 2 + 1):
        for left in combinations(items, r):
            right = tuple(i for i in items if i not in left)
            if not right or (len(left) == len(right) and left[0] != 0):
                continue
            cost = sum(min(sum(dm[i, m] for i in blk) for m in blk)
                       for blk in (left, right))
            if best is None or cost < best:
                best = cost
    return best


def test_c08_planted_cluster_recovery():
    target = frozenset({frozenset({0, 1}), frozenset({2, 3})})
    hits = 0
    for trial in range(10):
        dm = planted_profile(seed=800 + trial)
        result = cluster_variables(dm, 2, seed=trial)
        blocks = frozenset(
            frozenset(np.flatnonzero(result.assign == j).tolist())
            for j in range(2))
        got_cost = dm[:, result.medoids].min(axis=1).sum()
        best_cost = exhaustive_two_partition_cost(dm)
        if blocks == target and np.isclose(got_cost, best_cost, rtol=1e-12):
            hits += 1
    ok = hits == 10
    report(8, ok, f"planted partition recovered and globally optimal in "
                  f"{hits}/10 seeded trials (need 10/10)")


# ---------------------------------------------------------------------------
# criterion 9: queue cost is independent of dataset size


def median_w_step_time(n_graphs, seed=9, steps=30):
    spec = SyntheticSpec(n_train=n_graphs, n_val=max(64, n_graphs // 10),
                         n_test=16, bias_ratio=0.8, feature_dim=8,
                         base_graph_size_range=(3, 5),
                         motif_size_range=(5, 7), seed=seed)
    tr, va, te = generate_synthetic_dataset(spec)
    cfg = TrainConfig(**dict(TRAIN, epochs=1, seed=seed, queue_count=4,
                             batch_size=32))
    trainer = Trainer(cfg, MODEL, tr, va, te)
    rng = np.random.default_rng(seed)
    times = []
    for _ in range(steps):
        batch = rng.choice(n_graphs, 32, replace=False)
        val = trainer._next_val_batch()
        t0 = time.perf_counter()
        trainer.inner_step_w(batch, val)
        times.append(time.perf_counter() - t0)
    # drop the queue warm-up steps, they do less work
    return float(np.median(times[5:]))


def test_c09_queue_cost_independent_of_n():
    t_small = median_w_step_time(2_000)
    t_large = median_w_step_time(20_000)
    ratio = t_large / t_small
    ok = ratio < 2.0
    report(9, ok, f"median weight-step time: N=2,000 {t_small * 1e3:.2f} ms, "
                  f"N=20,000 {t_large * 1e3:.2f} ms, ratio {ratio:.2f} (< 2.0)")


# ---------------------------------------------------------------------------
# criterion 10: reduction sanity


def test_c10_reduction_sanity():
    datasets = make_datasets(0.8, seed=10, n_train=96, n_val=48, n_test=48,
                             motif_size_range=(6, 9),
                             base_graph_size_range=(3, 5))
    res_l2r = run_training(0.8, seed=10, decor=True, epochs=30, eta_w=0.0,
                           datasets=datasets)
    res_plain = run_training(0.8, seed=10, decor=False, epochs=30,
                             datasets=datasets)
    same_params = all(
        np.array_equal(res_l2r.params[k].data, res_plain.params[k].data)
        for k in res_l2r.params)
    same_losses = all(
        a.train_loss == b.train_loss and a.test_acc == b.test_acc
        for a, b in zip(res_l2r.metrics.records, res_plain.metrics.records))
    uniform = bool(np.all(res_l2r.rho == RHO_UNIFORM))

    res_k1 = run_training(0.8, seed=10, decor=True, epochs=30, n_clusters=1,
                          datasets=datasets)
    zero_decor = all(r.val_decor_loss == 0.0 for r in res_k1.metrics.records)

    ok = same_params and same_losses and uniform and zero_decor
    report(10, ok, f"eta_w=0 trajectory identical to backbone: "
                   f"{same_params and same_losses}; weights untouched: "
                   f"{uniform}; K=1 decor loss zero at every epoch: {zero_decor}")
