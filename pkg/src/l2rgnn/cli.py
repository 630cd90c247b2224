"""Experiment driver: dataset generation, training runs, evaluation, the
bias-ratio sweep, and the component ablation.

Every artifact embeds the config hash and the seed. Reruns with identical
inputs reproduce identical outputs (timing columns in metrics files are
the one documented exception).

Exit codes: 0 ok, 2 validation error, 3 runtime or numerical error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from .bilevel import TrainConfig, evaluate, train
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (DatasetParseError, InvalidArgumentError, NumericalError,
                     SchemaError)
from .gnn import ModelConfig
from .graphs import (SyntheticSpec, generate_synthetic_dataset,
                     load_dataset, save_dataset)

SEED_ENV_VAR = "L2R_SEED"


def config_hash(d):
    return hashlib.sha256(
        json.dumps(d, sort_keys=True, default=str).encode()
    ).hexdigest()[:12]


_HASH_EXCLUDED = {"func", "out", "config", "command"}


def args_hash(args, seed=None):
    """Hash of the result-defining configuration (not output paths)."""
    rel = {k: v for k, v in vars(args).items() if k not in _HASH_EXCLUDED}
    if seed is not None:
        rel["seed"] = seed
    return config_hash(rel)


def _parse_floats(text):
    try:
        return [float(x) for x in str(text).split(",") if x != ""]
    except ValueError:
        raise InvalidArgumentError(f"expected comma-separated floats, got {text!r}")


def _parse_ints(text):
    try:
        return [int(x) for x in str(text).split(",") if x != ""]
    except ValueError:
        raise InvalidArgumentError(f"expected comma-separated integers, got {text!r}")


def _parse_pair(text, name):
    vals = _parse_ints(text)
    if len(vals) != 2:
        raise InvalidArgumentError(f"{name} must be 'lo,hi', got {text!r}")
    return tuple(vals)


def read_config_file(path):
    """Flat key=value configuration; '#' starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgumentError(
                f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _resolve_seed(args):
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise InvalidArgumentError(f"{SEED_ENV_VAR} must be an integer, got {env!r}")
    return args.seed


def _check_ratio(value, name):
    if not 0.0 <= value <= 1.0:
        raise InvalidArgumentError(f"{name} must lie in [0, 1], got {value}")
    return value


# ---------------------------------------------------------------------------
# subcommand implementations


def _build_spec(args, seed):
    return SyntheticSpec(
        n_train=args.n_train, n_val=args.n_val, n_test=args.n_test,
        bias_ratio=_check_ratio(args.mu, "--mu"),
        test_bias_ratio=_check_ratio(args.test_mu, "--test-mu"),
        motif_size_range=_parse_pair(args.motif_size, "--motif-size"),
        base_graph_size_range=_parse_pair(args.base_size, "--base-size"),
        feature_dim=args.feature_dim,
        seed=seed,
    )


def cmd_gen_data(args):
    seed = _resolve_seed(args)
    spec = _build_spec(args, seed)
    spec.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = generate_synthetic_dataset(spec)
    files = {}
    for split in splits:
        path = out / f"{split.split_tag}.jsonl"
        save_dataset(split, path)
        files[split.split_tag] = path.name
    spec_dict = {
        "n_train": spec.n_train, "n_val": spec.n_val, "n_test": spec.n_test,
        "bias_ratio": spec.bias_ratio, "test_bias_ratio": spec.test_bias_ratio,
        "motif_size_range": list(spec.motif_size_range),
        "base_graph_size_range": list(spec.base_graph_size_range),
        "feature_dim": spec.feature_dim, "edge_prob": spec.edge_prob,
        "seed": seed,
    }
    manifest = {
        "spec": spec_dict,
        "seed": seed,
        "config_hash": config_hash(spec_dict),
        "files": files,
        "counts": {s.split_tag: len(s) for s in splits},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {', '.join(files.values())} and manifest.json to {out}")
    return 0


def _load_splits(data_dir):
    data_dir = Path(data_dir)
    splits = []
    for tag in ("train", "val", "test"):
        path = data_dir / f"{tag}.jsonl"
        if not path.exists():
            raise InvalidArgumentError(f"missing dataset file: {path}")
        splits.append(load_dataset(path, split_tag=tag))
    return splits


def _train_config_from(args, seed):
    order = args.order
    decor_enabled = True
    if args.ablation == "no-bilevel":
        order = "joint"
    elif args.ablation == "no-decor":
        decor_enabled = False
    return TrainConfig(
        eta_theta=args.eta_theta, eta_w=args.eta_w, eps=args.eps,
        order=order, epochs=args.epochs, batch_size=args.batch,
        queue_count=args.queues, momentum=tuple([args.alpha] * args.queues),
        n_clusters=args.clusters, recluster_every=args.recluster,
        seed=seed, decor_enabled=decor_enabled,
        penalize_within=args.penalize_within, w_pred_coef=args.w_pred_coef,
    )


def _model_config_from(args, feature_dim):
    dims = tuple(_parse_ints(args.layer_dims))
    return ModelConfig(backbone=args.backbone, feature_dim=feature_dim,
                       layer_dims=dims)


def _run_one(args, seed, datasets):
    train_ds, val_ds, test_ds = datasets
    config = _train_config_from(args, seed)
    model_config = _model_config_from(args, train_ds.feature_dim)
    result = train(config, model_config, train_ds, val_ds, test_ds)
    return config, model_config, result


def cmd_train(args):
    seed = _resolve_seed(args)
    datasets = _load_splits(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config, model_config, result = _run_one(args, seed, datasets)

    chash = args_hash(args, seed)
    result.metrics.to_csv(out / "metrics.csv", config_hash=chash, seed=seed)
    save_checkpoint(out / "checkpoint.json", result.params, model_config,
                    result.bank, result.rho, result.clusters,
                    config_hash=chash, seed=seed)
    final = result.metrics.final()
    summary = {
        "config_hash": chash,
        "seed": seed,
        "order": config.order,
        "ablation": args.ablation,
        "test_acc": final.test_acc,
        "train_loss": final.train_loss,
        "val_pred_loss": final.val_pred_loss,
        "val_decor_loss": final.val_decor_loss,
        "w_median": final.w_med,
        "w_var": final.w_var,
        "aborted": result.metrics.aborted,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if result.metrics.aborted:
        print(f"run aborted: {result.metrics.aborted}", file=sys.stderr)
        return 3
    print(f"test_acc={final.test_acc:.4f} (metrics in {out})")
    return 0


def cmd_eval(args):
    params, model_config, bank, rho, clusters, meta = load_checkpoint(args.checkpoint)
    dataset = load_dataset(Path(args.data) / f"{args.split}.jsonl",
                           split_tag=args.split)
    report = evaluate(params, model_config, dataset)
    report["config_hash"] = meta["config_hash"]
    report["seed"] = meta["seed"]
    report["split"] = args.split
    text = json.dumps(report, indent=2)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(text + "\n")
    print(text)
    return 0


def _mean_std(xs):
    xs = np.asarray(xs, dtype=np.float64)
    return float(xs.mean()), float(xs.std(ddof=1)) if xs.size > 1 else 0.0


def cmd_sweep_mu(args):
    mus = _parse_floats(args.mu)
    if not mus:
        raise InvalidArgumentError("--mu sweep list must be non-empty")
    for m in mus:
        _check_ratio(m, "--mu")
    seeds = _parse_ints(args.seeds)
    if not seeds:
        raise InvalidArgumentError("--seeds must be non-empty")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chash = args_hash(args)

    rows = []
    for mu in mus:
        for seed in seeds:
            sargs = argparse.Namespace(**vars(args))
            sargs.mu = mu
            spec = _build_spec(sargs, seed)
            datasets = generate_synthetic_dataset(spec)
            for method in ("backbone", "l2r"):
                margs = argparse.Namespace(**vars(args))
                margs.ablation = "no-decor" if method == "backbone" else "full"
                config, model_config, result = _run_one(margs, seed, datasets)
                final = result.metrics.final()
                w = result.weights()
                rows.append({
                    "mu": mu, "method": method, "seed": seed,
                    "test_acc": final.test_acc,
                    "w_median": float(np.median(w)),
                    "w_var": float(w.var()),
                    "aborted": bool(result.metrics.aborted),
                })
                print(f"mu={mu} seed={seed} {method}: acc={final.test_acc:.4f}")

    with open(out / "sweep.csv", "w") as fh:
        fh.write(f"# config_hash={chash} seeds={args.seeds}\n")
        fh.write("mu,method,seed,test_acc,w_median,w_var,aborted\n")
        for r in rows:
            fh.write(f"{r['mu']},{r['method']},{r['seed']},{r['test_acc']:.4f},"
                     f"{r['w_median']:.6f},{r['w_var']:.6g},{int(r['aborted'])}\n")

    with open(out / "sweep_summary.csv", "w") as fh:
        fh.write(f"# config_hash={chash} seeds={args.seeds}\n")
        fh.write("mu,method,acc_mean,acc_std,w_median_mean,w_var_mean\n")
        for mu in mus:
            for method in ("backbone", "l2r"):
                sel = [r for r in rows if r["mu"] == mu and r["method"] == method]
                am, asd = _mean_std([r["test_acc"] for r in sel])
                wm, _ = _mean_std([r["w_median"] for r in sel])
                wv, _ = _mean_std([r["w_var"] for r in sel])
                fh.write(f"{mu},{method},{am:.4f},{asd:.4f},{wm:.6f},{wv:.6g}\n")
    print(f"sweep results in {out / 'sweep.csv'}")
    return 0


def cmd_ablate(args):
    seeds = _parse_ints(args.seeds)
    if not seeds:
        raise InvalidArgumentError("--seeds must be non-empty")
    _check_ratio(args.mu, "--mu")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chash = args_hash(args)

    rows = []
    for seed in seeds:
        spec = _build_spec(args, seed)
        datasets = generate_synthetic_dataset(spec)
        for ablation in ("full", "no-bilevel", "no-decor"):
            aargs = argparse.Namespace(**vars(args))
            aargs.ablation = ablation
            config, model_config, result = _run_one(aargs, seed, datasets)
            final = result.metrics.final()
            rows.append({
                "ablation": ablation, "seed": seed,
                "test_acc": final.test_acc,
                "train_loss": final.train_loss,
                "val_pred_loss": final.val_pred_loss,
                "gap": final.val_pred_loss - final.train_loss,
                "w_var": final.w_var,
            })
            print(f"seed={seed} {ablation}: acc={final.test_acc:.4f} "
                  f"gap={rows[-1]['gap']:.4f}")

    with open(out / "ablate.csv", "w") as fh:
        fh.write(f"# config_hash={chash} mu={args.mu} seeds={args.seeds}\n")
        fh.write("ablation,seed,test_acc,train_loss,val_pred_loss,gap,w_var\n")
        for r in rows:
            fh.write(f"{r['ablation']},{r['seed']},{r['test_acc']:.4f},"
                     f"{r['train_loss']:.6f},{r['val_pred_loss']:.6f},"
                     f"{r['gap']:.6f},{r['w_var']:.6g}\n")
    print(f"ablation results in {out / 'ablate.csv'}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _add_data_flags(p, mu_list=False):
    if mu_list:
        p.add_argument("--mu", default="0.6,0.7,0.8,0.9",
                       help="comma-separated bias ratios to sweep")
    else:
        p.add_argument("--mu", type=float, default=0.8,
                       help="training/validation bias ratio")
    p.add_argument("--test-mu", type=float, default=0.25, dest="test_mu",
                   help="test-split bias ratio")
    p.add_argument("--n-train", type=int, default=400, dest="n_train")
    p.add_argument("--n-val", type=int, default=160, dest="n_val")
    p.add_argument("--n-test", type=int, default=400, dest="n_test")
    p.add_argument("--feature-dim", type=int, default=8, dest="feature_dim")
    p.add_argument("--motif-size", default="5,8", dest="motif_size",
                   help="motif size range 'lo,hi'")
    p.add_argument("--base-size", default="8,14", dest="base_size",
                   help="base graph size range 'lo,hi'")


def _add_train_flags(p):
    p.add_argument("--order", choices=("first", "second", "joint"),
                   default="first")
    p.add_argument("--ablation", choices=("full", "no-bilevel", "no-decor"),
                   default="full")
    p.add_argument("--clusters", type=int, default=4)
    p.add_argument("--queues", type=int, default=4)
    p.add_argument("--alpha", type=float, default=0.9)
    p.add_argument("--eps", type=float, default=1e-2)
    p.add_argument("--eta-theta", type=float, default=1e-2, dest="eta_theta")
    p.add_argument("--eta-w", type=float, default=1e-2, dest="eta_w")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--backbone", choices=("gcn", "gin"), default="gcn")
    p.add_argument("--layer-dims", default="16,16", dest="layer_dims")
    p.add_argument("--recluster", type=int, default=5)
    p.add_argument("--penalize-within", action="store_true",
                   dest="penalize_within",
                   help="penalize same-cluster pairs instead of cross-cluster")
    p.add_argument("--w-pred-coef", type=float, default=0.0, dest="w_pred_coef")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="l2rgnn",
        description="Graph reweighting experiments on motif-biased synthetic data",
    )
    parser.add_argument("--config", default=None,
                        help="flat key=value config file; flags override it")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_data_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one configuration")
    _add_train_flags(p)
    p.add_argument("--data", required=True, help="directory from gen-data")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-mu", help="bias-ratio sweep: backbone vs reweighted")
    _add_data_flags(p, mu_list=True)
    _add_train_flags(p)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_mu)

    p = sub.add_parser("ablate", help="full / no-bilevel / no-decor comparison")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args, _ = _parse_with_config(parser, argv)
        return args.func(args)
    except (InvalidArgumentError, SchemaError, DatasetParseError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3


def _parse_with_config(parser, argv):
    """Two-pass parse so a --config file supplies defaults and flags win."""
    argv = list(sys.argv[1:] if argv is None else argv)
    ns, _ = parser.parse_known_args(argv)
    if getattr(ns, "config", None):
        overrides = read_config_file(ns.config)
        # apply file values as defaults on the subparser actions
        for action in parser._subparsers._group_actions[0].choices.values():
            known = {a.dest for a in action._actions}
            action.set_defaults(**{
                k: _coerce_like(action, k, v)
                for k, v in overrides.items() if k in known
            })
    return parser.parse_args(argv), None


def _coerce_like(subparser, dest, value):
    for action in subparser._actions:
        if action.dest == dest and action.type is not None:
            return action.type(value)
        if action.dest == dest and isinstance(action.const, bool):
            return value.lower() in ("1", "true", "yes")
    return value


if __name__ == "__main__":
    sys.exit(main())
