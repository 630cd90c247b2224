"""Versioned JSON checkpoints: named parameter tensors, the frozen random
Fourier bank, per-graph weight parameters, and the cluster assignment.

Evaluation must reuse the training bank, so the bank travels with the
parameters.
"""
from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np

from .decorrelation import ClusterAssignment, RFFBank
from .errors import SchemaError
from .gnn import ModelConfig
from .tape import Tensor

FORMAT_VERSION = 1


def save_checkpoint(path, params, model_config, bank, rho, clusters,
                    config_hash="", seed=None):
    blob = {
        "version": FORMAT_VERSION,
        "config_hash": config_hash,
        "seed": seed,
        "model_config": asdict(model_config),
        "params": {
            name: {"shape": list(t.data.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in params.items()
        },
        "rff_bank": bank.to_dict(),
        "rho": np.asarray(rho).tolist(),
        "clusters": clusters.to_dict() if clusters is not None else None,
    }
    with open(path, "w") as fh:
        json.dump(blob, fh)


def load_checkpoint(path):
    with open(path) as fh:
        blob = json.load(fh)
    if blob.get("version") != FORMAT_VERSION:
        raise SchemaError(f"unsupported checkpoint version {blob.get('version')}")
    mc = blob["model_config"]
    mc["layer_dims"] = tuple(mc["layer_dims"])
    model_config = ModelConfig(**mc)
    params = {
        name: Tensor(np.asarray(rec["data"]).reshape(rec["shape"]))
        for name, rec in blob["params"].items()
    }
    bank = RFFBank.from_dict(blob["rff_bank"])
    rho = np.asarray(blob["rho"], dtype=np.float64)
    clusters = (ClusterAssignment.from_dict(blob["clusters"])
                if blob.get("clusters") else None)
    meta = {"config_hash": blob.get("config_hash", ""), "seed": blob.get("seed")}
    return params, model_config, bank, rho, clusters, meta
