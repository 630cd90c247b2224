"""Graph data model, motif-injected synthetic datasets, and JSON-lines I/O.

Binary graph classification with a planted causal structure: every positive
graph contains a wheel motif, negatives never do. A tunable fraction of the
positives additionally receive a star motif, which creates a spurious
star/label association whose strength differs between training and test
splits.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import DatasetParseError, InvalidArgumentError, SchemaError

MOTIF_KINDS = ("wheel", "star", "circle", "grid", "diamond")
NONCAUSAL_KINDS = ("star", "circle", "grid", "diamond")

_MIN_SIZE = {"wheel": 4, "star": 3, "circle": 3, "grid": 4, "diamond": 4}


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected graph with per-node features and a binary label.

    Edges are stored as a frozenset of sorted index pairs, no self-loops,
    no duplicates. Self-loops are added by normalization at forward time,
    never stored. Instances compare by identity so they can key caches.
    """

    node_count: int
    edges: frozenset
    features: np.ndarray  # (node_count, f)
    label: int
    motifs: tuple = ()

    def __post_init__(self):
        if self.node_count <= 0:
            raise InvalidArgumentError("node_count must be positive")
        for u, v in self.edges:
            if u == v:
                raise InvalidArgumentError(f"self-loop ({u},{v}) not allowed")
            if not (0 <= u < self.node_count and 0 <= v < self.node_count):
                raise InvalidArgumentError(f"edge ({u},{v}) out of range")
            if u > v:
                raise InvalidArgumentError("edges must be stored as (min, max) pairs")
        if self.features.shape[0] != self.node_count:
            raise InvalidArgumentError("one feature row per node required")
        if self.label not in (0, 1):
            raise InvalidArgumentError("label must be 0 or 1")

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def adjacency(self):
        a = np.zeros((self.node_count, self.node_count))
        for u, v in self.edges:
            a[u, v] = 1.0
            a[v, u] = 1.0
        return a

    def permuted(self, perm):
        """Relabel nodes by perm (new index = perm[old index])."""
        perm = np.asarray(perm)
        edges = frozenset(
            (min(perm[u], perm[v]), max(perm[u], perm[v])) for u, v in self.edges
        )
        feats = np.empty_like(self.features)
        feats[perm] = self.features
        return Graph(self.node_count, edges, feats, self.label, self.motifs)


@dataclass(frozen=True)
class SyntheticSpec:
    n_train: int = 400
    n_val: int = 160
    n_test: int = 400
    bias_ratio: float = 0.8
    test_bias_ratio: float = 0.25
    motif_size_range: tuple = (5, 8)
    base_graph_size_range: tuple = (8, 14)
    feature_dim: int = 8
    edge_prob: float = 0.15
    seed: int = 0

    def validate(self):
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) <= 0:
                raise InvalidArgumentError(f"{name} must be positive")
        for name in ("bias_ratio", "test_bias_ratio"):
            r = getattr(self, name)
            if not 0.0 <= r <= 1.0:
                raise InvalidArgumentError(f"{name} must lie in [0, 1]")
        lo, hi = self.motif_size_range
        if lo > hi or hi < 3:
            raise InvalidArgumentError("motif_size_range is empty or infeasible")
        blo, bhi = self.base_graph_size_range
        if blo > bhi or blo < 2:
            raise InvalidArgumentError("base_graph_size_range is empty or infeasible")
        if self.feature_dim <= 0:
            raise InvalidArgumentError("feature_dim must be positive")
        # grid motifs need a composite size r*c with r, c >= 2
        if not _composites_in(lo, hi):
            raise InvalidArgumentError(
                "motif_size_range contains no composite size for grid motifs"
            )
        if max(lo, 4) > hi:
            raise InvalidArgumentError("motif_size_range cannot fit a wheel motif")


@dataclass
class GraphDataset:
    graphs: list
    split_tag: str = "train"
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.graphs)

    def __getitem__(self, i):
        return self.graphs[i]

    def labels(self):
        return np.array([g.label for g in self.graphs], dtype=np.intp)

    @property
    def feature_dim(self):
        return self.graphs[0].feature_dim if self.graphs else 0


def _composites_in(lo, hi):
    return [s for s in range(max(lo, 4), hi + 1) if _grid_dims(s) is not None]


def _grid_dims(size):
    """Largest r <= sqrt(size) with r >= 2 dividing size, or None."""
    for r in range(int(np.sqrt(size)), 1, -1):
        if size % r == 0:
            return r, size // r
    return None


# ---------------------------------------------------------------------------
# motif topologies


def generate_motif(kind, size, rng=None):
    """Return the canonical motif as (node_count, edge set).

    Node 0 is the hub for wheel and star; grid nodes are laid out row-major.
    Features are not assigned here; the assembler fills them in.
    """
    if kind not in MOTIF_KINDS:
        raise InvalidArgumentError(f"unknown motif kind {kind!r}")
    if size < _MIN_SIZE[kind]:
        raise InvalidArgumentError(
            f"{kind} motif needs at least {_MIN_SIZE[kind]} nodes, got {size}"
        )
    edges = set()
    if kind == "wheel":
        rim = list(range(1, size))
        for i, u in enumerate(rim):
            edges.add(_e(u, rim[(i + 1) % len(rim)]))
            edges.add(_e(0, u))
    elif kind == "star":
        for u in range(1, size):
            edges.add(_e(0, u))
    elif kind == "circle":
        for u in range(size):
            edges.add(_e(u, (u + 1) % size))
    elif kind == "grid":
        dims = _grid_dims(size)
        if dims is None:
            raise InvalidArgumentError(f"grid motif size {size} is not composite")
        r, c = dims
        for i in range(r):
            for j in range(c):
                n = i * c + j
                if j + 1 < c:
                    edges.add(_e(n, n + 1))
                if i + 1 < r:
                    edges.add(_e(n, n + c))
    else:  # diamond: ring of middle nodes, alternating spokes to two poles
        middles = list(range(2, size))
        if len(middles) >= 3:
            for i, m in enumerate(middles):
                edges.add(_e(m, middles[(i + 1) % len(middles)]))
                edges.add(_e(m, i % 2))
        else:
            for m in middles:
                edges.add(_e(0, m))
                edges.add(_e(1, m))
    return size, frozenset(edges)


def _e(u, v):
    return (u, v) if u < v else (v, u)


# ---------------------------------------------------------------------------
# synthetic dataset generation


def generate_synthetic_dataset(spec):
    """Build (train, val, test) datasets from a SyntheticSpec.

    Train and val use spec.bias_ratio, test uses spec.test_bias_ratio.
    Regeneration with the same spec is byte-identical after serialization.
    """
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    splits = []
    for tag, n, ratio, ss in zip(
        ("train", "val", "test"),
        (spec.n_train, spec.n_val, spec.n_test),
        (spec.bias_ratio, spec.bias_ratio, spec.test_bias_ratio),
        root.spawn(3),
    ):
        splits.append(_generate_split(spec, tag, n, ratio, ss))
    return tuple(splits)


def _generate_split(spec, tag, n, bias_ratio, seed_seq):
    n_pos = n // 2
    n_starred = int(np.floor(bias_ratio * n_pos))
    plan_rng = np.random.default_rng(seed_seq.spawn(1)[0])
    # which positives also carry the star motif
    starred = set(plan_rng.choice(n_pos, size=n_starred, replace=False).tolist())

    graphs = []
    child_seeds = seed_seq.spawn(n)
    pos_seen = 0
    non_star = tuple(k for k in NONCAUSAL_KINDS if k != "star")
    for i in range(n):
        label = 1 if i < n_pos else 0
        rng = np.random.default_rng(child_seeds[i])
        if label == 1:
            # every positive carries a companion motif next to its wheel;
            # exactly floor(bias * n_pos) of them get the star
            if pos_seen in starred:
                motifs = ["wheel", "star"]
            else:
                motifs = ["wheel", non_star[rng.integers(len(non_star))]]
            pos_seen += 1
        else:
            motifs = [NONCAUSAL_KINDS[rng.integers(len(NONCAUSAL_KINDS))]]
        graphs.append(_assemble_graph(spec, motifs, label, rng))

    # deterministic shuffle so labels are interleaved
    order_rng = np.random.default_rng(seed_seq.spawn(2)[1])
    order = order_rng.permutation(n)
    graphs = [graphs[j] for j in order]
    prov = dict(asdict(spec), split_tag=tag, bias_ratio_effective=bias_ratio)
    return GraphDataset(graphs, split_tag=tag, provenance=prov)


def _assemble_graph(spec, motifs, label, rng):
    lo, hi = spec.base_graph_size_range
    n_base = int(rng.integers(lo, hi + 1))
    edges = set()
    # Erdos-Renyi base over the size range; topology is an artifact choice
    for u in range(n_base):
        for v in range(u + 1, n_base):
            if rng.random() < spec.edge_prob:
                edges.add((u, v))

    n_total = n_base
    mlo, mhi = spec.motif_size_range
    for kind in motifs:
        if kind == "grid":
            sizes = _composites_in(mlo, mhi)
        else:
            sizes = list(range(max(mlo, _MIN_SIZE[kind]), mhi + 1))
        size = int(sizes[rng.integers(len(sizes))])
        m_nodes, m_edges = generate_motif(kind, size)
        offset = n_total
        for u, v in sorted(m_edges):
            edges.add((u + offset, v + offset))
        # single bridge edge keeps the motif intact and identifiable
        anchor = int(rng.integers(n_base))
        port = offset + int(rng.integers(m_nodes))
        edges.add(_e(anchor, port))
        n_total += m_nodes

    feats = rng.uniform(0.0, 1.0, size=(n_total, spec.feature_dim))
    return Graph(n_total, frozenset(edges), feats, label, tuple(motifs))


# ---------------------------------------------------------------------------
# JSON-lines I/O
#
# One graph per line:
#   {"n": int, "edges": [[u,v],...], "x": [[f floats]...], "y": 0|1,
#    "motifs": ["wheel","star",...]}

_REQUIRED_FIELDS = ("n", "edges", "x", "y")


def save_dataset(dataset, path):
    with open(path, "w") as fh:
        for g in dataset.graphs:
            rec = {
                "n": g.node_count,
                "edges": [[u, v] for u, v in sorted(g.edges)],
                "x": [[float(x) for x in row] for row in g.features],
                "y": int(g.label),
                "motifs": list(g.motifs),
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_dataset(path, split_tag="train"):
    graphs = []
    feature_dim = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(f"invalid JSON ({exc.msg})", line=lineno)
            for field_name in _REQUIRED_FIELDS:
                if field_name not in rec:
                    raise DatasetParseError(
                        f"record missing {field_name!r} field", line=lineno
                    )
            feats = np.asarray(rec["x"], dtype=np.float64)
            if feats.ndim != 2 or feats.shape[0] != rec["n"]:
                raise DatasetParseError(
                    "feature matrix shape does not match node count", line=lineno
                )
            if feature_dim is None:
                feature_dim = feats.shape[1]
            elif feats.shape[1] != feature_dim:
                raise SchemaError(
                    f"feature dimension mismatch at line {lineno}: "
                    f"{feats.shape[1]} != {feature_dim}"
                )
            edges = frozenset(_e(int(u), int(v)) for u, v in rec["edges"])
            graphs.append(
                Graph(int(rec["n"]), edges, feats, int(rec["y"]),
                      tuple(rec.get("motifs", ())))
            )
    if not graphs:
        warnings.warn(f"empty dataset loaded from {path}")
    return GraphDataset(graphs, split_tag=split_tag, provenance={"path": str(path)})
