"""Planted-signal heterogeneous graphs for end-to-end learnability checks.

Two node types: labelled ``item`` nodes and unlabelled ``context`` nodes.
Context ``j`` belongs to hidden class ``j % num_classes`` and its features sit
near that class's centroid; item features are pure noise. Each item link goes
to a context of the item's own class with probability ``signal_strength`` and
to a uniformly random context otherwise, so the item-context-item metapath
is the only route by which class information reaches an item.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ContractError, GenerationError
from .hetgraph import HeteroGraph, load_graph

MAX_ATTEMPTS = 10


@dataclass
class SyntheticSpec:
    node_counts: dict[str, int] = field(default_factory=lambda: {"item": 200, "context": 100})
    # per-pair link probability for each edge type
    edge_densities: dict[str, float] = field(
        default_factory=lambda: {"item_context": 0.06, "context_context": 0.02})
    num_classes: int = 3
    signal_strength: float = 0.9
    feature_dims: dict[str, int] = field(default_factory=lambda: {"item": 8, "context": 8})
    centroid_scale: float = 2.0
    feature_noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if set(self.node_counts) != {"item", "context"}:
            raise ContractError("node_counts needs exactly 'item' and 'context'")
        if set(self.feature_dims) != {"item", "context"}:
            raise ContractError("feature_dims needs exactly 'item' and 'context'")
        if set(self.edge_densities) != {"item_context", "context_context"}:
            raise ContractError("edge_densities needs exactly 'item_context' and 'context_context'")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise ContractError(f"signal_strength must lie in [0, 1], got {self.signal_strength}")
        if self.num_classes < 2:
            raise ContractError("num_classes must be at least 2")
        if self.node_counts["item"] < 5:
            raise ContractError("need at least 5 items for a 60/20/20 split")
        if self.node_counts["context"] < self.num_classes:
            raise ContractError("need at least one context per class")
        if min(self.feature_dims.values()) < 1:
            raise ContractError("feature dims must be positive")
        for k, p in self.edge_densities.items():
            if not 0.0 <= p <= 1.0:
                raise ContractError(f"edge density {k} must lie in [0, 1], got {p}")

    @classmethod
    def from_dict(cls, values: dict) -> "SyntheticSpec":
        unknown = set(values) - {f.name for f in fields(cls)}
        if unknown:
            raise ContractError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        return asdict(self)


def load_spec(path: str | Path) -> SyntheticSpec:
    try:
        values = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(values, dict):
        raise ContractError(f"{path}: expected a JSON object")
    return SyntheticSpec.from_dict(values)


def _attempt(spec: SyntheticSpec, rng: np.random.Generator) -> dict | None:
    n_item, n_ctx = spec.node_counts["item"], spec.node_counts["context"]
    C = spec.num_classes
    ctx_class = np.arange(n_ctx) % C
    by_class = [np.flatnonzero(ctx_class == c) for c in range(C)]
    item_class = rng.permutation(np.arange(n_item) % C)

    links: list[tuple[int, int]] = []
    for i in range(n_item):
        k = int(rng.binomial(n_ctx, spec.edge_densities["item_context"]))
        if k == 0:
            return None
        chosen: set[int] = set()
        for _ in range(k):
            if rng.random() < spec.signal_strength:
                c = int(rng.choice(by_class[item_class[i]]))
            else:
                c = int(rng.integers(n_ctx))
            chosen.add(c)
        links += [(i, n_item + c) for c in sorted(chosen)]

    p = spec.edge_densities["context_context"]
    hits = rng.random((n_ctx, n_ctx)) < p
    ctx_links = [(n_item + a, n_item + b) for a, b in zip(*np.nonzero(np.triu(hits, 1)))]

    d_item, d_ctx = spec.feature_dims["item"], spec.feature_dims["context"]
    centroids = np.zeros((C, d_ctx))
    for c in range(C):
        centroids[c, c % d_ctx] = spec.centroid_scale * (1 if c < d_ctx else -1)
    x_item = rng.normal(0.0, spec.feature_noise, (n_item, d_item))
    x_ctx = centroids[ctx_class] + rng.normal(0.0, spec.feature_noise, (n_ctx, d_ctx))

    nodes = [{"id": i, "type": "item", "features": x_item[i].tolist(), "label": int(item_class[i])}
             for i in range(n_item)]
    nodes += [{"id": n_item + j, "type": "context", "features": x_ctx[j].tolist()}
              for j in range(n_ctx)]

    perm = rng.permutation(n_item)
    a, b = int(0.6 * n_item), int(0.8 * n_item)
    splits = {"train": sorted(perm[:a].tolist()), "val": sorted(perm[a:b].tolist()),
              "test": sorted(perm[b:].tolist())}
    return {
        "node_types": [{"name": "item", "feature_dim": d_item},
                       {"name": "context", "feature_dim": d_ctx}],
        "edge_types": [
            {"name": "item_context", "src_type": "item", "dst_type": "context", "symmetric": True},
            {"name": "context_context", "src_type": "context", "dst_type": "context",
             "symmetric": True}],
        "nodes": nodes,
        "edges": [{"type": "item_context", "src": s, "dst": d} for s, d in links]
        + [{"type": "context_context", "src": int(s), "dst": int(d)} for s, d in ctx_links],
        "metapaths": [
            {"name": "ICI", "node_types": ["item", "context", "item"],
             "edge_types": ["item_context", "item_context"]},
            {"name": "CIC", "node_types": ["context", "item", "context"],
             "edge_types": ["item_context", "item_context"]}],
        "splits": splits,
    }


def generate(spec: SyntheticSpec) -> dict:
    """Graph document for ``spec``; identical seeds give identical documents.

    An attempt fails when some item draws no links (and so has no
    item-context-item instance); the next attempt reseeds from ``spec.seed``.
    """
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng([spec.seed, attempt])
        doc = _attempt(spec, rng)
        if doc is not None:
            return doc
    raise GenerationError(
        f"no valid graph after {MAX_ATTEMPTS} attempts: some item drew no links; "
        "increase the item_context density")


def generate_graph(spec: SyntheticSpec) -> HeteroGraph:
    return load_graph(generate(spec))


def dumps_document(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def label_agreement(g: HeteroGraph, schema: str = "ICI", samples: int | None = None,
                    seed: int = 0) -> float:
    """Fraction of (item, metapath neighbour) pairs with equal labels.

    Neighbours exclude the item itself. With ``samples`` set, a seeded random
    subset of pairs is used.
    """
    from .hetgraph import enumerate_instances

    sch = g.schema(schema)
    pairs = []
    for node in g.type_nodes[g.type_index[sch.start_type]]:
        for inst in enumerate_instances(g, sch, int(node)):
            if inst.end != inst.start:
                pairs.append((inst.start, inst.end))
    if not pairs:
        raise ContractError(f"metapath {schema!r} has no non-trivial instances")
    pairs = np.asarray(pairs)
    if samples is not None and samples < len(pairs):
        pairs = pairs[np.random.default_rng(seed).choice(len(pairs), samples, replace=False)]
    return float(np.mean(g.labels[pairs[:, 0]] == g.labels[pairs[:, 1]]))
