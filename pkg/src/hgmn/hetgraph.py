"""Typed heterogeneous graphs, metapath schemas, instance enumeration and tokens.

Graph document (UTF-8 JSON)::

    {
      "node_types": [{"name": "author", "feature_dim": 4}, ...],
      "edge_types": [{"name": "writes", "src_type": "author", "dst_type": "paper",
                      "symmetric": true}, ...],
      "nodes": [{"id": 0, "type": "author", "features": [...], "label": 1}, ...],
      "edges": [{"type": "writes", "src": 0, "dst": 3}, ...],
      "metapaths": [{"name": "APA", "node_types": ["author", "paper", "author"],
                     "edge_types": ["writes", "writes"]}],
      "splits": {"train": [...], "val": [...], "test": [...]}
    }

A symmetric edge type stores every edge as two arcs and may be walked in
either direction by a metapath; a directed one only from ``src_type`` to
``dst_type``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import (ContractError, DuplicateEdgeError, DuplicateNodeError, GraphValidationError,
                     RaggedFeaturesError, SignatureError, UnknownTypeError)


@dataclass(frozen=True)
class NodeType:
    name: str
    feature_dim: int


@dataclass(frozen=True)
class EdgeType:
    name: str
    src_type: str
    dst_type: str
    symmetric: bool = False


@dataclass(frozen=True)
class MetapathSchema:
    """``A1 -R1-> A2 -R2-> ... -> A(i+1)``.

    ``forward[j]`` records whether step ``j`` walks edge type ``R(j+1)`` from its
    declared source to its declared target (False: a symmetric type walked
    backwards).
    """

    name: str
    node_types: tuple[str, ...]
    edge_types: tuple[str, ...]
    forward: tuple[bool, ...]

    @property
    def start_type(self) -> str:
        return self.node_types[0]

    def __len__(self) -> int:
        return len(self.node_types)


@dataclass(frozen=True, order=True)
class MetapathInstance:
    nodes: tuple[int, ...]
    schema: str = field(compare=False)

    @property
    def start(self) -> int:
        return self.nodes[0]

    @property
    def end(self) -> int:
        return self.nodes[-1]


@dataclass
class Token:
    """Subgraph rooted at ``node``: its instances under every schema, in schema order."""

    node: int
    instances: dict[str, list[MetapathInstance]]

    @property
    def degenerate(self) -> bool:
        return all(not inst for inst in self.instances.values())

    def all_instances(self) -> list[MetapathInstance]:
        return [m for inst in self.instances.values() for m in inst]

    def neighbors(self, schema: str) -> list[int]:
        """Multiset of end nodes reached under ``schema``."""
        return [m.end for m in self.instances[schema]]


class _Csr:
    __slots__ = ("indptr", "indices")

    def __init__(self, n: int, src: np.ndarray, dst: np.ndarray):
        order = np.lexsort((dst, src))
        src, dst = src[order], dst[order]
        self.indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(self.indptr, src + 1, 1)
        np.cumsum(self.indptr, out=self.indptr)
        self.indices = dst.astype(np.int64)

    def row(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]


class HeteroGraph:
    """Immutable typed graph. Build with :func:`load_graph`."""

    def __init__(self, node_types: Sequence[NodeType], edge_types: Sequence[EdgeType],
                 node_type: np.ndarray, features: Sequence[np.ndarray], labels: np.ndarray,
                 edges: Mapping[str, tuple[np.ndarray, np.ndarray]],
                 metapaths: Sequence[MetapathSchema] = (),
                 splits: Mapping[str, Sequence[int]] | None = None,
                 node_names: Sequence[str | None] | None = None):
        self.node_types = tuple(node_types)
        self.edge_types = tuple(edge_types)
        self.type_index = {t.name: i for i, t in enumerate(self.node_types)}
        self.edge_type_map = {e.name: e for e in self.edge_types}
        self.node_type = np.asarray(node_type, dtype=np.int64)
        self.node_count = int(self.node_type.size)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.type_nodes = [np.flatnonzero(self.node_type == i) for i in range(len(self.node_types))]
        self.local_index = np.empty(self.node_count, dtype=np.int64)
        for ids in self.type_nodes:
            self.local_index[ids] = np.arange(ids.size)
        # per type, rows ordered by node id
        self.type_features = [np.asarray(f, dtype=np.float64) for f in features]
        self.edges = {k: (np.asarray(s, dtype=np.int64), np.asarray(d, dtype=np.int64))
                      for k, (s, d) in edges.items()}
        self._fwd: dict[str, _Csr] = {}
        self._bwd: dict[str, _Csr] = {}
        for et in self.edge_types:
            s, d = self.edges.get(et.name, (np.empty(0, np.int64), np.empty(0, np.int64)))
            if et.symmetric and et.src_type == et.dst_type:
                both_s, both_d = np.concatenate([s, d]), np.concatenate([d, s])
                keep = ~((both_s == both_d) & (np.arange(both_s.size) >= s.size))
                csr = _Csr(self.node_count, both_s[keep], both_d[keep])
                self._fwd[et.name] = self._bwd[et.name] = csr
            else:
                self._fwd[et.name] = _Csr(self.node_count, s, d)
                self._bwd[et.name] = _Csr(self.node_count, d, s)
        self.metapaths = {m.name: m for m in metapaths}
        self.splits = {k: np.asarray(v, dtype=np.int64) for k, v in (splits or {}).items()}
        self.node_names = list(node_names) if node_names is not None else [None] * self.node_count

    @property
    def num_types(self) -> int:
        return len(self.node_types)

    @property
    def num_classes(self) -> int:
        labelled = self.labels[self.labels >= 0]
        return int(labelled.max()) + 1 if labelled.size else 0

    def type_name(self, node: int) -> str:
        return self.node_types[self.node_type[node]].name

    def features(self, node: int) -> np.ndarray:
        return self.type_features[self.node_type[node]][self.local_index[node]]

    def neighbors(self, node: int, edge_type: str, forward: bool = True) -> np.ndarray:
        """Sorted neighbor ids of ``node`` along ``edge_type``."""
        csr = self._fwd[edge_type] if forward else self._bwd[edge_type]
        return csr.row(node)

    def resolve_node(self, ref: str | int) -> int:
        """Node id from an integer id or a node name."""
        if isinstance(ref, str) and ref in self.node_names:
            return self.node_names.index(ref)
        try:
            nid = int(ref)
        except (TypeError, ValueError):
            raise ContractError(f"unknown node {ref!r}") from None
        if not 0 <= nid < self.node_count:
            raise ContractError(f"node id {nid} out of range 0..{self.node_count - 1}")
        return nid

    def schema(self, name: str) -> MetapathSchema:
        try:
            return self.metapaths[name]
        except KeyError:
            raise ContractError(f"unknown metapath {name!r}") from None

    def edge_arcs(self, edge_type: str, forward: bool = True) -> tuple[np.ndarray, np.ndarray]:
        csr = self._fwd[edge_type] if forward else self._bwd[edge_type]
        src = np.repeat(np.arange(self.node_count), np.diff(csr.indptr))
        return src, csr.indices


# ---------------------------------------------------------------- loading

def make_schema(node_types: Sequence[NodeType] | Mapping[str, NodeType],
                edge_types: Mapping[str, EdgeType], name: str,
                path_types: Sequence[str], path_edges: Sequence[str]) -> MetapathSchema:
    known = {t.name for t in (node_types.values() if isinstance(node_types, Mapping) else node_types)}
    if len(path_types) < 2:
        raise GraphValidationError(f"metapath {name!r} needs at least two node types")
    if len(path_edges) != len(path_types) - 1:
        raise GraphValidationError(
            f"metapath {name!r}: {len(path_types)} node types need {len(path_types) - 1} edge types")
    for t in path_types:
        if t not in known:
            raise UnknownTypeError(f"metapath {name!r}: unknown node type {t!r}")
    forward = []
    for j, ename in enumerate(path_edges):
        et = edge_types.get(ename)
        if et is None:
            raise UnknownTypeError(f"metapath {name!r}: unknown edge type {ename!r}")
        step = (path_types[j], path_types[j + 1])
        if step == (et.src_type, et.dst_type):
            forward.append(True)
        elif et.symmetric and step == (et.dst_type, et.src_type):
            forward.append(False)
        else:
            raise SignatureError(
                f"metapath {name!r} step {j}: edge type {ename!r} has signature "
                f"({et.src_type}, {et.dst_type}), metapath needs {step}")
    return MetapathSchema(name, tuple(path_types), tuple(path_edges), tuple(forward))


def load_graph(document: Mapping) -> HeteroGraph:
    """Validate a graph document and build the canonical graph."""
    try:
        return _load_graph(document)
    except GraphValidationError:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise GraphValidationError(f"malformed graph document: {exc!r}") from None


def _load_graph(document: Mapping) -> HeteroGraph:
    if not isinstance(document, Mapping):
        raise GraphValidationError("graph document must be a JSON object")
    nodes = document.get("nodes") or []
    if not nodes:
        raise GraphValidationError("graph has no nodes")

    node_types: list[NodeType] = []
    for entry in document.get("node_types", []):
        nt = NodeType(str(entry["name"]), int(entry.get("feature_dim", 0)))
        if any(t.name == nt.name for t in node_types):
            raise GraphValidationError(f"node type {nt.name!r} declared twice")
        node_types.append(nt)
    type_index = {t.name: i for i, t in enumerate(node_types)}

    edge_types: dict[str, EdgeType] = {}
    for entry in document.get("edge_types", []):
        et = EdgeType(str(entry["name"]), str(entry["src_type"]), str(entry["dst_type"]),
                      bool(entry.get("symmetric", False)))
        if et.name in edge_types:
            raise GraphValidationError(f"edge type {et.name!r} declared twice")
        for t in (et.src_type, et.dst_type):
            if t not in type_index:
                raise UnknownTypeError(f"edge type {et.name!r} references unknown node type {t!r}")
        edge_types[et.name] = et

    n = len(nodes)
    node_type = np.full(n, -1, dtype=np.int64)
    labels = np.full(n, -1, dtype=np.int64)
    feats: list[list] = [None] * n  # type: ignore[list-item]
    names: list[str | None] = [None] * n
    for entry in nodes:
        nid = entry.get("id")
        if not isinstance(nid, int) or isinstance(nid, bool) or not 0 <= nid < n:
            raise GraphValidationError(f"node id {nid!r} is not in the dense range 0..{n - 1}")
        if node_type[nid] != -1:
            raise DuplicateNodeError(f"duplicate node id {nid}")
        tname = entry.get("type")
        if tname not in type_index:
            raise UnknownTypeError(f"node {nid}: unknown node type {tname!r}")
        ti = type_index[tname]
        f = entry.get("features", [])
        if len(f) != node_types[ti].feature_dim:
            raise RaggedFeaturesError(
                f"node {nid}: {len(f)} features, type {tname!r} declares {node_types[ti].feature_dim}")
        node_type[nid] = ti
        feats[nid] = f
        if entry.get("name") is not None:
            names[nid] = str(entry["name"])
        if entry.get("label") is not None:
            lab = entry["label"]
            if not isinstance(lab, int) or lab < 0:
                raise GraphValidationError(f"node {nid}: label must be a non-negative int, got {lab!r}")
            labels[nid] = lab

    features = []
    for ti, nt in enumerate(node_types):
        ids = np.flatnonzero(node_type == ti)
        arr = np.array([feats[i] for i in ids], dtype=np.float64).reshape(ids.size, nt.feature_dim)
        if not np.isfinite(arr).all():
            raise GraphValidationError(f"node type {nt.name!r}: non-finite feature values")
        features.append(arr)

    grouped: dict[str, tuple[list[int], list[int]]] = {name: ([], []) for name in edge_types}
    seen: set[tuple] = set()
    for k, entry in enumerate(document.get("edges", [])):
        ename = entry.get("type")
        et = edge_types.get(ename)
        if et is None:
            raise UnknownTypeError(f"edge #{k}: unknown edge type {ename!r}")
        s, d = entry.get("src"), entry.get("dst")
        for end in (s, d):
            if not isinstance(end, int) or not 0 <= end < n:
                raise GraphValidationError(f"edge #{k} ({ename}): node id {end!r} out of range")
        st, dt = node_types[node_type[s]].name, node_types[node_type[d]].name
        if (st, dt) != (et.src_type, et.dst_type):
            if not (et.symmetric and (dt, st) == (et.src_type, et.dst_type)):
                raise SignatureError(
                    f"edge #{k} {s}->{d}: ({st}, {dt}) does not match edge type {ename!r} "
                    f"signature ({et.src_type}, {et.dst_type})")
            s, d = d, s
        key = (ename, s, d)
        if et.symmetric and et.src_type == et.dst_type:
            key = (ename, min(s, d), max(s, d))
        if key in seen:
            raise DuplicateEdgeError(f"edge #{k}: duplicate {ename!r} edge between {s} and {d}")
        seen.add(key)
        grouped[ename][0].append(s)
        grouped[ename][1].append(d)
    edges = {k: (np.array(s, dtype=np.int64), np.array(d, dtype=np.int64))
             for k, (s, d) in grouped.items()}

    metapaths = [make_schema(node_types, edge_types, str(m["name"]), list(m["node_types"]),
                             list(m["edge_types"]))
                 for m in document.get("metapaths", [])]
    if len({m.name for m in metapaths}) != len(metapaths):
        raise GraphValidationError("duplicate metapath name")

    splits = {}
    for part, ids in (document.get("splits") or {}).items():
        for i in ids:
            if not isinstance(i, int) or not 0 <= i < n:
                raise GraphValidationError(f"split {part!r}: node id {i!r} out of range")
            if labels[i] < 0:
                raise GraphValidationError(f"split {part!r}: node {i} has no label")
        splits[part] = list(ids)
    parts = list(splits.values())
    for a in range(len(parts)):
        for b in range(a + 1, len(parts)):
            if set(parts[a]) & set(parts[b]):
                raise GraphValidationError("splits are not disjoint")

    named = [x for x in names if x is not None]
    if len(set(named)) != len(named):
        raise DuplicateNodeError("node names must be unique")

    return HeteroGraph(node_types, list(edge_types.values()), node_type, features, labels, edges,
                       metapaths, splits, names)


def load_graph_file(path: str | Path) -> HeteroGraph:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise GraphValidationError(f"{path}: not valid JSON ({exc})") from None
    return load_graph(doc)


def to_document(g: HeteroGraph) -> dict:
    """Inverse of :func:`load_graph` (edges listed in canonical order)."""
    nodes = []
    for i in range(g.node_count):
        entry = {"id": i, "type": g.type_name(i), "features": g.features(i).tolist()}
        if g.node_names[i] is not None:
            entry["name"] = g.node_names[i]
        if g.labels[i] >= 0:
            entry["label"] = int(g.labels[i])
        nodes.append(entry)
    edges = []
    for et in g.edge_types:
        s, d = g.edges[et.name]
        for a, b in sorted(zip(s.tolist(), d.tolist())):
            edges.append({"type": et.name, "src": a, "dst": b})
    return {
        "node_types": [{"name": t.name, "feature_dim": t.feature_dim} for t in g.node_types],
        "edge_types": [{"name": e.name, "src_type": e.src_type, "dst_type": e.dst_type,
                        "symmetric": e.symmetric} for e in g.edge_types],
        "nodes": nodes,
        "edges": edges,
        "metapaths": [{"name": m.name, "node_types": list(m.node_types),
                       "edge_types": list(m.edge_types)} for m in g.metapaths.values()],
        "splits": {k: v.tolist() for k, v in g.splits.items()},
    }


# ---------------------------------------------------------------- enumeration

def _walks(g: HeteroGraph, schema: MetapathSchema, start: int,
           simple_paths_only: bool) -> Iterator[tuple[int, ...]]:
    # DFS over ascending neighbor lists yields walks in lexicographic order
    steps = list(zip(schema.edge_types, schema.forward))
    path = [start]

    def extend(depth: int):
        if depth == len(steps):
            yield tuple(path)
            return
        ename, fwd = steps[depth]
        for nxt in g.neighbors(path[-1], ename, fwd).tolist():
            if simple_paths_only and nxt in path:
                continue
            path.append(nxt)
            yield from extend(depth + 1)
            path.pop()

    yield from extend(0)


def enumerate_instances(g: HeteroGraph, schema: MetapathSchema, start: int,
                        limit: int | None = None,
                        simple_paths_only: bool = False) -> list[MetapathInstance]:
    """All typed walks from ``start`` following ``schema``, lexicographically sorted.

    ``limit`` keeps only the first ``limit`` walks of that order.
    """
    if not 0 <= start < g.node_count:
        raise ContractError(f"node {start} out of range")
    if g.type_name(start) != schema.start_type:
        raise ContractError(
            f"node {start} has type {g.type_name(start)!r}, metapath {schema.name!r} "
            f"starts at {schema.start_type!r}")
    out = []
    for walk in _walks(g, schema, start, simple_paths_only):
        if limit is not None and len(out) >= limit:
            break
        out.append(MetapathInstance(walk, schema.name))
    return out


def _count_walks(g: HeteroGraph, schema: MetapathSchema, start: int) -> int:
    frontier = {start: 1}
    for ename, fwd in zip(schema.edge_types, schema.forward):
        nxt: dict[int, int] = {}
        for node, c in frontier.items():
            for m in g.neighbors(node, ename, fwd).tolist():
                nxt[m] = nxt.get(m, 0) + c
        frontier = nxt
    return sum(frontier.values())


def count_instances(g: HeteroGraph, schemas: Sequence[MetapathSchema], node: int,
                    simple_paths_only: bool = False) -> int:
    """Number of instances rooted at ``node`` summed over schemas that start at its type."""
    total = 0
    tname = g.type_name(node)
    for schema in schemas:
        if schema.start_type != tname:
            continue
        if simple_paths_only:
            total += sum(1 for _ in _walks(g, schema, node, True))
        else:
            total += _count_walks(g, schema, node)
    return total


def build_token(g: HeteroGraph, schemas: Sequence[MetapathSchema], node: int,
                max_instances: int | None = None, simple_paths_only: bool = False) -> Token:
    tname = g.type_name(node)
    instances = {}
    for schema in schemas:
        if schema.start_type == tname:
            instances[schema.name] = enumerate_instances(g, schema, node, max_instances,
                                                         simple_paths_only)
        else:
            instances[schema.name] = []
    return Token(node, instances)


def build_tokens(g: HeteroGraph, schemas: Sequence[MetapathSchema],
                 max_instances: int | None = None, simple_paths_only: bool = False) -> list[Token]:
    return [build_token(g, schemas, i, max_instances, simple_paths_only)
            for i in range(g.node_count)]


def metapath_graph(g: HeteroGraph, schema: MetapathSchema) -> frozenset[int]:
    """Node ids appearing on any instance of ``schema``."""
    members: set[int] = set()
    for s in g.type_nodes[g.type_index[schema.start_type]].tolist():
        for walk in _walks(g, schema, s, False):
            members.update(walk)
    return frozenset(members)


def degree(g: HeteroGraph, node: int) -> int:
    """Incident edges over all edge types (a self-loop counts twice)."""
    if not 0 <= node < g.node_count:
        raise ContractError(f"node {node} out of range [0, {g.node_count})")
    total = 0
    for s, d in g.edges.values():
        total += int(np.count_nonzero(s == node)) + int(np.count_nonzero(d == node))
    return total


def degrees(g: HeteroGraph) -> np.ndarray:
    out = np.zeros(g.node_count, dtype=np.int64)
    for s, d in g.edges.values():
        np.add.at(out, s, 1)
        np.add.at(out, d, 1)
    return out
