"""Graph-to-sequence ordering.

Inner order: nodes grouped by type, ascending metapath-instance count.
Outer order: all nodes, ascending total degree. Ties break by ascending node
id, so the most connected nodes sit at the end of a causal scan and see the
longest context.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError
from .hetgraph import HeteroGraph, MetapathSchema, count_instances, degrees
from .tensor import Tensor

ORDER_MODES = ("count", "degree", "random")


@dataclass
class OrderedGroups:
    groups: dict[str, np.ndarray]   # type name -> node ids in sequence order
    keys: dict[str, np.ndarray]     # sort key of each sequence position

    def positions(self, type_name: str) -> dict[int, int]:
        """Inverse permutation of one group: node id -> sequence position."""
        return {int(n): i for i, n in enumerate(self.groups[type_name])}

    def permutation(self) -> np.ndarray:
        """All groups concatenated in type order; a permutation of the node ids."""
        parts = [g for g in self.groups.values() if g.size]
        return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)


@dataclass
class GlobalOrder:
    order: np.ndarray
    keys: np.ndarray

    @property
    def inverse(self) -> np.ndarray:
        return inverse_permutation(self.order)


def inverse_permutation(order: np.ndarray) -> np.ndarray:
    order = np.asarray(order, dtype=np.int64)
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    return inv


def _sorted_by_key(ids: np.ndarray, keys: np.ndarray) -> np.ndarray:
    # lexsort: last key is primary
    return ids[np.lexsort((ids, keys))]


def instance_counts(g: HeteroGraph, schemas: Sequence[MetapathSchema],
                    simple_paths_only: bool = False) -> np.ndarray:
    return np.array([count_instances(g, schemas, i, simple_paths_only)
                     for i in range(g.node_count)], dtype=np.int64)


def inner_order(g: HeteroGraph, schemas: Sequence[MetapathSchema], mode: str = "count",
                seed: int = 0, counts: np.ndarray | None = None) -> OrderedGroups:
    if mode not in ("count", "random"):
        raise ContractError(f"inner order mode must be 'count' or 'random', got {mode!r}")
    if counts is None:
        counts = instance_counts(g, schemas)
    rng = np.random.default_rng(seed)
    groups, keys = {}, {}
    for nt, ids in zip(g.node_types, g.type_nodes):
        if mode == "count":
            seq = _sorted_by_key(ids, counts[ids])
        else:
            seq = rng.permutation(ids)
        groups[nt.name] = seq
        keys[nt.name] = counts[seq]
    return OrderedGroups(groups, keys)


def outer_order(g: HeteroGraph, mode: str = "degree", seed: int = 0) -> GlobalOrder:
    if mode not in ("degree", "random"):
        raise ContractError(f"outer order mode must be 'degree' or 'random', got {mode!r}")
    deg = degrees(g)
    ids = np.arange(g.node_count)
    if mode == "degree":
        seq = _sorted_by_key(ids, deg)
    else:
        seq = np.random.default_rng(seed).permutation(ids)
    return GlobalOrder(seq, deg[seq])


def apply_order(order, vectors):
    """Gather per-node vectors into sequence order.

    ``vectors`` is an (n, d) array or Tensor indexed by node id, or a mapping
    node id -> vector.
    """
    order = np.asarray(order, dtype=np.int64)
    if isinstance(vectors, dict):
        missing = [int(i) for i in order if int(i) not in vectors]
        if missing:
            raise ContractError(f"no vector for node(s) {missing[:5]}")
        return np.stack([np.asarray(vectors[int(i)]) for i in order]) if order.size else np.empty((0,))
    n = vectors.shape[0]
    if order.size and (order.min() < 0 or order.max() >= n):
        raise ContractError(f"order references node ids outside [0, {n})")
    if isinstance(vectors, Tensor):
        return T.gather_rows(vectors, order)
    return np.asarray(vectors)[order]


def scatter_back(order, sequence):
    """Undo :func:`apply_order` for a full permutation of ``0..n-1``."""
    order = np.asarray(order, dtype=np.int64)
    if not np.array_equal(np.sort(order), np.arange(order.size)):
        raise ContractError("scatter_back needs a permutation of all node ids")
    if sequence.shape[0] != order.size:
        raise ContractError(f"sequence has {sequence.shape[0]} rows, order has {order.size}")
    inv = inverse_permutation(order)
    if isinstance(sequence, Tensor):
        return T.gather_rows(sequence, inv)
    return np.asarray(sequence)[inv]
