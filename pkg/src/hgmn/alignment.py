"""Heterogeneity alignment: collapse each token into one vector of width ``d'``.

Per node: type-specific projection, then for every metapath an attention
weighted sum over its instances (each instance encoded as the mean of its
projected node vectors), then semantic attention across metapaths.

Two entry points compute the same function: :func:`align_token` works on one
token at a time and is the readable reference; :func:`align_all` batches every
token of a graph through segment operations and is what training uses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .hetgraph import HeteroGraph, MetapathInstance, MetapathSchema, Token
from .tensor import Tensor

INSTANCE_ENCODERS = ("mean", "linear")


@dataclass
class AlignmentParams:
    hidden_dim: int
    num_heads: int
    proj: dict[str, tuple[Tensor, Tensor]]
    att: dict[str, Tensor]
    sem_W: Tensor
    sem_b: Tensor
    sem_q: Tensor
    encoder: tuple[Tensor, Tensor] | None = None
    type_dims: dict[str, int] = field(default_factory=dict)

    @classmethod
    def init(cls, g: HeteroGraph, schemas: Sequence[MetapathSchema], hidden_dim: int,
             num_heads: int, attention_dim: int, instance_encoder: str = "mean",
             rng: np.random.Generator | None = None) -> "AlignmentParams":
        if hidden_dim % num_heads:
            raise ContractError(f"hidden_dim {hidden_dim} not divisible by num_heads {num_heads}")
        if instance_encoder not in INSTANCE_ENCODERS:
            raise ContractError(f"unknown instance encoder {instance_encoder!r}")
        rng = rng if rng is not None else np.random.default_rng(0)

        def uniform(shape, fan_in, name):
            bound = 1.0 / math.sqrt(max(fan_in, 1))
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)

        proj = {}
        for nt in g.node_types:
            proj[nt.name] = (uniform((hidden_dim, nt.feature_dim), nt.feature_dim, f"align.proj.{nt.name}.W"),
                             uniform((hidden_dim,), nt.feature_dim, f"align.proj.{nt.name}.b"))
        att = {s.name: uniform((2 * hidden_dim,), 2 * hidden_dim // num_heads, f"align.att.{s.name}")
               for s in schemas}
        encoder = None
        if instance_encoder == "linear":
            encoder = (uniform((hidden_dim, hidden_dim), hidden_dim, "align.encoder.W"),
                       uniform((hidden_dim,), hidden_dim, "align.encoder.b"))
        return cls(
            hidden_dim=hidden_dim, num_heads=num_heads, proj=proj, att=att,
            sem_W=uniform((attention_dim, hidden_dim), hidden_dim, "align.sem.W"),
            sem_b=uniform((attention_dim,), hidden_dim, "align.sem.b"),
            sem_q=uniform((attention_dim,), attention_dim, "align.sem.q"),
            encoder=encoder,
            type_dims={nt.name: nt.feature_dim for nt in g.node_types},
        )

    def parameters(self) -> list[Tensor]:
        out = [p for pair in self.proj.values() for p in pair]
        out += list(self.att.values())
        out += [self.sem_W, self.sem_b, self.sem_q]
        if self.encoder is not None:
            out += list(self.encoder)
        return out


# ---------------------------------------------------------------- per-token reference

def project_node(params: AlignmentParams, node_type: str, x) -> Tensor:
    """``W_A x + b_A`` for one feature vector."""
    if node_type not in params.proj:
        raise ContractError(f"unknown node type {node_type!r}")
    W, b = params.proj[node_type]
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if x.shape != (W.shape[1],):
        raise DimensionError(f"type {node_type!r} expects {W.shape[1]} features, got shape {x.shape}")
    return T.reshape(T.linear(T.reshape(x, (1, -1)), W, b), (W.shape[0],))


def encode_instance(instance, projected, encoder: tuple[Tensor, Tensor] | None = None) -> Tensor:
    """Mean of the projected vectors along the instance, intermediates included.

    ``projected`` is an (n, d') Tensor indexed by node id, or a mapping
    node id -> (d',) Tensor.
    """
    nodes = instance.nodes if isinstance(instance, MetapathInstance) else tuple(instance)
    if not nodes:
        raise ContractError("cannot encode an empty instance")
    if isinstance(projected, Tensor):
        rows = T.gather_rows(projected, list(nodes))
    else:
        try:
            rows = T.concat([T.reshape(projected[n], (1, -1)) for n in nodes], axis=0)
        except KeyError as exc:
            raise ContractError(f"no projected vector for node {exc.args[0]}") from None
    h = T.mean(rows, axis=0)
    if encoder is not None:
        h = T.reshape(T.linear(T.reshape(h, (1, -1)), *encoder), (h.shape[0],))
    return h


def _split_attention(a_M: Tensor, num_heads: int) -> tuple[Tensor, Tensor]:
    """Pieces of ``a_M`` that score the target and the instance, head-major."""
    d = a_M.shape[0] // 2
    w = d // num_heads
    heads = np.arange(num_heads)[:, None] * 2 * w
    src = (heads + np.arange(w)).reshape(-1)
    dst = (heads + w + np.arange(w)).reshape(-1)
    return T.index(a_M, src), T.index(a_M, dst)


def head_scores(H: Tensor, a_part: Tensor, num_heads: int) -> Tensor:
    """Per-head dot products: (m, d') x (d',) -> (m, heads)."""
    m, d = H.shape
    return T.sum(T.reshape(T.mul(H, a_part), (m, num_heads, d // num_heads)), axis=2)


def aggregate_instances(a_M: Tensor, num_heads: int, target: Tensor, instances: Tensor,
                        order_keys: Sequence | None = None) -> tuple[Tensor, Tensor]:
    """Attention-weighted sum of encoded instances for one target node.

    Returns ``(leaky_relu(sum_e alpha_e h_e), alpha)`` with ``alpha`` of shape
    (heads, I); heads are averaged before the weighted sum.
    """
    if instances.ndim != 2 or instances.shape[0] == 0:
        raise ContractError("aggregate_instances needs at least one instance")
    d = instances.shape[1]
    if a_M.shape != (2 * d,) or target.shape != (d,) or d % num_heads:
        raise DimensionError(f"attention {a_M.shape}, target {target.shape}, instances {instances.shape}")
    if order_keys is not None:
        perm = sorted(range(len(order_keys)), key=lambda i: order_keys[i])
        instances = T.gather_rows(instances, perm)
    a_src, a_dst = _split_attention(a_M, num_heads)
    s_src = T.reshape(head_scores(T.reshape(target, (1, d)), a_src, num_heads), (num_heads,))
    e = T.leaky_relu(T.add(head_scores(instances, a_dst, num_heads), s_src))   # (I, heads)
    alpha = T.softmax_lastdim(T.transpose(e))                                    # (heads, I)
    weights = T.reshape(T.mean(alpha, axis=0), (1, instances.shape[0]))
    h = T.reshape(T.matmul(weights, instances), (d,))
    return T.leaky_relu(h), alpha


def aggregate_metapaths(params: AlignmentParams, vectors) -> tuple[Tensor, Tensor]:
    """Semantic attention ``sum_k beta_k h_k`` with ``beta = softmax_k(q . tanh(W h_k + b))``."""
    stacked = vectors if isinstance(vectors, Tensor) else \
        T.concat([T.reshape(v, (1, -1)) for v in vectors], axis=0) if len(vectors) else None
    if stacked is None or stacked.shape[0] == 0:
        raise ContractError("aggregate_metapaths needs at least one metapath vector")
    scores = T.matmul(T.tanh(T.linear(stacked, params.sem_W, params.sem_b)),
                      T.reshape(params.sem_q, (-1, 1)))
    beta = T.softmax_lastdim(T.reshape(scores, (stacked.shape[0],)))
    h = T.reshape(T.matmul(T.reshape(beta, (1, -1)), stacked), (stacked.shape[1],))
    return h, beta


def project_graph(params: AlignmentParams, g: HeteroGraph) -> Tensor:
    """Projected vectors for every node, (n, d') in node id order."""
    blocks, offsets, offset = [], np.zeros(g.num_types, dtype=np.int64), 0
    for ti, nt in enumerate(g.node_types):
        offsets[ti] = offset
        ids = g.type_nodes[ti]
        if not ids.size:
            continue
        W, b = params.proj[nt.name]
        blocks.append(T.linear(Tensor(g.type_features[ti]), W, b))
        offset += ids.size
    rows = offsets[g.node_type] + g.local_index
    return T.gather_rows(T.concat(blocks, axis=0), rows)


def align_token(params: AlignmentParams, g: HeteroGraph, token: Token,
                projected: Tensor | None = None) -> Tensor:
    """One aligned vector for ``token``; nodes without instances keep their projection."""
    H0 = project_graph(params, g) if projected is None else projected
    target = T.gather_rows(H0, [token.node])
    target = T.reshape(target, (params.hidden_dim,))
    per_metapath = []
    for name, insts in token.instances.items():
        if not insts:
            continue
        enc = T.concat([T.reshape(encode_instance(m, H0, params.encoder), (1, -1)) for m in insts])
        h, _ = aggregate_instances(params.att[name], params.num_heads, target, enc,
                                   order_keys=[m.nodes for m in insts])
        per_metapath.append(h)
    if not per_metapath:
        return target
    h, _ = aggregate_metapaths(params, per_metapath)
    return h


# ---------------------------------------------------------------- batched path

@dataclass
class _SchemaBatch:
    name: str
    seqs: np.ndarray      # (I, len) node ids, grouped by target, lexicographic within
    seg: np.ndarray       # (I,) index into targets
    targets: np.ndarray   # (n_k,) node ids with >= 1 instance


@dataclass
class AlignmentPlan:
    """Index arrays derived once from the tokens of a graph."""

    node_count: int
    schemas: list[_SchemaBatch]
    pair_nodes: np.ndarray   # node id of each (node, metapath) row fed to semantic attention
    select: np.ndarray       # row of concat([aligned, projected]) that becomes node i

    @classmethod
    def from_tokens(cls, tokens: Sequence[Token], schema_names: Sequence[str]) -> "AlignmentPlan":
        n = len(tokens)
        batches = []
        for name in schema_names:
            seqs, seg, targets = [], [], []
            for tok in sorted(tokens, key=lambda t: t.node):
                insts = sorted(tok.instances.get(name, []))
                if not insts:
                    continue
                seg.extend([len(targets)] * len(insts))
                targets.append(tok.node)
                seqs.extend(m.nodes for m in insts)
            width = len(seqs[0]) if seqs else 0
            batches.append(_SchemaBatch(name, np.array(seqs, dtype=np.int64).reshape(-1, width),
                                        np.array(seg, dtype=np.int64),
                                        np.array(targets, dtype=np.int64)))
        pair_nodes = np.concatenate([b.targets for b in batches]) if batches else np.empty(0, np.int64)
        has = np.zeros(n, dtype=bool)
        has[pair_nodes] = True
        select = np.where(has, np.arange(n), n + np.arange(n))
        return cls(n, batches, pair_nodes, select)


def align_all(params: AlignmentParams, g: HeteroGraph, plan: AlignmentPlan) -> Tensor:
    """Aligned vectors for every node, (n, d')."""
    n, d, heads = g.node_count, params.hidden_dim, params.num_heads
    H0 = project_graph(params, g)
    rows = []
    for b in plan.schemas:
        if not b.targets.size:
            continue
        length = b.seqs.shape[1]
        enc = T.gather_rows(H0, b.seqs[:, 0])
        for j in range(1, length):
            enc = T.add(enc, T.gather_rows(H0, b.seqs[:, j]))
        enc = T.scale(enc, 1.0 / length)
        if params.encoder is not None:
            enc = T.linear(enc, *params.encoder)
        a_src, a_dst = _split_attention(params.att[b.name], heads)
        s_src = head_scores(T.gather_rows(H0, b.targets), a_src, heads)          # (n_k, heads)
        e = T.leaky_relu(T.add(head_scores(enc, a_dst, heads), T.gather_rows(s_src, b.seg)))
        alpha = T.segment_softmax(e, b.seg, b.targets.size)                        # (I, heads)
        weights = T.mean(alpha, axis=1)
        rows.append(T.leaky_relu(T.segment_sum(T.scale_rows(enc, weights), b.seg, b.targets.size)))
    if not rows:
        return H0
    stacked = T.concat(rows, axis=0)
    scores = T.reshape(T.matmul(T.tanh(T.linear(stacked, params.sem_W, params.sem_b)),
                                T.reshape(params.sem_q, (-1, 1))), (stacked.shape[0], 1))
    beta = T.segment_softmax(scores, plan.pair_nodes, n)
    aligned = T.segment_sum(T.scale_rows(stacked, T.reshape(beta, (stacked.shape[0],))),
                            plan.pair_nodes, n)
    return T.gather_rows(T.concat([aligned, H0], axis=0), plan.select)
