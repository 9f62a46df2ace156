"""The full pipeline: tokenize, align, inner order/update, outer order/update, classify."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .alignment import AlignmentParams, AlignmentPlan, align_all
from .config import ModelConfig
from .errors import ContractError
from .hetgraph import HeteroGraph, MetapathSchema, Token, build_tokens
from .ordering import GlobalOrder, OrderedGroups, inner_order, instance_counts, outer_order
from .ssm import SelectiveSsmBlock
from .tensor import Tensor


@dataclass
class Layer:
    inner: dict[str, SelectiveSsmBlock]
    outer: SelectiveSsmBlock

    def blocks(self) -> list[SelectiveSsmBlock]:
        return [*self.inner.values(), self.outer]


@dataclass
class Prepared:
    """Parameter-free structure computed once per graph."""

    schemas: list[MetapathSchema]
    tokens: list[Token]
    plan: AlignmentPlan
    groups: OrderedGroups
    outer: GlobalOrder
    inner_perm: np.ndarray
    inner_inverse: np.ndarray
    outer_inverse: np.ndarray


def prepare(g: HeteroGraph, cfg: ModelConfig, schemas=None) -> Prepared:
    schemas = list(g.metapaths.values()) if schemas is None else list(schemas)
    tokens = build_tokens(g, schemas, cfg.max_instances_per_node, cfg.simple_paths_only)
    counts = instance_counts(g, schemas, cfg.simple_paths_only)
    groups = inner_order(g, schemas, cfg.inner_order_mode, seed=cfg.seed, counts=counts)
    glob = outer_order(g, cfg.outer_order_mode, seed=cfg.seed)
    perm = groups.permutation()
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return Prepared(schemas, tokens, AlignmentPlan.from_tokens(tokens, [s.name for s in schemas]),
                    groups, glob, perm, inv, glob.inverse)


class HgmnModel:
    def __init__(self, g: HeteroGraph, cfg: ModelConfig, num_classes: int | None = None,
                 schemas=None):
        self.cfg = cfg
        schemas = list(g.metapaths.values()) if schemas is None else list(schemas)
        self.type_names = [nt.name for nt in g.node_types]
        self.schema_names = [s.name for s in schemas]
        self.num_classes = g.num_classes if num_classes is None else num_classes
        if self.num_classes < 1:
            raise ContractError("graph has no labels; cannot size the classification head")
        rng = np.random.default_rng(cfg.seed)
        self.align = AlignmentParams.init(g, schemas, cfg.hidden_dim, cfg.num_heads,
                                          cfg.metapath_attention_dim, cfg.instance_encoder, rng)
        self.layers: list[Layer] = []
        for li in range(cfg.num_layers):
            inner = {t: self._block(rng, f"layers.{li}.inner.{t}") for t in self.type_names}
            self.layers.append(Layer(inner, self._block(rng, f"layers.{li}.outer")))
        bound = 1.0 / math.sqrt(cfg.hidden_dim)
        self.head_W = Tensor(rng.uniform(-bound, bound, (self.num_classes, cfg.hidden_dim)),
                             requires_grad=True, name="head.W")
        self.head_b = Tensor(rng.uniform(-bound, bound, self.num_classes), requires_grad=True,
                             name="head.b")
        # generator state after initialisation; checkpoints record it
        self.rng_state = rng.bit_generator.state
        names = [p.name for p in self.parameters()]
        assert len(set(names)) == len(names), "parameter names must be unique"

    def _block(self, rng, name):
        c = self.cfg
        return SelectiveSsmBlock(c.hidden_dim, c.state_dim, c.expand, c.conv_width, c.zoh_exact,
                                 rng, name, dt_range=(c.dt_min, c.dt_max))

    def parameters(self) -> list[Tensor]:
        out = self.align.parameters()
        for layer in self.layers:
            for block in layer.blocks():
                out += block.parameters()
        return out + [self.head_W, self.head_b]

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def zero_ssm_blocks(self) -> None:
        for layer in self.layers:
            for block in layer.blocks():
                block.zero_()

    def check_graph(self, g: HeteroGraph, prep: Prepared) -> None:
        if [nt.name for nt in g.node_types] != self.type_names:
            raise ContractError(f"model built for node types {self.type_names}, graph has "
                                f"{[nt.name for nt in g.node_types]}")
        if [s.name for s in prep.schemas] != self.schema_names:
            raise ContractError(f"model built for metapaths {self.schema_names}")
        for nt in g.node_types:
            if self.align.type_dims[nt.name] != nt.feature_dim:
                raise ContractError(f"node type {nt.name!r}: feature width changed")


def embed(model: HgmnModel, g: HeteroGraph, prep: Prepared) -> Tensor:
    """Node representations after alignment and all scan layers, (n, d')."""
    model.check_graph(g, prep)
    H = align_all(model.align, g, prep.plan)
    for layer in model.layers:
        parts = [layer.inner[t](T.gather_rows(H, prep.groups.groups[t]))
                 for t in model.type_names if prep.groups.groups[t].size]
        H = T.gather_rows(T.concat(parts, axis=0), prep.inner_inverse)
        H = T.gather_rows(layer.outer(T.gather_rows(H, prep.outer.order)), prep.outer_inverse)
    return H


def forward(model: HgmnModel, g: HeteroGraph, prep: Prepared) -> Tensor:
    """Per-node logits, (n, num_classes)."""
    return T.linear(embed(model, g, prep), model.head_W, model.head_b)


# ---------------------------------------------------------------- loss and metrics

def confusion_matrix(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, pred), 1)
    return cm


def classification_metrics(pred, labels, num_classes: int) -> dict[str, float]:
    pred = np.asarray(pred, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    cm = confusion_matrix(pred, labels, num_classes)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    # macro-F1 averages over classes that occur in labels or predictions
    present = denom > 0
    macro = float(f1[present].mean()) if present.any() else 0.0
    TP, FP, FN = tp.sum(), fp.sum(), fn.sum()
    micro = float(2 * TP / (2 * TP + FP + FN)) if (2 * TP + FP + FN) else 0.0
    return {"accuracy": float(tp.sum() / labels.size), "micro_f1": micro, "macro_f1": macro}


def loss_and_metrics(logits: Tensor, labels, mask) -> tuple[Tensor, dict[str, float]]:
    """Mean cross-entropy over ``mask`` (node ids) plus accuracy / micro-F1 / macro-F1."""
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise ContractError("loss over an empty node mask")
    labels = np.asarray(labels, dtype=np.int64)
    y = labels[mask]
    if (y < 0).any():
        raise ContractError("mask contains unlabelled nodes")
    sub = T.gather_rows(logits, mask)
    loss = T.cross_entropy(sub, y)
    metrics = classification_metrics(sub.data.argmax(axis=1), y, logits.shape[1])
    metrics["loss"] = float(loss.data)
    return loss, metrics
