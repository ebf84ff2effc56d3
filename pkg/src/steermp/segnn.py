"""Equivariant message-passing networks on geometric point-cloud graphs.

Three layer families share the same skeleton (messages conditioned on edge
attributes, sum aggregation, residual update):

* ``se_linear``     - one conditioned linear map per message, gate after
                      aggregation (a steerable point convolution),
* ``se_nonlinear``  - a two-layer gated steerable MLP per message,
* ``segnn``         - non-linear messages plus an update network that is
                      itself conditioned on steerable *node* attributes.

Node features live in a user-chosen hidden layout; geometry enters through
spherical-harmonic embeddings of relative positions (edge attributes), of
their per-node aggregate, and optionally of node velocities (node
attributes).  Setting ``l_f = l_a = 0`` collapses everything to an invariant
scalar pipeline.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tape, Var
from .o3 import (Irrep, IrrepsLayout, layout, sh_layout, spherical_harmonics,
                 vector_to_m, vector_from_m)
from .steerable import (GatePlan, SteerableTensor, balanced_layout,
                        compact_permutation, enumerate_paths, gate_apply,
                        init_weights, instance_norm_apply, tp_apply)
from .tensor import ParameterStore, rng_from_seed

__all__ = [
    "ModelConfig", "Graph", "BatchedGraph", "Model", "build_model",
    "complete_edges", "knn_edges", "radius_edges",
    "embed_edge_attributes", "embed_node_attributes", "input_features",
    "count_parameters",
]

VARIANTS = ("segnn", "se_nonlinear", "se_linear")
DEGENERATE_NORM = 1e-12


@dataclass
class ModelConfig:
    """Everything needed to build and train one network, JSON-serialisable.

    ``hidden_dim`` is the width of the ordinary linear layer whose weight
    budget the steerable layers match (mode "copies") or the total feature
    dimension (mode "balanced").  ``velocity_attr`` switches between
    geometry-only node attributes and geometry+velocity.
    """

    variant: str = "segnn"
    l_f: int = 1
    l_a: int = 1
    hidden_mode: str = "copies"      # copies | balanced
    hidden_dim: int = 64
    num_layers: int = 4
    neighbor_rule: str = "complete"  # complete | knn | radius
    neighbor_k: int = 20
    neighbor_radius: float = 2.0
    attr_aggregation: str = "mean"   # mean | sum
    use_instance_norm: bool = False
    head: str = "node_vector"        # node_vector | graph_scalar
    velocity_attr: bool = True
    tolerant: bool = False
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-8
    loss: str = "mse"                # mse | mae
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.l_f < 0 or self.l_a < 0:
            raise ValueError("degrees must be non-negative")
        if self.hidden_mode not in ("copies", "balanced"):
            raise ValueError(f"unknown hidden mode {self.hidden_mode!r}")
        if self.neighbor_rule not in ("complete", "knn", "radius"):
            raise ValueError(f"unknown neighbor rule {self.neighbor_rule!r}")
        if self.attr_aggregation not in ("mean", "sum"):
            raise ValueError(f"unknown aggregation {self.attr_aggregation!r}")
        if self.head not in ("node_vector", "graph_scalar"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.loss not in ("mse", "mae"):
            raise ValueError(f"unknown loss {self.loss!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        data = json.loads(text)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# graphs
# ---------------------------------------------------------------------------

def complete_edges(n: int) -> np.ndarray:
    """All ordered pairs (i, j), i != j, sorted by receiver then sender."""
    recv, send = np.where(~np.eye(n, dtype=bool))
    return np.stack([recv, send], axis=1)


def knn_edges(positions, k: int) -> np.ndarray:
    """Directed edges from each node's k nearest neighbours (receiver i,
    sender j)."""
    from scipy.spatial import cKDTree
    positions = np.asarray(positions)
    n = len(positions)
    if k >= n:
        return complete_edges(n)
    tree = cKDTree(positions)
    _, idx = tree.query(positions, k=k + 1)
    edges = []
    for i in range(n):
        for j in idx[i]:
            if j != i:
                edges.append((i, j))
    edges = np.asarray(edges)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    return edges[order]


def radius_edges(positions, radius: float) -> np.ndarray:
    positions = np.asarray(positions)
    d = np.linalg.norm(positions[None] - positions[:, None], axis=-1)
    mask = (d < radius) & ~np.eye(len(positions), dtype=bool)
    recv, send = np.where(mask)
    return np.stack([recv, send], axis=1)


@dataclass
class Graph:
    """One point cloud with its physics: positions, an edge list, optional
    explicit steerable node features, per-edge scalars and named per-node
    vectors/scalars (velocity, charge, mass, speed, ...)."""

    positions: np.ndarray
    edges: np.ndarray
    node_features: SteerableTensor = None
    edge_scalars: dict = field(default_factory=dict)
    node_vectors: dict = field(default_factory=dict)
    node_scalars: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.edges = np.asarray(self.edges, dtype=np.intp)
        n = len(self.positions)
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= n):
            raise ValueError("edge index out of range")
        if self.edges.size and np.any(self.edges[:, 0] == self.edges[:, 1]):
            raise ValueError("self-edges are not allowed")

    @property
    def num_nodes(self):
        return len(self.positions)


class BatchedGraph:
    """A disjoint union of graphs with the sparse operators the layers need:
    receiver/sender incidence (messages), per-graph mean pooling, and the
    per-node graph index (instance norm, centering)."""

    def __init__(self, positions, edges, graph_ids, n_graphs,
                 edge_scalars=None, node_vectors=None, node_scalars=None,
                 node_features=None):
        self.positions = positions
        self.edges = edges
        self.recv = edges[:, 0]
        self.send = edges[:, 1]
        self.graph_ids = graph_ids
        self.n_graphs = n_graphs
        self.edge_scalars = edge_scalars or {}
        self.node_vectors = node_vectors or {}
        self.node_scalars = node_scalars or {}
        self.node_features = node_features
        n, e = len(positions), len(edges)
        ones = np.ones(e)
        self.recv_csr = sp.csr_matrix((ones, (self.recv, np.arange(e))),
                                      shape=(n, e))
        self.send_csr = sp.csr_matrix((ones, (self.send, np.arange(e))),
                                      shape=(n, e))
        counts = np.bincount(graph_ids, minlength=n_graphs).astype(np.float64)
        self.node_counts = counts
        w = 1.0 / counts[graph_ids]
        self.pool_csr = sp.csr_matrix((w, (graph_ids, np.arange(n))),
                                      shape=(n_graphs, n))
        self.unpool_csr = self.pool_csr.T.tocsr()
        self.degrees = np.bincount(self.recv, minlength=n).astype(np.float64)

    @classmethod
    def from_graphs(cls, graphs):
        pos, edges, gids = [], [], []
        e_sc = {k: [] for k in graphs[0].edge_scalars}
        n_vec = {k: [] for k in graphs[0].node_vectors}
        n_sc = {k: [] for k in graphs[0].node_scalars}
        feats = [] if graphs[0].node_features is not None else None
        off = 0
        for gi, g in enumerate(graphs):
            pos.append(g.positions)
            edges.append(g.edges + off)
            gids.append(np.full(g.num_nodes, gi, dtype=np.intp))
            for k in e_sc:
                e_sc[k].append(g.edge_scalars[k])
            for k in n_vec:
                n_vec[k].append(g.node_vectors[k])
            for k in n_sc:
                n_sc[k].append(g.node_scalars[k])
            if feats is not None:
                feats.append(g.node_features.data)
            off += g.num_nodes
        nf = None
        if feats is not None:
            nf = SteerableTensor(graphs[0].node_features.layout,
                                 np.concatenate(feats, axis=0))
        return cls(np.concatenate(pos, axis=0),
                   np.concatenate(edges, axis=0),
                   np.concatenate(gids), len(graphs),
                   {k: np.concatenate(v) for k, v in e_sc.items()},
                   {k: np.concatenate(v, axis=0) for k, v in n_vec.items()},
                   {k: np.concatenate(v) for k, v in n_sc.items()},
                   nf)


# ---------------------------------------------------------------------------
# geometric attributes and input features
# ---------------------------------------------------------------------------

def _sh_or_zero(lmax, vectors, tolerant, what):
    """SH embedding with the degenerate-direction policy: error by default,
    zero rows when tolerant."""
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=-1)
    bad = norms < DEGENERATE_NORM
    if not bad.any():
        return spherical_harmonics(lmax, vectors)
    if not tolerant:
        raise ValueError(f"degenerate direction in {what}")
    out = np.zeros(vectors.shape[:-1] + ((lmax + 1) ** 2,))
    good = ~bad
    if good.any():
        out[good] = spherical_harmonics(lmax, vectors[good])
    return out


def embed_edge_attributes(graph, l_a: int, tolerant: bool = False) -> SteerableTensor:
    """Spherical-harmonic embedding of x_j - x_i per edge (layout
    1x0e+1x1o+...).  Coincident endpoints are an error unless tolerant, in
    which case they contribute a zero attribute."""
    rel = graph.positions[graph.send] - graph.positions[graph.recv] \
        if isinstance(graph, BatchedGraph) else \
        graph.positions[graph.edges[:, 1]] - graph.positions[graph.edges[:, 0]]
    return SteerableTensor(sh_layout(l_a),
                           _sh_or_zero(l_a, rel, tolerant, "edge attributes"))


def embed_node_attributes(graph, edge_attrs: SteerableTensor, config,
                          l_a=None) -> SteerableTensor:
    """Aggregate edge attributes per receiving node (mean by default, sum
    selectable) plus the embedding of each configured physical node vector.
    Zero-length vectors are skipped; isolated nodes are an error."""
    l_a = config.l_a if l_a is None else l_a
    if isinstance(graph, BatchedGraph):
        recv, n, recv_csr = graph.recv, len(graph.positions), graph.recv_csr
    else:
        recv = graph.edges[:, 0]
        n = graph.num_nodes
        e = len(graph.edges)
        recv_csr = sp.csr_matrix((np.ones(e), (recv, np.arange(e))), shape=(n, e))
    deg = np.bincount(recv, minlength=n).astype(np.float64)
    if np.any(deg == 0):
        raise ValueError(f"isolated nodes: {np.where(deg == 0)[0].tolist()}")
    agg = recv_csr @ edge_attrs.data
    if config.attr_aggregation == "mean":
        agg = agg / deg[:, None]
    if config.velocity_attr and "velocity" in graph.node_vectors:
        agg = agg + _sh_or_zero(l_a, graph.node_vectors["velocity"], True,
                                "velocity attributes")
    return SteerableTensor(sh_layout(l_a), agg)


def input_features(graph, l_f: int, config=None) -> SteerableTensor:
    """Point-dynamics input features: speed as a scalar and, for l_f >= 1,
    the position relative to the graph mean and the velocity as odd
    vectors (layout 1x0e+1x1o+1x1o, vector components in m-order)."""
    v = graph.node_vectors["velocity"]
    speed = np.linalg.norm(v, axis=-1, keepdims=True)
    if l_f == 0:
        return SteerableTensor(IrrepsLayout.parse("1x0e"), speed)
    if isinstance(graph, BatchedGraph):
        center = (graph.pool_csr @ graph.positions)[graph.graph_ids]
    else:
        center = graph.positions.mean(axis=0, keepdims=True)
    rel = graph.positions - center
    lay = IrrepsLayout([(1, Irrep(0, 1)), (1, Irrep(1, -1)), (1, Irrep(1, -1))])
    return SteerableTensor(lay, np.concatenate(
        [speed, vector_to_m(rel), vector_to_m(v)], axis=-1))


def message_scalars(graph) -> np.ndarray:
    """Extra invariant message inputs: squared distance always, plus any
    per-edge scalars carried by the graph (sorted by name)."""
    if isinstance(graph, BatchedGraph):
        rel = graph.positions[graph.send] - graph.positions[graph.recv]
    else:
        rel = graph.positions[graph.edges[:, 1]] - graph.positions[graph.edges[:, 0]]
    cols = [np.sum(rel * rel, axis=-1, keepdims=True)]
    for k in sorted(graph.edge_scalars):
        cols.append(np.asarray(graph.edge_scalars[k], dtype=np.float64)[:, None])
    return np.concatenate(cols, axis=-1)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class _ParamCtx:
    """Per-forward cache of tape leaves for the parameter store."""

    def __init__(self, tape, store):
        self.tape = tape
        self.store = store
        self._vars = {}

    def __call__(self, pid):
        if self.tape is None:
            return self.store[pid].value
        v = self._vars.get(pid)
        if v is None:
            v = self._vars[pid] = self.tape.leaf(self.store[pid])
        return v


class CondLinear:
    """A steerable linear layer conditioned on an attribute vector: weighted
    CG product plus bias on the scalar outputs."""

    def __init__(self, store, rng, name, in_layout, attr_layout, out_layout,
                 bias=True):
        self.name = name
        self.spec = enumerate_paths(in_layout, attr_layout, out_layout)
        store.new(f"{name}.w", init_weights(self.spec, rng))
        self.has_bias = bias and len(self.spec.bias_cols) > 0
        if self.has_bias:
            store.new(f"{name}.b", np.zeros(len(self.spec.bias_cols)))

    def __call__(self, tape, ctx, x, attr):
        b = ctx(f"{self.name}.b") if self.has_bias else None
        return tp_apply(tape, self.spec, x, attr, ctx(f"{self.name}.w"), b)


class GatedCondLinear:
    """Conditioned linear emitting [scalars | gates | higher], followed by
    the Swish gate; reduces to plain Swish when the target has no l>0."""

    def __init__(self, store, rng, name, in_layout, attr_layout, out_layout):
        out_layout = layout(out_layout)
        scalars = [(m, ir) for m, ir in out_layout.terms if ir.l == 0]
        higher = [(m, ir) for m, ir in out_layout.terms if ir.l > 0]
        n_gates = sum(m for m, _ in higher)
        gated = scalars + ([(n_gates, Irrep(0, 1))] if n_gates else []) + higher
        self.pre_gate_layout = IrrepsLayout(gated)
        self.lin = CondLinear(store, rng, name, in_layout, attr_layout,
                              self.pre_gate_layout)
        self.plan = GatePlan(self.pre_gate_layout)
        self.out_layout = self.plan.out_layout

    def __call__(self, tape, ctx, x, attr):
        return gate_apply(tape, self.plan, self.lin(tape, ctx, x, attr))


class _Dense:
    def __init__(self, store, rng, name, n_in, n_out):
        self.name = name
        store.new(f"{name}.w", rng.normal(0.0, math.sqrt(1.0 / n_in), (n_in, n_out)))
        store.new(f"{name}.b", np.zeros(n_out))

    def __call__(self, tape, ctx, x):
        return ad.dense(tape, x, ctx(f"{self.name}.w"), ctx(f"{self.name}.b"))


def _pair_layout(hidden, n_extra_scalars):
    """Layout of f_i (+) f_j (+) extra scalars, and its compact permutation."""
    pair = hidden.concat(hidden)
    if n_extra_scalars:
        pair = pair.concat(IrrepsLayout([(n_extra_scalars, Irrep(0, 1))]))
    return compact_permutation(pair)


class MessagePassingLayer:
    """Shared skeleton of the three layer families.

    ``n_msg_linears`` distinguishes them structurally: se_linear uses one
    conditioned linear per message, the non-linear variants use two; only
    segnn conditions its update network on node attributes.
    """

    def __init__(self, store, rng, name, variant, hidden, edge_attr_layout,
                 node_attr_layout, n_extra_scalars, use_instance_norm):
        self.variant = variant
        self.hidden = hidden
        self.use_instance_norm = use_instance_norm
        pair_compact, self.pair_perm, self.pair_inv = _pair_layout(
            hidden, n_extra_scalars)

        if variant == "se_linear":
            gates = sum(m for m, ir in hidden.terms if ir.l > 0)
            scalars = [(m, ir) for m, ir in hidden.terms if ir.l == 0]
            higher = [(m, ir) for m, ir in hidden.terms if ir.l > 0]
            pre = IrrepsLayout(scalars + ([(gates, Irrep(0, 1))] if gates else [])
                               + higher)
            self.msg1 = CondLinear(store, rng, f"{name}.msg1", pair_compact,
                                   edge_attr_layout, pre)
            self.agg_gate = GatePlan(pre)
            self.n_msg_linears = 1
        elif variant == "se_nonlinear":
            self.msg1 = GatedCondLinear(store, rng, f"{name}.msg1", pair_compact,
                                        edge_attr_layout, hidden)
            gates = sum(m for m, ir in hidden.terms if ir.l > 0)
            scalars = [(m, ir) for m, ir in hidden.terms if ir.l == 0]
            higher = [(m, ir) for m, ir in hidden.terms if ir.l > 0]
            pre = IrrepsLayout(scalars + ([(gates, Irrep(0, 1))] if gates else [])
                               + higher)
            self.msg2 = CondLinear(store, rng, f"{name}.msg2",
                                   self.msg1.out_layout, edge_attr_layout, pre)
            self.agg_gate = GatePlan(pre)
            self.n_msg_linears = 2
        else:  # segnn
            self.msg1 = GatedCondLinear(store, rng, f"{name}.msg1", pair_compact,
                                        edge_attr_layout, hidden)
            self.msg2 = GatedCondLinear(store, rng, f"{name}.msg2",
                                        self.msg1.out_layout, edge_attr_layout,
                                        hidden)
            upd_compact, self.upd_perm, self.upd_inv = _pair_layout(hidden, 0)
            self.upd1 = GatedCondLinear(store, rng, f"{name}.upd1", upd_compact,
                                        node_attr_layout, hidden)
            self.upd2 = CondLinear(store, rng, f"{name}.upd2",
                                   self.upd1.out_layout, node_attr_layout,
                                   hidden)
            self.n_msg_linears = 2

    def __call__(self, tape, ctx, f, batch, edge_attr, node_attr, extra_scalars):
        f_i = ad.gather_rows(tape, f, batch.recv, batch.recv_csr)
        f_j = ad.gather_rows(tape, f, batch.send, batch.send_csr)
        h_ij = ad.concat_cols(tape, [f_i, f_j, extra_scalars])
        h_ij = ad.permute_cols(tape, h_ij, self.pair_perm, self.pair_inv)

        if self.variant == "se_linear":
            m = self.msg1(tape, ctx, h_ij, edge_attr)
            agg = ad.segment_sum(tape, m, batch.recv_csr, batch.recv)
            upd = gate_apply(tape, self.agg_gate, agg)
        elif self.variant == "se_nonlinear":
            m = self.msg1(tape, ctx, h_ij, edge_attr)
            m = self.msg2(tape, ctx, m, edge_attr)
            agg = ad.segment_sum(tape, m, batch.recv_csr, batch.recv)
            upd = gate_apply(tape, self.agg_gate, agg)
        else:
            m = self.msg1(tape, ctx, h_ij, edge_attr)
            m = self.msg2(tape, ctx, m, edge_attr)
            agg = ad.segment_sum(tape, m, batch.recv_csr, batch.recv)
            u = ad.concat_cols(tape, [f, agg])
            u = ad.permute_cols(tape, u, self.upd_perm, self.upd_inv)
            u = self.upd1(tape, ctx, u, node_attr)
            upd = self.upd2(tape, ctx, u, node_attr)

        out = ad.add(tape, f, upd)
        if self.use_instance_norm:
            out = instance_norm_apply(tape, self.hidden, out,
                                      instances=batch.graph_ids)
        return out


class NodeVectorHead:
    """Per-node conditioned linear map onto one odd vector (displacement or
    force), steered by the degree >= 1 node attributes."""

    def __init__(self, store, rng, name, hidden, attr_layout):
        self.lin = CondLinear(store, rng, name, hidden, attr_layout,
                              IrrepsLayout.parse("1x1o"), bias=False)

    def __call__(self, tape, ctx, f, batch, node_attr):
        return self.lin(tape, ctx, f, node_attr)


class GraphScalarHead:
    """Invariant readout: conditioned linear to scalars, Swish, linear,
    per-graph mean pool, then a small scalar MLP to one number."""

    def __init__(self, store, rng, name, hidden, attr_layout, width):
        self.width = width
        self.lin0 = CondLinear(store, rng, f"{name}.lin0", hidden, attr_layout,
                               IrrepsLayout([(width, Irrep(0, 1))]))
        self.pre = _Dense(store, rng, f"{name}.pre", width, width)
        self.post1 = _Dense(store, rng, f"{name}.post1", width, width)
        self.post2 = _Dense(store, rng, f"{name}.post2", width, 1)

    def __call__(self, tape, ctx, f, batch, node_attr):
        x = self.lin0(tape, ctx, f, node_attr)
        x = ad.swish(tape, x)
        x = self.pre(tape, ctx, x)
        x = ad.mean_pool(tape, x, batch.pool_csr, batch.unpool_csr)
        x = self.post1(tape, ctx, x)
        x = ad.swish(tape, x)
        return self.post2(tape, ctx, x)


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

class Model:
    """A built network: parameter store plus the layer objects, with a
    forward pass over a (batched) graph.

    ``n_extra_scalars`` counts the per-edge invariants appended to message
    inputs (squared distance plus whatever edge scalars the graphs carry,
    e.g. charge product and plain distance for the charged system).
    """

    def __init__(self, config: ModelConfig, n_extra_scalars: int = 1):
        self.config = config
        self.n_extra_scalars = n_extra_scalars
        self.store = ParameterStore()
        rng = rng_from_seed(config.seed)

        if config.hidden_mode == "copies":
            self.hidden = balanced_layout(config.hidden_dim, config.l_f,
                                          mode="copies", attr_lmax=config.l_a)
        else:
            self.hidden = balanced_layout(config.hidden_dim, config.l_f,
                                          include_odd=True, mode="balanced")
        self.input_layout = (IrrepsLayout.parse("1x0e") if config.l_f == 0
                             else IrrepsLayout.parse("1x0e+1x1o+1x1o"))
        self.edge_attr_layout = sh_layout(config.l_a)
        self.node_attr_layout = sh_layout(config.l_a)
        # a node_vector head needs at least degree-1 attributes to reach 1o
        self.head_attr_l = max(config.l_a, 1) if config.head == "node_vector" \
            else config.l_a

        self.embed1 = GatedCondLinear(self.store, rng, "embed1",
                                      self.input_layout, self.node_attr_layout,
                                      self.hidden)
        self.embed2 = CondLinear(self.store, rng, "embed2",
                                 self.embed1.out_layout, self.node_attr_layout,
                                 self.hidden)
        self.layers = [
            MessagePassingLayer(self.store, rng, f"layer{i}", config.variant,
                                self.hidden, self.edge_attr_layout,
                                self.node_attr_layout, n_extra_scalars,
                                config.use_instance_norm)
            for i in range(config.num_layers)
        ]
        if config.head == "node_vector":
            self.head = NodeVectorHead(self.store, rng, "head", self.hidden,
                                       sh_layout(self.head_attr_l))
        else:
            self.head = GraphScalarHead(self.store, rng, "head", self.hidden,
                                        self.node_attr_layout,
                                        config.hidden_dim)

    # -- attribute/feature preparation (constant per batch) -----------------

    def prepare(self, batch: BatchedGraph) -> dict:
        cfg = self.config
        edge_attr = embed_edge_attributes(batch, cfg.l_a, cfg.tolerant)
        node_attr = embed_node_attributes(batch, edge_attr, cfg)
        if self.head_attr_l == cfg.l_a:
            head_attr = node_attr
        else:
            ea = embed_edge_attributes(batch, self.head_attr_l, cfg.tolerant)
            head_attr = embed_node_attributes(batch, ea, cfg, self.head_attr_l)
        if batch.node_features is not None:
            feats = batch.node_features
            if feats.layout != self.input_layout:
                raise ValueError(f"graph features {feats.layout} do not match "
                                 f"model input {self.input_layout}")
        else:
            feats = input_features(batch, cfg.l_f, cfg)
        return {
            "features": feats.data,
            "edge_attr": edge_attr.data,
            "node_attr": node_attr.data,
            "head_attr": head_attr.data,
            "extra_scalars": message_scalars(batch),
        }

    def forward(self, batch: BatchedGraph, tape: Tape = None, prepared=None):
        prep = prepared if prepared is not None else self.prepare(batch)
        ctx = _ParamCtx(tape, self.store)
        f = self.embed1(tape, ctx, prep["features"], prep["node_attr"])
        f = self.embed2(tape, ctx, f, prep["node_attr"])
        for lyr in self.layers:
            f = lyr(tape, ctx, f, batch, prep["edge_attr"], prep["node_attr"],
                    prep["extra_scalars"])
        return self.head(tape, ctx, f, batch, prep["head_attr"])

    def loss(self, batch, target, tape=None, prepared=None):
        out = self.forward(batch, tape, prepared)
        if self.config.loss == "mae":
            return ad.mae_loss(tape, out, target)
        return ad.mse_loss(tape, out, target)


def build_model(config: ModelConfig, n_extra_scalars: int = 1) -> Model:
    return Model(config, n_extra_scalars)


def count_parameters(config: ModelConfig, n_extra_scalars: int = 1) -> int:
    return Model(config, n_extra_scalars).store.num_values()
