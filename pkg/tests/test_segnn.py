"""Message-passing layers and full-network behaviour: attribute embedding,
the three layer families, heads, and the network-level symmetries."""

import json
import math

import numpy as np
import pytest

from steermp import autodiff as ad
from steermp.o3 import (IrrepsLayout, random_group_element, rep_matrix,
                        spherical_harmonics, vector_to_m)
from steermp.segnn import (BatchedGraph, Graph, Model, ModelConfig,
                           build_model, complete_edges, count_parameters,
                           embed_edge_attributes, embed_node_attributes,
                           input_features, knn_edges, message_scalars,
                           radius_edges)
from steermp.steerable import GatePlan, SteerableTensor, gate_apply, tp_apply
from steermp.tensor import rng_from_seed

L = IrrepsLayout.parse
Y00 = 1.0 / (2.0 * math.sqrt(math.pi))


def rng():
    return rng_from_seed(0xC0FFEE)


def charged_graph(n, r, scale=1.0):
    pos = r.standard_normal((n, 3)) * scale
    vel = r.standard_normal((n, 3)) * scale
    q = r.integers(0, 2, size=n) * 2.0 - 1.0
    edges = complete_edges(n)
    rel = pos[edges[:, 1]] - pos[edges[:, 0]]
    return Graph(pos, edges,
                 edge_scalars={"charge_product": q[edges[:, 0]] * q[edges[:, 1]],
                               "distance": np.linalg.norm(rel, axis=-1)},
                 node_vectors={"velocity": vel},
                 node_scalars={"charge": q})


def transformed(graph, g, t=None):
    m = g.matrix()
    t = np.zeros(3) if t is None else t
    return Graph(graph.positions @ m.T + t, graph.edges,
                 edge_scalars=dict(graph.edge_scalars),
                 node_vectors={k: v @ m.T for k, v in graph.node_vectors.items()},
                 node_scalars=dict(graph.node_scalars))


# ---------------------------------------------------------------------------
# graphs and builders
# ---------------------------------------------------------------------------

def test_graph_validation():
    with pytest.raises(ValueError, match="edge index"):
        Graph(np.zeros((2, 3)), np.array([[0, 5]]))
    with pytest.raises(ValueError, match="self-edges"):
        Graph(np.zeros((2, 3)), np.array([[1, 1]]))
    with pytest.raises(ValueError, match="finite"):
        Graph(np.full((2, 3), np.nan), np.array([[0, 1]]))


def test_complete_edges():
    e = complete_edges(3)
    assert len(e) == 6
    assert sorted(map(tuple, e)) == [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]


def test_knn_edges():
    pos = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [10, 0, 0]])
    e = knn_edges(pos, 2)
    recv0 = e[e[:, 0] == 0][:, 1]
    assert sorted(recv0.tolist()) == [1, 2]
    assert len(e) == 8


def test_radius_edges():
    pos = np.array([[0.0, 0, 0], [1, 0, 0], [5, 0, 0]])
    e = radius_edges(pos, 1.5)
    assert sorted(map(tuple, e)) == [(0, 1), (1, 0)]


# ---------------------------------------------------------------------------
# attributes
# ---------------------------------------------------------------------------

def test_edge_attrs_l0_constant():
    g = charged_graph(4, rng())
    attrs = embed_edge_attributes(g, 0)
    assert np.allclose(attrs.data, Y00)


def test_edge_attrs_direction_flip_parity():
    g = charged_graph(4, rng())
    attrs = embed_edge_attributes(g, 2)
    edges = [tuple(e) for e in g.edges]
    for k, (i, j) in enumerate(edges):
        krev = edges.index((j, i))
        for l in range(3):
            sl = slice(l * l, (l + 1) * (l + 1))
            assert np.allclose(attrs.data[krev, sl],
                               (-1.0) ** l * attrs.data[k, sl], atol=1e-13)


def test_edge_attrs_rotation():
    r = rng()
    g = charged_graph(5, r)
    attrs = embed_edge_attributes(g, 2)
    for _ in range(10):
        gel = random_group_element(r, include_inversion=True)
        moved = transformed(g, gel, r.standard_normal(3))
        attrs2 = embed_edge_attributes(moved, 2)
        d = rep_matrix(attrs.layout, gel)
        assert np.max(np.abs(attrs2.data - attrs.data @ d.T)) < 1e-10


def test_edge_attrs_coincident_nodes():
    pos = np.zeros((2, 3))
    g = Graph(pos, np.array([[0, 1], [1, 0]]), node_vectors={"velocity": pos})
    with pytest.raises(ValueError, match="degenerate"):
        embed_edge_attributes(g, 1)
    attrs = embed_edge_attributes(g, 1, tolerant=True)
    assert np.array_equal(attrs.data, np.zeros((2, 4)))


def test_node_attrs_single_neighbor():
    pos = np.array([[0.0, 0, 0], [1, 0, 0]])
    g = Graph(pos, np.array([[0, 1], [1, 0]]),
              node_vectors={"velocity": np.zeros((2, 3))})
    cfg = ModelConfig(l_a=1, velocity_attr=False)
    edge = embed_edge_attributes(g, 1)
    node = embed_node_attributes(g, edge, cfg)
    assert np.allclose(node.data[0], edge.data[0])
    assert np.allclose(node.data[1], edge.data[1])


def test_node_attrs_opposite_neighbors_cancel_odd():
    pos = np.array([[0.0, 0, 0], [1, 0, 0], [-1, 0, 0]])
    edges = np.array([[0, 1], [0, 2], [1, 0], [2, 0]])
    g = Graph(pos, edges, node_vectors={"velocity": np.zeros((3, 3))})
    cfg = ModelConfig(l_a=2, velocity_attr=False)
    node = embed_node_attributes(g, embed_edge_attributes(g, 2), cfg)
    # node 0 sees +x and -x: odd-degree blocks cancel, even ones average
    assert abs(node.data[0, 0] - Y00) < 1e-14
    assert np.allclose(node.data[0, 1:4], 0.0, atol=1e-14)
    assert np.max(np.abs(node.data[0, 4:])) > 1e-3


def test_node_attrs_sum_mode_and_velocity():
    r = rng()
    g = charged_graph(4, r)
    cfg_mean = ModelConfig(l_a=1, attr_aggregation="mean", velocity_attr=True)
    cfg_sum = ModelConfig(l_a=1, attr_aggregation="sum", velocity_attr=True)
    edge = embed_edge_attributes(g, 1)
    a_mean = embed_node_attributes(g, edge, cfg_mean)
    a_sum = embed_node_attributes(g, edge, cfg_sum)
    deg = 3.0
    vel_part = spherical_harmonics(1, g.node_vectors["velocity"])
    assert np.allclose(a_sum.data - vel_part, (a_mean.data - vel_part) * deg)


def test_node_attrs_equivariance_with_velocity():
    r = rng()
    g = charged_graph(5, r)
    cfg = ModelConfig(l_a=2, velocity_attr=True)
    base = embed_node_attributes(g, embed_edge_attributes(g, 2), cfg)
    for _ in range(10):
        gel = random_group_element(r, True)
        moved = transformed(g, gel, r.standard_normal(3))
        got = embed_node_attributes(moved, embed_edge_attributes(moved, 2), cfg)
        d = rep_matrix(base.layout, gel)
        assert np.max(np.abs(got.data - base.data @ d.T)) < 1e-10


def test_node_attrs_isolated_node():
    g = Graph(np.zeros((3, 3)) + np.arange(3)[:, None],
              np.array([[0, 1], [1, 0]]),
              node_vectors={"velocity": np.zeros((3, 3))})
    with pytest.raises(ValueError, match="isolated"):
        embed_node_attributes(g, embed_edge_attributes(g, 1),
                              ModelConfig(l_a=1))


def test_input_features_layout():
    g = charged_graph(4, rng())
    f1 = input_features(g, 1)
    assert f1.layout == L("1x0e+1x1o+1x1o")
    speed = np.linalg.norm(g.node_vectors["velocity"], axis=-1)
    assert np.allclose(f1.data[:, 0], speed)
    f0 = input_features(g, 0)
    assert f0.layout == L("1x0e")


def test_message_scalars_charged():
    g = charged_graph(4, rng())
    ms = message_scalars(g)
    assert ms.shape[1] == 3  # |x|^2, charge product, |x|
    rel = g.positions[g.edges[:, 1]] - g.positions[g.edges[:, 0]]
    assert np.allclose(ms[:, 0], np.sum(rel * rel, axis=1))


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_model_config_json_round_trip():
    cfg = ModelConfig(variant="se_linear", l_f=2, l_a=1, hidden_dim=24,
                      use_instance_norm=True, head="graph_scalar", seed=9)
    again = ModelConfig.from_json(cfg.to_json())
    assert again == cfg


def test_model_config_unknown_key_rejected():
    with pytest.raises(ValueError, match="unknown config keys"):
        ModelConfig.from_json('{"variant": "segnn", "WAT": 1}')


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(variant="gnn")
    with pytest.raises(ValueError):
        ModelConfig(l_f=-1)
    with pytest.raises(ValueError):
        ModelConfig(head="poses")


# ---------------------------------------------------------------------------
# layer structure (ablation skeleton)
# ---------------------------------------------------------------------------

def _model(variant, l=1, layers=2, head="node_vector", hd=12, **kw):
    cfg = ModelConfig(variant=variant, l_f=l, l_a=l, hidden_dim=hd,
                      num_layers=layers, head=head, seed=5, **kw)
    return build_model(cfg, n_extra_scalars=3)


def test_ablation_structure_by_introspection():
    m_lin = _model("se_linear")
    m_non = _model("se_nonlinear")
    m_seg = _model("segnn")
    assert all(lyr.n_msg_linears == 1 for lyr in m_lin.layers)
    assert all(lyr.n_msg_linears == 2 for lyr in m_non.layers)
    assert all(lyr.n_msg_linears == 2 for lyr in m_seg.layers)
    # only segnn conditions its update on node attributes
    assert all(hasattr(lyr, "upd1") for lyr in m_seg.layers)
    assert not any(hasattr(lyr, "upd1") for lyr in m_lin.layers)
    assert not any(hasattr(lyr, "upd1") for lyr in m_non.layers)
    names = set(m_seg.store.ids())
    assert any(".upd1." in n for n in names)
    assert not any(".upd1." in n for n in set(m_lin.store.ids()))


def test_se_nonlinear_first_layer_matches_se_linear_paths():
    # the first message map of the non-linear layer spans the same paths as
    # the linear layer's single conditioned map
    m_lin = _model("se_linear")
    m_non = _model("se_nonlinear")
    lin_spec = m_lin.layers[0].msg1.spec
    non_spec = m_non.layers[0].msg1.lin.spec
    assert lin_spec.weight_count == non_spec.weight_count
    assert len(lin_spec.paths) == len(non_spec.paths)


def test_se_linear_zero_weights_is_identity():
    m = _model("se_linear", layers=1)
    g = charged_graph(5, rng())
    batch = BatchedGraph.from_graphs([g])
    prep = m.prepare(batch)
    ctx_store = m.store
    for p in ctx_store:
        if p.id.startswith("layer0"):
            p.value[:] = 0.0
    from steermp.segnn import _ParamCtx
    f = rng().standard_normal((5, m.hidden.dim))
    out = m.layers[0](None, _ParamCtx(None, ctx_store), f, batch,
                      prep["edge_attr"], prep["node_attr"],
                      prep["extra_scalars"])
    assert np.allclose(out, f)


def test_se_linear_single_edge_matches_hand_composition():
    # a 2-node graph: each receiver aggregates exactly one message, so the
    # layer output equals conditioned-linear + gate composed by hand
    r = rng()
    pos = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    vel = r.standard_normal((2, 3))
    g = Graph(pos, np.array([[0, 1], [1, 0]]), node_vectors={"velocity": vel})
    cfg = ModelConfig(variant="se_linear", l_f=1, l_a=1, hidden_dim=8,
                      num_layers=1, seed=3)
    m = build_model(cfg, n_extra_scalars=1)
    batch = BatchedGraph.from_graphs([g])
    prep = m.prepare(batch)
    f = r.standard_normal((2, m.hidden.dim))
    from steermp.segnn import _ParamCtx
    ctx = _ParamCtx(None, m.store)
    lyr = m.layers[0]
    out = lyr(None, ctx, f, batch, prep["edge_attr"], prep["node_attr"],
              prep["extra_scalars"])
    # by hand for the receiving node 0
    h01 = np.concatenate([f[0], f[1], prep["extra_scalars"][0]])[None, :]
    h01 = h01[:, lyr.pair_perm]
    msg = lyr.msg1(None, ctx, h01, prep["edge_attr"][0][None])
    upd = gate_apply(None, lyr.agg_gate, msg)
    assert np.allclose(out[0], f[0] + upd[0], atol=1e-12)


def test_segnn_constant_scalar_node_attrs_degenerate():
    # with l_a = 0 the node attributes are one constant scalar per node
    m = _model("segnn", l=0, head="graph_scalar")
    g = charged_graph(5, rng())
    prep = m.prepare(BatchedGraph.from_graphs([g]))
    assert np.allclose(prep["node_attr"], prep["node_attr"][0])


def test_velocity_attr_toggle_changes_outputs():
    r = rng()
    g = charged_graph(5, r)
    base = _model("segnn", velocity_attr=True)
    no_vel = _model("segnn", velocity_attr=False)
    b = BatchedGraph.from_graphs([g])
    assert not np.allclose(base.forward(b), no_vel.forward(b))


# ---------------------------------------------------------------------------
# network-level symmetries
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("variant", ["segnn", "se_nonlinear", "se_linear"])
def test_full_equivariance(variant):
    r = rng()
    m = _model(variant, l=1, layers=2)
    g = charged_graph(7, r)
    base = m.forward(BatchedGraph.from_graphs([g]))
    worst = 0.0
    for _ in range(25):
        gel = random_group_element(r, include_inversion=True)
        t = r.standard_normal(3)
        out = m.forward(BatchedGraph.from_graphs([transformed(g, gel, t)]))
        d = rep_matrix(L("1x1o"), gel)
        worst = max(worst, np.max(np.abs(out - base @ d.T)))
    assert worst < 1e-9


def test_translation_invariance_of_displacement():
    r = rng()
    m = _model("segnn")
    g = charged_graph(6, r)
    base = m.forward(BatchedGraph.from_graphs([g]))
    for _ in range(5):
        t = r.standard_normal(3) * 10
        moved = Graph(g.positions + t, g.edges,
                      edge_scalars=dict(g.edge_scalars),
                      node_vectors=dict(g.node_vectors),
                      node_scalars=dict(g.node_scalars))
        out = m.forward(BatchedGraph.from_graphs([moved]))
        assert np.max(np.abs(out - base)) < 1e-9


def test_permutation_equivariance():
    # relabeling nodes permutes the outputs; the only deviation allowed is
    # f64 rounding from the reordered reductions (sums over nodes/edges),
    # which reorder bit-identical addends
    r = rng()
    m = _model("segnn")
    g = charged_graph(6, r)
    perm = r.permutation(6)
    inv = np.argsort(perm)
    edges_p = np.stack([inv[g.edges[:, 0]], inv[g.edges[:, 1]]], axis=1)
    order = np.lexsort((edges_p[:, 1], edges_p[:, 0]))
    gp = Graph(g.positions[perm], edges_p[order],
               edge_scalars={k: v[order] for k, v in g.edge_scalars.items()},
               node_vectors={k: v[perm] for k, v in g.node_vectors.items()},
               node_scalars={k: v[perm] for k, v in g.node_scalars.items()})
    out = m.forward(BatchedGraph.from_graphs([g]))
    out_p = m.forward(BatchedGraph.from_graphs([gp]))
    assert np.max(np.abs(out_p - out[perm])) < 1e-12


def test_invariant_special_case_is_rounding_stable():
    r = rng()
    m = _model("segnn", l=0, head="graph_scalar")
    g = charged_graph(6, r)
    base = m.forward(BatchedGraph.from_graphs([g]))
    for _ in range(20):
        gel = random_group_element(r, True)
        out = m.forward(BatchedGraph.from_graphs(
            [transformed(g, gel, r.standard_normal(3))]))
        assert np.max(np.abs(out - base)) < 1e-12


def test_graph_scalar_head_shape_and_pooling():
    r = rng()
    m = _model("segnn", head="graph_scalar")
    g1, g2 = charged_graph(5, r), charged_graph(7, r)
    out = m.forward(BatchedGraph.from_graphs([g1, g2]))
    assert out.shape == (2, 1)
    alone = m.forward(BatchedGraph.from_graphs([g2]))
    assert np.allclose(out[1], alone[0], atol=1e-12)


def test_batched_equals_individual_forward():
    r = rng()
    m = _model("se_nonlinear")
    graphs = [charged_graph(5, r), charged_graph(6, r)]
    batched = m.forward(BatchedGraph.from_graphs(graphs))
    singles = np.concatenate([m.forward(BatchedGraph.from_graphs([g]))
                              for g in graphs], axis=0)
    assert np.allclose(batched, singles, atol=1e-12)


def test_explicit_node_features_respected():
    r = rng()
    m = _model("segnn")
    g = charged_graph(5, r)
    feats = input_features(g, 1)
    g2 = Graph(g.positions, g.edges, node_features=feats,
               edge_scalars=dict(g.edge_scalars),
               node_vectors=dict(g.node_vectors),
               node_scalars=dict(g.node_scalars))
    assert np.allclose(m.forward(BatchedGraph.from_graphs([g2])),
                       m.forward(BatchedGraph.from_graphs([g])))
    bad = Graph(g.positions, g.edges,
                node_features=SteerableTensor(L("2x0e"), np.zeros((5, 2))),
                node_vectors=dict(g.node_vectors))
    with pytest.raises(ValueError, match="input"):
        m.forward(BatchedGraph.from_graphs([bad]))


def test_instance_norm_network_still_equivariant():
    r = rng()
    m = _model("segnn", use_instance_norm=True)
    g = charged_graph(6, r)
    base = m.forward(BatchedGraph.from_graphs([g]))
    for _ in range(10):
        gel = random_group_element(r, True)
        out = m.forward(BatchedGraph.from_graphs([transformed(g, gel)]))
        assert np.max(np.abs(out - base @ rep_matrix(L("1x1o"), gel).T)) < 1e-9


def test_count_parameters_matches_store():
    cfg = ModelConfig(variant="segnn", hidden_dim=12, num_layers=2)
    m = build_model(cfg, 3)
    assert count_parameters(cfg, 3) == m.store.num_values()
