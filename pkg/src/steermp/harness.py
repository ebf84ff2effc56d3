"""Verification: equivariance certification, invariance checks, and
finite-difference gradient oracles.

The checks must be able to detect their own target defects, so this module
also ships fault injectors (sign-flipped CG table, disabled parity rule,
corrupted adjoint) used by the mutation tests: a harness that still passes
under those mutations would be worthless.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import o3
from . import steerable
from .o3 import IrrepsLayout, random_group_element, rep_matrix
from .segnn import BatchedGraph, Graph
from .steerable import SteerableTensor
from .tensor import rng_from_seed

__all__ = [
    "EquivarianceReport", "GradientReport", "check_equivariance",
    "check_invariance", "check_gradients", "transform_graph",
    "corrupted_cg_sign", "parity_rule_disabled", "corrupted_adjoint",
]


@dataclass
class EquivarianceReport:
    tolerance: float
    checks: list = field(default_factory=list)
    max_abs_error: float = 0.0
    max_rel_error: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_json(self) -> str:
        data = asdict(self)
        data["passed"] = self.passed
        return json.dumps(data, indent=2, sort_keys=True)


@dataclass
class GradientReport:
    eps: float
    per_parameter: dict = field(default_factory=dict)
    max_rel_error: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def transform_graph(graph: Graph, g: o3.GroupElement, translation=None) -> Graph:
    """Apply an E(3) element: positions get the full affine action, named
    node vectors rotate/reflect, explicit steerable features transform by
    their representation matrix.  Scalars are untouched."""
    M = g.matrix()
    t = np.zeros(3) if translation is None else np.asarray(translation)
    feats = graph.node_features
    if feats is not None:
        D = rep_matrix(feats.layout, g)
        feats = SteerableTensor(feats.layout, feats.data @ D.T)
    return Graph(graph.positions @ M.T + t, graph.edges,
                 node_features=feats,
                 edge_scalars=dict(graph.edge_scalars),
                 node_vectors={k: v @ M.T for k, v in graph.node_vectors.items()},
                 node_scalars=dict(graph.node_scalars))


def _element_description(g, t):
    return {"rotation": np.round(g.rotation, 6).tolist(),
            "inversion": bool(g.inversion),
            "translation": np.round(t, 6).tolist()}


def _output_rep(model, g):
    if model.config.head == "graph_scalar":
        return np.eye(1)
    return rep_matrix(IrrepsLayout.parse("1x1o"), g)


def check_equivariance(model, graph: Graph, num_samples=100, tol=1e-8,
                       include_reflection=True, include_translation=True,
                       seed=0) -> EquivarianceReport:
    """Compare D_out(g) f(x) against f(g x) for random group elements.

    The relative error denominator is max(inf-norm of f(x), 1e-8) so that
    near-zero outputs do not blow the ratio up.
    """
    rng = rng_from_seed(seed)
    base = model.forward(BatchedGraph.from_graphs([graph]))
    denom = max(float(np.max(np.abs(base))), 1e-8)
    report = EquivarianceReport(tolerance=tol)
    for _ in range(num_samples):
        g = random_group_element(rng, include_inversion=include_reflection)
        t = rng.standard_normal(3) if include_translation else np.zeros(3)
        moved = transform_graph(graph, g, t)
        out = model.forward(BatchedGraph.from_graphs([moved]))
        expected = base @ _output_rep(model, g).T
        err = float(np.max(np.abs(out - expected)))
        rel = err / denom
        report.checks.append({"element": _element_description(g, t),
                              "max_abs_error": err, "rel_error": rel,
                              "passed": rel < tol})
        report.max_abs_error = max(report.max_abs_error, err)
        report.max_rel_error = max(report.max_rel_error, rel)
    return report


def check_invariance(model, graph: Graph, num_samples=100, tol=1e-12,
                     seed=0) -> EquivarianceReport:
    """Strict check for the all-scalar pipeline: outputs of a graph-scalar
    model must be identical under rotations, reflections and translations up
    to f64 rounding."""
    rng = rng_from_seed(seed)
    base = model.forward(BatchedGraph.from_graphs([graph]))
    report = EquivarianceReport(tolerance=tol)
    for _ in range(num_samples):
        g = random_group_element(rng, include_inversion=True)
        t = rng.standard_normal(3)
        moved = transform_graph(graph, g, t)
        out = model.forward(BatchedGraph.from_graphs([moved]))
        err = float(np.max(np.abs(out - base)))
        report.checks.append({"element": _element_description(g, t),
                              "max_abs_error": err, "rel_error": err,
                              "passed": err < tol})
        report.max_abs_error = max(report.max_abs_error, err)
        report.max_rel_error = max(report.max_rel_error, err)
    return report


def check_gradients(model, graph: Graph, eps=1e-6, seed=0) -> GradientReport:
    """Central finite differences per parameter coordinate against the
    reverse-mode gradients of an MSE loss on the given graph.

    The reported error per parameter is the largest coordinate deviation
    relative to the gradient magnitude, max|fd - ad| / max(|g_fd|, |g_ad|,
    1e-10), with |.| the inf-norm over the parameter's coordinates; the
    f64 noise floor of the loss makes a coordinatewise ratio meaningless
    wherever the true gradient is itself at rounding level.
    """
    rng = rng_from_seed(seed)
    batch = BatchedGraph.from_graphs([graph])
    prep = model.prepare(batch)
    out_shape = model.forward(batch, None, prep).shape
    target = rng.standard_normal(out_shape)

    tape = ad.Tape()
    loss = model.loss(batch, target, tape, prep)
    grads = ad.differentiate(loss, model.store, tape)

    def loss_value():
        return float(model.loss(batch, target, None, prep))

    report = GradientReport(eps=eps)
    for p in model.store:
        flat = p.value.ravel()
        fd = np.empty(flat.size)
        for i in range(flat.size):
            v0 = flat[i]
            flat[i] = v0 + eps
            lp = loss_value()
            flat[i] = v0 - eps
            lm = loss_value()
            flat[i] = v0
            fd[i] = (lp - lm) / (2.0 * eps)
        gad = grads[p.id].ravel()
        denom = max(float(np.max(np.abs(fd))), float(np.max(np.abs(gad))), 1e-10)
        rel = float(np.max(np.abs(fd - gad))) / denom
        report.per_parameter[p.id] = rel
        report.max_rel_error = max(report.max_rel_error, rel)
    return report


# ---------------------------------------------------------------------------
# fault injection
# ---------------------------------------------------------------------------

@contextmanager
def corrupted_cg_sign(l1=1, l2=1, l=1):
    """Flip the sign of one nonzero coefficient in a cached CG table.
    Models built inside the context inherit the broken table."""
    good = o3.cg_coefficients(l1, l2, l)
    bad = good.copy()
    idx = np.argwhere(np.abs(bad) > 1e-9)[0]
    bad[tuple(idx)] = -bad[tuple(idx)]
    bad.setflags(write=False)
    with o3._cg_lock:
        o3._cg_cache[(l1, l2, l)] = bad
    try:
        yield
    finally:
        with o3._cg_lock:
            o3._cg_cache[(l1, l2, l)] = good


@contextmanager
def parity_rule_disabled():
    """Drop the parity factor from the path selection rule (triangle rule
    only), as a wrong-mirror-behaviour mutant."""
    orig = steerable.path_admissible

    def triangle_only(ir1, ir2, ir_out):
        return abs(ir1.l - ir2.l) <= ir_out.l <= ir1.l + ir2.l

    steerable.path_admissible = triangle_only
    try:
        yield
    finally:
        steerable.path_admissible = orig


@contextmanager
def corrupted_adjoint(op_name="weighted_cg_product", scale=1.01):
    """Scale the gradients flowing through one op type, corrupting its
    adjoint without touching the forward values."""
    orig = ad.Tape.record

    def patched(self, op, out_value, backward):
        if op == op_name and backward is not None:
            inner = backward
            backward = lambda g: [(vid, gr * scale) for vid, gr in inner(g)]
        return orig(self, op, out_value, backward)

    ad.Tape.record = patched
    try:
        yield
    finally:
        ad.Tape.record = orig
