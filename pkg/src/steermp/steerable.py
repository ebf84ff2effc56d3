"""Steerable tensors and the equivariant neural building blocks.

The central op is the weighted Clebsch-Gordan tensor product: every
admissible (input copy, attribute copy, output copy, degree triple) gets one
learnable weight.  For execution, per-copy paths are grouped into blocks by
layout term, so one einsum handles a whole multiplicity block; einsum
contraction orders are planned once per block and cached.

All ops come in a pure form (operating on :class:`SteerableTensor`) and are
also usable inside a recorded forward pass via an optional tape argument;
gradients w.r.t. inputs and weights are registered as a single adjoint per
op.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var, value_of
from .o3 import Irrep, IrrepsLayout, cg_coefficients, layout, sh_layout, spherical_harmonics

__all__ = [
    "SteerableTensor", "Path", "TensorProductSpec", "enumerate_paths",
    "path_admissible", "weighted_cg_product", "conditioned_linear",
    "gate_activation", "instance_norm", "balanced_layout", "copies_layout",
    "sample_on_sphere", "init_weights", "tp_apply", "gate_apply",
    "instance_norm_apply",
]


@dataclass
class SteerableTensor:
    """Batched flat storage interpreted through an IrrepsLayout."""

    layout: IrrepsLayout
    data: np.ndarray

    def __post_init__(self):
        self.layout = layout(self.layout)
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape[-1] != self.layout.dim:
            raise ValueError(f"trailing extent {self.data.shape[-1]} does not "
                             f"match layout {self.layout} (dim {self.layout.dim})")

    @property
    def batch(self):
        return self.data.shape[:-1]


def path_admissible(ir1: Irrep, ir2: Irrep, ir_out: Irrep) -> bool:
    """Selection rule: triangle inequality on degrees, parities multiply."""
    return (abs(ir1.l - ir2.l) <= ir_out.l <= ir1.l + ir2.l
            and ir_out.parity == ir1.parity * ir2.parity)


@dataclass(frozen=True)
class Path:
    """One weighted CG path between single (copy, irrep) sub-vectors.

    Slots index copies across the whole layout (see IrrepsLayout.slots);
    each path carries exactly one learnable weight, so its weight range is
    [weight_index, weight_index + 1).
    """

    in_slot: int
    attr_slot: int
    out_slot: int
    degrees: tuple
    weight_index: int

    @property
    def weight_range(self):
        return (self.weight_index, self.weight_index + 1)


class TensorProductSpec:
    """Enumerated CG paths between three layouts plus compiled exec blocks."""

    def __init__(self, in_layout, attr_layout, out_layout, paths, weight_count):
        self.in_layout = in_layout
        self.attr_layout = attr_layout
        self.out_layout = out_layout
        self.paths = paths
        self.weight_count = weight_count
        self._blocks = None
        self._bias_cols = None

    @property
    def bias_cols(self):
        """Column indices of the scalar (0e) output copies, for bias adds."""
        if self._bias_cols is None:
            cols = [off for (_, _, ir, off) in self.out_layout.slots()
                    if ir == Irrep(0, 1)]
            self._bias_cols = np.asarray(cols, dtype=np.intp)
        return self._bias_cols

    @property
    def blocks(self):
        if self._blocks is None:
            self._blocks = _compile_blocks(self)
        return self._blocks


def enumerate_paths(in_layout, attr_layout, out_layout) -> TensorProductSpec:
    """All admissible paths, ordered lexicographically by (output slot,
    input slot, attribute slot); the order also defines weight indices.

    Raises if any output slot cannot be produced by any path.
    """
    in_layout, attr_layout, out_layout = (layout(in_layout), layout(attr_layout),
                                          layout(out_layout))
    in_slots = in_layout.slots()
    attr_slots = attr_layout.slots()
    out_slots = out_layout.slots()

    paths = []
    reachable = set()
    w = 0
    for o, (_, _, ir_o, _) in enumerate(out_slots):
        for i, (_, _, ir_i, _) in enumerate(in_slots):
            for a, (_, _, ir_a, _) in enumerate(attr_slots):
                if path_admissible(ir_i, ir_a, ir_o):
                    paths.append(Path(i, a, o, (ir_i.l, ir_a.l, ir_o.l), w))
                    reachable.add(o)
                    w += 1
    missing = [o for o in range(len(out_slots)) if o not in reachable]
    if missing:
        desc = ", ".join(f"slot {o} ({out_slots[o][2]})" for o in missing)
        raise ValueError(f"output slots unreachable by any path: {desc}")
    return TensorProductSpec(in_layout, attr_layout, out_layout, paths, w)


def _diag_vector(m):
    """Diagonal of a square matrix whose off-diagonal entries are exactly
    zero (CG tables store structural zeros exactly), else None."""
    if m.shape[0] != m.shape[1]:
        return None
    off = m[~np.eye(m.shape[0], dtype=bool)]
    if off.size and np.any(off != 0.0):
        return None
    return np.diag(m).copy()


class _Block:
    """One (input term, attribute term, output term) group of paths.

    Execution is specialised on the structure of the CG table: blocks where
    one leg is a scalar (the table is diagonal) reduce to a GEMM plus a
    broadcast scale, which carries nearly all of the runtime of the degree<=1
    networks.  ``kind`` is one of sss / diag_i / diag_j / diag_k / general.
    """

    __slots__ = ("in_sl", "attr_sl", "out_sl", "mults", "dims", "cg", "w_idx",
                 "kind", "dvec", "cgf")

    def __init__(self, in_sl, attr_sl, out_sl, mults, dims, cg, w_idx):
        self.in_sl = in_sl
        self.attr_sl = attr_sl
        self.out_sl = out_sl
        self.mults = mults
        self.dims = dims
        self.cg = cg
        self.w_idx = w_idx
        di, dj, dk = dims
        self.kind = "general"
        self.dvec = None
        if di == 1 and dj == 1 and dk == 1:
            self.kind, self.dvec = "sss", cg[0, 0, 0]
        elif dj == 1:
            d = _diag_vector(cg[:, 0, :])
            if d is not None:
                self.kind, self.dvec = "diag_j", d
        elif di == 1:
            d = _diag_vector(cg[0, :, :])
            if d is not None:
                self.kind, self.dvec = "diag_i", d
        elif dk == 1:
            d = _diag_vector(cg[:, :, 0])
            if d is not None:
                self.kind, self.dvec = "diag_k", d
        self.cgf = np.ascontiguousarray(cg.reshape(di, dj * dk))

    # Forward returns (out_block [E, c, dk], saved-for-backward); the
    # backward methods mirror the forward contraction per attribute copy.
    # ``hb`` is the copy-major view [E, a, di]; ``hbt`` the component-major
    # view [E, di, a] (materialised once per input term by the caller).

    def forward(self, hb, hbt, ab, wb):
        e = hb.shape[0]
        a, b, c = self.mults
        di, dj, dk = self.dims
        out = None
        saved = []
        for bi in range(b):
            w = wb[:, bi, :]
            if self.kind == "sss":
                s = hb[:, :, 0] @ (self.dvec * w)
                ob = (s * ab[:, bi, 0][:, None])[:, :, None]
                saved.append(None)
            elif self.kind == "diag_j":
                z = (hbt.reshape(e * di, a) @ w).reshape(e, di, c)
                ob = z.transpose(0, 2, 1) * (ab[:, bi, 0][:, None, None]
                                             * self.dvec[None, None, :])
                saved.append(None)
            elif self.kind == "diag_i":
                u = hb[:, :, 0] @ w
                q = ab[:, bi, :] * self.dvec
                ob = u[:, :, None] * q[:, None, :]
                saved.append((u, q))
            elif self.kind == "diag_k":
                q = ab[:, bi, :] * self.dvec
                u = np.matmul(hb, q[:, :, None])[:, :, 0]
                ob = (u @ w)[:, :, None]
                saved.append((u, q))
            else:
                t = (hb.reshape(e * a, di) @ self.cgf).reshape(e, a, dj, dk)
                u = np.matmul(t.transpose(0, 1, 3, 2),
                              ab[:, bi, :, None][:, None])[..., 0]  # [E,a,dk]
                ob = (u.transpose(0, 2, 1).reshape(e * dk, a) @ w) \
                    .reshape(e, dk, c).transpose(0, 2, 1)
                saved.append((t, u))
            out = ob if out is None else out + ob
        return out, saved

    def backward(self, gb, hb, hbt, ab, wb, saved, need_h, need_w, need_a):
        e = gb.shape[0]
        a, b, c = self.mults
        di, dj, dk = self.dims
        dh = dw = None

        def acc_h(x, target_shape=None):
            nonlocal dh
            dh = x if dh is None else dh + x

        def acc_w(x, bi):
            nonlocal dw
            if dw is None:
                dw = np.empty((a, b, c))
            dw[:, bi, :] = x

        for bi in range(b):
            w = wb[:, bi, :]
            if self.kind == "sss":
                v = gb[:, :, 0] * ab[:, bi, 0][:, None]
                if need_w:
                    acc_w(self.dvec * (hb[:, :, 0].T @ v), bi)
                if need_h:
                    acc_h((v @ (self.dvec * w).T)[:, :, None])
            elif self.kind == "diag_j":
                gs = gb * (ab[:, bi, 0][:, None, None] * self.dvec[None, None, :])
                gs_t = np.ascontiguousarray(gs.transpose(0, 2, 1)) \
                    .reshape(e * dk, c)
                if need_w:
                    acc_w(hbt.reshape(e * dk, a).T @ gs_t, bi)
                if need_h:
                    acc_h((gs_t @ w.T).reshape(e, dk, a).transpose(0, 2, 1))
            elif self.kind == "diag_i":
                u, q = saved[bi]
                t = np.matmul(gb, q[:, :, None])[:, :, 0]  # [E, c]
                if need_w:
                    acc_w(hb[:, :, 0].T @ t, bi)
                if need_h:
                    acc_h((t @ w.T)[:, :, None])
            elif self.kind == "diag_k":
                u, q = saved[bi]
                gs = gb[:, :, 0]
                if need_w:
                    acc_w(u.T @ gs, bi)
                if need_h:
                    acc_h((gs @ w.T)[:, :, None] * q[:, None, :])
            else:
                t, u = saved[bi]
                gt = np.ascontiguousarray(gb.transpose(0, 2, 1)) \
                    .reshape(e * dk, c)
                if need_w:
                    ut = np.ascontiguousarray(u.transpose(1, 0, 2))
                    acc_w(ut.reshape(a, e * dk) @ gt, bi)
                if need_h:
                    du = (gt @ w.T).reshape(e, dk, a).transpose(0, 2, 1)
                    dt = du[:, :, None, :] * ab[:, bi, :][:, None, :, None]
                    acc_h((dt.reshape(e * a, dj * dk) @ self.cgf.T)
                          .reshape(e, a, di))
        da = None
        if need_a:
            # attribute gradients are off the training path; use the
            # reference contraction for them
            da = np.einsum("eai,ijk,abc,eck->ebj", hb, self.cg, wb, gb)
        return dh, dw, da

    def reference_forward(self, hb, ab, wb):
        return np.einsum("eai,ebj,ijk,abc->eck", hb, ab, self.cg, wb,
                         optimize=True)


def _compile_blocks(spec: TensorProductSpec):
    by_slot = {(p.in_slot, p.attr_slot, p.out_slot): p.weight_index
               for p in spec.paths}
    in_slots = spec.in_layout.slots()
    attr_slots = spec.attr_layout.slots()
    out_slots = spec.out_layout.slots()

    # first slot index of each term
    def term_starts(lay):
        starts, s = [], 0
        for mult, _ in lay.terms:
            starts.append(s)
            s += mult
        return starts

    in_starts = term_starts(spec.in_layout)
    attr_starts = term_starts(spec.attr_layout)
    out_starts = term_starts(spec.out_layout)

    blocks = []
    for to, (mo, iro) in enumerate(spec.out_layout.terms):
        for ti, (mi, iri) in enumerate(spec.in_layout.terms):
            for ta, (ma, ira) in enumerate(spec.attr_layout.terms):
                if not path_admissible(iri, ira, iro):
                    continue
                w_idx = np.empty((mi, ma, mo), dtype=np.intp)
                for a in range(mi):
                    for b in range(ma):
                        for c in range(mo):
                            w_idx[a, b, c] = by_slot[(in_starts[ti] + a,
                                                      attr_starts[ta] + b,
                                                      out_starts[to] + c)]
                cg = cg_coefficients(iri.l, ira.l, iro.l)
                blocks.append(_Block(
                    spec.in_layout.term_slice(ti),
                    spec.attr_layout.term_slice(ta),
                    spec.out_layout.term_slice(to),
                    (mi, ma, mo), (iri.dim, ira.dim, iro.dim), cg, w_idx))
    return blocks


def _flatten_batch(x, dim):
    x = np.asarray(x)
    lead = x.shape[:-1]
    return x.reshape(-1, dim), lead


def tp_apply(tape, spec: TensorProductSpec, h, a, w, bias=None):
    """Weighted CG tensor product, recordable on a tape.

    ``h``/``a``/``w``/``bias`` may each be a Var or a constant array.  Bias,
    when given, is added to the scalar (0e) output copies and must have one
    entry per such copy.
    """
    hv, av, wv = value_of(h), value_of(a), value_of(w)
    if hv.shape[-1] != spec.in_layout.dim:
        raise ValueError(f"input dim {hv.shape[-1]} does not match layout "
                         f"{spec.in_layout}")
    if av.shape[-1] != spec.attr_layout.dim:
        raise ValueError(f"attribute dim {av.shape[-1]} does not match layout "
                         f"{spec.attr_layout}")
    if wv.shape != (spec.weight_count,):
        raise ValueError(f"expected {spec.weight_count} weights, got {wv.shape}")

    hf, lead = _flatten_batch(hv, spec.in_layout.dim)
    af, lead_a = _flatten_batch(av, spec.attr_layout.dim)
    if lead_a != lead:
        if af.shape[0] == 1:
            af = np.broadcast_to(af, (hf.shape[0], af.shape[1]))
        else:
            raise ValueError(f"batch extents differ: input {lead}, attribute {lead_a}")
    e = hf.shape[0]

    out = np.zeros((e, spec.out_layout.dim))
    saved = []
    h_terms, ht_terms, a_terms = {}, {}, {}
    for blk in spec.blocks:
        a_, b_, c_ = blk.mults
        di, dj, dk = blk.dims
        hkey = (blk.in_sl.start, blk.in_sl.stop)
        hb = h_terms.get(hkey)
        if hb is None:
            hb = np.ascontiguousarray(hf[:, blk.in_sl]).reshape(e, a_, di)
            h_terms[hkey] = hb
        hbt = None
        if blk.kind == "diag_j":
            hbt = ht_terms.get(hkey)
            if hbt is None:
                hbt = np.ascontiguousarray(hb.transpose(0, 2, 1))
                ht_terms[hkey] = hbt
        akey = (blk.attr_sl.start, blk.attr_sl.stop)
        ab = a_terms.get(akey)
        if ab is None:
            ab = np.ascontiguousarray(af[:, blk.attr_sl]).reshape(e, b_, dj)
            a_terms[akey] = ab
        wb = wv[blk.w_idx]
        ob, blk_saved = blk.forward(hb, hbt, ab, wb)
        out[:, blk.out_sl] += ob.reshape(e, c_ * dk)
        saved.append((hb, hbt, ab, wb, blk_saved))

    if bias is not None:
        bv = value_of(bias)
        cols = spec.bias_cols
        if bv.shape != (len(cols),):
            raise ValueError(f"bias length {bv.shape} does not match "
                             f"{len(cols)} scalar output copies")
        out[:, cols] += bv

    out = out.reshape(lead + (spec.out_layout.dim,))
    tracked = [x for x in (h, a, w, bias) if isinstance(x, Var)]
    if tape is None or not tracked:
        return out

    def backward(g):
        gf = g.reshape(e, spec.out_layout.dim)
        contribs = []
        gh = np.zeros_like(hf) if isinstance(h, Var) else None
        ga = np.zeros_like(af) if isinstance(a, Var) else None
        gw = np.zeros(spec.weight_count) if isinstance(w, Var) else None
        g_terms = {}
        for blk, (hb, hbt, ab, wb, blk_saved) in zip(spec.blocks, saved):
            a_, b_, c_ = blk.mults
            di, dj, dk = blk.dims
            gkey = (blk.out_sl.start, blk.out_sl.stop)
            gb = g_terms.get(gkey)
            if gb is None:
                gb = np.ascontiguousarray(gf[:, blk.out_sl]).reshape(e, c_, dk)
                g_terms[gkey] = gb
            dh, dw, da = blk.backward(gb, hb, hbt, ab, wb, blk_saved,
                                      gh is not None, gw is not None,
                                      ga is not None)
            if dw is not None:
                gw[blk.w_idx.ravel()] += dw.ravel()
            if dh is not None:
                gh[:, blk.in_sl] += dh.reshape(e, a_ * di)
            if da is not None:
                ga[:, blk.attr_sl] += da.reshape(e, b_ * dj)
        if gh is not None:
            contribs.append((h.id, gh.reshape(hv.shape)))
        if ga is not None:
            contribs.append((a.id, ga.reshape(av.shape)))
        if gw is not None:
            contribs.append((w.id, gw))
        if isinstance(bias, Var):
            contribs.append((bias.id, gf[:, spec.bias_cols].sum(axis=0)))
        return contribs

    return tape.record("weighted_cg_product", out, backward)


def weighted_cg_product(h: SteerableTensor, a: SteerableTensor, weights,
                        spec: TensorProductSpec) -> SteerableTensor:
    """Pure-function form of the weighted CG tensor product."""
    out = tp_apply(None, spec, h.data, a.data, np.asarray(weights, dtype=np.float64))
    return SteerableTensor(spec.out_layout, out)


def conditioned_linear(h: SteerableTensor, a: SteerableTensor, weights, bias,
                       spec: TensorProductSpec) -> SteerableTensor:
    """CG product with a bias added to the scalar outputs (a steerable
    linear layer conditioned on the attribute vector)."""
    out = tp_apply(None, spec, h.data, a.data,
                   np.asarray(weights, dtype=np.float64),
                   np.asarray(bias, dtype=np.float64))
    return SteerableTensor(spec.out_layout, out)


def init_weights(spec: TensorProductSpec, rng) -> np.ndarray:
    """Path weights, 1 per path, drawn N(0, 1/fan_in) where fan_in is the
    number of paths feeding the path's output slot (path normalization)."""
    fan_in = {}
    for p in spec.paths:
        fan_in[p.out_slot] = fan_in.get(p.out_slot, 0) + 1
    w = np.empty(spec.weight_count)
    for p in spec.paths:
        w[p.weight_index] = rng.normal(0.0, math.sqrt(1.0 / fan_in[p.out_slot]))
    return w


# ---------------------------------------------------------------------------
# gated nonlinearity
# ---------------------------------------------------------------------------

class GatePlan:
    """Column bookkeeping for the gate convention [scalars | gates | higher].

    The layout must list all 0e terms before any higher-order term; the last
    ``n_higher_copies`` scalar columns act as gates (one per higher-order
    copy, in order) and are consumed by the op.
    """

    def __init__(self, lay: IrrepsLayout):
        lay = layout(lay)
        n_scalar_cols = 0
        higher = []
        seen_higher = False
        for mult, ir in lay.terms:
            if ir.l == 0:
                if seen_higher:
                    raise ValueError(f"layout {lay} mixes scalars after "
                                     "higher-order terms; gate convention is "
                                     "[scalars | gates | higher]")
                n_scalar_cols += mult
            else:
                seen_higher = True
                higher.append((mult, ir))
        n_gates = sum(m for m, _ in higher)
        if n_gates > n_scalar_cols:
            raise ValueError(f"layout {lay} has {n_gates} higher-order copies "
                             f"but only {n_scalar_cols} scalars to gate with")
        self.in_layout = lay
        self.n_gates = n_gates
        self.n_pass = n_scalar_cols - n_gates
        self.higher_dim = lay.dim - n_scalar_cols
        gate_of_col = []
        copy_edges = [0]
        gi = 0
        for mult, ir in higher:
            for _ in range(mult):
                gate_of_col.extend([gi] * ir.dim)
                copy_edges.append(copy_edges[-1] + ir.dim)
                gi += 1
        self.gate_of_col = np.asarray(gate_of_col, dtype=np.intp)
        self.copy_starts = np.asarray(copy_edges[:-1], dtype=np.intp)
        out_terms = []
        if self.n_pass:
            out_terms.append((self.n_pass, Irrep(0, 1)))
        out_terms.extend(higher)
        if not out_terms:
            raise ValueError("gate would consume the entire layout")
        self.out_layout = IrrepsLayout(out_terms)


def gate_apply(tape, plan: GatePlan, x):
    """Swish the passthrough scalars; multiply each higher-order sub-vector
    by the Swish of its gate scalar.  Gates are absent from the output."""
    xv = value_of(x)
    ns, ng = plan.n_pass, plan.n_gates
    s = xv[..., :ns]
    g = xv[..., ns:ns + ng]
    hi = xv[..., ns + ng:]
    s_out, s_sig = ad._swish(s)
    g_act, g_sig = ad._swish(g)
    g_act_cols = g_act[..., plan.gate_of_col]
    out = np.concatenate([s_out, hi * g_act_cols], axis=-1)
    if tape is None or not isinstance(x, Var):
        return out
    ds = s_sig * (1.0 + s * (1.0 - s_sig))   # d swish(s) / ds
    dg = g_sig * (1.0 + g * (1.0 - g_sig))

    def backward(grad):
        gs = grad[..., :ns]
        gh = grad[..., ns:]
        d = np.empty_like(xv)
        np.multiply(gs, ds, out=d[..., :ns])
        # gate gradient: sum over the columns of each gated copy
        if ng:
            per_gate = np.add.reduceat(gh * hi, plan.copy_starts, axis=-1)
            np.multiply(per_gate, dg, out=d[..., ns:ns + ng])
        np.multiply(gh, g_act_cols, out=d[..., ns + ng:])
        return [(x.id, d)]
    return tape.record("gate_activation", out, backward)


def gate_activation(features: SteerableTensor) -> SteerableTensor:
    plan = GatePlan(features.layout)
    return SteerableTensor(plan.out_layout, gate_apply(None, plan, features.data))


# ---------------------------------------------------------------------------
# instance normalization
# ---------------------------------------------------------------------------

def instance_norm_apply(tape, lay: IrrepsLayout, x, eps=1e-5, instances=None):
    """Per-instance, per-irrep-type RMS normalization.

    Rows sharing an entry of ``instances`` (default: every row its own
    instance) pool their statistics.  Scalar (0e) copies are mean-centered
    first; each term's sub-vectors are then divided by the RMS of the copy
    norms over the instance, plus eps.
    """
    lay = layout(lay)
    xv = value_of(x)
    flat, lead = _flatten_batch(xv, lay.dim)
    n = flat.shape[0]
    if instances is None:
        inst = np.arange(n)
        n_inst = n
    else:
        inst = np.asarray(instances)
        n_inst = int(inst.max()) + 1 if len(inst) else 0
    counts = np.bincount(inst, minlength=n_inst).astype(np.float64)

    out = np.empty_like(flat)
    # backward needs: per-term centered values, scale factors
    if not isinstance(x, Var) or tape is None:
        record = False
    else:
        record = True
    saved = []
    for t, (mult, ir) in enumerate(lay.terms):
        sl = lay.term_slice(t)
        block = flat[:, sl].reshape(n, mult, ir.dim)
        if ir.l == 0:
            means = np.bincount(inst, weights=block[:, :, 0].sum(axis=1),
                                minlength=n_inst) / (counts * mult)
            block = block - means[inst][:, None, None]
        sq = np.einsum("nmi,nmi->n", block, block) / mult
        ssum = np.bincount(inst, weights=sq, minlength=n_inst)
        rms = np.sqrt(ssum / counts)
        scale = 1.0 / (rms + eps)
        out[:, sl] = (block * scale[inst][:, None, None]).reshape(n, -1)
        saved.append((block, rms, scale))
    out = out.reshape(lead + (lay.dim,))
    if not record:
        return out

    def backward(g):
        gf = g.reshape(n, lay.dim)
        d = np.empty_like(flat)
        for t, (mult, ir) in enumerate(lay.terms):
            sl = lay.term_slice(t)
            block, rms, scale = saved[t]
            gb = gf[:, sl].reshape(n, mult, ir.dim)
            # d/dx [ c(x) * scale(x) ]  with c the centered value and
            # scale = 1/(rms + eps), rms^2 = mean over instance of |c|^2/mult
            dot = np.einsum("nmi,nmi->n", gb, block)
            dot_inst = np.bincount(inst, weights=dot, minlength=n_inst)
            denom = counts * mult * np.maximum(rms, 1e-300) * (rms + eps) ** 2
            coef = (dot_inst / denom)[inst]
            gin = gb * scale[inst][:, None, None] - block * coef[:, None, None]
            if ir.l == 0:
                g_means = np.bincount(inst, weights=gin[:, :, 0].sum(axis=1),
                                      minlength=n_inst) / (counts * mult)
                gin = gin - g_means[inst][:, None, None]
            d[:, sl] = gin.reshape(n, -1)
        return [(x.id, d.reshape(xv.shape))]
    return tape.record("instance_norm", out, backward)


def instance_norm(h: SteerableTensor, eps=1e-5, instances=None) -> SteerableTensor:
    return SteerableTensor(h.layout,
                           instance_norm_apply(None, h.layout, h.data, eps, instances))


# ---------------------------------------------------------------------------
# layout construction
# ---------------------------------------------------------------------------

def copies_layout(n: int, lmax: int) -> IrrepsLayout:
    """n copies of the degree-0..lmax tower with spherical-harmonic parities,
    written as one term per degree: n x0e + n x1o + ..."""
    from .o3 import sh_irrep
    return IrrepsLayout([(n, sh_irrep(l)) for l in range(lmax + 1)])


def balanced_layout(target_dim: int, lmax: int, include_odd: bool = False,
                    mode: str = "balanced", attr_lmax=None) -> IrrepsLayout:
    """Feature layouts of roughly ``target_dim`` total size.

    mode="balanced": give each degree ~target_dim/(lmax+1) dimensions
    (multiplicity = floor(share / (2l+1))), leftover dimensions go to l=0.
    With include_odd each degree is split over both parities (the natural
    spherical-harmonic parity gets the odd copy when the multiplicity is
    odd).

    mode="copies": n copies of the degree tower, n picked so that the weight
    count of a self-map conditioned on a degree-0..attr_lmax attribute is as
    close as possible to target_dim^2 without exceeding twice that, i.e. the
    layer has the weight budget of a target_dim-wide ordinary linear layer.
    """
    if target_dim < lmax + 1:
        raise ValueError(f"target_dim {target_dim} cannot host degrees up to {lmax}")
    from .o3 import sh_irrep

    if mode == "copies":
        if attr_lmax is None:
            attr_lmax = lmax
        base = copies_layout(1, lmax)
        w1 = enumerate_paths(base, sh_layout(attr_lmax), base).weight_count
        budget = target_dim * target_dim
        n_max = int(math.floor(math.sqrt(2.0 * budget / w1)))
        if n_max < 1:
            raise ValueError(f"no copy count fits the weight budget {budget} "
                             f"(one copy already needs {w1} weights)")
        n = min(range(1, n_max + 1), key=lambda k: abs(k * k * w1 - budget))
        return copies_layout(n, lmax)

    if mode != "balanced":
        raise ValueError(f"unknown layout mode {mode!r}")
    share = target_dim // (lmax + 1)
    terms = []
    used = 0
    for l in range(lmax + 1):
        mult = share // (2 * l + 1)
        if mult == 0:
            continue
        used += mult * (2 * l + 1)
        if include_odd and mult >= 2:
            natural = sh_irrep(l)
            other = Irrep(l, -natural.parity)
            hi, lo = mult - mult // 2, mult // 2
            terms.append((hi, natural))
            if lo:
                terms.append((lo, other))
        else:
            terms.append((mult, sh_irrep(l) if include_odd else Irrep(l, 1)))
    rest = target_dim - used
    if rest:
        if terms and terms[0][1] == Irrep(0, 1):
            terms[0] = (terms[0][0] + rest, Irrep(0, 1))
        else:
            terms.insert(0, (rest, Irrep(0, 1)))
    if not terms:
        raise ValueError("balanced layout came out empty")
    return IrrepsLayout(terms)


def compact_permutation(lay: IrrepsLayout):
    """Merge repeated irreps of a layout into single terms.

    Returns (compact layout, column permutation, inverse permutation) such
    that ``x[..., perm]`` has the compact layout.  Irreps keep the order of
    their first appearance; copies keep their original relative order.
    """
    lay = layout(lay)
    order = []
    groups = {}
    for t, (mult, ir) in enumerate(lay.terms):
        if ir not in groups:
            groups[ir] = []
            order.append(ir)
        base = lay.term_slice(t).start
        for c in range(mult):
            groups[ir].append(base + c * ir.dim)
    perm = []
    terms = []
    for ir in order:
        offs = groups[ir]
        terms.append((len(offs), ir))
        for o in offs:
            perm.extend(range(o, o + ir.dim))
    perm = np.asarray(perm, dtype=np.intp)
    return IrrepsLayout(terms), perm, np.argsort(perm)


# ---------------------------------------------------------------------------
# sphere sampling (glyphs)
# ---------------------------------------------------------------------------

def sample_on_sphere(v: SteerableTensor, directions) -> np.ndarray:
    """Evaluate the spherical function represented by single-copy-per-degree
    coefficients at the given unit directions: f(n) = sum_lm a_lm Y_lm(n)."""
    lay = v.layout
    for t, (mult, ir) in enumerate(lay.terms):
        if mult != 1:
            raise ValueError(f"term {t} ({mult}x{ir}) has multiplicity > 1; "
                             "spherical sampling needs one copy per degree")
        if ir.l != t:
            raise ValueError(f"expected degree {t} at term {t}, got {ir}")
    lmax = len(lay.terms) - 1
    directions = np.asarray(directions, dtype=np.float64)
    basis = spherical_harmonics(lmax, directions)
    return basis @ np.asarray(v.data, dtype=np.float64)
