"""Representation theory of O(3): irreps, spherical harmonics, Wigner-D
matrices and Clebsch-Gordan coefficients.

Conventions (frozen, everything else in the package relies on them):

* All quantities are real, float64.
* Components of a degree-l block are ordered m = -l, ..., l.
* The l=1 block of the spherical harmonic embedding of a unit vector v is
  ``sqrt(3/4pi) * (v_y, v_z, v_x)``, i.e. the Cartesian axes map to
  (y, z, x) in m-order.
* Spherical harmonics are orthonormal on the unit sphere
  (``integral Y_lm Y_l'm' dn = delta``), so Y_00 = 1/(2 sqrt(pi)).
* Clebsch-Gordan tables are normalised to ``sum C^2 = 2l+1`` with the first
  nonzero coefficient (in lexicographic (m1, m2, m) order) positive.
"""

from __future__ import annotations

import math
import re
import threading
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Irrep",
    "IrrepsLayout",
    "GroupElement",
    "spherical_harmonics",
    "wigner_d",
    "rep_matrix",
    "cg_coefficients",
    "random_group_element",
    "random_rotation",
    "fibonacci_sphere",
]

_ORTHO_TOL = 1e-12


@dataclass(frozen=True, order=True)
class Irrep:
    """A type-l representation label with parity +1 ('e') or -1 ('o')."""

    l: int
    parity: int

    def __post_init__(self):
        if self.l < 0:
            raise ValueError(f"degree must be non-negative, got {self.l}")
        if self.parity not in (1, -1):
            raise ValueError(f"parity must be +1 or -1, got {self.parity}")

    @property
    def dim(self) -> int:
        return 2 * self.l + 1

    @classmethod
    def parse(cls, text: str) -> "Irrep":
        m = re.fullmatch(r"(\d+)([eo])", text.strip())
        if m is None:
            raise ValueError(f"cannot parse irrep {text!r}")
        return cls(int(m.group(1)), 1 if m.group(2) == "e" else -1)

    def __str__(self):
        return f"{self.l}{'e' if self.parity == 1 else 'o'}"


def sh_irrep(l: int) -> Irrep:
    """Irrep of the degree-l spherical harmonics: parity (-1)^l."""
    return Irrep(l, 1 if l % 2 == 0 else -1)


class IrrepsLayout:
    """An ordered direct sum of irreps with multiplicities.

    The textual grammar is ``MULTxLPARITY`` terms joined by '+', e.g.
    ``"8x0e+4x1o+2x2e"``.  Parsing ignores whitespace and round-trips
    exactly through ``str``.
    """

    __slots__ = ("terms", "dim", "_offsets")

    def __init__(self, terms):
        terms = tuple((int(m), ir) for m, ir in terms)
        for m, ir in terms:
            if m <= 0:
                raise ValueError(f"multiplicity must be positive, got {m}x{ir}")
            if not isinstance(ir, Irrep):
                raise TypeError(f"expected Irrep, got {type(ir)}")
        if not terms:
            raise ValueError("layout must contain at least one term")
        self.terms = terms
        offsets = [0]
        for m, ir in terms:
            offsets.append(offsets[-1] + m * ir.dim)
        self._offsets = tuple(offsets)
        self.dim = offsets[-1]

    @classmethod
    def parse(cls, text: str) -> "IrrepsLayout":
        text = re.sub(r"\s+", "", text)
        if not text:
            raise ValueError("empty layout string")
        terms = []
        for part in text.split("+"):
            m = re.fullmatch(r"(\d+)x(\d+)([eo])", part)
            if m is None:
                raise ValueError(f"cannot parse layout term {part!r}")
            terms.append((int(m.group(1)), Irrep.parse(m.group(2) + m.group(3))))
        return cls(terms)

    def __str__(self):
        return "+".join(f"{m}x{ir}" for m, ir in self.terms)

    def __repr__(self):
        return f"IrrepsLayout({str(self)!r})"

    def __eq__(self, other):
        return isinstance(other, IrrepsLayout) and self.terms == other.terms

    def __hash__(self):
        return hash(self.terms)

    def __iter__(self):
        return iter(self.terms)

    def term_slice(self, t: int) -> slice:
        """Column range of term t in a flat feature array."""
        return slice(self._offsets[t], self._offsets[t + 1])

    def slots(self):
        """Flat list of (term_index, copy_index, irrep, offset), one per copy.

        A slot identifies one (multiplicity copy, irrep) sub-vector; paths in
        tensor-product specs refer to slots.
        """
        out = []
        for t, (mult, ir) in enumerate(self.terms):
            base = self._offsets[t]
            for c in range(mult):
                out.append((t, c, ir, base + c * ir.dim))
        return out

    def irreps(self):
        """Set of distinct irreps present in the layout."""
        return {ir for _, ir in self.terms}

    def concat(self, other: "IrrepsLayout") -> "IrrepsLayout":
        return IrrepsLayout(self.terms + other.terms)

    def mul_of(self, irrep: Irrep) -> int:
        return sum(m for m, ir in self.terms if ir == irrep)


def layout(text) -> IrrepsLayout:
    """Shorthand: accept a layout, a string, or a list of terms."""
    if isinstance(text, IrrepsLayout):
        return text
    if isinstance(text, str):
        return IrrepsLayout.parse(text)
    return IrrepsLayout(text)


def sh_layout(lmax: int) -> IrrepsLayout:
    """Layout of a spherical harmonic embedding: 1x0e+1x1o+...+1x{lmax}."""
    return IrrepsLayout([(1, sh_irrep(l)) for l in range(lmax + 1)])


@dataclass(frozen=True)
class GroupElement:
    """An O(3) element: a proper rotation optionally composed with -I."""

    rotation: np.ndarray
    inversion: bool = False

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-10:
            raise ValueError("rotation is not orthogonal")
        if abs(np.linalg.det(R) - 1.0) > 1e-10:
            raise ValueError("rotation must have determinant +1 "
                             "(use inversion=True for the improper part)")
        object.__setattr__(self, "rotation", R)

    @classmethod
    def identity(cls) -> "GroupElement":
        return cls(np.eye(3), False)

    @classmethod
    def from_matrix(cls, M) -> "GroupElement":
        """Split an arbitrary orthogonal matrix into rotation and inversion."""
        M = np.asarray(M, dtype=np.float64)
        if np.linalg.det(M) < 0:
            return cls(-M, True)
        return cls(M, False)

    def matrix(self) -> np.ndarray:
        """The full O(3) matrix acting on Cartesian 3-vectors."""
        return -self.rotation if self.inversion else self.rotation

    def compose(self, other: "GroupElement") -> "GroupElement":
        """self * other (apply ``other`` first)."""
        return GroupElement(self.rotation @ other.rotation,
                            self.inversion ^ other.inversion)

    def inverse(self) -> "GroupElement":
        return GroupElement(self.rotation.T, self.inversion)


# ---------------------------------------------------------------------------
# real spherical harmonics
# ---------------------------------------------------------------------------

def _legendre_no_cs(lmax: int, z: np.ndarray, s: np.ndarray) -> list:
    """Associated Legendre P_l^m(z) without the Condon-Shortley phase.

    ``s = sqrt(1 - z^2)``.  Returns p[l][m] arrays for 0 <= m <= l <= lmax.
    """
    p = [[None] * (l + 1) for l in range(lmax + 1)]
    p[0][0] = np.ones_like(z)
    for m in range(1, lmax + 1):
        p[m][m] = (2 * m - 1) * s * p[m - 1][m - 1]
    for m in range(lmax):
        p[m + 1][m] = (2 * m + 1) * z * p[m][m]
    for m in range(lmax + 1):
        for l in range(m + 2, lmax + 1):
            p[l][m] = ((2 * l - 1) * z * p[l - 1][m]
                       - (l - 1 + m) * p[l - 2][m]) / (l - m)
    return p


def spherical_harmonics(lmax: int, v) -> np.ndarray:
    """Real orthonormal spherical harmonics of a direction, degrees 0..lmax.

    ``v`` has shape (..., 3) and is normalised internally; the result has
    shape (..., (lmax+1)^2) with layout ``1x0e+1x1o+...`` and m-components
    ordered -l..l inside each degree block.

    Raises ValueError("degenerate direction") if any input norm is below
    1e-12; callers that want a zero fallback must handle it themselves.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != 3:
        raise ValueError(f"expected 3-vectors, got shape {v.shape}")
    norm = np.linalg.norm(v, axis=-1)
    if np.any(norm < 1e-12):
        raise ValueError("degenerate direction")
    n = v / norm[..., None]
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    s = np.hypot(x, y)
    phi = np.arctan2(y, x)
    p = _legendre_no_cs(lmax, z, s)

    blocks = []
    for l in range(lmax + 1):
        cols = []
        for m in range(l, 0, -1):  # m = -l .. -1 stored via sin(|m| phi)
            nrm = math.sqrt((2 * l + 1) / (4 * math.pi)
                            * math.factorial(l - m) / math.factorial(l + m))
            cols.append(math.sqrt(2.0) * nrm * np.sin(m * phi) * p[l][m])
        cols.append(math.sqrt((2 * l + 1) / (4 * math.pi)) * p[l][0])
        for m in range(1, l + 1):
            nrm = math.sqrt((2 * l + 1) / (4 * math.pi)
                            * math.factorial(l - m) / math.factorial(l + m))
            cols.append(math.sqrt(2.0) * nrm * np.cos(m * phi) * p[l][m])
        blocks.append(np.stack(cols, axis=-1))
    return np.concatenate(blocks, axis=-1)


def fibonacci_sphere(n: int) -> np.ndarray:
    """n approximately uniform directions on S^2 (golden-angle spiral)."""
    if n < 1:
        raise ValueError("need at least one direction")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


# ---------------------------------------------------------------------------
# Wigner-D matrices
# ---------------------------------------------------------------------------

# l=1 in m-order (-1,0,1) corresponds to Cartesian (y,z,x)
_P_YZX = np.array([[0.0, 1.0, 0.0],
                   [0.0, 0.0, 1.0],
                   [1.0, 0.0, 0.0]])


def vector_to_m(v):
    """Cartesian 3-vectors (..., 3) to l=1 m-order components (y, z, x)."""
    v = np.asarray(v)
    return v[..., [1, 2, 0]]


def vector_from_m(m):
    """l=1 m-order components back to Cartesian (x, y, z)."""
    m = np.asarray(m)
    return m[..., [2, 0, 1]]

_wigner_lock = threading.Lock()
_wigner_fit_cache: dict = {}  # l -> (directions, Y(dirs), pinv of Y(dirs))


def _wigner_fit_basis(l: int):
    with _wigner_lock:
        hit = _wigner_fit_cache.get(l)
    if hit is not None:
        return hit
    dirs = fibonacci_sphere(max(4 * l + 6, 16))
    Y = spherical_harmonics(l, dirs)[:, l * l:]
    pinv = np.linalg.pinv(Y)
    with _wigner_lock:
        _wigner_fit_cache[l] = (dirs, Y, pinv)
    return dirs, Y, pinv


def _rotation_block(l: int, R: np.ndarray) -> np.ndarray:
    """Orthogonal (2l+1)x(2l+1) matrix representing a proper rotation R."""
    if l == 0:
        return np.ones((1, 1))
    if l == 1:
        return _P_YZX @ R @ _P_YZX.T
    # Fit D from the steerability identity Y(R n) = D Y(n) sampled on a
    # well-spread direction set; the residual check enforces correctness.
    dirs, Y, pinv = _wigner_fit_basis(l)
    Yr = spherical_harmonics(l, dirs @ R.T)[:, l * l:]
    D = (pinv @ Yr).T
    resid = np.max(np.abs(Y @ D.T - Yr))
    if resid > 1e-10:
        raise RuntimeError(f"steerability fit failed for l={l}: residual {resid:g}")
    return D


def wigner_d(irrep: Irrep, g: GroupElement) -> np.ndarray:
    """Matrix of ``g`` on a type-(l, parity) space.

    For the improper part the block picks up one factor of the irrep's
    parity, so degree-l spherical harmonics (parity (-1)^l) negate under
    point reflection exactly when l is odd.
    """
    D = _rotation_block(irrep.l, g.rotation)
    if g.inversion and irrep.parity == -1:
        D = -D
    return D


def rep_matrix(lay: IrrepsLayout, g: GroupElement) -> np.ndarray:
    """Block-diagonal representation of ``g`` on a whole layout."""
    lay = layout(lay)
    M = np.zeros((lay.dim, lay.dim))
    blocks = {}
    for t, (mult, ir) in enumerate(lay.terms):
        if ir not in blocks:
            blocks[ir] = wigner_d(ir, g)
        D = blocks[ir]
        base = lay.term_slice(t).start
        for c in range(mult):
            o = base + c * ir.dim
            M[o:o + ir.dim, o:o + ir.dim] = D
    return M


# ---------------------------------------------------------------------------
# Clebsch-Gordan coefficients
# ---------------------------------------------------------------------------

_cg_lock = threading.Lock()
_cg_cache: dict = {}


def cg_coefficients(l1: int, l2: int, l: int) -> np.ndarray:
    """Real-basis Clebsch-Gordan table of shape (2l1+1, 2l2+1, 2l+1).

    Zero outside the triangle inequality.  Inside it, the table is the
    (unique up to sign) solution of the rotation-equivariance constraint
    ``contract(C, D1 h1, D2 h2) = D3 contract(C, h1, h2)``, found as the
    null space of the constraint stacked over a fixed pair of generic
    rotations.  Normalised to ``sum C^2 = 2l+1``; sign fixed by making the
    first nonzero entry in lexicographic (m1, m2, m) order positive.
    Tables are cached per (l1, l2, l).
    """
    key = (l1, l2, l)
    with _cg_lock:
        hit = _cg_cache.get(key)
    if hit is not None:
        return hit

    d1, d2, d3 = 2 * l1 + 1, 2 * l2 + 1, 2 * l + 1
    if l < abs(l1 - l2) or l > l1 + l2:
        C = np.zeros((d1, d2, d3))
    else:
        rng = np.random.Generator(np.random.PCG64(0x5EED + 1000 * l1 + 100 * l2 + l))
        n = d1 * d2 * d3
        ata = np.zeros((n, n))
        for _ in range(2):
            R = random_rotation(rng)
            M = np.kron(np.kron(_rotation_block(l1, R).T, _rotation_block(l2, R).T),
                        _rotation_block(l, R).T)
            M -= np.eye(n)
            ata += M.T @ M
        w, V = np.linalg.eigh(ata)
        if w[0] > 1e-10:
            raise RuntimeError(f"no invariant tensor found for {key}")
        if n > 1 and w[1] < 1e-4:
            raise RuntimeError(f"invariant tensor for {key} is not unique")
        C = V[:, 0].reshape(d1, d2, d3)
        C[np.abs(C) < 1e-12] = 0.0
        C *= math.sqrt(d3 / np.sum(C * C))
        flat = C.ravel()
        first = flat[np.abs(flat) > 1e-9][0]
        if first < 0:
            C = -C
        C.setflags(write=False)

    with _cg_lock:
        _cg_cache.setdefault(key, C)
    return _cg_cache[key]


# ---------------------------------------------------------------------------
# random sampling
# ---------------------------------------------------------------------------

def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Rotation matrix drawn from the Haar measure, via a uniform quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_group_element(rng: np.random.Generator,
                         include_inversion: bool = True) -> GroupElement:
    """Haar-random rotation, composed with -I with probability 1/2."""
    R = random_rotation(rng)
    inv = bool(rng.random() < 0.5) if include_inversion else False
    return GroupElement(R, inv)
