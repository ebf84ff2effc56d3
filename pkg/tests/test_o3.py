"""Representation-theory suite: spherical harmonics, Wigner-D matrices,
Clebsch-Gordan tables, and the layout grammar."""

import math

import numpy as np
import pytest

from steermp.o3 import (GroupElement, Irrep, IrrepsLayout, cg_coefficients,
                        fibonacci_sphere, random_group_element, rep_matrix,
                        sh_irrep, sh_layout, spherical_harmonics, wigner_d,
                        vector_from_m, vector_to_m)
from steermp.tensor import rng_from_seed

LMAX = 4
TOL = 1e-10


def rng():
    return rng_from_seed(0xA5)


def random_direction(r):
    v = r.standard_normal(3)
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------------------
# irreps and layouts
# ---------------------------------------------------------------------------

def test_irrep_basics():
    assert Irrep(2, 1).dim == 5
    assert str(Irrep(1, -1)) == "1o"
    assert Irrep.parse("3e") == Irrep(3, 1)
    with pytest.raises(ValueError):
        Irrep(-1, 1)
    with pytest.raises(ValueError):
        Irrep(1, 2)


def test_layout_grammar_round_trip():
    text = "8x0e+4x1o+2x2e"
    lay = IrrepsLayout.parse(text)
    assert str(lay) == text
    assert lay.dim == 8 + 12 + 10
    # whitespace-insensitive
    assert IrrepsLayout.parse(" 8x0e +4x1o+ 2x2e ") == lay
    # slot offsets are prefix sums
    offsets = [off for (_, _, _, off) in lay.slots()]
    assert offsets[:9] == [0, 1, 2, 3, 4, 5, 6, 7, 8]
    assert offsets[8 + 1] == 8 + 3


def test_layout_rejects_garbage():
    for bad in ("", "4x1", "0x1e", "1x1q", "4x1e+"):
        with pytest.raises(ValueError):
            IrrepsLayout.parse(bad)


# ---------------------------------------------------------------------------
# group elements
# ---------------------------------------------------------------------------

def test_group_element_validation():
    with pytest.raises(ValueError):
        GroupElement(np.eye(3) * 2.0)
    with pytest.raises(ValueError):
        GroupElement(-np.eye(3))  # improper: must use inversion flag
    g = GroupElement.from_matrix(-np.eye(3))
    assert g.inversion and np.allclose(g.rotation, np.eye(3))


def test_group_product_and_inverse():
    r = rng()
    for _ in range(20):
        g1 = random_group_element(r)
        g2 = random_group_element(r)
        m = g1.compose(g2).matrix()
        assert np.allclose(m, g1.matrix() @ g2.matrix(), atol=1e-13)
        gi = g1.inverse()
        assert np.allclose(gi.matrix() @ g1.matrix(), np.eye(3), atol=1e-13)


def test_random_rotation_is_special_orthogonal():
    r = rng()
    for _ in range(50):
        g = random_group_element(r, include_inversion=False)
        assert not g.inversion
        assert abs(np.linalg.det(g.rotation) - 1.0) < 1e-12


def test_haar_mean_is_zero():
    # the mean of Haar-distributed rotation matrices vanishes
    r = rng()
    total = np.zeros((3, 3))
    n = 100_000
    for _ in range(n):
        total += random_group_element(r, include_inversion=False).rotation
    assert np.max(np.abs(total / n)) < 0.02


def test_random_group_element_deterministic():
    g1 = random_group_element(rng_from_seed(7), True)
    g2 = random_group_element(rng_from_seed(7), True)
    assert np.array_equal(g1.rotation, g2.rotation)
    assert g1.inversion == g2.inversion


# ---------------------------------------------------------------------------
# spherical harmonics
# ---------------------------------------------------------------------------

def test_sh_l0_value_and_normalization():
    # Y00 is constant; its square integrates to 1 over the sphere, so the
    # value must be 1/(2 sqrt(pi)).  Verify the normalisation numerically.
    v = np.array([0.3, -1.2, 0.5])
    y0 = spherical_harmonics(0, v)[0]
    assert abs(y0 - 1.0 / (2.0 * math.sqrt(math.pi))) < 1e-14
    grid = fibonacci_sphere(20_000)
    integral = np.mean(spherical_harmonics(0, grid)[:, 0] ** 2) * 4 * math.pi
    assert abs(integral - 1.0) < 1e-3


def test_sh_orthonormality_numerical():
    # Monte-Carlo check of <Y_lm, Y_l'm'> = delta on a dense uniform grid
    grid = fibonacci_sphere(80_000)
    y = spherical_harmonics(3, grid)
    gram = (y.T @ y) / len(grid) * 4 * math.pi
    assert np.max(np.abs(gram - np.eye(16))) < 5e-3


def test_sh_z_axis_l1():
    y = spherical_harmonics(1, np.array([0.0, 0.0, 1.0]))
    c = math.sqrt(3.0 / (4.0 * math.pi))
    assert np.allclose(y[1:], [0.0, c, 0.0], atol=1e-14)


def test_sh_l1_is_yzx():
    r = rng()
    for _ in range(10):
        v = r.standard_normal(3)
        n = v / np.linalg.norm(v)
        y = spherical_harmonics(1, v)
        c = math.sqrt(3.0 / (4.0 * math.pi))
        assert np.allclose(y[1:], c * vector_to_m(n), atol=1e-14)
        assert np.allclose(vector_from_m(vector_to_m(v)), v)


def test_sh_normalizes_input():
    v = np.array([0.2, -0.7, 1.1])
    assert np.allclose(spherical_harmonics(3, v), spherical_harmonics(3, 5 * v))


def test_sh_degenerate_direction():
    with pytest.raises(ValueError, match="degenerate direction"):
        spherical_harmonics(2, np.zeros(3))


def test_sh_steerability():
    # Y(g n) = D(g) Y(n) over 1000 random (g, n), reflections included
    r = rng()
    lay = sh_layout(LMAX)
    worst = 0.0
    for _ in range(1000):
        g = random_group_element(r, include_inversion=True)
        n = random_direction(r)
        lhs = spherical_harmonics(LMAX, g.matrix() @ n)
        rhs = rep_matrix(lay, g) @ spherical_harmonics(LMAX, n)
        worst = max(worst, np.max(np.abs(lhs - rhs)))
    assert worst < TOL


def test_sh_parity():
    r = rng()
    for _ in range(20):
        n = random_direction(r)
        y_plus = spherical_harmonics(LMAX, n)
        y_minus = spherical_harmonics(LMAX, -n)
        for l in range(LMAX + 1):
            sl = slice(l * l, (l + 1) * (l + 1))
            assert np.allclose(y_minus[sl], (-1.0) ** l * y_plus[sl], atol=1e-14)


# ---------------------------------------------------------------------------
# Wigner-D
# ---------------------------------------------------------------------------

def test_wigner_l0_trivial():
    r = rng()
    for _ in range(5):
        g = random_group_element(r, True)
        assert np.array_equal(wigner_d(Irrep(0, 1), g), np.eye(1))


def test_wigner_identity():
    e = GroupElement.identity()
    for l in range(LMAX + 1):
        assert np.allclose(wigner_d(sh_irrep(l), e), np.eye(2 * l + 1),
                           atol=1e-12)


def test_wigner_l1_conjugated_rotation():
    # the l=1 block is R conjugated by the (x,y,z)->(y,z,x) permutation;
    # verified against a least-squares fit of D from Y(Rn) = D Y(n)
    r = rng()
    p = np.zeros((3, 3))
    p[0, 1] = p[1, 2] = p[2, 0] = 1.0
    for _ in range(10):
        g = random_group_element(r, include_inversion=False)
        d = wigner_d(Irrep(1, -1), g)
        assert np.allclose(d, p @ g.rotation @ p.T, atol=1e-12)
        dirs = fibonacci_sphere(12)
        ya = spherical_harmonics(1, dirs @ g.rotation.T)[:, 1:]
        yb = spherical_harmonics(1, dirs)[:, 1:]
        fit = np.linalg.lstsq(yb, ya, rcond=None)[0].T
        assert np.max(np.abs(yb @ fit.T - ya)) < 1e-10
        assert np.allclose(fit, d, atol=1e-10)


def test_wigner_homomorphism_and_orthogonality():
    r = rng()
    worst_h = worst_o = worst_i = 0.0
    for _ in range(100):
        g1 = random_group_element(r, True)
        g2 = random_group_element(r, True)
        for l in range(LMAX + 1):
            ir = sh_irrep(l)
            d1, d2 = wigner_d(ir, g1), wigner_d(ir, g2)
            d12 = wigner_d(ir, g1.compose(g2))
            worst_h = max(worst_h, np.max(np.abs(d1 @ d2 - d12)))
            worst_o = max(worst_o, np.max(np.abs(d1 @ d1.T - np.eye(ir.dim))))
            di = wigner_d(ir, g1.inverse())
            worst_i = max(worst_i, np.max(np.abs(di - d1.T)))
    assert worst_h < TOL
    assert worst_o < TOL
    assert worst_i < TOL


def test_wigner_parity_factor():
    r = rng()
    g = random_group_element(r, include_inversion=False)
    gi = GroupElement(g.rotation, inversion=True)
    for l in range(3):
        for parity in (1, -1):
            ir = Irrep(l, parity)
            assert np.allclose(wigner_d(ir, gi), parity * wigner_d(ir, g))


# ---------------------------------------------------------------------------
# block-diagonal representations
# ---------------------------------------------------------------------------

def test_rep_matrix_trivial_cases():
    r = rng()
    g = random_group_element(r, True)
    assert np.allclose(rep_matrix(IrrepsLayout.parse("2x0e"), g), np.eye(2))
    assert np.allclose(rep_matrix(IrrepsLayout.parse("1x0e+1x1o"),
                                  GroupElement.identity()), np.eye(4))


def test_rep_matrix_orthogonal():
    r = rng()
    lay = IrrepsLayout.parse("2x0e+2x1o+1x2e+1x3o")
    for _ in range(20):
        g = random_group_element(r, True)
        m = rep_matrix(lay, g)
        assert np.max(np.abs(m @ m.T - np.eye(lay.dim))) < TOL


# ---------------------------------------------------------------------------
# Clebsch-Gordan
# ---------------------------------------------------------------------------

def test_cg_scalar_path_is_identity():
    for l in range(LMAX + 1):
        c = cg_coefficients(0, l, l)
        assert np.allclose(c[0], np.eye(2 * l + 1), atol=1e-12)


def test_cg_110_is_scaled_dot_product():
    c = cg_coefficients(1, 1, 0)
    assert np.allclose(c[:, :, 0], np.eye(3) / math.sqrt(3.0), atol=1e-12)
    # the scalar output is rotation invariant
    r = rng()
    h1, h2 = r.standard_normal(3), r.standard_normal(3)
    base = np.einsum("ijk,i,j->k", c, h1, h2)
    for _ in range(10):
        g = random_group_element(r, include_inversion=False)
        d = wigner_d(Irrep(1, -1), g)
        rot = np.einsum("ijk,i,j->k", c, d @ h1, d @ h2)
        assert abs(rot[0] - base[0]) < TOL


def test_cg_111_is_scaled_cross_product():
    c = cg_coefficients(1, 1, 1)
    r = rng()
    for _ in range(10):
        a, b = r.standard_normal(3), r.standard_normal(3)
        out = np.einsum("ijk,i,j->k", c, vector_to_m(a), vector_to_m(b))
        cross = vector_to_m(np.cross(a, b))
        ratio = out[np.abs(cross) > 1e-9] / cross[np.abs(cross) > 1e-9]
        assert np.allclose(np.abs(ratio), 1.0 / math.sqrt(2.0), atol=1e-10)
        assert np.allclose(ratio, ratio[0], atol=1e-10)
    # two odd vectors make an even output: the inversion factor cancels
    gi = GroupElement(np.eye(3), inversion=True)
    d_in = wigner_d(Irrep(1, -1), gi)
    h1, h2 = r.standard_normal(3), r.standard_normal(3)
    flipped = np.einsum("ijk,i,j->k", c, d_in @ h1, d_in @ h2)
    assert np.allclose(flipped, np.einsum("ijk,i,j->k", c, h1, h2))


def test_cg_zero_outside_triangle():
    assert np.all(cg_coefficients(1, 1, 3) == 0.0)
    assert np.all(cg_coefficients(0, 2, 1) == 0.0)


def test_cg_normalization_and_sign():
    for (l1, l2, l) in [(1, 1, 0), (1, 1, 1), (1, 1, 2), (2, 1, 1), (2, 2, 3)]:
        c = cg_coefficients(l1, l2, l)
        assert abs(np.sum(c * c) - (2 * l + 1)) < 1e-9
        flat = c.ravel()
        first = flat[np.abs(flat) > 1e-9][0]
        assert first > 0


def test_cg_equivariance():
    r = rng()
    worst = 0.0
    for l1 in range(4):
        for l2 in range(4):
            for l in range(abs(l1 - l2), min(3, l1 + l2) + 1):
                c = cg_coefficients(l1, l2, l)
                ir1, ir2 = sh_irrep(l1), sh_irrep(l2)
                ir = Irrep(l, ir1.parity * ir2.parity)
                for _ in range(8):
                    g = random_group_element(r, include_inversion=True)
                    h1 = r.standard_normal(2 * l1 + 1)
                    h2 = r.standard_normal(2 * l2 + 1)
                    lhs = np.einsum("ijk,i,j->k", c,
                                    wigner_d(ir1, g) @ h1,
                                    wigner_d(ir2, g) @ h2)
                    rhs = wigner_d(ir, g) @ np.einsum("ijk,i,j->k", c, h1, h2)
                    worst = max(worst, np.max(np.abs(lhs - rhs)))
    assert worst < TOL


def test_cg_cached_identity():
    assert cg_coefficients(2, 1, 1) is cg_coefficients(2, 1, 1)
