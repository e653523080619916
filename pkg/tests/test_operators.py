import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pluripot.expr import Expression
from pluripot.fields import GridFunction, HermitianField
from pluripot.geometry import BackgroundForm, build_domain, build_rho
from pluripot.operators import (atom_extract, complex_hessian, ma_density, mixed_density, np_ma, truncate,
                                twisted_expansion)
from pluripot.verify import FunctionFamily


def gf(dom, text):
    return GridFunction.from_formula(dom, Expression(text, dom.n))


def test_hessian_of_norm_squared(disc32):
    H = complex_hessian(gf(disc32, "|z|^2"))
    np.testing.assert_allclose(H.diag, 1.0, atol=1e-10)


def test_pluriharmonic_has_zero_hessian(disc32):
    H = complex_hessian(gf(disc32, "Re(z^2)"))
    np.testing.assert_allclose(H.diag, 0.0, atol=1e-10)


def test_hessian_off_diagonal(ball8):
    # Re(z1 conj z2) contributes 1/2 to the off-diagonal entry
    H = complex_hessian(gf(ball8, "|z1|^2 + 2*|z2|^2 + Re(z1*conj(z2))"))
    M = H.matrices()
    np.testing.assert_allclose(M, np.broadcast_to([[1, 0.5], [0.5, 2]], M.shape), atol=1e-10)


def test_holomorphic_cross_term_is_pluriharmonic(ball8):
    H = complex_hessian(gf(ball8, "|z1|^2 + 2*|z2|^2 + Re(z1*z2)"))
    np.testing.assert_allclose(H.lower, 0.0, atol=1e-10)


def test_density_constants(disc32, ball8):
    np.testing.assert_allclose(ma_density(gf(disc32, "|z|^2")).density, 4.0, atol=1e-9)
    np.testing.assert_allclose(ma_density(gf(ball8, "|z|^2")).density, 32.0, atol=1e-9)
    m = ma_density(gf(disc32, "2*|z|^2"), BackgroundForm("scaled_euclidean", -1.0))
    np.testing.assert_allclose(m.density, 4.0, atol=1e-9)


def test_density_clamps_and_counts(disc32):
    m = ma_density(gf(disc32, "-|z|^2"))
    assert m.info["clamped"] == disc32.n_interior
    assert m.total_mass == 0.0


def test_mixed_discriminant_examples():
    I = HermitianField.constant(np.eye(2), 3)
    assert mixed_density([I], [2]) == pytest.approx(32.0)
    A = HermitianField.constant(np.diag([1.0, 0.0]), 1)
    B = HermitianField.constant(np.diag([0.0, 1.0]), 1)
    assert mixed_density([A, B], [1, 1])[0] == pytest.approx(32 * 0.5)
    assert mixed_density([HermitianField.constant([[3.0]], 1)], [1])[0] == pytest.approx(12.0)
    with pytest.raises(ValueError):
        mixed_density([A, B], [2, 1])


hermitian2 = st.tuples(*[st.floats(-3, 3)] * 4)


def _field(t):
    a, b, re, im = t
    return HermitianField(np.array([[a, b]]), np.array([re + 1j * im]))


@given(hermitian2, hermitian2)
def test_mixed_discriminant_symmetry(a, b):
    A, B = _field(a), _field(b)
    assert mixed_density([A, B], [1, 1])[0] == mixed_density([B, A], [1, 1])[0]


@given(hermitian2)
def test_mixed_discriminant_diagonal_is_determinant(a):
    A = _field(a)
    assert mixed_density([A, A], [1, 1])[0] == pytest.approx(32 * A.det()[0], abs=1e-9)


def test_expansion_equality_case(ball8):
    omega = BackgroundForm("ddc_rho")
    rho = build_rho(ball8, omega)
    u = gf(ball8, "0.5*|z|^2 + 0.1*x1*y2")
    expect = 32 * (complex_hessian(u) + rho.hessian).det()
    np.testing.assert_allclose(twisted_expansion(u, rho, omega).density, expect, rtol=1e-12)


def test_expansion_example(ball8):
    rho = build_rho(ball8)
    u = gf(ball8, "|z|^2 - (|z|^2 - 1)")
    np.testing.assert_allclose(twisted_expansion(u, rho, BackgroundForm()).density, ma_density(u).density,
                               atol=1e-12)


@given(st.integers(0, 10_000), st.floats(-1.0, 2.0), st.sampled_from([1, 2]))
def test_expansion_identity(seed, c, n):
    dom = build_domain({"kind": "ball", "n": n, "h": 0.25})
    omega = BackgroundForm("scaled_euclidean", c)
    rho = build_rho(dom, omega)
    u = FunctionFamily("quadratic", seed).sample(dom, omega)
    a = twisted_expansion(u, rho, omega).density
    b = ma_density(u, omega).density
    assert np.max(np.abs(a - b) / (1 + np.abs(b))) <= 1e-10


def test_truncate_examples(disc32):
    u = gf(disc32, "|z|^2")
    assert np.array_equal(truncate(u, 1.0).values, u.values)
    c = GridFunction.constant(disc32, -4.0)
    np.testing.assert_array_equal(truncate(c, 2.0).values, -2.0)
    v = gf(disc32, "5*log|z|")
    tv = truncate(v, 5.0)
    r = np.linalg.norm(disc32.points(), axis=1).reshape(disc32.shape)
    out = r > np.exp(-1) + 1e-12
    np.testing.assert_array_equal(tv.values[out], v.values[out])
    np.testing.assert_array_equal(tv.values[r < np.exp(-1) - 1e-12], -5.0)


def test_np_ma_bounded_equals_density(disc32):
    u = gf(disc32, "|z|^2 + x")
    meas, masses = np_ma(u, None, [2.0, 3.0])
    np.testing.assert_array_equal(meas.density, ma_density(u).density)
    assert masses[0] == masses[1]


def test_np_ma_of_log_is_small_off_the_pole(disc32):
    # The stencil Laplacian of log|z| is not zero within a few cells of the
    # pole; that residue is scale invariant (about 1.14 at every h), so only
    # the mass outside the atom collar is expected to vanish.
    u = gf(disc32, "log|z|")
    meas, masses = np_ma(u, None, [1.0, 2.0, 4.0, 8.0, 16.0])
    r = np.linalg.norm(disc32.interior_points, axis=1)
    off = meas.density[r > 5 * disc32.h].sum() * disc32.cell_volume
    assert off <= 0.01 * 2 * np.pi
    assert all(b >= a for a, b in zip(masses, masses[1:]))


def test_np_ma_ring_mass(disc32):
    u = truncate(gf(disc32, "log|z|"), 1.5)
    meas, _ = np_ma(u, None, [2.0])
    assert np.array_equal(meas.density, ma_density(u).density)
    assert abs(meas.smooth_mass() - 2 * np.pi) / (2 * np.pi) < 0.02


def test_atoms(disc32):
    assert atom_extract(gf(disc32, "|z|^2")) == []
    (p, m), = atom_extract(gf(disc32, "log|z|"))
    assert np.allclose(p, 0) and abs(m - 2 * np.pi) / (2 * np.pi) < 0.03
    two = atom_extract(gf(disc32, "log|z| + log|z - 0.5|"))
    assert len(two) == 2
    for _, m in two:
        assert abs(m - 2 * np.pi) / (2 * np.pi) < 0.03


def test_atom_scaling_in_c2(ball8):
    # (dd^c c log|z|)^2 = c^2 (2 pi)^2 delta_0
    (_, m), = atom_extract(gf(ball8, "2*log|z|"))
    assert abs(m - 4 * (2 * np.pi) ** 2) / (4 * (2 * np.pi) ** 2) < 0.03


def test_density_consistency_order():
    errs = []
    for h in (1 / 8, 1 / 16, 1 / 32):
        dom = build_domain({"kind": "ball", "n": 1, "h": h})
        u = gf(dom, "exp(x)*cos(y) + |z|^4")
        pts = dom.interior_points
        exact = 16 * np.sum(pts ** 2, axis=1)
        errs.append(np.max(np.abs(ma_density(u).density - exact)))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert orders.min() >= 1.8


@given(st.integers(0, 10_000))
def test_truncation_masses_nondecreasing(seed):
    dom = build_domain({"kind": "ball", "n": 1, "h": 1 / 16})
    u = FunctionFamily("green_mix", seed).sample(dom)
    sched = np.unique(np.random.default_rng(seed).uniform(0.5, 40.0, size=6))
    _, masses = np_ma(u, None, sched, tol=np.inf)
    for a, b in zip(masses, masses[1:]):
        assert b >= a - 1e-8 * (1 + a)


@given(st.integers(0, 10_000), st.floats(1.0, 1.5))
def test_pluripolar_monotonicity(seed, grow):
    from pluripot.solver import GreenKernel, SumFormula
    dom = build_domain({"kind": "ball", "n": 1, "h": 1 / 32})
    v = FunctionFamily("green_mix", seed).sample(dom)
    parts = v.formula.parts
    u = GridFunction.from_formula(dom, SumFormula(
        [GreenKernel(dom, g.pole, g.weight * grow) for g in parts[:-1]] + [parts[-1]]))
    au = sum(m for _, m in atom_extract(u))
    av = sum(m for _, m in atom_extract(v))
    assert au >= av * (1 - 0.03)
