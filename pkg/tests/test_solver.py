import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pluripot.expr import Expression
from pluripot.fields import GridFunction
from pluripot.geometry import BackgroundForm
from pluripot.operators import atom_extract
from pluripot.solver import (J_CAP, BoundaryData, HSpec, MeasureSpec, atom_coefficient, build_H, build_w,
                             default_schedule, equivalence_check, maximality, snap, solve_main,
                             uniqueness_check)


def radii(dom):
    return np.linalg.norm(dom.interior_points, axis=1)


def test_empty_measure_gives_zero(disc32):
    res = solve_main(MeasureSpec(0.0), build_H(HSpec(), disc32))
    assert np.abs(res.phi.interior).max() <= 1e-12
    assert res.report.passed


def test_single_atom_gives_green_function(disc32):
    res = solve_main(MeasureSpec(0.0, "rho", [((0.0, 0.0), 2 * np.pi)]), build_H(HSpec(), disc32))
    r = radii(disc32)
    off = r > 5 * disc32.h
    assert np.abs(res.phi.interior[off] - np.log(r[off])).max() <= 1e-10
    (_, m), = res.report.results["atoms"]
    assert abs(m - 2 * np.pi) / (2 * np.pi) <= 0.03
    assert res.report.passed


@pytest.mark.parametrize("n, dens", [(1, 4.0), (2, 32.0)])
def test_constant_density_gives_paraboloid(n, dens, disc32, ball8):
    dom = disc32 if n == 1 else ball8
    res = solve_main(MeasureSpec.from_density(dens, n), build_H(HSpec(), dom))
    err = np.abs(res.phi.interior - (radii(dom) ** 2 - 1)).max()
    assert err <= 0.25 * dom.h ** 2
    assert res.report.passed


def test_background_form_absorbs_the_measure(disc32):
    # omega = dd^c(|z|^2 - 1) already has volume 4 dV
    res = solve_main(MeasureSpec.from_density(4.0, 1), build_H(HSpec(), disc32), BackgroundForm("ddc_rho"))
    assert np.abs(res.phi.interior).max() <= 1e-10


def test_sandwich_and_ladder(disc32):
    res = solve_main(MeasureSpec(Expression("1/|z|", 1)), build_H(HSpec(), disc32))
    lower, upper = res.sandwich
    phi = res.phi.interior
    assert (phi >= lower.interior - 1e-8).all() and (phi <= upper.interior + 1e-8).all()
    js = [r["j"] for r in res.ladder]
    assert js == sorted(js) and js[0] == 1.0
    assert all(b >= a for a, b in zip(res.ladder_masses, res.ladder_masses[1:]))
    assert res.report.passed


def test_schedule_validation(disc16):
    H = build_H(HSpec(), disc16)
    with pytest.raises(ValueError):
        solve_main(MeasureSpec(2.0), H, j_schedule=[2.0, 1.0])
    with pytest.raises(ValueError):
        solve_main(MeasureSpec(5.0), H, j_schedule=[1.0, 2.0])


def test_measure_validation(disc16):
    with pytest.raises(ValueError):
        MeasureSpec(-1.0).validate(disc16)
    with pytest.raises(ValueError):
        MeasureSpec(0.0, "rho", [((0.0, 0.0), -1.0)]).validate(disc16)
    with pytest.raises(ValueError):
        MeasureSpec(0.0, "rho", [((2.0, 0.0), 1.0)]).validate(disc16)


def test_from_density_divides_by_wedge_constant(disc16, ball8):
    np.testing.assert_allclose(MeasureSpec.from_density(4.0, 1).f_values(disc16), 1.0)
    np.testing.assert_allclose(MeasureSpec.from_density(32.0, 2).f_values(ball8), 1.0)


def test_build_H_presets(disc32, ball8):
    assert np.all(build_H(HSpec(), disc32).values.values == 0)
    H = build_H(HSpec("harmonic", formula="Re(z)"), disc32)
    assert np.abs(H.values.interior - disc32.interior_points[:, 0]).max() <= 1e-10
    for dom in (disc32, ball8):
        p = (0.25,) + (0.0,) * (2 * dom.n - 1)
        G = build_H(HSpec("green_pole", points=[p], weights=[1.0]), dom)
        assert G.info["maximal"]
        assert len(G.atoms) == 1


def test_build_H_errors(disc16):
    with pytest.raises(ValueError):
        build_H(HSpec("harmonic"), disc16)
    with pytest.raises(ValueError):
        build_H(HSpec("green_pole", points=[(0.0, 0.0)], weights=[]), disc16)
    with pytest.raises(ValueError):
        build_H(HSpec("green_pole", points=[(0.0, 0.0)], weights=[-1.0]), disc16)
    with pytest.raises(ValueError):
        build_H(HSpec("spline"), disc16)


def test_maximality_detects_mass(disc16):
    u = GridFunction.from_formula(disc16, Expression("|z|^2 - 1", 1))
    info = maximality(BoundaryData("harmonic", u))
    assert not info["maximal"]
    assert info["analytic_mass"] == pytest.approx(4 * np.pi, rel=0.05)


def test_build_w_single_atom(disc32):
    w = build_w([((0.0, 0.0), 8 * np.pi)], build_H(HSpec(), disc32))
    r = radii(disc32)
    off = r > 2 * disc32.h
    np.testing.assert_allclose(w.interior[off], 4 * np.log(r[off]), atol=1e-12)
    (_, m), = atom_extract(w)
    assert abs(m - 8 * np.pi) / (8 * np.pi) <= 0.03


def test_atom_coefficient_in_c2():
    assert atom_coefficient((2 * np.pi) ** 2 * 9, 2) == pytest.approx(3.0)
    assert atom_coefficient(2 * np.pi, 1) == pytest.approx(1.0)


def test_close_atoms_are_rejected(disc32):
    with pytest.raises(ValueError):
        build_w([((0.0, 0.0), 1.0), ((2 * disc32.h, 0.0), 1.0)], build_H(HSpec(), disc32))


def test_snap_to_grid(disc16):
    assert snap(disc16, (0.01, -0.02)) == (0.0, 0.0)
    with pytest.raises(ValueError):
        snap(disc16, (1.0, 0.0))


@given(arrays(np.float64, st.integers(1, 200), elements=st.floats(0.0, 1e7)))
def test_default_schedule(f):
    js = default_schedule(f)
    assert js[0] == 1.0
    assert all(b > a for a, b in zip(js, js[1:]))
    assert js[-1] >= min(np.quantile(f, 0.99), J_CAP) - 1e-9
    assert js[-1] <= max(1.0, min(f.max(), J_CAP)) * 2
    for a, b in zip(js[:-2], js[1:-1]):
        assert b == 2 * a


def test_uniqueness_and_comparison(disc32):
    H = build_H(HSpec(), disc32)
    rep = uniqueness_check(MeasureSpec.from_density(4.0, 1), H, mu_larger=MeasureSpec.from_density(8.0, 1))
    assert rep.passed, rep.summary()


def test_uniqueness_rejects_atoms(disc16):
    with pytest.raises(ValueError):
        uniqueness_check(MeasureSpec(0.0, "rho", [((0.0, 0.0), 1.0)]), build_H(HSpec(), disc16))


def test_equivalence_arms(disc32):
    rep = equivalence_check(MeasureSpec.from_density(4.0, 1), BackgroundForm("ddc_rho"), disc32)
    assert [c.name for c in rep.checks] == ["i_omega_zero", "ii_omega", "iii_omega_green"]
    assert rep.passed, rep.summary()


def test_report_is_deterministic(disc16):
    mu = MeasureSpec(Expression("1 + |z|^2", 1))
    a = solve_main(mu, build_H(HSpec(), disc16)).report.to_json()
    b = solve_main(mu, build_H(HSpec(), disc16)).report.to_json()
    assert a == b
