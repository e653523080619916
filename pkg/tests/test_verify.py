import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pluripot.expr import Expression
from pluripot.fields import GridFunction
from pluripot.geometry import BackgroundForm, build_domain
from pluripot.operators import complex_hessian
from pluripot.solver import HSpec, MeasureSpec
from pluripot.verify import (SUITES, WITNESS_OMEGA, Bowl, FunctionFamily, Quadratic, collar, crease,
                             five_point_poisson, poisson_oracle_equivalence, refinement_study, run_suite)

SMALL = {"samples": 4, "seed": 3}


@pytest.mark.parametrize("name", sorted(SUITES))
def test_each_suite_passes_on_a_few_samples(name):
    rep = run_suite(name, SMALL)
    assert rep.checks, name
    assert rep.passed, rep.summary()


def test_suites_are_deterministic():
    a = run_suite(["demailly", "truncation"], SMALL).to_json()
    b = run_suite(["demailly", "truncation"], SMALL).to_json()
    assert a == b


def test_unknown_suite():
    with pytest.raises(KeyError):
        run_suite("nonsense")


def test_all_expands():
    rep = run_suite(["all"], {"samples": 1})
    assert rep.header["suites"] == list(SUITES)


def test_witness_ratios_frozen():
    rep = run_suite("mass_witness")
    pairs = rep.results["mass_witness"]["pairs"]
    assert pairs["increase"]["ratio"] == pytest.approx(1.697, abs=2e-3)
    assert pairs["decrease"]["ratio"] == pytest.approx(0.8834, abs=2e-3)
    assert rep.results["mass_witness"]["indefinite"]


def test_witness_needs_indefinite_form():
    rep = run_suite("mass_witness", {"omega": BackgroundForm("scaled_euclidean", 0.5)})
    assert not rep.passed


@settings(max_examples=15)
@given(st.sampled_from(["quadratic", "radial", "green_mix"]), st.integers(0, 10_000), st.sampled_from([1, 2]))
def test_samples_are_omega_psh(kind, seed, n):
    dom = build_domain({"kind": "ball", "n": n, "h": 1 / 16 if n == 1 else 0.25})
    u = FunctionFamily(kind, seed).sample(dom)
    if u.formula is not None and hasattr(u.formula, "hessian"):
        keep = ~u.floor_mask.reshape(-1)[dom.interior_flat]
        lam = u.formula.hessian(dom.interior_points[keep]).eigvalsh()
    else:
        lam = complex_hessian(u).eigvalsh()
    assert lam.min() >= -1e-9 * (1 + np.abs(lam).max())


def test_family_is_seeded(disc16):
    a = FunctionFamily("green_mix", 7).sample(disc16, k=2)
    b = FunctionFamily("green_mix", 7).sample(disc16, k=2)
    np.testing.assert_array_equal(a.values, b.values)


def test_unknown_family(disc16):
    with pytest.raises(ValueError):
        FunctionFamily("spline").sample(disc16)


def test_quadratic_hessian_is_A():
    A = np.array([[2.0, 0.5 + 0.5j], [0.5 - 0.5j, 1.0]])
    q = Quadratic(A, np.zeros((2, 2)), np.zeros(2), 0.0)
    dom = build_domain({"kind": "ball", "n": 2, "h": 0.25})
    u = GridFunction.from_formula(dom, q)
    M = complex_hessian(u).matrices()
    np.testing.assert_allclose(M, np.broadcast_to(A.T, M.shape), atol=1e-10)


def test_bowl_hessian(disc16):
    b = Bowl(0.7, 1)
    np.testing.assert_allclose(b.hessian(disc16.interior_points).diag, 0.7)


def test_collar_radius(disc16):
    mask = np.zeros(disc16.shape, bool)
    centre = disc16.interior_flat[np.argmin(np.linalg.norm(disc16.interior_points, axis=1))]
    mask.reshape(-1)[centre] = True
    c = collar(disc16, mask, 2.0)
    r = np.linalg.norm(disc16.interior_points, axis=1)
    np.testing.assert_array_equal(c, r <= 2 * disc16.h + 1e-12)


def test_crease_marks_sign_changes(disc16):
    u = GridFunction.from_formula(disc16, Expression("x", 1))
    v = GridFunction.from_formula(disc16, Expression("0", 1))
    m = crease(u, v, 1e-9)
    xs = disc16.points()[:, 0].reshape(disc16.shape)
    assert m[np.abs(xs) < 1e-12].all()
    assert not m[np.abs(xs) > 1.5 * disc16.h].any()


def test_five_point_poisson_is_exact_on_linear_data(disc16):
    g = Expression("1 + 2*x - y", 1)
    u = five_point_poisson(disc16, np.zeros(disc16.n_interior), g)
    np.testing.assert_allclose(u, g(disc16.interior_points), atol=1e-12)


def test_poisson_oracle_agrees():
    dom = build_domain({"kind": "ball", "n": 1, "h": 1 / 32})
    mu = MeasureSpec.from_density(Expression("4 + exp(-20*|z|^2)", 1), 1)
    rep = poisson_oracle_equivalence(mu, HSpec(), dom, BackgroundForm("scaled_euclidean", 0.5))
    assert rep.passed, rep.summary()


def test_poisson_oracle_needs_n1(ball8):
    with pytest.raises(ValueError):
        poisson_oracle_equivalence(MeasureSpec.from_density(32.0, 2), HSpec(), ball8)


def test_refinement_orders():
    rep = refinement_study("poisson_n1", [1 / 16, 1 / 32])
    (first, second) = rep.refinement_table
    assert second["order"] >= 1.8
    assert rep.passed


def test_exact_refinement_is_recorded():
    rep = refinement_study("green_n1", [1 / 16, 1 / 32])
    assert rep.passed
    assert rep.refinement_table[1].get("exact")
    json.loads(rep.to_json())


def test_refinement_errors():
    with pytest.raises(KeyError):
        refinement_study("nothing", [0.1, 0.05])
    with pytest.raises(ValueError):
        refinement_study("poisson_n1", [0.1])


def test_witness_form_is_the_documented_one():
    assert WITNESS_OMEGA["w11"] == "8*|z2|^2 - 0.6"
