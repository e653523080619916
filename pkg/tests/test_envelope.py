import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from pluripot.envelope import (AdmissibilityError, Obstacle, ball_patch, balayage, dirichlet_data, envelope,
                               envelope_report, glue, local_dirichlet)
from pluripot.expr import Expression
from pluripot.fields import GridFunction
from pluripot.geometry import build_domain


def gf(dom, text):
    return GridFunction.from_formula(dom, Expression(text, dom.n))


def obstacle(dom, text):
    return Obstacle(gf(dom, text))


def radii(dom):
    return np.linalg.norm(dom.interior_points, axis=1)


# independent root of the contact radius: 4 r - 2 = 4 r log r
WEDGE_R0 = brentq(lambda r: 4 * r - 2 - 4 * r * np.log(r), 0.01, 0.5)


def wedge_exact(r):
    return np.where(r <= WEDGE_R0, 4 * r - 2, 4 * WEDGE_R0 * np.log(np.maximum(r, 1e-300)))


def test_wedge_radius_frozen():
    assert WEDGE_R0 == pytest.approx(0.18668230885, abs=1e-10)


@pytest.mark.parametrize("n, rhs", [(1, 4.0), (2, 32.0)])
def test_local_dirichlet_quadratic(n, rhs, disc32, ball8):
    dom = disc32 if n == 1 else ball8
    data = dirichlet_data(dom, Expression("|z|^2 - 1", n))
    u = local_dirichlet(None, data, rhs)
    err = np.abs(u.interior - (radii(dom) ** 2 - 1)).max()
    assert err <= 0.5 * dom.h ** 2


def test_local_dirichlet_zero(disc32):
    u = local_dirichlet(None, dirichlet_data(disc32, Expression("0", 1)), 0.0)
    assert np.abs(u.interior).max() <= 1e-12


def test_local_dirichlet_keeps_outside_values(disc32):
    data = gf(disc32, "|z|^2 - 1")
    patch = ball_patch(disc32, (0.3, 0.0), 0.25)
    u = local_dirichlet(patch, data, 0.0)
    np.testing.assert_array_equal(u.values[~patch], data.values[~patch])
    # harmonic replacement of a subharmonic function lies above it
    assert (u.values[patch] >= data.values[patch] - 1e-12).all()


def test_local_dirichlet_rejects_negative_target(disc16):
    with pytest.raises(ValueError):
        local_dirichlet(None, gf(disc16, "0"), -1.0)


def test_glue_takes_max_inside(disc32):
    u = gf(disc32, "|z|^2 - 1")
    v = gf(disc32, "0.2*|z|^2 - 0.9")
    sub = ball_patch(disc32, (0, 0), 0.4)
    g = glue(u, v, sub)
    assert (g.values > u.values).any()
    np.testing.assert_array_equal(g.values[sub], np.maximum(u.values, v.values)[sub])
    np.testing.assert_array_equal(g.values[~sub], u.values[~sub])


def test_glue_trivial_cases(disc16):
    u = gf(disc16, "|z|^2 - 1")
    sub = ball_patch(disc16, (0, 0), 0.5)
    np.testing.assert_array_equal(glue(u, gf(disc16, "|z|^2 - 2"), sub).values, u.values)
    np.testing.assert_array_equal(glue(u, u, sub).values, u.values)


def test_glue_needs_order_on_the_ring(disc32):
    # v above u near the edge of the sub-domain: the maximum would not be subharmonic
    u = gf(disc32, "|z|^2 - 1")
    v = gf(disc32, "2*(|z|^2 - 1) + 0.9")
    with pytest.raises(ValueError):
        glue(u, v, ball_patch(disc32, (0, 0), 0.4))


def test_balayage_is_harmonic_on_the_ball(disc32):
    u = gf(disc32, "|z|^2 - 1")
    D = ball_patch(disc32, (0, 0), 0.5)
    b = balayage(u, D, 0.0)
    assert (b.values >= u.values - 1e-12).all()
    # the centre value is the mean over the fixed ring, whose radii lie in [0.5, 0.5 + h]
    centre = b.values.reshape(-1)[disc32.interior_flat[np.argmin(radii(disc32))]]
    assert 0.5 ** 2 - 1 <= centre <= (0.5 + disc32.h) ** 2 - 1


def test_envelope_of_large_obstacle_solves_the_equation(disc32):
    ob = obstacle(disc32, "1e6")
    res = envelope(4.0, ob, boundary=Expression("|z|^2 - 1", 1))
    assert not res.contact_mask.any()
    assert np.abs(res.solution.interior - (radii(disc32) ** 2 - 1)).max() <= 0.5 * disc32.h ** 2


def test_envelope_below_pluriharmonic_obstacle(disc32):
    res = envelope(0.0, obstacle(disc32, "1 - |z|^2"), boundary=Expression("0", 1))
    assert np.abs(res.solution.interior).max() <= 1e-9


@pytest.mark.parametrize("n", [1, 2])
def test_zero_obstacle(n, disc32, ball8):
    dom = disc32 if n == 1 else ball8
    res = envelope(0.0, obstacle(dom, "0"))
    assert np.abs(res.solution.interior).max() <= 1e-9
    assert envelope_report(res, obstacle(dom, "0")).passed


@pytest.mark.parametrize("h", [1 / 32, 1 / 64])
def test_wedge_oracle(h):
    dom = build_domain({"kind": "ball", "n": 1, "h": h})
    ob = obstacle(dom, "min(0, 4*(|z| - 0.5))")
    res = envelope(0.0, ob)
    r = radii(dom)
    assert np.abs(res.solution.interior - wedge_exact(r)).max() <= 0.05 * h
    # the contact set is a disc around the origin
    c = r[res.contact_mask]
    assert c.max() <= WEDGE_R0 + 2 * h
    assert res.contact_mask[r < WEDGE_R0 - 2 * h].all()
    assert envelope_report(res, ob).passed


def test_balayage_method_agrees_with_active_set(disc16):
    ob = obstacle(disc16, "min(0, 4*(|z| - 0.5))")
    a = envelope(0.0, ob).solution.interior
    b = envelope(0.0, ob, method="balayage").solution.interior
    assert np.abs(a - b).max() <= 1e-6


def test_unknown_method(disc16):
    with pytest.raises(ValueError):
        envelope(0.0, obstacle(disc16, "0"), method="sweep")


def test_bad_seed_is_rejected(disc16):
    with pytest.raises(AdmissibilityError):
        envelope(0.0, obstacle(disc16, "0"), seed=gf(disc16, "0.5"))


def test_envelope_is_idempotent(disc32):
    ob = obstacle(disc32, "min(0, 4*(|z| - 0.5))")
    first = envelope(0.0, ob).solution
    again = envelope(0.0, Obstacle(first), boundary=ob.values.boundary_values_callable())
    assert np.abs(again.solution.interior - first.interior).max() <= 1e-8


obstacles = st.sampled_from(["min(0, 4*(|z| - 0.5))", "min(0, 3*(|z| - 0.4))", "|z|^2 - 1",
                             "min(0, x + 0.2)", "-(1 - |z|^2)*(1 + 0.5*y)"])


@settings(max_examples=10)
@given(obstacles, st.floats(0.0, 0.5))
def test_raising_obstacle_never_lowers_envelope(text, lift):
    dom = build_domain({"kind": "ball", "n": 1, "h": 1 / 16})
    low = gf(dom, text)
    high = low.with_values(low.values + lift)
    g = Expression("0", 1)
    a = envelope(0.0, Obstacle(low), boundary=g).solution.interior
    b = envelope(0.0, Obstacle(high), boundary=g).solution.interior
    assert (b >= a - 1e-8).all()


@settings(max_examples=10)
@given(obstacles, st.floats(0.0, 8.0))
def test_raising_target_never_raises_envelope(text, extra):
    # a larger right-hand side shrinks the set of admissible subsolutions
    dom = build_domain({"kind": "ball", "n": 1, "h": 1 / 16})
    ob = obstacle(dom, text)
    g = Expression("0", 1)
    a = envelope(1.0, ob, boundary=g).solution.interior
    b = envelope(1.0 + extra, ob, boundary=g).solution.interior
    assert (b <= a + 1e-8).all()


def test_report_flags_a_violation(disc16):
    ob = obstacle(disc16, "min(0, 4*(|z| - 0.5))")
    res = envelope(0.0, ob)
    res.regular = res.regular + 1.0
    rep = envelope_report(res, ob)
    assert not rep.passed and rep.failures[0].name == "below_obstacle"
