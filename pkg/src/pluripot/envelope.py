"""Gluing, local Dirichlet solves, balayage and obstacle envelopes.

The discrete equation at an interior node is

    c_n det(W + B + H(u)) = f,

with W the background form, B an optional fixed Hermitian field (the
Hessian of a split-off singular part) and H(u) the stencil Hessian.
For n = 1 it is linear in u.  For n = 2 it is solved by damped Newton
iterations; projected Gauss-Seidel sweeps with a closed-form pointwise
update serve as the fallback for degenerate targets.

Envelopes (largest subsolution below an obstacle) are computed by a
primal-dual active-set iteration on the complementarity system

    u <= obstacle,  F(u) - f >= 0,  (obstacle - u)(F(u) - f) = 0,

which is exact and finite for the n = 1 M-matrix; a balayage sweep over
a cover of small balls is available as an independent cross-check.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage

from .fields import GridFunction, HermitianField, MeasureField, check_compatible, wedge_constant
from .geometry import formula_hessian
from .operators import ma_density, stencil, uses_closure
from .report import DiagnosticsReport

log = logging.getLogger(__name__)

MAX_NEWTON = 200
MAX_SWEEPS = 10_000
MAX_ITER = 100_000
DIRECT_LIMIT = 3_000


class ConvergenceError(RuntimeError):
    def __init__(self, msg, dump=None):
        super().__init__(msg)
        self.dump = dump or {}


class AdmissibilityError(ValueError):
    pass


def default_tol_pde(target: np.ndarray) -> float:
    return 1e-6 * (1.0 + float(np.max(np.abs(target), initial=0.0)))


def default_tol_env(obstacle_values: np.ndarray, t_max: float) -> float:
    finite = obstacle_values[obstacle_values > -t_max]
    return 1e-6 * (1.0 + float(np.max(np.abs(finite), initial=0.0)))


def _density(target, domain) -> np.ndarray:
    if isinstance(target, MeasureField):
        return target.density
    t = np.asarray(target, dtype=float)
    if t.ndim == 0:
        return np.full(domain.n_interior, float(t))
    if t.shape != (domain.n_interior,):
        raise ValueError("target density needs one value per interior node")
    return t


def dirichlet_data(domain, g: Callable, t_max: float = 40.0, label: str = "g") -> GridFunction:
    """Grid function carrying Dirichlet data g; stencils crossing the boundary are closed with g."""
    vals = np.maximum(g(domain.points()), -t_max).reshape(domain.shape)
    return GridFunction(domain, vals, t_max, boundary=g, label=label)


# ---------------------------------------------------------------------------
# discrete operator on a set of unknown nodes

class MAProblem:
    """F(x) = c_n det(W + B + H(x)) for the unknown interior nodes ``S``.

    Values of the other nodes are frozen from ``values``; stencil arms
    leaving the domain are closed with ``boundary`` when it is given.
    """

    def __init__(self, domain, values: np.ndarray, W: HermitianField | None,
                 boundary: Callable | None = None, unknown: np.ndarray | None = None):
        self.domain = domain
        self.n = domain.n
        self.c = wedge_constant(self.n)
        st = stencil(domain)
        self.st = st
        N = domain.n_interior
        unknown = np.ones(N, bool) if unknown is None else np.asarray(unknown, bool)
        self.S = np.flatnonzero(unknown)
        Fx = np.flatnonzero(~unknown)
        self.values = np.array(values, dtype=float).reshape(-1)
        self.boundary = boundary
        P = st.hessian_operators(boundary is not None)
        C = st.hessian_constants(self.values, boundary)
        xint = self.values[domain.interior_flat]
        self.A, self.const = {}, {}
        for k, M in P.items():
            rows = M[self.S]
            self.A[k] = rows[:, self.S].tocsr()
            self.const[k] = C[k][self.S] + (rows[:, Fx] @ xint[Fx] if len(Fx) else 0.0)
        if W is None:
            W = HermitianField.zeros(self.n, N)
        Ws = W.subset(self.S)
        self.w = Ws.diag
        self.wl = Ws.lower
        self.kdiag = {k: self.A[k].diagonal() for k in ("d1", "d2") if k in self.A}

    @property
    def size(self) -> int:
        return len(self.S)

    def x0(self) -> np.ndarray:
        return self.values[self.domain.interior_flat][self.S].copy()

    def full(self, x: np.ndarray) -> np.ndarray:
        out = self.values.copy()
        out[self.domain.interior_flat[self.S]] = x
        return out

    def entries(self, x, rows=None):
        """(m11, m22, lower) of W + B + H(x), optionally for a subset of rows."""
        def lin(k):
            A, c = self.A[k], self.const[k]
            if rows is None:
                return A @ x + c
            return A[rows] @ x + c[rows]
        w = self.w if rows is None else self.w[rows]
        m11 = w[:, 0] + lin("d1")
        if self.n == 1:
            return m11, None, None
        wl = self.wl if rows is None else self.wl[rows]
        m22 = w[:, 1] + lin("d2")
        lower = wl + lin("re") - 1j * lin("im")
        return m11, m22, lower

    def F(self, x, rows=None) -> np.ndarray:
        m11, m22, lower = self.entries(x, rows)
        if self.n == 1:
            return self.c * m11
        return self.c * (m11 * m22 - np.abs(lower) ** 2)

    def admissible(self, x, rows=None, tol=0.0) -> np.ndarray:
        m11, m22, lower = self.entries(x, rows)
        if self.n == 1:
            return m11 >= -tol
        det = m11 * m22 - np.abs(lower) ** 2
        return (m11 >= -tol) & (m22 >= -tol) & (det >= -tol * (1 + np.abs(m11) + np.abs(m22)))

    def jacobian(self, x) -> sp.csr_matrix:
        if self.n == 1:
            return (self.c * self.A["d1"]).tocsr()
        m11, m22, lower = self.entries(x)
        D = sp.diags
        J = (D(m22) @ self.A["d1"] + D(m11) @ self.A["d2"]
             - 2.0 * D(lower.real) @ self.A["re"] + 2.0 * D(lower.imag) @ self.A["im"])
        return (self.c * J).tocsr()

    def trace_operator(self):
        A = self.A["d1"] if self.n == 1 else self.A["d1"] + self.A["d2"]
        c = self.const["d1"] if self.n == 1 else self.const["d1"] + self.const["d2"]
        w = self.w.sum(axis=1)
        return A.tocsr(), c + w

    # -- pointwise update ------------------------------------------------
    def pointwise_step(self, x, rows, f):
        """Change of x[rows] that solves the node equation with neighbours frozen.

        The admissible root is taken; the dependence of the off-diagonal
        Hessian entry on the centre value (nonzero only next to the
        boundary) is lagged.
        """
        tau = f / self.c
        m11, m22, lower = self.entries(x, rows)
        k1 = self.kdiag["d1"][rows]
        if self.n == 1:
            return (tau - m11) / k1
        k2 = self.kdiag["d2"][rows]
        ka, kb = -k1, -k2
        q = np.abs(lower) ** 2
        bq = m11 * kb + m22 * ka
        disc = (m11 * kb - m22 * ka) ** 2 + 4.0 * ka * kb * (q + tau)
        sigma = (-bq + np.sqrt(np.maximum(disc, 0.0))) / (2.0 * ka * kb)
        return -sigma


def _solve_linear(A: sp.spmatrix, b: np.ndarray, n: int) -> np.ndarray:
    """Direct solve in the plane and for small systems; AMG-preconditioned GMRES otherwise."""
    if n == 1 or A.shape[0] <= DIRECT_LIMIT:
        return spla.spsolve(A.tocsc(), b)
    import pyamg

    A = A.tocsr()
    sym = (0.5 * (A + A.T)).tocsr()
    sign = -1.0 if sym.diagonal().mean() < 0 else 1.0
    ml = pyamg.smoothed_aggregation_solver(sign * sym)
    M = ml.aspreconditioner()
    Mop = spla.LinearOperator(A.shape, matvec=lambda v: sign * (M @ v))
    scale = float(np.linalg.norm(b)) or 1.0
    x, info = spla.gmres(A, b, M=Mop, rtol=1e-13, atol=1e-15 * scale, restart=50, maxiter=200)
    if info != 0:
        log.warning("GMRES stopped with code %d; using a direct solve", info)
        x = spla.spsolve(A.tocsc(), b)
    return x


def _newton(prob: MAProblem, x: np.ndarray, f: np.ndarray, tol: float, max_iter: int = MAX_NEWTON):
    """Damped Newton for F(x) = f keeping W + B + H(x) admissible."""
    hist = []
    r = f - prob.F(x)
    res = float(np.max(np.abs(r), initial=0.0))
    for it in range(max_iter):
        hist.append(res)
        if res <= tol:
            return x, True, hist
        J = prob.jacobian(x)
        try:
            dx = _solve_linear(J, r, prob.n)
        except RuntimeError:
            return x, False, hist
        if not np.all(np.isfinite(dx)):
            return x, False, hist
        alpha = 1.0
        while alpha > 1e-4:
            xn = x + alpha * dx
            rn = f - prob.F(xn)
            resn = float(np.max(np.abs(rn), initial=0.0))
            if (prob.n == 1 or prob.admissible(xn, tol=1e-12).all()) and resn < res * (1 - 1e-4 * alpha) + tol:
                break
            alpha *= 0.5
        else:
            return x, False, hist
        x, r, res = xn, rn, resn
        if prob.n == 1 and it >= 1:
            # the n = 1 equation is linear: one exact step suffices
            pass
    hist.append(res)
    return x, res <= tol, hist


def _poisson_start(prob: MAProblem, f: np.ndarray) -> np.ndarray:
    """Initial guess with tr(W + B + H(x)) = n (f / c_n)^(1/n)."""
    A, c = prob.trace_operator()
    rhs = prob.n * np.power(np.maximum(f, 0.0) / prob.c, 1.0 / prob.n) - c
    return _solve_linear(A, rhs, prob.n)


def _sweeps(prob: MAProblem, x, f, upper=None, tol_update=1e-12, tol_res=None, max_sweeps=MAX_SWEEPS,
            omega_relax: float = 1.0):
    """Projected nonlinear Gauss-Seidel over a fixed colouring."""
    colors = prob.st.colors()[prob.S]
    groups = [np.flatnonzero(colors == c) for c in np.unique(colors)]
    hist = []
    for sweep in range(max_sweeps):
        big = 0.0
        for g in groups:
            if not len(g):
                continue
            d = omega_relax * prob.pointwise_step(x, g, f[g])
            new = x[g] + d
            if upper is not None:
                new = np.minimum(new, upper[g])
            big = max(big, float(np.max(np.abs(new - x[g]), initial=0.0)))
            x[g] = new
        hist.append(big)
        if big <= tol_update:
            if tol_res is None:
                return x, True, hist, sweep + 1
            r = prob.F(x) - f
            bad = np.abs(r) > tol_res
            if upper is not None:
                bad &= ~((x >= upper - 1e-12) & (r > 0))
            if not bad.any():
                return x, True, hist, sweep + 1
    return x, False, hist, max_sweeps


# ---------------------------------------------------------------------------
# public operations

def _closure_of(data: GridFunction):
    return data.boundary if uses_closure(data) else None


def local_dirichlet(patch, boundary_data: GridFunction, target, omega=None,
                    background: HermitianField | None = None, tol_pde: float | None = None,
                    closure: Callable | None = None) -> GridFunction:
    """Solve the Monge-Ampere equation on the nodes of ``patch`` with data from ``boundary_data``.

    ``patch`` is a boolean mask over the grid (or over interior nodes) or
    None for the whole domain.  Nodes outside the patch keep the values of
    ``boundary_data``; arms leaving the domain are closed with
    ``closure`` (default: the data's own Dirichlet callable, if any).
    """
    dom = boundary_data.domain
    f = _density(target, dom)
    if (f < 0).any():
        raise ValueError("target density must be nonnegative")
    if not np.isfinite(boundary_data.values).all():
        raise ValueError("boundary data must be finite")
    unknown = _interior_mask(dom, patch)
    closure = _closure_of(boundary_data) if closure is None else closure
    W = _background(dom, omega, background)
    prob = MAProblem(dom, boundary_data.values, W, closure, unknown)
    fS = f[prob.S]
    tol = default_tol_pde(fS) if tol_pde is None else tol_pde
    x = _solve_equation(prob, fS, tol)
    out = GridFunction(dom, prob.full(x).reshape(dom.shape), boundary_data.t_max,
                       boundary=closure, label="local_dirichlet")
    return out


def _solve_equation(prob: MAProblem, f: np.ndarray, tol: float, x0=None) -> np.ndarray:
    if prob.n == 1:
        A, c = prob.A["d1"], prob.const["d1"] + prob.w[:, 0]
        x = spla.spsolve(A.tocsc(), f / prob.c - c)
        return np.asarray(x)
    x = _poisson_start(prob, f) if x0 is None else x0.copy()
    x, ok, hist = _newton(prob, x, f, tol)
    if ok:
        return x
    log.info("Newton stalled after %d steps (residual %.3g); switching to sweeps", len(hist), hist[-1])
    x, ok, shist, _ = _sweeps(prob, x, f, tol_update=1e-3 * tol * prob.domain.h ** 2, tol_res=tol)
    if not ok:
        raise ConvergenceError("local Dirichlet solve did not converge",
                               {"newton_residuals": hist, "sweep_updates": shist[-50:]})
    return x


def _interior_mask(dom, patch) -> np.ndarray:
    if patch is None:
        return np.ones(dom.n_interior, bool)
    patch = np.asarray(patch, bool)
    if patch.shape == dom.shape:
        return patch.reshape(-1)[dom.interior_flat]
    if patch.shape == (dom.n_interior,):
        return patch
    raise ValueError("patch mask has the wrong shape")


def _background(dom, omega, background) -> HermitianField | None:
    W = None
    if omega is not None and not omega.is_zero:
        W = omega.at(dom)
    if background is not None:
        W = background if W is None else W + background
    return W


def ball_patch(domain, center, radius: float) -> np.ndarray:
    """Interior nodes strictly within ``radius`` of ``center`` (grid-shaped mask)."""
    pts = domain.points()
    inside = np.linalg.norm(pts - np.asarray(center, float), axis=1) < radius
    return (inside & domain.interior_mask.reshape(-1)).reshape(domain.shape)


def _ring(domain, sub: np.ndarray, layers: int = 2) -> np.ndarray:
    structure = np.ones((3,) * (2 * domain.n), bool)
    grown = ndimage.binary_dilation(sub, structure=structure, iterations=layers)
    return grown & ~sub


def glue(u: GridFunction, v: GridFunction, sub, omega=None, tol: float = 1e-12) -> GridFunction:
    """max(u, v) on the sub-domain, u elsewhere; needs u >= v on two layers around it."""
    check_compatible(u, v)
    dom = u.domain
    sub = np.asarray(sub, bool)
    if sub.shape != dom.shape:
        grid = np.zeros(dom.shape, bool).reshape(-1)
        grid[dom.interior_flat[sub]] = True
        sub = grid.reshape(dom.shape)
    ring = _ring(dom, sub) & (dom.interior_mask | ndimage.binary_dilation(dom.interior_mask))
    gap = (v.values - u.values)[ring]
    if gap.size and gap.max() > tol * (1.0 + np.abs(u.values[ring]).max()):
        raise ValueError(f"glue needs u >= v around the sub-domain; violated by {gap.max():.3g}")
    vals = np.where(sub, np.maximum(u.values, v.values), u.values)
    return GridFunction(dom, vals, u.t_max, boundary=_closure_of(u), label="glue")


def balayage(u: GridFunction, D, target, omega=None, background=None, tol_pde=None) -> GridFunction:
    """Replace u on D by the local solution with u's values around D, then glue."""
    v = local_dirichlet(D, u, target, omega, background, tol_pde, closure=_closure_of(u))
    return glue(u, v, np.asarray(D, bool) if np.asarray(D).shape == u.domain.shape else D, omega)


# ---------------------------------------------------------------------------
# envelopes

@dataclass(eq=False)
class Obstacle:
    """Upper constraint for the envelope.

    ``singular`` is an optional analytic part with poles (a grid function
    with a formula).  The solver then works with the bounded remainder
    u - singular, and ``regular`` (values minus singular part, on the
    full grid) must be supplied wherever the singular part hits the floor.
    """

    values: GridFunction
    label: str = ""
    singular: GridFunction | None = None
    regular: np.ndarray | None = None

    def regular_values(self) -> np.ndarray:
        if self.singular is None:
            return self.values.values
        if self.regular is not None:
            return np.asarray(self.regular, float).reshape(self.values.domain.shape)
        if self.singular.floor_mask.any():
            raise ValueError("obstacle with a singular part needs explicit regular values")
        return self.values.values - self.singular.values


@dataclass(eq=False)
class EnvelopeResult:
    solution: GridFunction
    contact_mask: np.ndarray
    iterations: int
    final_residual: float
    residual_history: list = field(default_factory=list)
    info: dict = field(default_factory=dict)
    regular: np.ndarray | None = None

    def report(self) -> dict:
        hist = self.residual_history
        step = max(1, len(hist) // 50)
        return {
            "iterations": self.iterations,
            "final_residual": self.final_residual,
            "residual_history": [float(x) for x in hist[::step]],
            "contact_fraction": float(self.contact_mask.mean()) if self.contact_mask.size else 0.0,
            **{k: v for k, v in self.info.items() if isinstance(v, (int, float, str, bool))},
        }


def singular_background(w: GridFunction) -> HermitianField:
    """Analytic complex Hessian of w at interior nodes, zero on its floor."""
    dom = w.domain
    if w.formula is None:
        raise ValueError("a singular part needs an analytic formula")
    fl = w.floor_mask.reshape(-1)[dom.interior_flat]
    pts = dom.interior_points
    if getattr(w.formula, "has_hessian", hasattr(w.formula, "hessian")):
        H = w.formula.hessian(pts)
    else:
        eps = 2e-4
        poles = getattr(w.formula, "poles", None)
        if poles:
            dist = np.min([np.linalg.norm(pts - np.asarray(p), axis=1) for p in poles], axis=0)
            eps = 1e-4 * np.clip(dist, dom.h * 1e-3, 2.0)
        H = formula_hessian(w.formula, pts, dom.n, eps)
    H.diag[fl] = 0.0
    if dom.n == 2:
        H.lower[fl] = 0.0
    bad = ~np.isfinite(H.diag).all(axis=1)
    if bad.any():
        H.diag[bad] = 0.0
        if dom.n == 2:
            H.lower[bad] = 0.0
    return H


def _fill_floor(chi: np.ndarray, floor: np.ndarray, dom) -> np.ndarray:
    """Replace values on floor nodes by averages of their non-floor axis neighbours."""
    if not floor.any():
        return chi
    out = chi.copy()
    good = ~floor
    structure = ndimage.generate_binary_structure(2 * dom.n, 1)
    for _ in range(10):
        s = ndimage.convolve(np.where(good, out, 0.0), structure.astype(float), mode="constant")
        c = ndimage.convolve(good.astype(float), structure.astype(float), mode="constant")
        fix = ~good & (c > 0)
        out[fix] = s[fix] / c[fix]
        good = good | fix
        if good.all():
            break
    return out


def envelope(target, obstacle: Obstacle, omega=None, seed: GridFunction | None = None,
             boundary: Callable | None = None, method: str = "active_set",
             tol_env: float | None = None, tol_pde: float | None = None,
             max_iter: int = MAX_ITER, rho=None, check_seed: bool = True) -> EnvelopeResult:
    """Largest discrete subsolution of F(u) >= target lying below the obstacle.

    ``boundary`` gives Dirichlet data (default: the obstacle's boundary
    values).  ``method`` is ``active_set`` (default) or ``balayage``.
    """
    ob = obstacle.values
    dom = ob.domain
    f = _density(target, dom)
    t_max = ob.t_max
    w = obstacle.singular
    psi_full = obstacle.regular_values()
    tol_env = default_tol_env(psi_full.reshape(-1)[dom.interior_flat], t_max) if tol_env is None else tol_env
    tol_pde = default_tol_pde(f) if tol_pde is None else tol_pde
    eps_contact = 10.0 * tol_env
    g = boundary if boundary is not None else ob.boundary_values_callable()
    if g is None:
        raise ValueError("envelope needs Dirichlet data (pass boundary=...)")
    if w is not None:
        wf = w.formula

        def g_reg(pts):
            # the difference is -inf - -inf at a pole node; it is never used there
            with np.errstate(invalid="ignore", divide="ignore"):
                return np.nan_to_num(g(pts) - wf(pts), nan=0.0, posinf=0.0, neginf=0.0)
        B = singular_background(w)
        w_floor = w.floor_mask
    else:
        g_reg, B, w_floor = g, None, np.zeros(dom.shape, bool)
    W = _background(dom, omega, B)
    psi = psi_full.reshape(-1)[dom.interior_flat]

    # starting values for the bounded part
    base = np.maximum(g_reg(dom.points()), -t_max).reshape(dom.shape)
    if seed is not None:
        check_compatible(seed, ob)
        chi0 = seed.values - (w.values if w is not None else 0.0)
        chi0 = _fill_floor(np.where(w_floor, 0.0, chi0), w_floor | (seed.values <= -t_max), dom)
        start = np.where(dom.interior_mask, chi0, base)
    else:
        start = base
    prob = MAProblem(dom, start, W, g_reg)
    x = prob.x0()
    touch = _near(dom, w_floor, 1)
    if seed is None:
        x = _solve_equation(prob, f, tol_pde)
        seed_source = "local_dirichlet"
        if (x > psi).any():
            # lower the solution by a multiple of the defining function:
            # still a subsolution since dd^c rho >= 0 and rho < 0 inside
            if rho is None:
                from .geometry import build_rho
                rho = build_rho(dom, omega)
            r = rho.values.interior
            c = float(np.max((x - psi) / -r))
            x = x + c * r
            seed_source = f"local_dirichlet + {c:.6g} rho"
    else:
        seed_source = "given"
        if check_seed:
            over = x - psi
            if over.max() > tol_env:
                raise AdmissibilityError(f"seed exceeds the obstacle by {over.max():.3g}")
            sub = prob.F(x) - f
            bad = (sub < -tol_pde) & ~touch
            if bad.any():
                raise AdmissibilityError(f"seed is not a subsolution: deficit {-sub[bad].min():.3g} "
                                         f"at {int(bad.sum())} nodes")
    x = np.minimum(x, psi)

    if method == "active_set":
        x, it, hist, info = _active_set(prob, x, f, psi, tol_pde, tol_env, max_iter)
    elif method == "balayage":
        x, it, hist, info = _balayage_iterate(prob, x, f, psi, tol_env, max_iter, dom)
    else:
        raise ValueError(f"unknown envelope method '{method}'")
    info["seed"] = seed_source
    info["max_over_obstacle"] = float(np.max(x - psi, initial=0.0))
    x = np.minimum(x, psi)

    chi_full = prob.full(x).reshape(dom.shape)
    if w is not None:
        vals = np.where(w_floor, -t_max, chi_full + w.values)
        bnd = _SumBoundary(g_reg, w.formula)
    else:
        vals = chi_full
        bnd = g
    sol = GridFunction(dom, vals, t_max, boundary=bnd, label="envelope")
    contact = (psi - x) <= eps_contact
    r = prob.F(x) - f
    free = ~_near(dom, _to_grid(dom, contact), 2) & ~touch
    final = float(np.max(np.abs(r[free]), initial=0.0))
    cg = _to_grid(dom, contact)
    edge = cg & ndimage.binary_dilation(~cg & dom.interior_mask, structure=np.ones((3,) * (2 * dom.n), bool))
    off_crease = ~_near(dom, edge, 2) & ~touch
    info.update({"tol_env": tol_env, "tol_pde": tol_pde, "eps_contact": eps_contact,
                 "min_residual": float(np.min(r[~touch], initial=0.0)),
                 "min_residual_off_crease": float(np.min(r[off_crease], initial=0.0))})
    return EnvelopeResult(sol, contact, it, final, hist, info, regular=chi_full)


def envelope_report(res: EnvelopeResult, obstacle: Obstacle, title: str = "envelope"):
    """Pass/fail checks of an envelope: below the obstacle, equation off contact, subsolution."""
    info = res.info
    dom = res.solution.domain
    rep = DiagnosticsReport(title=title)
    psi = obstacle.regular_values().reshape(-1)[dom.interior_flat]
    over = float(np.max(res.regular.reshape(-1)[dom.interior_flat] - psi, initial=0.0))
    rep.add("below_obstacle", over <= info["tol_env"], max(over, 0.0), info["tol_env"], "u <= obstacle")
    rep.add("equation_off_contact", res.final_residual <= info["tol_pde"], res.final_residual,
            info["tol_pde"], "equality where u stays below the obstacle (2h off contact)")
    deficit = -info["min_residual_off_crease"]
    rep.add("subsolution", deficit <= info["tol_pde"], max(0.0, deficit), info["tol_pde"],
            "MA >= target off crease collars")
    rep.results = res.report()
    return rep


class _SumBoundary:
    def __init__(self, a, b):
        self.a, self.b = a, b

    def __call__(self, pts):
        return self.a(pts) + self.b(pts)


def _to_grid(dom, interior_values: np.ndarray) -> np.ndarray:
    out = np.zeros(int(np.prod(dom.shape)), interior_values.dtype)
    out[dom.interior_flat] = interior_values
    return out.reshape(dom.shape)


def _near(dom, mask_grid: np.ndarray, layers: int) -> np.ndarray:
    """Interior nodes within ``layers`` grid steps (any direction) of the mask."""
    if not mask_grid.any():
        return np.zeros(dom.n_interior, bool)
    structure = np.ones((3,) * (2 * dom.n), bool)
    grown = ndimage.binary_dilation(mask_grid, structure=structure, iterations=layers)
    return grown.reshape(-1)[dom.interior_flat]


def _active_set(prob: MAProblem, x, f, psi, tol_pde, tol_env, max_iter):
    """Primal-dual active-set iteration; Newton on the inactive nodes."""
    gamma = prob.c * float(np.max(np.abs(prob.kdiag["d1"])))
    hist = []
    active = np.zeros(prob.size, bool)
    lam = prob.F(x) - f
    active = lam + gamma * (x - psi) > 0
    info = {"method": "active_set", "newton_steps": 0}
    for it in range(1, min(max_iter, 500) + 1):
        x_old = x.copy()
        x = np.where(active, psi, x)
        inactive = ~active
        if inactive.any():
            x = _solve_inactive(prob, x, f, inactive, tol_pde, info)
        lam = prob.F(x) - f
        new_active = lam + gamma * (x - psi) > 0
        upd = float(np.max(np.abs(x - x_old), initial=0.0))
        hist.append(upd)
        if np.array_equal(new_active, active):
            ok = (x <= psi + tol_env).all() and (lam[active] >= -tol_pde).all()
            if ok:
                return x, it, hist, info
        active = new_active
    log.info("active-set iteration did not settle; finishing with projected sweeps")
    x = np.minimum(x, psi)
    x, ok, shist, sweeps = _sweeps(prob, x, f, upper=psi, tol_update=tol_env * 1e-3, tol_res=tol_pde,
                                   max_sweeps=MAX_SWEEPS)
    info["sweeps"] = sweeps
    if not ok:
        raise ConvergenceError("envelope did not converge", {"updates": (hist + shist)[-50:]})
    return x, it + sweeps, hist + shist, info


def _solve_inactive(prob: MAProblem, x, f, inactive, tol, info):
    I = np.flatnonzero(inactive)
    A_ = np.flatnonzero(~inactive)
    if prob.n == 1:
        A = prob.A["d1"]
        rhs = f[I] / prob.c - prob.const["d1"][I] - prob.w[I, 0]
        if len(A_):
            rhs = rhs - A[I][:, A_] @ x[A_]
        x = x.copy()
        x[I] = spla.spsolve(A[I][:, I].tocsc(), rhs)
        info["newton_steps"] += 1
        return x
    x = x.copy()
    res = np.abs(prob.F(x)[I] - f[I]).max()
    for _ in range(MAX_NEWTON):
        r = f - prob.F(x)
        res = float(np.max(np.abs(r[I]), initial=0.0))
        if res <= tol:
            break
        J = prob.jacobian(x)[I][:, I]
        dx = _solve_linear(J, r[I], prob.n)
        alpha = 1.0
        while alpha > 1e-4:
            xn = x.copy()
            xn[I] += alpha * dx
            rn = float(np.max(np.abs((f - prob.F(xn))[I]), initial=0.0))
            if prob.admissible(xn, I, tol=1e-12).all() and rn < res * (1 - 1e-4 * alpha) + tol:
                break
            alpha *= 0.5
        else:
            break
        x = xn
        info["newton_steps"] += 1
    return x


def _balayage_iterate(prob: MAProblem, x, f, psi, tol_env, max_iter, dom):
    """Sweep local obstacle solves over all balls of radius 4h until stable.

    Each ball step keeps the outside values, solves the obstacle problem
    inside and takes the max with the current values, so every iterate
    stays an admissible subsolution below the obstacle.
    """
    off = np.array(list(np.ndindex(*(9,) * (2 * dom.n)))) - 4
    off = off[np.linalg.norm(off, axis=1) < 4.0]
    idx = np.array(np.unravel_index(dom.interior_flat[prob.S], dom.shape)).T
    pos = np.full(dom.shape, -1)
    pos[tuple(idx.T)] = np.arange(prob.size)
    hist = []
    balls = []
    shape = np.array(dom.shape)
    for i in range(prob.size):
        nb = idx[i] + off
        ok = ((nb >= 0) & (nb < shape)).all(axis=1)
        m = pos[tuple(nb[ok].T)]
        balls.append(np.sort(m[m >= 0]))
    A = prob.A["d1"].tocsr()
    x = np.minimum(x, psi)
    for it in range(1, max_iter + 1):
        x_old = x.copy()
        for members in balls:
            x = _ball_solve(prob, A, x, f, psi, members)
        x = np.minimum(x, psi)
        upd = float(np.max(np.abs(x - x_old), initial=0.0))
        hist.append(upd)
        if upd < tol_env * 1e-2:
            return x, it, hist, {"method": "balayage", "balls": len(balls)}
    raise ConvergenceError("balayage sweeps did not converge", {"updates": hist[-50:]})


def _ball_solve(prob: MAProblem, A, x, f, psi, rows):
    """Obstacle problem on one ball with the current outside values, glued by max."""
    x = x.copy()
    if prob.n == 1:
        sub = A[rows]
        inner = sub[:, rows].toarray()
        rhs = f[rows] / prob.c - prob.const["d1"][rows] - prob.w[rows, 0] - (sub @ x - inner @ x[rows])
        p = psi[rows]
        v = np.minimum(x[rows], p)
        act = np.zeros(len(rows), bool)
        for _ in range(len(rows) + 1):
            free = ~act
            v = np.where(act, p, v)
            if free.any():
                r = rhs[free] - inner[np.ix_(free, act)] @ p[act]
                v[free] = np.linalg.solve(inner[np.ix_(free, free)], r)
            lam = inner @ v - rhs
            new = (lam + np.abs(inner.diagonal()).max() * (v - p)) > 0
            if np.array_equal(new, act):
                break
            act = new
        x[rows] = np.maximum(x[rows], np.minimum(v, p))
        return x
    y = x.copy()
    for _ in range(500):
        d = prob.pointwise_step(y, rows, f[rows])
        new = np.minimum(y[rows] + d, psi[rows])
        big = np.max(np.abs(new - y[rows]))
        y[rows] = new
        if big < 1e-13:
            break
    x[rows] = np.maximum(x[rows], y[rows])
    return x
