"""Discrete complex Hessians, Monge-Ampere densities and their relatives.

Second derivatives come from directional second differences.  Mixed real
derivatives use the diagonal directions, u_ab = (D_{a+b} - D_{a-b}) / 4,
so the stencil of a node is its 3^(2n) neighbourhood restricted to the
axes and the (a, b) diagonals.

When a grid function carries Dirichlet data (``GridFunction.boundary``)
and no formula, a stencil arm that leaves the domain is shortened to the
exact boundary crossing at fraction theta of a cell and the missing value
is replaced by the linear extrapolation u_i + (g - u_i) / theta.  This
keeps second-order accuracy on curved boundaries while the matrix of
the n = 1 operator stays an M-matrix.
"""
from __future__ import annotations

import weakref
from math import comb

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from .fields import GridFunction, HermitianField, MeasureField, check_compatible, wedge_constant

THETA_MIN = 1e-6
PSH_TOL = 1e-8

__all__ = [
    "GridFunction", "HermitianField", "MeasureField", "Stencil", "stencil", "complex_hessian",
    "ma_density", "mixed_density", "twisted_expansion", "truncate", "np_ma", "atom_extract",
    "grid_max", "UnsupportedSingularity", "wedge_constant",
]


class UnsupportedSingularity(ValueError):
    pass


def stencil_directions(n: int) -> np.ndarray:
    """Axes first, then the diagonals e_a +- e_b used for mixed derivatives."""
    E = np.eye(2 * n, dtype=int)
    dirs = [E[k] for k in range(2 * n)]
    if n == 2:
        for a, b in ((0, 2), (1, 3), (0, 3), (1, 2)):
            dirs += [E[a] + E[b], E[a] - E[b]]
    return np.array(dirs)


class Stencil:
    """Neighbour tables of the interior nodes of one domain."""

    def __init__(self, domain):
        self.domain = domain
        self.n = domain.n
        self.h = domain.h
        self.dirs = stencil_directions(self.n)
        idx = domain.interior_flat
        offs = self.dirs @ domain.strides
        self.center = idx
        # nb[d, 0] = idx + off_d, nb[d, 1] = idx - off_d
        self.nb = np.stack([np.stack([idx + o, idx - o]) for o in offs])
        self.nb_pos = domain.interior_position[self.nb]
        self.theta = np.ones(self.nb.shape)
        ext = self.nb_pos < 0
        d_i, s_i, k_i = np.nonzero(ext)
        self.cross = (d_i, s_i, k_i)
        pts = domain.interior_points[k_i]
        steps = self.dirs[d_i] * np.where(s_i == 0, 1.0, -1.0)[:, None] * self.h
        th = np.maximum(domain.crossing(pts, steps), THETA_MIN)
        self.theta[d_i, s_i, k_i] = th
        self.cross_points = pts + th[:, None] * steps
        self._ops = {}

    @property
    def ndir(self) -> int:
        return len(self.dirs)

    def neighbour_values(self, values: np.ndarray, boundary=None) -> np.ndarray:
        """Values at stencil neighbours, shape (ndir, 2, N), closed at the boundary if asked."""
        V = values.reshape(-1)
        out = V[self.nb]
        if boundary is not None and len(self.cross[0]):
            g = boundary(self.cross_points)
            ui = V[self.center][self.cross[2]]
            th = self.theta[self.cross]
            out[self.cross] = ui + (g - ui) / th
        return out

    def second_differences(self, values: np.ndarray, boundary=None) -> np.ndarray:
        V = values.reshape(-1)
        nbv = self.neighbour_values(values, boundary)
        return (nbv[:, 0] + nbv[:, 1] - 2.0 * V[self.center]) / (self.h * self.h)

    def operators(self, closure: bool):
        """Sparse matrices L_d over interior unknowns, one per direction.

        Second difference d = L_d @ u_interior + constant_d, where the
        constant collects exterior contributions (see :meth:`constants`).
        """
        if closure in self._ops:
            return self._ops[closure]
        N = self.domain.n_interior
        h2 = self.h * self.h
        mats = []
        rows = np.arange(N)
        for d in range(self.ndir):
            diag = np.full(N, -2.0)
            r_list, c_list, v_list = [rows], [rows], []
            for s in (0, 1):
                pos = self.nb_pos[d, s]
                inside = pos >= 0
                r_list.append(rows[inside])
                c_list.append(pos[inside])
                v_list.append(np.ones(int(inside.sum())))
                if closure:
                    th = self.theta[d, s, ~inside]
                    diag[~inside] += 1.0 - 1.0 / th
            v_list.insert(0, diag)
            m = sp.csr_matrix((np.concatenate(v_list) / h2, (np.concatenate(r_list), np.concatenate(c_list))),
                              shape=(N, N))
            mats.append(m)
        self._ops[closure] = mats
        return mats

    def hessian_operators(self, closure: bool):
        """Sparse maps from interior values to Hessian entries.

        Keys: ``d1`` (and ``d2``) for the diagonal, ``re`` and ``im`` for
        the real and imaginary parts of d^2u / dz1 dzbar2.
        """
        key = ("hess", closure)
        if key in self._ops:
            return self._ops[key]
        L = self.operators(closure)
        ops = {"d1": (L[0] + L[1]) / 4.0}
        if self.n == 2:
            ops["d2"] = (L[2] + L[3]) / 4.0
            ops["re"] = ((L[4] - L[5]) + (L[6] - L[7])) / 16.0
            ops["im"] = ((L[8] - L[9]) - (L[10] - L[11])) / 16.0
        ops = {k: v.tocsr() for k, v in ops.items()}
        self._ops[key] = ops
        return ops

    def hessian_constants(self, values: np.ndarray | None, boundary=None) -> dict:
        K = self.constants(values, boundary)
        out = {"d1": (K[0] + K[1]) / 4.0}
        if self.n == 2:
            out["d2"] = (K[2] + K[3]) / 4.0
            out["re"] = ((K[4] - K[5]) + (K[6] - K[7])) / 16.0
            out["im"] = ((K[8] - K[9]) - (K[10] - K[11])) / 16.0
        return out

    def colors(self) -> np.ndarray:
        """Node colouring with no two stencil neighbours sharing a colour.

        Red-black for n = 1 (axis stencil); parity of every coordinate
        (16 colours) for n = 2, whose diagonal arms join nodes of equal
        red-black parity.
        """
        idx = np.array(np.unravel_index(self.center, self.domain.shape))
        if self.n == 1:
            return (idx.sum(axis=0) % 2).astype(np.int64)
        return sum((idx[k] % 2) << k for k in range(idx.shape[0])).astype(np.int64)

    def constants(self, values: np.ndarray | None, boundary=None) -> np.ndarray:
        """Exterior contributions to each second difference, shape (ndir, N)."""
        N = self.domain.n_interior
        out = np.zeros((self.ndir, N))
        d_i, s_i, k_i = self.cross
        if not len(d_i):
            return out
        if boundary is not None:
            contrib = boundary(self.cross_points) / self.theta[self.cross]
        else:
            contrib = values.reshape(-1)[self.nb[self.cross]]
        np.add.at(out, (d_i, k_i), contrib / (self.h * self.h))
        return out


_STENCILS: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def stencil(domain) -> Stencil:
    st = _STENCILS.get(domain)
    if st is None:
        st = Stencil(domain)
        _STENCILS[domain] = st
    return st


def hessian_from_differences(D, n: int) -> HermitianField:
    """Assemble the complex Hessian from directional second differences."""
    if n == 1:
        return HermitianField(((D[0] + D[1]) / 4.0)[:, None])
    diag = np.stack([(D[0] + D[1]) / 4.0, (D[2] + D[3]) / 4.0], axis=1)
    m02 = (D[4] - D[5]) / 4.0
    m13 = (D[6] - D[7]) / 4.0
    m03 = (D[8] - D[9]) / 4.0
    m12 = (D[10] - D[11]) / 4.0
    re = (m02 + m13) / 4.0
    im = (m03 - m12) / 4.0
    return HermitianField(diag, re - 1j * im)


def uses_closure(u: GridFunction) -> bool:
    return u.formula is None and u.boundary is not None


def complex_hessian(u: GridFunction, domain=None) -> HermitianField:
    """Matrix [d^2 u / dz_j dzbar_k] at interior nodes; exact for quadratics."""
    domain = u.domain if domain is None else domain
    st = stencil(domain)
    D = st.second_differences(u.values, u.boundary if uses_closure(u) else None)
    return hessian_from_differences(D, domain.n)


def floor_touching(u: GridFunction, level: float | None = None) -> np.ndarray:
    """Interior nodes whose stencil meets {u <= -level} (default: the floor)."""
    level = u.t_max if level is None else level
    st = stencil(u.domain)
    V = u.values.reshape(-1)
    low = V <= -level
    return low[st.center] | low[st.nb].any(axis=(0, 1))


def _clamped_density(M: HermitianField) -> tuple[np.ndarray, np.ndarray]:
    lam = M.eigvalsh()
    scale = 1.0 + np.abs(lam).max(axis=1)
    clamped = (lam < -1e-12 * scale[:, None]).any(axis=1)
    dens = wedge_constant(M.n) * np.prod(np.maximum(lam, 0.0), axis=1)
    return dens, clamped


def ma_density(u: GridFunction, omega=None, background: HermitianField | None = None) -> MeasureField:
    """c_n det(W + H(u)) with eigenvalues clamped at zero.

    Nodes whose stencil meets the floor get density 0: their mass belongs
    to atoms (see :func:`atom_extract`).  ``background`` is an extra fixed
    Hermitian field added to W.
    """
    dom = u.domain
    M = complex_hessian(u)
    if omega is not None and not omega.is_zero:
        M = M + omega.at(dom)
    if background is not None:
        M = M + background
    dens, clamped = _clamped_density(M)
    touch = floor_touching(u)
    dens[touch] = 0.0
    info = {"clamped": int((clamped & ~touch).sum()), "floor_excluded": int(touch.sum())}
    return MeasureField(dom, dens, [], info)


def mixed_density(fields, multiplicities) -> np.ndarray:
    """c_n times the mixed discriminant of the fields taken with multiplicities.

    For n = 2, D(A, B) = (a11 b22 + a22 b11) / 2 - Re(a21 conj(b21)), which
    equals (tr A tr B - tr AB) / 2 and is symmetric in A, B bit for bit.
    """
    fields = list(fields)
    mult = [int(m) for m in multiplicities]
    if len(fields) != len(mult) or any(m < 0 for m in mult):
        raise ValueError("one nonnegative multiplicity per field is required")
    if not fields:
        raise ValueError("no fields given")
    n = fields[0].n
    if sum(mult) != n:
        raise ValueError(f"multiplicities sum to {sum(mult)}, expected n = {n}")
    args = [f for f, m in zip(fields, mult) for _ in range(m)]
    c = wedge_constant(n)
    if n == 1:
        return c * args[0].diag[:, 0]
    A, B = args
    cross = A.diag[:, 0] * B.diag[:, 1] + A.diag[:, 1] * B.diag[:, 0]
    off = A.lower.real * B.lower.real + A.lower.imag * B.lower.imag
    return c * (0.5 * cross - off)


def twisted_expansion(u: GridFunction, rho, omega) -> MeasureField:
    """(omega + dd^c u)^n via the binomial expansion in dd^c(u + rho) and dd^c rho - omega."""
    dom = u.domain
    n = dom.n
    H = complex_hessian(u)
    A = H + rho.hessian
    B = rho.hessian - omega.at(dom)
    touch = floor_touching(u)
    lam = A.eigvalsh()[:, 0]
    bad = (lam < -PSH_TOL * (1.0 + np.abs(A.diag).max(axis=1))) & ~touch
    free = max(1, int((~touch).sum()))
    if bad.sum() > 0.01 * free:
        raise ValueError(f"u + rho fails the psh test on {int(bad.sum())} of {free} nodes")
    total = np.zeros(len(H))
    for k in range(n + 1):
        fields, mult = [A, B], [k, n - k]
        total += comb(n, k) * (-1) ** (n - k) * mixed_density(fields, mult)
    clamp = np.maximum(-total, 0.0)
    dens = np.maximum(total, 0.0)
    dens[touch] = 0.0
    return MeasureField(dom, dens, [], {"clamp_max": float(clamp[~touch].max(initial=0.0)),
                                        "clamped": int((clamp[~touch] > 0).sum())})


# ---------------------------------------------------------------------------
# truncation and non-pluripolar parts

class _MaxFormula:
    def __init__(self, f, g):
        self.f, self.g = f, g

    def __call__(self, pts):
        a = self.f(pts)
        b = self.g(pts) if callable(self.g) else self.g
        return np.maximum(a, b)


def truncate(u: GridFunction, t: float) -> GridFunction:
    """max(u, -t)."""
    if t <= 0 or t > u.t_max:
        raise ValueError(f"truncation level must lie in (0, t_max], got {t}")
    vals = np.maximum(u.values, -t)
    formula = _MaxFormula(u.formula, -t) if u.formula is not None else None
    bnd = _MaxFormula(u.boundary, -t) if u.boundary is not None else None
    return GridFunction(u.domain, vals, u.t_max, formula=formula, boundary=bnd,
                        label=f"max({u.label or 'u'}, {-t:g})")


def grid_max(u: GridFunction, v: GridFunction) -> GridFunction:
    """Nodewise max, keeping analytic or boundary data where available."""
    check_compatible(u, v)
    vals = np.maximum(u.values, v.values)
    if u.formula is not None and v.formula is not None:
        return GridFunction(u.domain, vals, u.t_max, formula=_MaxFormula(u.formula, v.formula),
                            label=f"max({u.label}, {v.label})")
    bu, bv = u.boundary_values_callable(), v.boundary_values_callable()
    bnd = _MaxFormula(bu, bv) if bu is not None and bv is not None else None
    return GridFunction(u.domain, vals, u.t_max, boundary=bnd, label=f"max({u.label}, {v.label})")


def stencil_interior(u: GridFunction, t: float) -> np.ndarray:
    """Interior nodes whose whole stencil lies in {u > -t}."""
    return ~floor_touching(u, t)


def np_ma(u: GridFunction, omega, schedule, tol: float = 1e-8):
    """Masked Monge-Ampere masses of truncations along an increasing schedule.

    The mask at level t keeps nodes whose entire stencil lies in
    {u > -t}.  There the truncation agrees with u on the stencil, so the
    masked density at t is the same at every later level; masses are
    therefore nondecreasing by construction.  Returns the last masked
    measure and the list of total masses.
    """
    sched = [float(t) for t in schedule]
    if not sched:
        raise ValueError("empty schedule")
    if any(b <= a for a, b in zip(sched, sched[1:])):
        raise ValueError("schedule must be strictly increasing")
    if sched[0] <= 0 or sched[-1] > u.t_max:
        raise ValueError("schedule must lie in (0, t_max]")
    masses = []
    meas = None
    for t in sched:
        ut = truncate(u, t)
        meas = ma_density(ut, omega)
        keep = stencil_interior(u, t)
        dens = np.where(keep, meas.density, 0.0)
        meas = MeasureField(u.domain, dens, [], {"t": t, "clamped": meas.info["clamped"]})
        masses.append(meas.smooth_mass())
    for a, b in zip(masses, masses[1:]):
        if b < a - tol * (1.0 + abs(a)):
            raise ArithmeticError(f"masked masses decrease along the schedule ({a} -> {b})")
    return meas, masses


# ---------------------------------------------------------------------------
# atoms

COLLAR = 5


def floor_clusters(u: GridFunction):
    """Connected groups of interior floor nodes, each as (center point, flat nodes)."""
    dom = u.domain
    fl = u.floor_mask & dom.interior_mask
    if not fl.any():
        return []
    lab, k = ndimage.label(fl, structure=np.ones((3,) * (2 * dom.n), bool))
    out = []
    for c in range(1, k + 1):
        flat = np.flatnonzero((lab == c).reshape(-1))
        pts = dom.points(flat)
        center = pts.mean(axis=0)
        if np.linalg.norm(pts - center, axis=1).max() > COLLAR * dom.h:
            raise UnsupportedSingularity("floor locus is not a union of small clusters")
        out.append((center, flat))
    return out


def _lelong_fit(u: GridFunction, center, exclude) -> float:
    """Coefficient of log|z - p| in a least-squares fit near p."""
    dom = u.domain
    h = dom.h
    pts = dom.interior_points
    r = np.linalg.norm(pts - center, axis=1)
    sel = (r >= 1.5 * h) & (r <= COLLAR * h) & ~exclude
    vals = u.interior[sel]
    A = np.stack([np.log(r[sel]), np.ones(int(sel.sum())), r[sel] ** 2], axis=1)
    coef, *_ = np.linalg.lstsq(A, vals, rcond=None)
    return float(coef[0])


def _concentration(u: GridFunction, center, W, exclude) -> float:
    """Mass of a sharp truncation near p minus the smooth background there.

    The truncation level is the mean of u on the shell at 2.5h, so the
    truncation ring sits a few cells from the pole and is resolved by
    the stencil.
    """
    dom = u.domain
    h = dom.h
    pts = dom.interior_points
    r = np.linalg.norm(pts - center, axis=1)
    shell = (np.abs(r - 2.5 * h) < 0.5 * h) & ~exclude
    t = -float(u.interior[shell].mean())
    t = min(max(t, 1e-12), u.t_max)
    ut = truncate(u, t)
    ball = (r < COLLAR * h) & ~exclude
    ann = (r >= COLLAR * h) & (r < (COLLAR + 2) * h) & ~exclude
    d_t = ma_density(ut, background=W).density
    d_u = ma_density(u, background=W).density
    smooth = float(np.mean(d_u[ann])) if ann.any() else 0.0
    vol = dom.cell_volume
    return float(np.sum(d_t[ball]) * vol - smooth * int(ball.sum()) * vol)


def atom_extract(u: GridFunction, omega=None, rho=None, method: str = "auto",
                 operator: str = "twisted"):
    """Point masses of the Monge-Ampere measure of u at its floor clusters.

    ``method`` is ``concentration`` (truncation mass near the pole minus
    the smooth background), ``lelong`` (mass (2 pi nu)^n from the fitted
    coefficient nu of log|z - p|) or ``auto``: concentration for n = 1 and
    the log-coefficient fit for n = 2, where sharp truncations are not
    resolved by the stencil.  ``operator`` selects the twisted density
    (omega + dd^c u)^n or the shifted one (dd^c(u + rho))^n; both give the
    same atoms.
    """
    dom = u.domain
    n = dom.n
    clusters = floor_clusters(u)
    if not clusters:
        return []
    if method == "auto":
        method = "concentration" if n == 1 else "lelong"
    if method not in ("concentration", "lelong"):
        raise ValueError(f"unknown atom method '{method}'")
    if operator == "twisted":
        W = omega.at(dom) if omega is not None and not omega.is_zero else None
    elif operator == "shifted":
        if rho is None:
            raise ValueError("the shifted operator needs the defining function")
        W = rho.hessian
    else:
        raise ValueError(f"unknown operator '{operator}'")
    pts = dom.interior_points
    atoms = []
    for k, (center, _) in enumerate(clusters):
        exclude = np.zeros(dom.n_interior, bool)
        for j, (other, _) in enumerate(clusters):
            if j != k:
                exclude |= np.linalg.norm(pts - other, axis=1) < (COLLAR + 2) * dom.h
        if method == "lelong":
            nu = _lelong_fit(u, center, exclude)
            mass = (2 * np.pi * max(nu, 0.0)) ** n
        else:
            mass = max(_concentration(u, center, W, exclude), 0.0)
        atoms.append((tuple(float(x) for x in center), float(mass)))
    return atoms
