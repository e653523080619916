"""Grids on bounded domains of C^n, defining functions and background forms.

Real coordinates are ordered (x1, y1, x2, y2) with z_j = x_j + i y_j.
"""
from __future__ import annotations

import io
import json
import struct
import weakref
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .expr import Expression, as_expression
from .fields import DEFAULT_FLOOR, GridFunction, HermitianField

GRID_MAGIC = b"PLPG"
GRID_VERSION = 1
FD_STEP = 2e-4


class DomainError(ValueError):
    pass


def formula_hessian(func: Callable, pts: np.ndarray, n: int, eps: float = FD_STEP) -> HermitianField:
    """Complex Hessian of an analytic function by small-step differences.

    Accurate to roughly 1e-8 for smooth formulas; used for background
    forms, defining functions and singular kernels, never for grid data.
    ``eps`` may vary per point (near a pole it should shrink with the
    distance to it).
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    f0 = func(pts)
    eps = np.broadcast_to(np.asarray(eps, dtype=float), (len(pts),))

    def d2(e):
        step = eps[:, None] * np.asarray(e, dtype=float)
        return (func(pts + step) + func(pts - step) - 2.0 * f0) / (eps * eps)

    E = np.eye(2 * n)
    if n == 1:
        return HermitianField(((d2(E[0]) + d2(E[1])) / 4.0)[:, None])

    def mixed(a, b):
        return (d2(E[a] + E[b]) - d2(E[a] - E[b])) / 4.0

    diag = np.stack([(d2(E[0]) + d2(E[1])) / 4.0, (d2(E[2]) + d2(E[3])) / 4.0], axis=1)
    re = (mixed(0, 2) + mixed(1, 3)) / 4.0
    im = (mixed(0, 3) - mixed(1, 2)) / 4.0
    # the stored (2,1) entry is the conjugate of d^2u / dz1 dzbar2
    return HermitianField(diag, re - 1j * im)


# ---------------------------------------------------------------------------
# domains

@dataclass
class DomainSpec:
    kind: str = "ball"
    n: int = 1
    h: float = 1.0 / 32
    radius: float = 1.0
    center: Sequence[float] | None = None
    semi_axes: Sequence[float] | None = None
    level: str | None = None
    box: Sequence[Sequence[float]] | None = None


class Domain:
    """Nodes x = lo + k h of a box; interior nodes lie strictly inside.

    The level function is negative inside, zero on the boundary and
    positive outside.  Preset kinds have quadratic level functions so
    boundary crossings along a stencil direction are found in closed form.
    """

    def __init__(self, n, h, box, kind, params, level: Callable, level_kind: str = "quadratic"):
        self.n = int(n)
        self.h = float(h)
        self.box = np.asarray(box, dtype=float).reshape(2 * self.n, 2)
        self.kind = kind
        self.params = dict(params)
        self.level = level
        self.level_kind = level_kind
        counts = np.rint((self.box[:, 1] - self.box[:, 0]) / self.h).astype(int)
        self.shape = tuple(int(c) + 1 for c in counts)
        lv = level(self.points()).reshape(self.shape)
        tol = 1e-10 * max(1.0, float(np.max(np.abs(lv))))
        self.interior_mask = lv < -tol
        outside = lv > tol
        if not self.interior_mask.any():
            raise DomainError("empty interior: no grid node lies strictly inside the domain")
        struct_axis = ndimage.generate_binary_structure(2 * self.n, 1)
        _, ncomp = ndimage.label(self.interior_mask, structure=struct_axis)
        if ncomp != 1:
            raise DomainError(f"interior is disconnected ({ncomp} components)")
        ring = ndimage.binary_dilation(self.interior_mask, structure=struct_axis) & ~self.interior_mask
        self.boundary_flat = np.flatnonzero(ring.reshape(-1))
        self.boundary_outside = outside.reshape(-1)[self.boundary_flat]
        self.interior_flat = np.flatnonzero(self.interior_mask.reshape(-1))
        self._check_box_margin()

    def _check_box_margin(self):
        idx = np.array(np.unravel_index(self.interior_flat, self.shape))
        for k, s in enumerate(self.shape):
            if idx[k].min() < 1 or idx[k].max() > s - 2:
                raise DomainError("interior touches the bounding box; enlarge the box")

    # -- geometry -------------------------------------------------------
    @property
    def n_interior(self) -> int:
        return len(self.interior_flat)

    @property
    def cell_volume(self) -> float:
        return self.h ** (2 * self.n)

    @property
    def strides(self) -> np.ndarray:
        return np.array([int(np.prod(self.shape[k + 1:])) for k in range(len(self.shape))])

    def coord_names(self) -> list[str]:
        return ["x", "y"] if self.n == 1 else ["x1", "y1", "x2", "y2"]

    def points(self, flat=None) -> np.ndarray:
        """Coordinates of nodes given by flat indices (default: all nodes)."""
        if flat is None:
            axes = [self.box[k, 0] + self.h * np.arange(s) for k, s in enumerate(self.shape)]
            mesh = np.meshgrid(*axes, indexing="ij")
            return np.stack([m.reshape(-1) for m in mesh], axis=1)
        idx = np.array(np.unravel_index(np.asarray(flat), self.shape))
        return (self.box[:, 0][:, None] + self.h * idx).T

    @cached_property
    def interior_points(self) -> np.ndarray:
        return self.points(self.interior_flat)

    @cached_property
    def interior_position(self) -> np.ndarray:
        """Map flat node index -> position in the interior ordering (-1 if exterior)."""
        pos = -np.ones(int(np.prod(self.shape)), dtype=np.int64)
        pos[self.interior_flat] = np.arange(self.n_interior)
        return pos

    @property
    def volume(self) -> float:
        """Lebesgue volume of the continuous domain."""
        p = self.params
        if self.kind == "ball":
            r = p["radius"]
            return np.pi * r * r if self.n == 1 else 0.5 * np.pi ** 2 * r ** 4
        if self.kind == "ellipsoid":
            prod = float(np.prod(p["semi_axes"]))
            return np.pi * prod if self.n == 1 else 0.5 * np.pi ** 2 * prod
        return self.n_interior * self.cell_volume

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.box[:, 1] - self.box[:, 0]))

    def nearest_node(self, point) -> int:
        point = np.asarray(point, dtype=float)
        k = np.rint((point - self.box[:, 0]) / self.h).astype(int)
        return int(np.ravel_multi_index(tuple(k), self.shape))

    def crossing(self, pts: np.ndarray, steps: np.ndarray) -> np.ndarray:
        """Fraction s in (0, 1] with level(p + s*step) = 0, for inside p and outside p + step."""
        pts = np.atleast_2d(pts)
        steps = np.atleast_2d(steps)
        if self.level_kind == "quadratic":
            c = np.asarray(self.params["center"], dtype=float)
            a = np.asarray(self.params["axes"], dtype=float)
            q = (pts - c) / a
            d = steps / a
            A = np.sum(d * d, axis=1)
            B = 2 * np.sum(q * d, axis=1)
            C = np.sum(q * q, axis=1) - 1.0
            disc = np.sqrt(np.maximum(B * B - 4 * A * C, 0.0))
            # stable form of the positive root
            s = (2 * -C) / (B + disc)
        else:
            lo = np.zeros(len(pts))
            hi = np.ones(len(pts))
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                inside = self.level(pts + mid[:, None] * steps) < 0
                lo = np.where(inside, mid, lo)
                hi = np.where(inside, hi, mid)
            s = 0.5 * (lo + hi)
        return np.clip(s, 0.0, 1.0)

    # -- serialization --------------------------------------------------
    def to_bytes(self) -> bytes:
        """Versioned binary layout: header, node coordinates, masks (row-major)."""
        buf = io.BytesIO()
        buf.write(GRID_MAGIC)
        buf.write(struct.pack("<IId", GRID_VERSION, self.n, self.h))
        buf.write(np.ascontiguousarray(self.box, dtype="<f8").tobytes())
        buf.write(np.asarray(self.shape, dtype="<i8").tobytes())
        buf.write(struct.pack("<q", self.n_interior))
        buf.write(np.ascontiguousarray(self.points(), dtype="<f8").tobytes())
        tags = np.zeros(int(np.prod(self.shape)), dtype=np.uint8)
        tags[self.interior_flat] = 1
        tags[self.boundary_flat] = np.where(self.boundary_outside, 3, 2)
        buf.write(tags.tobytes())
        meta = json.dumps({"kind": self.kind, "params": _jsonable(self.params)}, sort_keys=True).encode()
        buf.write(struct.pack("<q", len(meta)))
        buf.write(meta)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Domain":
        if data[:4] != GRID_MAGIC:
            raise DomainError("not a grid file")
        version, n, h = struct.unpack_from("<IId", data, 4)
        if version != GRID_VERSION:
            raise DomainError(f"unsupported grid version {version}")
        off = 4 + struct.calcsize("<IId")
        box = np.frombuffer(data, "<f8", 4 * n, off).reshape(2 * n, 2)
        off += 32 * n
        shape = tuple(int(s) for s in np.frombuffer(data, "<i8", 2 * n, off))
        off += 16 * n
        (n_int,) = struct.unpack_from("<q", data, off)
        off += 8
        total = int(np.prod(shape))
        off += 8 * 2 * n * total
        tags = np.frombuffer(data, np.uint8, total, off)
        off += total
        (mlen,) = struct.unpack_from("<q", data, off)
        meta = json.loads(data[off + 8: off + 8 + mlen])
        spec = DomainSpec(kind=meta["kind"], n=n, h=h, **_spec_params(meta))
        if spec.kind == "custom":
            spec.box = box.tolist()
        dom = build_domain(spec)
        if dom.n_interior != n_int or not np.array_equal((tags == 1), dom.interior_mask.reshape(-1)):
            raise DomainError("grid file is inconsistent with its header")
        return dom

    def __repr__(self):
        return f"Domain({self.kind}, n={self.n}, h={self.h:g}, interior={self.n_interior})"


def _jsonable(params):
    out = {}
    for k, v in params.items():
        if isinstance(v, np.ndarray):
            v = v.tolist()
        if isinstance(v, Expression):
            v = v.text
        out[k] = v
    return out


def _spec_params(meta):
    p = meta["params"]
    if meta["kind"] == "ball":
        return {"radius": p["radius"], "center": p["center"]}
    if meta["kind"] == "ellipsoid":
        return {"semi_axes": p["semi_axes"], "center": p["center"]}
    return {"level": p["level"]}


def _divides(extent, h):
    k = extent / h
    return abs(k - round(k)) < 1e-9 * max(1.0, k) and round(k) >= 1


def build_domain(spec: DomainSpec | dict) -> Domain:
    """Discretize a ball, an ellipsoid or a level-set domain."""
    if isinstance(spec, dict):
        spec = DomainSpec(**spec)
    n, h = int(spec.n), float(spec.h)
    if n not in (1, 2):
        raise DomainError("complex dimension must be 1 or 2")
    if h <= 0:
        raise DomainError("grid spacing must be positive")
    center = np.zeros(2 * n) if spec.center is None else np.asarray(spec.center, dtype=float)
    if center.shape != (2 * n,):
        raise DomainError(f"center needs {2 * n} real coordinates")
    if spec.kind in ("ball", "ellipsoid"):
        if spec.kind == "ball":
            if spec.radius <= 0:
                raise DomainError("radius must be positive")
            axes = np.full(2 * n, float(spec.radius))
            params = {"radius": float(spec.radius), "center": center.tolist()}
        else:
            axes = np.asarray(spec.semi_axes, dtype=float)
            if axes.shape != (2 * n,) or (axes <= 0).any():
                raise DomainError(f"ellipsoid needs {2 * n} positive semi-axes")
            params = {"semi_axes": axes.tolist(), "center": center.tolist()}
        for a in axes:
            if not _divides(2 * a, h):
                raise DomainError(f"grid spacing {h:g} does not divide the bounding box extent {2 * a:g}")
        box = np.stack([center - axes, center + axes], axis=1)
        params["axes"] = axes.tolist()

        def level(pts, c=center, a=axes):
            q = (pts - c) / a
            return np.sum(q * q, axis=1) - 1.0

        return Domain(n, h, box, spec.kind, params, level, "quadratic")
    if spec.kind == "custom":
        if spec.level is None or spec.box is None:
            raise DomainError("custom domains need a level-set formula and a bounding box")
        expr = as_expression(spec.level, n)
        box = np.asarray(spec.box, dtype=float).reshape(2 * n, 2)
        for lo, hi in box:
            if not _divides(hi - lo, h):
                raise DomainError(f"grid spacing {h:g} does not divide the bounding box extent {hi - lo:g}")
        return Domain(n, h, box, "custom", {"level": expr.text}, expr, "general")
    raise DomainError(f"unknown domain kind '{spec.kind}'")


# ---------------------------------------------------------------------------
# background forms

@dataclass(eq=False)
class BackgroundForm:
    """A smooth real (1,1)-form, stored as analytic coefficient formulas.

    ``kind`` is one of zero, scaled_euclidean, ddc_rho, custom.  For custom
    forms ``coefficients`` maps w11, w22, re_w12, im_w12 to formulas, where
    w12 is the coefficient of dz1 ^ dzbar2.
    """

    kind: str = "zero"
    scale: float = 1.0
    coefficients: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("zero", "scaled_euclidean", "ddc_rho", "custom"):
            raise ValueError(f"unknown background form '{self.kind}'")
        self._cache = weakref.WeakKeyDictionary()

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero" or (self.kind == "scaled_euclidean" and self.scale == 0.0)

    def at(self, domain: Domain, pts: np.ndarray | None = None) -> HermitianField:
        """Matrices W at the given points (default: interior nodes)."""
        if pts is None:
            if domain not in self._cache:
                self._cache[domain] = self._evaluate(domain, domain.interior_points)
            return self._cache[domain]
        return self._evaluate(domain, np.atleast_2d(pts))

    def _evaluate(self, domain: Domain, pts: np.ndarray) -> HermitianField:
        N, n = len(pts), domain.n
        if self.kind == "zero":
            return HermitianField.zeros(n, N)
        if self.kind == "scaled_euclidean":
            return HermitianField.constant(self.scale * np.eye(n), N)
        if self.kind == "ddc_rho":
            return canonical_level_hessian(domain, pts).scaled(self.scale)
        coef = {k: as_expression(v, n) for k, v in self.coefficients.items()}
        if n == 1:
            return HermitianField(coef.get("w11", as_expression(0, 1))(pts)[:, None])
        zero = as_expression(0, 2)
        diag = np.stack([coef.get("w11", zero)(pts), coef.get("w22", zero)(pts)], axis=1)
        w12 = coef.get("re_w12", zero)(pts) + 1j * coef.get("im_w12", zero)(pts)
        return HermitianField(diag, np.conj(w12))

    def describe(self) -> dict:
        return {"kind": self.kind, "scale": self.scale,
                "coefficients": {k: str(v) for k, v in self.coefficients.items()}}


def canonical_level_hessian(domain: Domain, pts: np.ndarray) -> HermitianField:
    """dd^c of the unscaled level function (|z-c|^2 - r^2 for a ball)."""
    N, n = len(pts), domain.n
    if domain.kind == "ball":
        return HermitianField.constant(np.eye(n), N)
    if domain.kind == "ellipsoid":
        a = np.asarray(domain.params["semi_axes"], dtype=float)
        # level = sum (x_k / a_k)^2 - 1, and (d_xx + d_yy)/4 per complex coordinate
        d = np.array([(1 / a[2 * j] ** 2 + 1 / a[2 * j + 1] ** 2) / 2 for j in range(n)])
        return HermitianField(np.tile(d, (N, 1)), np.zeros(N, complex) if n == 2 else None)
    return formula_hessian(domain.level, pts, n)


def canonical_level(domain: Domain) -> Callable:
    if domain.kind == "ball":
        c = np.asarray(domain.params["center"], dtype=float)
        r = domain.params["radius"]
        return lambda pts: np.sum((pts - c) ** 2, axis=1) - r * r
    return domain.level


# ---------------------------------------------------------------------------
# defining functions

class DominationError(ValueError):
    pass


@dataclass(eq=False)
class DefiningFunction:
    """rho = scale * (canonical level function), negative inside, psh, dd^c rho >= omega."""

    values: GridFunction
    hessian: HermitianField
    scale: float
    margin: float

    @property
    def formula(self) -> Callable:
        return self.values.formula

    def hessian_at(self, pts) -> HermitianField:
        dom = self.values.domain
        return canonical_level_hessian(dom, np.atleast_2d(pts)).scaled(self.scale)


C_MAX = 1e3


def _domination_margin(L: HermitianField, W: HermitianField, c: float) -> float:
    return float((L.scaled(c) - W).eigvalsh()[:, 0].min())


def build_rho(domain: Domain, omega: BackgroundForm | None = None, scale: float | None = None,
              t_max: float = DEFAULT_FLOOR) -> DefiningFunction:
    """Smallest scale (rounded up to one decimal, at least 1) with dd^c rho >= omega.

    With ``scale`` given, that scaling is checked instead and rejected if
    it does not dominate omega.
    """
    pts = domain.interior_points
    L = canonical_level_hessian(domain, pts)
    W = (omega or BackgroundForm()).at(domain)
    if scale is None:
        # generalized eigenvalues of W against L give the minimal scale
        if domain.n == 1:
            need = float(np.max(W.diag[:, 0] / L.diag[:, 0]))
        else:
            Lm, Wm = L.matrices(), W.matrices()
            lam, vec = np.linalg.eigh(Lm)
            inv_sqrt = vec @ (np.eye(2) / np.sqrt(lam)[:, :, None]) @ np.conj(np.transpose(vec, (0, 2, 1)))
            need = float(np.max(np.linalg.eigvalsh(inv_sqrt @ Wm @ inv_sqrt)[:, -1]))
        c = max(1.0, np.ceil(10 * need - 1e-9) / 10)
        if c > C_MAX:
            raise DominationError(f"no scaling c <= {C_MAX:g} makes dd^c rho dominate omega (needs {need:g})")
    else:
        c = float(scale)
    margin = _domination_margin(L, W, c)
    if margin < -1e-12:
        raise DominationError(f"dd^c rho - omega has eigenvalue {margin:.3g} < 0 for scale {c:g}")
    base = canonical_level(domain)
    rho_f = _Scaled(base, c)
    values = GridFunction.from_formula(domain, rho_f, t_max, label="rho")
    out = DefiningFunction(values, L.scaled(c), c, margin)
    _check_rho(domain, out)
    return out


class _Scaled:
    def __init__(self, f, c):
        self.f, self.c = f, c

    def __call__(self, pts):
        return self.c * self.f(pts)


def _check_rho(domain: Domain, rho: DefiningFunction) -> None:
    v = rho.values.values.reshape(-1)
    if (v[domain.interior_flat] >= 0).any():
        raise DomainError("defining function is not negative on interior nodes")
    pts = domain.points(domain.boundary_flat)
    g = np.zeros(len(pts))
    for k in range(pts.shape[1]):
        e = np.zeros(pts.shape[1])
        e[k] = FD_STEP
        g += ((rho.formula(pts + e) - rho.formula(pts - e)) / (2 * FD_STEP)) ** 2
    lip = float(np.sqrt(g.max()))
    if np.abs(v[domain.boundary_flat]).max() > 2 * domain.h * lip * (1 + 1e-9):
        raise DomainError("defining function does not vanish on the boundary to grid accuracy")
