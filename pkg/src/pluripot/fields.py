"""Field containers shared by every module: grid functions, Hermitian
matrix fields and measures."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from math import factorial
from typing import Callable

import numpy as np

DEFAULT_FLOOR = 40.0


def wedge_constant(n: int) -> float:
    """Density of (dd^c |z|^2)^n per unit Lebesgue volume: 4^n n!."""
    return float(4 ** n * factorial(n))


@dataclass(eq=False)
class GridFunction:
    """Scalar values on every node of a domain's bounding box.

    Values at or below ``-t_max`` form the floor, the grid stand-in for
    the set where the function is -inf.  ``formula`` keeps an analytic
    definition when one exists; ``boundary`` is Dirichlet data used to
    close stencils that leave the domain (set on solver outputs).
    """

    domain: "object"
    values: np.ndarray
    t_max: float = DEFAULT_FLOOR
    formula: Callable | None = None
    boundary: Callable | None = None
    label: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.domain.shape:
            raise ValueError(f"values have shape {v.shape}, grid is {self.domain.shape}")
        if np.isnan(v).any():
            raise ValueError("grid function contains NaN")
        self.values = np.maximum(v, -self.t_max)
        if not np.isfinite(self.values).all():
            raise ValueError("grid function must be finite above the floor")

    @classmethod
    def from_formula(cls, domain, formula: Callable, t_max: float = DEFAULT_FLOOR,
                     label: str = "", boundary: Callable | None = None):
        vals = formula(domain.points())
        vals = np.where(np.isnan(vals), -np.inf, vals).reshape(domain.shape)
        return cls(domain, vals, t_max, formula=formula, boundary=boundary, label=label)

    @classmethod
    def constant(cls, domain, c: float = 0.0, t_max: float = DEFAULT_FLOOR):
        f = _Constant(float(c))
        return cls(domain, np.full(domain.shape, float(c)), t_max, formula=f, label=str(c))

    @property
    def floor_mask(self) -> np.ndarray:
        return self.values <= -self.t_max

    @property
    def interior(self) -> np.ndarray:
        return self.values.reshape(-1)[self.domain.interior_flat]

    def boundary_values(self, pts: np.ndarray) -> np.ndarray | None:
        """Dirichlet data at off-grid boundary points, if the function has any."""
        if self.boundary is not None:
            return self.boundary(pts)
        if self.formula is not None:
            return np.maximum(self.formula(pts), -self.t_max)
        return None

    def with_values(self, values, **kw) -> "GridFunction":
        args = dict(formula=None, boundary=self.boundary_values_callable(), label=self.label)
        args.update(kw)
        return GridFunction(self.domain, values, self.t_max, **args)

    def boundary_values_callable(self) -> Callable | None:
        if self.boundary is not None:
            return self.boundary
        if self.formula is not None:
            f, t = self.formula, self.t_max
            return lambda pts: np.maximum(f(pts), -t)
        return None

    def sup_norm(self, mask=None) -> float:
        v = self.values if mask is None else self.values[mask]
        return float(np.max(np.abs(v), initial=0.0))


class _Constant:
    def __init__(self, c):
        self.c = c

    def __call__(self, pts):
        return np.full(np.atleast_2d(pts).shape[0], self.c)


def check_compatible(u: GridFunction, v: GridFunction) -> None:
    if u.domain is not v.domain:
        raise ValueError("grid functions live on different domains")
    if u.t_max != v.t_max:
        raise ValueError("grid functions must share the floor level t_max")


@dataclass(eq=False)
class HermitianField:
    """A Hermitian n x n matrix per interior node.

    ``diag`` has shape (N, n); for n = 2 ``lower`` holds the (2,1) entry,
    so Hermitian symmetry holds by construction.
    """

    diag: np.ndarray
    lower: np.ndarray | None = None

    def __post_init__(self):
        self.diag = np.asarray(self.diag, dtype=float)
        if self.diag.ndim != 2 or self.diag.shape[1] not in (1, 2):
            raise ValueError("diag must have shape (N, n) with n in {1, 2}")
        if self.n == 2:
            if self.lower is None:
                self.lower = np.zeros(len(self.diag), dtype=complex)
            self.lower = np.asarray(self.lower, dtype=complex)
        else:
            self.lower = None

    @property
    def n(self) -> int:
        return self.diag.shape[1]

    def __len__(self):
        return len(self.diag)

    @classmethod
    def constant(cls, matrix, size: int) -> "HermitianField":
        m = np.atleast_2d(np.asarray(matrix, dtype=complex))
        if not np.allclose(m, m.conj().T, atol=1e-14):
            raise ValueError("matrix is not Hermitian")
        d = np.tile(m.diagonal().real, (size, 1))
        low = np.full(size, m[1, 0]) if m.shape[0] == 2 else None
        return cls(d, low)

    @classmethod
    def zeros(cls, n: int, size: int) -> "HermitianField":
        return cls(np.zeros((size, n)), np.zeros(size, complex) if n == 2 else None)

    def matrices(self) -> np.ndarray:
        N, n = self.diag.shape
        m = np.zeros((N, n, n), dtype=complex)
        for j in range(n):
            m[:, j, j] = self.diag[:, j]
        if n == 2:
            m[:, 1, 0] = self.lower
            m[:, 0, 1] = np.conj(self.lower)
        return m

    def __add__(self, other: "HermitianField") -> "HermitianField":
        low = None if self.n == 1 else self.lower + other.lower
        return HermitianField(self.diag + other.diag, low)

    def __sub__(self, other: "HermitianField") -> "HermitianField":
        low = None if self.n == 1 else self.lower - other.lower
        return HermitianField(self.diag - other.diag, low)

    def scaled(self, c: float) -> "HermitianField":
        return HermitianField(c * self.diag, None if self.n == 1 else c * self.lower)

    def subset(self, sel) -> "HermitianField":
        return HermitianField(self.diag[sel], None if self.n == 1 else self.lower[sel])

    def trace(self) -> np.ndarray:
        return self.diag.sum(axis=1)

    def det(self) -> np.ndarray:
        if self.n == 1:
            return self.diag[:, 0].copy()
        return self.diag[:, 0] * self.diag[:, 1] - np.abs(self.lower) ** 2

    def eigvalsh(self) -> np.ndarray:
        """Eigenvalues in ascending order, shape (N, n), closed form."""
        if self.n == 1:
            return self.diag.copy()
        a, b = self.diag[:, 0], self.diag[:, 1]
        mid = 0.5 * (a + b)
        rad = np.hypot(0.5 * (a - b), np.abs(self.lower))
        return np.stack([mid - rad, mid + rad], axis=1)

    def to_csv(self, path, domain=None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            head = ["node"] + [f"h{j + 1}{j + 1}" for j in range(self.n)]
            if self.n == 2:
                head += ["re_h21", "im_h21"]
            w.writerow(head)
            nodes = domain.interior_flat if domain is not None else np.arange(len(self))
            for i in range(len(self)):
                row = [int(nodes[i])] + [repr(float(x)) for x in self.diag[i]]
                if self.n == 2:
                    row += [repr(float(self.lower[i].real)), repr(float(self.lower[i].imag))]
                w.writerow(row)


@dataclass(eq=False)
class MeasureField:
    """Nonnegative density per interior node plus finitely many point atoms.

    Densities are per unit Lebesgue volume of R^{2n}; a node carries mass
    density * h^{2n}.
    """

    domain: "object"
    density: np.ndarray
    atoms: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.density = np.asarray(self.density, dtype=float)
        if self.density.shape != (self.domain.n_interior,):
            raise ValueError("density must have one entry per interior node")
        if (self.density < 0).any():
            raise ValueError("measure density must be nonnegative")
        for _, m in self.atoms:
            if m < 0:
                raise ValueError("atom masses must be nonnegative")

    @property
    def cell_volume(self) -> float:
        return self.domain.cell_volume

    def smooth_mass(self, mask=None) -> float:
        d = self.density if mask is None else self.density[mask]
        # numpy reduces contiguous float arrays pairwise with a fixed
        # blocking, so the sum does not depend on threads
        return float(np.sum(np.ascontiguousarray(d))) * self.cell_volume

    @property
    def atom_mass(self) -> float:
        return float(sum(m for _, m in self.atoms))

    @property
    def total_mass(self) -> float:
        return self.smooth_mass() + self.atom_mass

    def to_csv(self, path) -> None:
        pts = self.domain.points(self.domain.interior_flat)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node"] + self.domain.coord_names() + ["density"])
            for k, node in enumerate(self.domain.interior_flat):
                w.writerow([int(node)] + [repr(float(x)) for x in pts[k]] + [repr(float(self.density[k]))])

    def atoms_json(self) -> str:
        return json.dumps([{"location": [float(x) for x in p], "mass": float(m)} for p, m in self.atoms],
                          indent=2)
