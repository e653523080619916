"""Run configurations: TOML sections mapped onto the solver objects.

Sections: [domain], [omega], [measure], [boundary], [solver], [envelope],
[verify], [study], [output].  Only the sections a command needs are
required.  Every error carries the line of the offending key when the
file has one.
"""
from __future__ import annotations

import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .expr import Expression, ExpressionError
from .geometry import BackgroundForm, DomainError, build_domain
from .solver import HSpec, MeasureSpec

SECTIONS = ("domain", "omega", "measure", "boundary", "solver", "envelope", "verify", "study", "output")
KNOWN = {
    "domain": {"kind", "n", "h", "radius", "center", "semi_axes", "level", "box"},
    "omega": {"kind", "scale", "w11", "w22", "re_w12", "im_w12"},
    "measure": {"f", "density", "psi", "atoms"},
    "boundary": {"kind", "formula", "points", "weights"},
    "solver": {"tol_env", "tol_pde", "j_schedule", "C_acc", "seed", "threads"},
    "envelope": {"target", "obstacle", "boundary", "method", "tol_env", "tol_pde", "max_iter"},
    "verify": {"suites", "samples", "seed", "h_n1", "h_n2", "twisted_atoms_dims", "dims"},
    "study": {"problem", "h_list"},
    "output": {"dir", "formats", "profile"},
}


class ConfigError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line else msg)


@dataclass
class RunConfig:
    path: Path
    raw: dict
    lines: dict = field(default_factory=dict)

    @property
    def stem(self) -> str:
        return self.path.stem

    def section(self, name: str, required: bool = True) -> dict:
        if name not in self.raw:
            if required:
                raise ConfigError(f"missing [{name}] section")
            return {}
        return self.raw[name]

    def line_of(self, section: str, key: str | None = None) -> int | None:
        return self.lines.get((section, key))

    def fail(self, section, key, msg):
        raise ConfigError(f"[{section}] {key}: {msg}" if key else f"[{section}] {msg}",
                          self.line_of(section, key) or self.line_of(section))

    # -- objects -------------------------------------------------------------

    def domain(self):
        d = dict(self.section("domain"))
        try:
            return build_domain(d)
        except TypeError as exc:
            self.fail("domain", None, str(exc))
        except DomainError as exc:
            key = "h" if "spacing" in str(exc) else None
            self.fail("domain", key, str(exc))

    @property
    def n(self) -> int:
        return int(self.section("domain").get("n", 1))

    def omega(self) -> BackgroundForm:
        o = self.section("omega", required=False)
        if not o:
            return BackgroundForm()
        kind = o.get("kind", "zero")
        coeffs = {k: self._expr("omega", k, o[k]) for k in ("w11", "w22", "re_w12", "im_w12") if k in o}
        try:
            return BackgroundForm(kind, float(o.get("scale", 1.0)), coeffs)
        except ValueError as exc:
            self.fail("omega", "kind", str(exc))

    def measure(self) -> MeasureSpec:
        m = self.section("measure")
        atoms = []
        for a in m.get("atoms", []):
            if len(a) != 2 * self.n + 1:
                self.fail("measure", "atoms", f"each atom is [{2 * self.n} coordinates, mass]")
            atoms.append((tuple(float(x) for x in a[:-1]), float(a[-1])))
        if "density" in m and "f" in m:
            self.fail("measure", "density", "give either f or density, not both")
        if "density" in m:
            dens = m["density"]
            if isinstance(dens, str):
                self._expr("measure", "density", dens)
            return MeasureSpec.from_density(dens, self.n, atoms)
        f = m.get("f", 0.0)
        if isinstance(f, str):
            f = self._expr("measure", "f", f)
        psi = m.get("psi", "rho")
        if psi != "rho":
            psi = self._expr("measure", "psi", psi)
        return MeasureSpec(f, psi, atoms)

    def boundary(self) -> HSpec:
        b = self.section("boundary", required=False)
        kind = b.get("kind", "zero")
        if kind not in ("zero", "harmonic", "green_pole"):
            self.fail("boundary", "kind", f"unknown preset '{kind}'")
        formula = b.get("formula")
        if formula is not None:
            formula = self._expr("boundary", "formula", formula)
        pts = [tuple(float(x) for x in p) for p in b.get("points", [])]
        return HSpec(kind, formula, pts, [float(w) for w in b.get("weights", [])])

    def solver_options(self) -> dict:
        s = self.section("solver", required=False)
        out = {}
        for key in ("tol_env", "tol_pde"):
            if key in s:
                out[key] = self._positive("solver", key, s[key])
        if "C_acc" in s:
            out["C_acc"] = self._positive("solver", "C_acc", s["C_acc"])
        if "j_schedule" in s:
            out["j_schedule"] = [float(j) for j in s["j_schedule"]]
        if "seed" in s:
            if s["seed"] not in ("psi_w", "rho"):
                self.fail("solver", "seed", "seed is 'psi_w' or 'rho'")
            out["seed"] = s["seed"]
        return out

    @property
    def threads(self) -> int:
        return int(self.section("solver", required=False).get("threads", 1))

    def _expr(self, section, key, text):
        try:
            return Expression(str(text), self.n)
        except (ExpressionError, SyntaxError) as exc:
            self.fail(section, key, f"bad formula '{text}': {exc}")

    def _positive(self, section, key, value):
        try:
            v = float(value)
        except (TypeError, ValueError):
            self.fail(section, key, "expected a number")
        if not v > 0:
            self.fail(section, key, "must be positive")
        return v


_HEADER = re.compile(r"^\s*\[\s*([A-Za-z0-9_]+)\s*\]")
_KEY = re.compile(r"^\s*([A-Za-z0-9_]+)\s*=")


def _line_index(text: str) -> dict:
    """(section, key) -> 1-based line number, for error messages."""
    out, sec = {}, None
    for i, line in enumerate(text.splitlines(), 1):
        m = _HEADER.match(line)
        if m:
            sec = m.group(1)
            out.setdefault((sec, None), i)
            continue
        m = _KEY.match(line)
        if m and sec is not None:
            out.setdefault((sec, m.group(1)), i)
    return out


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(str(exc).split(" (at line")[0], int(m.group(1)) if m else None) from None
    cfg = RunConfig(path, raw, _line_index(text))
    for sec, body in raw.items():
        if sec not in SECTIONS:
            cfg.fail(sec, None, f"unknown section (expected one of {', '.join(SECTIONS)})")
        if not isinstance(body, dict):
            raise ConfigError(f"'{sec}' must be a [section]", cfg.line_of(sec))
        for key in body:
            if key not in KNOWN[sec]:
                cfg.fail(sec, key, "unknown key")
    return cfg
