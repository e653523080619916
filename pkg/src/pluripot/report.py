"""Structured diagnostics shared by the solver, the suites and the CLI."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class Check:
    name: str
    passed: bool
    worst: float
    tolerance: float
    anchor: str = ""
    location: list | None = None
    seed: int | None = None
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        loc = "" if self.location is None else f" at {_fmt_loc(self.location)}"
        seed = "" if self.seed is None else f" (seed {self.seed})"
        return f"[{tag}] {self.name}: worst {self.worst:.3e} vs tol {self.tolerance:.3e}{loc}{seed}"


def _fmt_loc(loc):
    return "(" + ", ".join(f"{x:.4g}" for x in loc) + ")"


@dataclass
class DiagnosticsReport:
    """Checks, refinement rows and free-form results of one run.

    ``runtime`` holds wall-clock seconds; it is printed but left out of
    the JSON so that reports are byte-identical across reruns.
    """

    title: str = ""
    checks: list = field(default_factory=list)
    refinement_table: list = field(default_factory=list)
    results: dict = field(default_factory=dict)
    header: dict = field(default_factory=dict)
    runtime: dict = field(default_factory=dict)

    def add(self, name, passed, worst, tolerance, anchor="", location=None, seed=None, **detail) -> Check:
        c = Check(name, bool(passed), float(worst), float(tolerance), anchor,
                  None if location is None else [float(x) for x in location], seed, detail)
        self.checks.append(c)
        return c

    def extend(self, other: "DiagnosticsReport", prefix: str = "") -> None:
        for c in other.checks:
            self.checks.append(Check(prefix + c.name, c.passed, c.worst, c.tolerance, c.anchor,
                                     c.location, c.seed, c.detail))

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list:
        return [c for c in self.checks if not c.passed]

    def summary(self) -> str:
        lines = [self.title] if self.title else []
        lines += [c.line() for c in self.checks]
        for row in self.refinement_table:
            lines.append("  " + "  ".join(f"{k}={_num(v)}" for k, v in row.items()))
        n_fail = len(self.failures)
        lines.append(f"{len(self.checks) - n_fail}/{len(self.checks)} checks passed")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "title": self.title,
            "header": self.header,
            "passed": self.passed,
            "checks": [asdict(c) for c in self.checks],
            "refinement_table": self.refinement_table,
            "results": self.results,
        }

    def to_json(self, timestamp: str | None = None) -> str:
        d = self.to_dict()
        if timestamp is not None:
            d = {"timestamp": timestamp, **d}
        return json.dumps(_plain(d), indent=2, sort_keys=False, allow_nan=False)


def _num(v):
    return f"{v:.4g}" if isinstance(v, float) else str(v)


def _plain(obj):
    """Convert numpy scalars and arrays so that json can write them."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        # strict JSON has no inf or nan
        return x if np.isfinite(x) else str(x)
    return obj
