"""pluripot <solve|envelope|verify|study> <config> [--threads N] [--out DIR]

Exit codes: 0 when every check passes, 1 on a failed check or a solver
failure, 2 on a configuration error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import ConfigError, RunConfig, load_config
from .envelope import Obstacle, envelope, envelope_report
from .fields import GridFunction
from .report import DiagnosticsReport
from .solver import build_H, solve_main
from .verify import poisson_oracle_equivalence, refinement_study, run_suite

log = logging.getLogger("pluripot")


def _timestamp() -> str:
    return datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")


class Artifacts:
    """Output files named <command>_<config stem>_<timestamp>.<ext>."""

    def __init__(self, out: Path, command: str, stem: str):
        self.out = out
        self.stamp = _timestamp()
        self.base = f"{command}_{stem}_{self.stamp}"
        self.written = []

    def path(self, ext: str, suffix: str = "") -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        p = self.out / f"{self.base}{suffix}.{ext}"
        self.written.append(p)
        return p

    def report(self, rep: DiagnosticsReport) -> Path:
        p = self.path("json")
        p.write_text(rep.to_json(timestamp=self.stamp) + "\n")
        return p


def write_nodes(path, domain, columns: dict) -> None:
    """One row per interior node: node index, coordinates, then the given columns."""
    pts = domain.interior_points
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node"] + domain.coord_names() + list(columns))
        cols = [np.asarray(c) for c in columns.values()]
        for k, node in enumerate(domain.interior_flat):
            row = [int(node)] + [repr(float(x)) for x in pts[k]]
            row += [repr(float(c[k])) if c.dtype.kind == "f" else str(int(c[k])) for c in cols]
            w.writerow(row)


def radial_profile(domain, values: np.ndarray, exact=None):
    """(radius, mean, min, max[, exact]) over nodes grouped by distance from the centre."""
    center = np.asarray(domain.params.get("center", np.zeros(2 * domain.n)), float)
    r = np.linalg.norm(domain.interior_points - center, axis=1)
    key = np.round(r / domain.h, 9)
    rows = []
    for k in np.unique(key):
        sel = key == k
        row = [float(r[sel][0]), float(values[sel].mean()), float(values[sel].min()), float(values[sel].max())]
        if exact is not None:
            row.append(float(exact[sel].mean()))
        rows.append(row)
    return rows


def write_profile(path, rows, exact: bool) -> None:
    with open(path, "w") as fh:
        fh.write("# radius  mean  min  max" + ("  exact" if exact else "") + "\n")
        for row in rows:
            fh.write("  ".join(f"{x:.12g}" for x in row) + "\n")


_NON_RADIAL = ("x", "y", "Re", "Im", "re(", "im(", "conj", "z1", "z2")


def _is_radial(cfg: RunConfig) -> bool:
    """Conservative test: formulas use only |z| or r, and nothing is off-centre."""
    d = cfg.section("domain")
    if d.get("kind", "ball") != "ball" or any(float(c) != 0.0 for c in d.get("center", [])):
        return False
    m = cfg.section("measure", required=False)
    if any(any(float(x) != 0.0 for x in a[:-1]) for a in m.get("atoms", [])):
        return False
    if m.get("psi", "rho") != "rho":
        return False
    e = cfg.section("envelope", required=False)
    formulas = [m.get("f"), m.get("density"), e.get("obstacle"), e.get("target"), e.get("boundary")]
    if any(isinstance(v, str) and any(t in v for t in _NON_RADIAL) for v in formulas):
        return False
    b = cfg.section("boundary", required=False)
    if b.get("kind", "zero") == "harmonic":
        return False
    if b.get("kind") == "green_pole" and any(any(float(x) != 0.0 for x in p) for p in b.get("points", [])):
        return False
    o = cfg.section("omega", required=False)
    return o.get("kind", "zero") in ("zero", "scaled_euclidean", "ddc_rho")


# ---------------------------------------------------------------------------
# commands

def cmd_solve(cfg: RunConfig, art: Artifacts) -> DiagnosticsReport:
    dom = cfg.domain()
    H = build_H(cfg.boundary(), dom)
    res = solve_main(cfg.measure(), H, cfg.omega(), **cfg.solver_options())
    rep = res.report
    rep.title = f"solve {cfg.stem}"
    rep.header = {"config": cfg.raw}
    out = cfg.section("output", required=False)
    phi = res.phi.interior
    write_nodes(art.path("csv"), dom, {"phi": phi})
    if out.get("profile", True) and _is_radial(cfg):
        write_profile(art.path("dat", "_profile"), radial_profile(dom, phi), False)
    return rep


def cmd_envelope(cfg: RunConfig, art: Artifacts) -> DiagnosticsReport:
    dom = cfg.domain()
    e = cfg.section("envelope")
    if "obstacle" not in e:
        cfg.fail("envelope", None, "needs an obstacle formula")
    ob_f = cfg._expr("envelope", "obstacle", e["obstacle"])
    target = e.get("target", 0.0)
    if isinstance(target, str):
        target = cfg._expr("envelope", "target", target)(dom.interior_points)
    bnd = cfg._expr("envelope", "boundary", e["boundary"]) if "boundary" in e else None
    opts = {k: cfg._positive("envelope", k, e[k]) for k in ("tol_env", "tol_pde") if k in e}
    if "max_iter" in e:
        opts["max_iter"] = int(e["max_iter"])
    ob = Obstacle(GridFunction.from_formula(dom, ob_f, label="obstacle"))
    res = envelope(target, ob, cfg.omega(), boundary=bnd, method=e.get("method", "active_set"), **opts)
    rep = envelope_report(res, ob, title=f"envelope {cfg.stem}")
    rep.header = {"config": cfg.raw}
    write_nodes(art.path("csv"), dom, {"u": res.solution.interior, "obstacle": ob.values.interior,
                                       "contact": res.contact_mask.astype(int)})
    if _is_radial(cfg):
        write_profile(art.path("dat", "_profile"), radial_profile(dom, res.solution.interior), False)
    return rep


def cmd_verify(cfg: RunConfig, art: Artifacts) -> DiagnosticsReport:
    v = dict(cfg.section("verify"))
    suites = v.pop("suites", "all")
    if "omega" in cfg.raw:
        v["omega"] = cfg.omega()
    try:
        rep = run_suite(suites, v)
    except KeyError as exc:
        cfg.fail("verify", "suites", str(exc.args[0]))
    rep.title = f"verify {cfg.stem}"
    rep.header["config"] = cfg.raw
    rows = [[c.name, "pass" if c.passed else "fail", c.worst, c.tolerance, c.seed] for c in rep.checks]
    with open(art.path("csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["check", "status", "worst", "tolerance", "seed"])
        w.writerows(rows)
    return rep


def cmd_study(cfg: RunConfig, art: Artifacts) -> DiagnosticsReport:
    s = cfg.section("study")
    problem = s.get("problem")
    if problem is None:
        cfg.fail("study", None, "needs a problem name")
    hs = [float(h) for h in s.get("h_list", [])]
    if problem == "poisson_oracle":
        dom = cfg.domain()
        rep = poisson_oracle_equivalence(cfg.measure(), cfg.boundary(), dom, cfg.omega())
        oracle, sol = rep.results.pop("oracle"), rep.results.pop("solution")
        write_nodes(art.path("csv"), dom, {"solve_main": sol, "five_point": oracle})
    else:
        try:
            rep = refinement_study(problem, hs)
        except KeyError as exc:
            cfg.fail("study", "problem", str(exc.args[0]))
        except ValueError as exc:
            cfg.fail("study", "h_list", str(exc))
        with open(art.path("csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["h", "error", "order"])
            for row in rep.refinement_table:
                w.writerow([repr(row["h"]), repr(row["error"]), "" if row.get("order") is None
                            else repr(row["order"])])
    rep.title = f"study {cfg.stem}"
    rep.header["config"] = cfg.raw
    return rep


COMMANDS = {"solve": cmd_solve, "envelope": cmd_envelope, "verify": cmd_verify, "study": cmd_study}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pluripot", description="Monge-Ampere solves, envelopes and checks.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("config", type=Path)
    p.add_argument("--threads", type=int, default=None, help="BLAS threads (default: config, else 1)")
    p.add_argument("--out", type=Path, default=None, help="output directory (default: $PLURIPOT_OUT, else ./out)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        threads = args.threads if args.threads is not None else cfg.threads
        if threads < 1:
            raise ConfigError("thread count must be at least 1", cfg.line_of("solver", "threads"))
        out = args.out or Path(os.environ.get("PLURIPOT_OUT") or
                               cfg.section("output", required=False).get("dir", "out"))
        art = Artifacts(Path(out), args.command, cfg.stem)
        t0 = time.perf_counter()
        with threadpool_limits(limits=threads):
            rep = COMMANDS[args.command](cfg, art)
    except ConfigError as exc:
        print(f"{args.config}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # solver failures end the run with status 1
        log.debug("failure", exc_info=True)
        print(f"pluripot {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    rep.runtime.setdefault("total", time.perf_counter() - t0)
    art.report(rep)
    print(rep.summary())
    print(f"runtime {rep.runtime['total']:.1f} s; wrote {', '.join(str(p) for p in art.written)}")
    return 0 if rep.passed else 1


if __name__ == "__main__":
    sys.exit(main())
