"""Radial profile of the wedge envelope next to the closed-form solution.

The obstacle is min(0, 4(|z| - 1/2)) on the unit disc with target 0.
Writes columns radius, computed, exact to stdout (or --out FILE) and
reports the sup error and the observed contact radius per mesh width.
"""
import argparse
import sys

import numpy as np
from scipy.optimize import brentq

from pluripot.envelope import Obstacle, envelope
from pluripot.expr import Expression
from pluripot.fields import GridFunction
from pluripot.geometry import build_domain

R0 = brentq(lambda r: 4 * r - 2 - 4 * r * np.log(r), 0.01, 0.5)


def exact(r):
    return np.where(r <= R0, 4 * r - 2, 4 * R0 * np.log(np.maximum(r, 1e-300)))


def run(h):
    dom = build_domain({"kind": "ball", "n": 1, "h": h})
    ob = Obstacle(GridFunction.from_formula(dom, Expression("min(0, 4*(|z| - 0.5))", 1)))
    res = envelope(0.0, ob)
    r = np.linalg.norm(dom.interior_points, axis=1)
    return r, res.solution.interior, res.contact_mask


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--h", type=int, nargs="+", default=[16, 32, 64, 128], help="inverse mesh widths")
    p.add_argument("--out", help="profile file for the finest mesh")
    args = p.parse_args()
    print(f"# contact radius of the continuum problem: {R0:.6f}", file=sys.stderr)
    for k in args.h:
        r, u, contact = run(1.0 / k)
        err = np.abs(u - exact(r)).max()
        print(f"# h=1/{k}: sup error {err:.3e} ({err * k:.3f} h), contact out to {r[contact].max():.4f}",
              file=sys.stderr)
    order = np.argsort(r)
    fh = open(args.out, "w") if args.out else sys.stdout
    fh.write("# radius computed exact\n")
    for i in order:
        fh.write(f"{r[i]:.8f} {u[i]:.10f} {exact(r[i]):.10f}\n")
    if args.out:
        fh.close()


if __name__ == "__main__":
    main()
