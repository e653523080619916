"""Total twisted masses of an ordered pair u <= v as the background form varies.

Scans the constant part c of omega = diag(8|z2|^2 - c, -c) on the unit
ball of C^2 and prints mass(u)/mass(v) for both witness pairs.  Ratios
above 1 for the first pair show that total masses are not monotone.
"""
import argparse

import numpy as np

from pluripot.expr import Expression
from pluripot.fields import GridFunction
from pluripot.geometry import BackgroundForm, build_domain
from pluripot.operators import ma_density
from pluripot.verify import WITNESS_PAIRS


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--h", type=float, default=0.125)
    p.add_argument("--c", type=float, nargs="+", default=list(np.round(np.arange(0.0, 0.9, 0.1), 2)))
    args = p.parse_args()
    dom = build_domain({"kind": "ball", "n": 2, "h": args.h})
    fns = {name: tuple(GridFunction.from_formula(dom, Expression(f, 2)) for f in pair)
           for name, pair in WITNESS_PAIRS.items()}
    print(f"{'c':>5} " + " ".join(f"{name:>10}" for name in fns) + "  clamped")
    for c in args.c:
        omega = BackgroundForm("custom", coefficients={"w11": Expression(f"8*|z2|^2 - {c}", 2),
                                                       "w22": Expression(f"-{c}", 2)})
        ratios, clamped = [], 0
        for u, v in fns.values():
            mu, mv = ma_density(u, omega), ma_density(v, omega)
            ratios.append(mu.total_mass / mv.total_mass)
            clamped += mu.info["clamped"] + mv.info["clamped"]
        print(f"{c:5.2f} " + " ".join(f"{x:10.4f}" for x in ratios) + f"  {clamped}")


if __name__ == "__main__":
    main()
