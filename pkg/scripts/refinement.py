"""Observed convergence orders against the analytic oracles.

    python scripts/refinement.py                 # all oracles, default ladders
    python scripts/refinement.py poisson_n1 --h 1/16 1/32 1/64 1/128
"""
import argparse
from fractions import Fraction

from pluripot.verify import ORACLES, refinement_study

DEFAULT_H = {
    "poisson_n1": ["1/16", "1/32", "1/64", "1/128"],
    "radial_n2": ["1/6", "1/8", "1/12"],
    "green_n1": ["1/16", "1/32", "1/64"],
}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("problems", nargs="*", default=sorted(ORACLES))
    p.add_argument("--h", nargs="+", help="mesh widths, e.g. 1/16 1/32")
    args = p.parse_args()
    for name in args.problems:
        hs = [float(Fraction(x)) for x in (args.h or DEFAULT_H[name])]
        rep = refinement_study(name, hs)
        print(f"\n{name}")
        print(f"{'h':>10} {'error':>12} {'order':>7}")
        for row in rep.refinement_table:
            order = row.get("order")
            o = "exact" if row.get("exact") else ("" if order is None else f"{order:.3f}")
            print(f"{row['h']:10.5f} {row['error']:12.4e} {o:>7}")
        print("pass" if rep.passed else "FAIL")


if __name__ == "__main__":
    main()
