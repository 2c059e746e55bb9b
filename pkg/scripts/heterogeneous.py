"""Iteration counts on the layered heterogeneous box across permeability contrasts."""

import argparse
from pathlib import Path

from hybridbiot.bench import count_iterations, heterogeneous_case
from hybridbiot.cli import write_csv
from hybridbiot.system import MFE, MHFE


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=8)
    ap.add_argument("--contrasts", type=float, nargs="+", default=[1.0, 1e2, 1e4, 1e6])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--output", default="out")
    args = ap.parse_args()

    rows = []
    for contrast in args.contrasts:
        case = heterogeneous_case(args.seed, contrast, n=args.n)
        for form in (MFE, MHFE):
            res = count_iterations(case.setup(form, True)[2], protocol="step")
            print(f"contrast {contrast:8.0e} {form:4s} n_it={res.n_it:4d} converged={res.converged}")
            rows.append(dict(contrast=contrast, formulation=form, n_it=res.n_it, converged=res.converged))
    cols = ("contrast", "formulation", "n_it", "converged")
    print(f"wrote {write_csv(Path(args.output) / 'heterogeneous.csv', cols, rows)}")


if __name__ == "__main__":
    main()
