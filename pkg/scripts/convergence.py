"""Barry-Mercer self-convergence of the cell pressure for MFE and MHFE.

Writes ``convergence.csv`` (h, formulation, stabilized, error, slope) to the
output directory and prints the slopes.
"""

import argparse
from pathlib import Path

from hybridbiot.bench import barry_mercer_convergence
from hybridbiot.cli import write_csv
from hybridbiot.system import MFE, MHFE


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--levels", type=int, nargs="+", default=[8, 16, 32, 64])
    ap.add_argument("--n-ref", type=int, default=128)
    ap.add_argument("--dt-factor", type=float, default=0.125)
    ap.add_argument("--mode", choices=["prolong", "average"], default="prolong")
    ap.add_argument("--output", default="out")
    args = ap.parse_args()

    rows = []
    for form in (MFE, MHFE):
        rep = barry_mercer_convergence(tuple(args.levels), args.n_ref, form, True, args.dt_factor, args.mode)
        print(f"{form}: slope {rep.slope:.3f}")
        for r in rep.rows:
            print(f"  h=1/{round(1 / r['h'])}  error {r['error']:.4e}")
            rows.append(dict(r, slope=rep.slope))
    path = write_csv(Path(args.output) / "convergence.csv", ("h", "formulation", "stabilized", "error", "slope"), rows)
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
