"""Oscillation index with and without the macro-element jump stabilization.

Covers the undrained Barry-Mercer problem and the 2D cantilever over a range
of time steps, and optionally writes VTK files of the pressure fields.
"""

import argparse
from pathlib import Path

from hybridbiot.bench import barry_mercer_case, cantilever_case, oscillation_index
from hybridbiot.cli import write_csv, write_vtk
from hybridbiot.system import MHFE


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--cantilever-dts", type=float, nargs="+", default=[1e-5, 1e-7, 1e-9])
    ap.add_argument("--vtk", action="store_true")
    ap.add_argument("--output", default="out")
    args = ap.parse_args()
    out = Path(args.output)

    cases = [("barry_mercer_16", barry_mercer_case(16, dt_factor=1e-6))]
    cases += [(f"cantilever_20_dt{dt:g}", cantilever_case(2, 20, dt)) for dt in args.cantilever_dts]
    rows = []
    for label, case in cases:
        idx = {}
        for stab in (False, True):
            mesh, _, _, states = case.run(MHFE, stab)
            idx[stab] = oscillation_index(states[-1].p, mesh)
            if args.vtk:
                write_vtk(mesh, states[-1], out / f"{label}_{'stab' if stab else 'nostab'}.vtk")
        ratio = idx[True] / idx[False] if idx[False] > 0 else float("nan")
        print(f"{label:28s} unstab {idx[False]:.3e}  stab {idx[True]:.3e}  ratio {ratio:.3g}")
        rows.append(dict(case=label, unstabilized=idx[False], stabilized=idx[True], ratio=ratio))
    print(f"wrote {write_csv(out / 'stabilization.csv', ('case', 'unstabilized', 'stabilized', 'ratio'), rows)}")


if __name__ == "__main__":
    main()
