"""Command-line front end: config parsing, studies, CSV and VTK output.

Usage::

    python -m hybridbiot table2 --h-inv 10 --dt 0.1
    python -m hybridbiot --config study.toml --tol 1e-8

Every key of :class:`RunConfig` can be given in a TOML file or as a flag
(``h_inv`` -> ``--h-inv``); flags win over the file.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bench
from .grid import StructuredMesh
from .solver import GmresStepper, export_matrix_market
from .system import MFE, MHFE, State, mass_balance

logger = logging.getLogger(__name__)

COMMANDS = ("run", "convergence", "table2", "eigencheck", "spe10mini")
CASES = ("cantilever", "barry_mercer", "heterogeneous")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Validated run configuration.

    ``formulation`` and ``stabilized`` accept ``"both"`` for the comparison
    studies. ``rhs`` selects the right-hand side of iteration-count studies
    (``"random"`` or ``"step"``). ``timings=false`` blanks the timing columns
    so that CSV output is byte-reproducible.
    """

    command: str
    case: str = "cantilever"
    dim: int = 3
    h_inv: int = 10
    dt: float = 0.1
    n_steps: int = 1
    formulation: str = MHFE
    stabilized: object = True
    preconditioner: str = "M_I"
    solver: str = "direct"
    tol: float = 1e-6
    max_it: int = 1000
    rhs: str = "random"
    seed: int = 0
    levels: list = field(default_factory=lambda: [8, 16, 32, 64])
    n_ref: int = 128
    dt_factor: float = 0.125
    contrasts: list = field(default_factory=lambda: [1.0, 1e6])
    eig_meshes: list = field(default_factory=lambda: [2, 4])
    eig_dts: list = field(default_factory=lambda: [1e-5, 1e-1])
    output: str = "out"
    timings: bool = True
    dump_matrices: bool = False
    vtk: bool = True

    def formulations(self) -> list[str]:
        return [MFE, MHFE] if self.formulation == "both" else [self.formulation]

    def stab_flags(self) -> list[bool]:
        return [False, True] if self.stabilized == "both" else [bool(self.stabilized)]


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_KIND = {
    "command": str, "case": str, "dim": int, "h_inv": int, "dt": float, "n_steps": int,
    "formulation": str, "stabilized": "bool_or_both", "preconditioner": str, "solver": str,
    "tol": float, "max_it": int, "rhs": str, "seed": int, "levels": "int_list", "n_ref": int,
    "dt_factor": float, "contrasts": "float_list", "eig_meshes": "int_list", "eig_dts": "float_list",
    "output": str, "timings": bool, "dump_matrices": bool, "vtk": bool,
}
_CHOICES = {
    "command": COMMANDS,
    "case": CASES,
    "formulation": (MFE, MHFE, "both"),
    "preconditioner": ("M_I",),
    "solver": ("gmres", "direct"),
    "rhs": ("random", "step"),
    "dim": (2, 3),
}


def _coerce(key, value):
    """Check a value from a TOML file against the declared kind."""
    kind = _KIND[key]

    def bad(expected):
        return ConfigError(f"key {key!r}: expected {expected}, got {type(value).__name__} {value!r}")

    if kind is bool:
        if not isinstance(value, bool):
            raise bad("bool")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad("int")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad("float")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise bad("string")
        return value
    if kind == "bool_or_both":
        if isinstance(value, bool) or value == "both":
            return value
        raise bad('bool or "both"')
    if kind in ("int_list", "float_list"):
        if not isinstance(value, list) or not value:
            raise bad("non-empty list")
        conv = []
        for v in value:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise bad(kind.replace("_", " "))
            if kind == "int_list" and not isinstance(v, int):
                raise bad("int list")
            conv.append(int(v) if kind == "int_list" else float(v))
        return conv
    raise AssertionError(kind)


def _parse_flag(key, text: str):
    """Convert a command-line string to the declared kind."""
    kind = _KIND[key]
    try:
        if kind is bool:
            return _parse_flag_bool(text)
        if kind == "bool_or_both":
            return "both" if text == "both" else _parse_flag_bool(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind == "int_list":
            return [int(v) for v in text.split(",")]
        if kind == "float_list":
            return [float(v) for v in text.split(",")]
        return text
    except ValueError as exc:
        raise ConfigError(f"flag for key {key!r}: cannot parse {text!r}") from exc


def _parse_flag_bool(text):
    low = text.lower()
    if low not in ("true", "false", "1", "0", "yes", "no"):
        raise ValueError(text)
    return low in ("true", "1", "yes")


def _validate(values: dict) -> RunConfig:
    if "command" not in values:
        raise ConfigError("missing required key 'command'")
    for key, choices in _CHOICES.items():
        if key in values and values[key] not in choices:
            raise ConfigError(f"key {key!r}: {values[key]!r} is not one of {list(choices)}")
    positive = ("h_inv", "n_steps", "max_it", "n_ref")
    for key in positive:
        if key in values and values[key] < 1:
            raise ConfigError(f"key {key!r}: must be >= 1")
    for key in ("tol", "dt_factor"):
        if key in values and not values[key] > 0:
            raise ConfigError(f"key {key!r}: must be positive")
    if "dt" in values and not values["dt"] >= 0:
        raise ConfigError("key 'dt': must be nonnegative")
    return RunConfig(**values)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hybridbiot", description=__doc__.split("\n")[0])
    ap.add_argument("command_pos", nargs="?", metavar="command", help="one of " + ", ".join(COMMANDS))
    ap.add_argument("--config", help="TOML configuration file")
    ap.add_argument("-v", "--verbose", action="store_true")
    for name in _FIELDS:
        ap.add_argument("--" + name.replace("_", "-"), dest=name, default=argparse.SUPPRESS, metavar="VALUE")
    return ap


def parse_config(path=None, flags=None) -> RunConfig:
    """Merge a TOML file with command-line flags into a :class:`RunConfig`.

    Parameters
    ----------
    path : str or Path, optional
        TOML file; overridden by ``--config`` inside ``flags``.
    flags : list of str, optional
        Command-line arguments (without the program name).
    """
    ns = build_parser().parse_args(list(flags or []))
    path = getattr(ns, "config", None) or path
    values: dict = {}
    if path is not None:
        try:
            import tomllib as tomli
        except ModuleNotFoundError:  # Python < 3.11
            import tomli

        try:
            with open(path, "rb") as fh:
                raw = tomli.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
        for key, value in raw.items():
            if key not in _FIELDS:
                raise ConfigError(f"unknown key {key!r}")
            values[key] = _coerce(key, value)
    for name in _FIELDS:
        if hasattr(ns, name):
            values[name] = _parse_flag(name, getattr(ns, name))
    if ns.command_pos is not None:
        values["command"] = ns.command_pos
    return _validate(values)


# ----------------------------------------------------------------------
def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    return str(v)


def write_csv(path, columns, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
    return path


def write_vtk(mesh: StructuredMesh, state: State, path) -> Path:
    """Legacy ASCII VTK structured grid with cell pressure and nodal displacement."""
    path = Path(path)
    d = mesh.dim
    dims = list(mesh.node_shape) + [1] * (3 - d)
    xyz = np.zeros((mesh.n_nodes, 3))
    xyz[:, :d] = mesh.node_coords
    disp = np.zeros((mesh.n_nodes, 3))
    disp[:, :d] = np.asarray(state.u).reshape(mesh.n_nodes, d)
    p = np.asarray(state.p)
    if p.size != mesh.n_cells:
        raise ValueError("pressure does not match the mesh")
    lines = [
        "# vtk DataFile Version 3.0",
        f"hybridbiot t={state.t!r}",
        "ASCII",
        "DATASET STRUCTURED_GRID",
        "DIMENSIONS {} {} {}".format(*dims),
        f"POINTS {mesh.n_nodes} double",
    ]
    lines += [" ".join(repr(float(v)) for v in row) for row in xyz]
    lines += [f"CELL_DATA {mesh.n_cells}", "SCALARS pressure double 1", "LOOKUP_TABLE default"]
    lines += [repr(float(v)) for v in p]
    lines += [f"POINT_DATA {mesh.n_nodes}", "VECTORS displacement double"]
    lines += [" ".join(repr(float(v)) for v in row) for row in disp]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_vtk(path) -> dict:
    """Parse a file written by :func:`write_vtk`."""
    tokens = Path(path).read_text().split("\n")
    out = {}
    i = 0
    while i < len(tokens):
        line = tokens[i].strip()
        if line.startswith("DIMENSIONS"):
            out["dimensions"] = tuple(int(v) for v in line.split()[1:])
        elif line.startswith("POINTS"):
            n = int(line.split()[1])
            out["points"] = np.array([[float(v) for v in tokens[i + 1 + k].split()] for k in range(n)])
            i += n
        elif line.startswith("CELL_DATA"):
            n = int(line.split()[1])
            out["pressure"] = np.array([float(tokens[i + 3 + k]) for k in range(n)])
            i += n + 2
        elif line.startswith("POINT_DATA"):
            n = int(line.split()[1])
            out["displacement"] = np.array([[float(v) for v in tokens[i + 2 + k].split()] for k in range(n)])
            i += n + 1
        i += 1
    return out


# ----------------------------------------------------------------------
def _case_for(cfg: RunConfig):
    if cfg.case == "cantilever":
        return bench.cantilever_case(cfg.dim, cfg.h_inv, cfg.dt, n_steps=cfg.n_steps)
    if cfg.case == "barry_mercer":
        return bench.barry_mercer_case(cfg.h_inv, cfg.dt_factor)
    return bench.heterogeneous_case(cfg.seed, cfg.contrasts[-1], n=cfg.h_inv)


def _dump(cfg: RunConfig, system, tag: str):
    if cfg.dump_matrices:
        export_matrix_market(system, Path(cfg.output) / "matrices" / tag)


def _run(cfg: RunConfig):
    case = _case_for(cfg)
    rows, ok = [], True
    for form in cfg.formulations():
        for stab in cfg.stab_flags():
            stepper = GmresStepper(cfg.tol, cfg.max_it) if cfg.solver == "gmres" else None
            mesh, macros, system, states = case.run(form, stab, solve=stepper, n_steps=None)
            _dump(cfg, system, f"{form}_{'stab' if stab else 'nostab'}")
            for k in range(1, len(states)):
                rep = stepper.reports[k - 1] if stepper else None
                mb = mass_balance(system, states[k - 1], states[k], macros)
                conv = True if rep is None else rep.converged
                ok &= conv
                rows.append(
                    {
                        "step": k,
                        "t": states[k].t,
                        "formulation": form,
                        "stabilized": stab,
                        "n_it": 0 if rep is None else rep.n_it,
                        "converged": conv,
                        "p_min": float(states[k].p.min()),
                        "p_max": float(states[k].p.max()),
                        "oscillation": bench.oscillation_index(states[k].p, mesh),
                        "mass_residual": mb.macro if stab else mb.cell,
                    }
                )
            if cfg.vtk:
                write_vtk(mesh, states[-1], Path(cfg.output) / f"{case.name}_{form}_{'stab' if stab else 'nostab'}.vtk")
    cols = ("step", "t", "formulation", "stabilized", "n_it", "converged", "p_min", "p_max", "oscillation", "mass_residual")
    return "run.csv", cols, rows, ok


def _convergence(cfg: RunConfig):
    rows, ok = [], True
    for form in cfg.formulations():
        for stab in cfg.stab_flags():
            rep = bench.barry_mercer_convergence(tuple(cfg.levels), cfg.n_ref, form, stab, cfg.dt_factor)
            ok &= 0.8 <= rep.slope <= 1.2
            for r in rep.rows:
                rows.append(dict(r, slope=rep.slope))
    return "convergence.csv", ("h", "formulation", "stabilized", "error", "slope"), rows, ok


def _table2(cfg: RunConfig):
    rows, ok = [], True
    case = bench.cantilever_case(cfg.dim, cfg.h_inv, cfg.dt)
    for form in cfg.formulations():
        for stab in cfg.stab_flags():
            _, _, system = case.setup(form, stab)
            _dump(cfg, system, f"{form}_{'stab' if stab else 'nostab'}")
            res = bench.count_iterations(system, cfg.tol, cfg.max_it, cfg.rhs, cfg.seed)
            ok &= res.converged
            rows.append(_iter_row(cfg, res, h_inv=cfg.h_inv))
    cols = ("h_inv", "formulation", "stabilized", "dt", "n_it", "T_p", "T_s", "T_t", "converged")
    return "table2.csv", cols, rows, ok


def _iter_row(cfg, res, **extra):
    row = {
        "formulation": res.formulation,
        "stabilized": res.stabilized,
        "dt": res.dt,
        "n_it": res.n_it,
        "converged": res.converged,
        "T_p": res.T_p if cfg.timings else "",
        "T_s": res.T_s if cfg.timings else "",
        "T_t": res.T_t if cfg.timings else "",
    }
    row.update(extra)
    return row


def _eigencheck(cfg: RunConfig):
    from .spectral import ctilde_sweep, exact_schur_unit_deviation, spectral_diagnostics

    rows, ok = [], True

    def add(check, mesh, dt, value, threshold, passed):
        nonlocal ok
        ok &= bool(passed)
        rows.append({"check": check, "mesh": mesh, "dt": dt, "value": value, "threshold": threshold, "ok": bool(passed)})

    for n in cfg.eig_meshes:
        for dt in cfg.eig_dts:
            case = bench.drained_box_case(2, n, dt)
            _, _, system = case.setup(MHFE, True)
            rep = spectral_diagnostics(system)
            add("unit multiplicity", f"2D {n}x{n}", dt, rep.n_unit, rep.expected_unit, rep.multiplicity_ok)
            add("eigenvalue bound excess", f"2D {n}x{n}", dt, rep.bound_excess, 1e-10, rep.bound_ok)
            if system.n_dofs <= 200:
                dev = exact_schur_unit_deviation(system)
                add("exact Schur unit deviation", f"2D {n}x{n}", dt, dev, 1e-8, dev <= 1e-8)
    dts = [1e-8, 1e-6, 1e-4, 1e-2, 1.0, 1e2]
    for dim, n in ((2, 8), (3, 4)):
        sweep = ctilde_sweep(lambda dt: bench.drained_box_case(dim, n, dt).setup(MHFE, True)[2], dts)
        label = f"{dim}D {n}^{dim}"
        add("Ctilde SPD", label, "sweep", int(sweep.spd.sum()), len(dts), sweep.spd.all())
        add("Ctilde nonincreasing", label, "sweep", float(sweep.eigenvalues[:, 0].min()), 0.0, sweep.nonincreasing)
        add("Ctilde lower bound", label, "sweep", float(sweep.floor[0]), 0.0, sweep.bounded_below)
    return "eigencheck.csv", ("check", "mesh", "dt", "value", "threshold", "ok"), rows, ok


def _spe10mini(cfg: RunConfig):
    rows, ok = [], True
    counts = []
    for contrast in cfg.contrasts:
        case = bench.heterogeneous_case(cfg.seed, contrast, n=cfg.h_inv)
        for form in cfg.formulations():
            _, _, system = case.setup(form, True)
            _dump(cfg, system, f"{form}_contrast{contrast:g}")
            res = bench.count_iterations(system, cfg.tol, cfg.max_it, "step", cfg.seed)
            ok &= res.converged
            counts.append((form, res.n_it))
            rows.append(_iter_row(cfg, res, contrast=contrast))
    for form in cfg.formulations():
        its = [n for f, n in counts if f == form]
        ok &= max(its) < 2 * min(its)
    cols = ("contrast", "formulation", "stabilized", "dt", "n_it", "T_p", "T_s", "T_t", "converged")
    return "spe10mini.csv", cols, rows, ok


_STUDIES = {
    "run": _run,
    "convergence": _convergence,
    "table2": _table2,
    "eigencheck": _eigencheck,
    "spe10mini": _spe10mini,
}


def run_study(cfg: RunConfig):
    """Run the configured study, write its CSV and return ``(csv_path, rows, ok)``."""
    name, cols, rows, ok = _STUDIES[cfg.command](cfg)
    path = write_csv(Path(cfg.output) / name, cols, rows)
    return path, rows, bool(ok)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    verbose = "-v" in argv or "--verbose" in argv
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(flags=argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        path, rows, ok = run_study(cfg)
    except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {path} ({len(rows)} rows); {'all checks passed' if ok else 'some checks FAILED'}")
    return 0 if ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
