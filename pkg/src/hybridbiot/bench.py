"""Benchmark cases, error and oscillation metrics, and study drivers."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .element import CellMaterial
from .grid import MacroElementSet, SideBC, StructuredMesh, build_macro_elements, build_structured_mesh, tag_boundary
from .solver import build_preconditioner, gmres
from .system import MFE, MHFE, BlockSystem, State, advance_timestep, assemble, zero_state

logger = logging.getLogger(__name__)

BARRY_MERCER = CellMaterial(E=1e5, nu=0.1, b=1.0, S=0.0, kappa=1e-9, mu=1e-3)
CANTILEVER = CellMaterial(E=1e5, nu=0.4, b=1.0, S=0.0, kappa=1e-7, mu=1e-3)
SPE10_MECH = dict(E=5e9, nu=0.25, b=1.0, S=0.0, mu=3e-3)
BURDEN_KAPPA = 1e-17
SPE10_LENGTHS = (365.0, 670.0, 628.0)


@dataclass(frozen=True)
class CaseDefinition:
    """Everything needed to assemble and march one benchmark problem.

    ``materials`` is one :class:`CellMaterial` or a tuple with one entry per
    cell. ``source(mesh, t)`` returns the integrated fluid source per cell.
    """

    name: str
    dim: int
    cells: tuple
    lengths: tuple
    materials: object
    sides: dict
    dt: float
    n_steps: int = 1
    source: Callable | None = None
    formulation: str = MHFE
    stabilized: bool = True
    params: dict = field(default_factory=dict)

    def mesh(self) -> StructuredMesh:
        return build_structured_mesh(self.dim, self.cells, self.lengths)

    def with_options(self, **kw) -> "CaseDefinition":
        return replace(self, **kw)

    def setup(self, formulation=None, stabilized=None, dt=None):
        """Return ``(mesh, macros, system)``."""
        mesh = self.mesh()
        macros = build_macro_elements(mesh)
        bcs = tag_boundary(mesh, self.sides)
        system = assemble(
            mesh,
            self.materials,
            bcs,
            self.dt if dt is None else dt,
            formulation or self.formulation,
            self.stabilized if stabilized is None else stabilized,
            macros,
            source=self.source,
        )
        return mesh, macros, system

    def run(self, formulation=None, stabilized=None, solve=None, n_steps=None):
        """March ``n_steps`` backward-Euler steps from rest.

        Returns ``(mesh, macros, system, states)`` with the initial state
        first.
        """
        mesh, macros, system = self.setup(formulation, stabilized)
        states = [zero_state(mesh, system.formulation)]
        for _ in range(self.n_steps if n_steps is None else n_steps):
            st, info = advance_timestep(system, states[-1], solve=solve)
            if info is not None and not info.converged:
                raise RuntimeError(f"{self.name}: solver failed at t={st.t:g}: {info}")
            states.append(st)
        return mesh, macros, system, states


def _cells(dim, n):
    return (int(n),) * dim if np.isscalar(n) else tuple(int(v) for v in n)


# ----------------------------------------------------------------------
def barry_mercer_beta(material: CellMaterial = BARRY_MERCER) -> float:
    """Consolidation rate ``(lambda + 2G) kappa / mu`` [1/s]."""
    return (material.lam + 2.0 * material.G) * material.kappa / material.mu


def point_source(x0, amplitude: Callable[[float], float]):
    """Source concentrated in the cell containing ``x0`` (lower index on ties)."""

    def source(mesh, t):
        f = np.zeros(mesh.n_cells)
        f[mesh.locate_cell(x0)] = amplitude(t)
        return f

    return source


def barry_mercer_case(n: int, dt_factor: float = 1.0 / 8.0, n_steps: int | None = None, x0=(0.25, 0.25)) -> CaseDefinition:
    """Sine-wave point source on the unit square.

    The step is ``dt = dt_factor * (pi/2) / beta_hat`` so that ``1/dt_factor``
    steps reach the normalized time ``beta_hat * t = pi/2``. By default the
    run stops there; for ``dt_factor < 1e-3`` (undrained studies) it takes a
    single step.
    """
    if n < 4:
        raise ValueError(f"n must be at least 4, got {n}")
    if not dt_factor > 0:
        raise ValueError(f"dt_factor must be positive, got {dt_factor}")
    bh = barry_mercer_beta()
    dt = dt_factor * 0.5 * math.pi / bh
    if n_steps is None:
        n_steps = max(1, round(1.0 / dt_factor)) if dt_factor >= 1e-3 else 1
    sides = {
        "xmin": SideBC(fixed=(1,), pressure=0.0),
        "xmax": SideBC(fixed=(1,), pressure=0.0),
        "ymin": SideBC(fixed=(0,), pressure=0.0),
        "ymax": SideBC(fixed=(0,), pressure=0.0),
    }
    return CaseDefinition(
        name="barry_mercer",
        dim=2,
        cells=(n, n),
        lengths=(1.0, 1.0),
        materials=BARRY_MERCER,
        sides=sides,
        dt=dt,
        n_steps=int(n_steps),
        source=point_source(tuple(x0), lambda t: 2.0 * bh * math.sin(bh * t)),
        params={"beta_hat": bh, "dt_factor": dt_factor, "x0": tuple(x0)},
    )


def undrained_dt_barry_mercer() -> float:
    return 1e-6 * math.pi / (2.0 * barry_mercer_beta())


def drained_box_case(dim: int, n: int, dt: float) -> CaseDefinition:
    """Unit square/cube with the Barry-Mercer material, drained on every side.

    Tangential displacements are fixed on each side and there is no source;
    the drained boundary makes the interface-pressure blocks definite, which
    the spectral checks rely on.
    """
    names = ["xmin", "xmax", "ymin", "ymax", "zmin", "zmax"][: 2 * dim]
    sides = {}
    for k, name in enumerate(names):
        a = k // 2
        sides[name] = SideBC(fixed=tuple(c for c in range(dim) if c != a), pressure=0.0)
    return CaseDefinition(
        name="drained_box",
        dim=dim,
        cells=_cells(dim, n),
        lengths=(1.0,) * dim,
        materials=BARRY_MERCER,
        sides=sides,
        dt=float(dt),
    )


def cantilever_case(dim: int, n: int, dt: float, n_steps: int = 1, load: float = 1.0) -> CaseDefinition:
    """Unit square/cube clamped on ``xmin`` with a downward top load, no flow."""
    if dim not in (2, 3):
        raise ValueError(f"dim must be 2 or 3, got {dim}")
    if n < 2:
        raise ValueError(f"n must be at least 2, got {n}")
    names = ["xmin", "xmax", "ymin", "ymax", "zmin", "zmax"][: 2 * dim]
    sides = {s: SideBC(flux=0.0) for s in names}
    sides["xmin"] = SideBC(fixed=tuple(range(dim)), flux=0.0)
    top = names[-1]
    sides[top] = SideBC(traction=(0.0,) * (dim - 1) + (-float(load),), flux=0.0)
    return CaseDefinition(
        name="cantilever",
        dim=dim,
        cells=_cells(dim, n),
        lengths=(1.0,) * dim,
        materials=CANTILEVER,
        sides=sides,
        dt=float(dt),
        n_steps=int(n_steps),
        params={"load": load},
    )


def heterogeneous_case(seed: int, contrast: float, n: int = 8, dt: float = 8640.0, kappa_ref: float = 1e-13) -> CaseDefinition:
    """Layered reservoir box loosely modeled on the SPE10 setup.

    The outer ``n // 4`` cell layers at the bottom and top are over/underburden
    with ``kappa = 1e-17``. Reservoir cells draw ``log10(kappa_h)`` uniformly
    from an interval of width ``log10(contrast)`` centred on ``kappa_ref``,
    with ``kappa_z = kappa_h / 10``. An injector and a producer occupy the
    reservoir cells of two opposite vertical corner columns.
    """
    if not contrast >= 1.0:
        raise ValueError(f"contrast must be >= 1, got {contrast}")
    if n < 4:
        raise ValueError(f"n must be at least 4, got {n}")
    cells = (n, n, n)
    mesh = build_structured_mesh(3, cells, SPE10_LENGTHS)
    rng = np.random.default_rng(seed)
    spread = math.log10(contrast)
    logk = math.log10(kappa_ref) + rng.uniform(-0.5 * spread, 0.5 * spread, size=mesh.n_cells)
    k_layer = mesh.cell_index[:, 2]
    nb = max(1, n // 4)
    burden = (k_layer < nb) | (k_layer >= n - nb)
    cache: dict = {}
    mats = []
    for c in range(mesh.n_cells):
        if burden[c]:
            kap = BURDEN_KAPPA
        else:
            kh = float(10.0 ** logk[c])
            kap = (kh, kh, 0.1 * kh)
        if kap not in cache:
            cache[kap] = CellMaterial(kappa=kap, **SPE10_MECH)
        mats.append(cache[kap])

    ij = mesh.cell_index
    inj = np.flatnonzero(~burden & (ij[:, 0] == 0) & (ij[:, 1] == 0))
    prod = np.flatnonzero(~burden & (ij[:, 0] == n - 1) & (ij[:, 1] == n - 1))
    rate = 1e-3  # m^3/s split over the perforated cells

    def wells(mesh_, t):
        f = np.zeros(mesh_.n_cells)
        f[inj] = rate / inj.size
        f[prod] = -rate / prod.size
        return f

    sides = {
        "xmin": SideBC(fixed=(0,), flux=0.0),
        "xmax": SideBC(fixed=(0,), flux=0.0),
        "ymin": SideBC(fixed=(1,), flux=0.0),
        "ymax": SideBC(fixed=(1,), flux=0.0),
        "zmin": SideBC(fixed=(0, 1, 2), flux=0.0),
        "zmax": SideBC(traction=(0.0, 0.0, 0.0), flux=0.0),
    }
    return CaseDefinition(
        name="heterogeneous",
        dim=3,
        cells=cells,
        lengths=SPE10_LENGTHS,
        materials=tuple(mats),
        sides=sides,
        dt=float(dt),
        n_steps=1,
        source=wells,
        params={"seed": seed, "contrast": contrast, "kappa_ref": kappa_ref},
    )


# ----------------------------------------------------------------------
def _nested_map(coarse: StructuredMesh, fine: StructuredMesh) -> np.ndarray:
    """Coarse cell containing each fine cell; raises for non-nested meshes."""
    if coarse.dim != fine.dim:
        raise ValueError("meshes have different dimensions")
    idx = []
    for a in range(coarse.dim):
        xc, xf = coarse.axes[a], fine.axes[a]
        tol = 1e-12 * (xc[-1] - xc[0])
        if abs(xc[0] - xf[0]) > tol or abs(xc[-1] - xf[-1]) > tol:
            raise ValueError("meshes cover different domains")
        pos = np.searchsorted(xf, xc)
        pos = np.clip(pos, 0, xf.size - 1)
        near = np.minimum(np.abs(xf[pos] - xc), np.abs(xf[np.maximum(pos - 1, 0)] - xc))
        if np.any(near > tol):
            raise ValueError("fine mesh is not a refinement of the coarse mesh")
        mid = 0.5 * (xf[:-1] + xf[1:])
        idx.append(np.searchsorted(xc, mid) - 1)
    fi = fine.cell_index
    coarse_idx = np.stack([idx[a][fi[:, a]] for a in range(coarse.dim)], axis=1)
    return np.ravel_multi_index(tuple(coarse_idx.T), coarse.shape, order="F")


def l2_pressure_error(p_h, mesh_h: StructuredMesh, p_ref, mesh_ref: StructuredMesh, mode: str = "prolong") -> float:
    """Relative L2 distance between a coarse and a reference cell pressure.

    ``mode="prolong"`` injects ``p_h`` onto the reference mesh and integrates
    there, i.e. the L2 norm of the difference of the two piecewise-constant
    functions. ``mode="average"`` instead averages ``p_ref`` onto the coarse
    cells and compares cell values, which measures only the coarse-scale part
    of the error.
    """
    p_h = np.asarray(p_h, dtype=float)
    p_ref = np.asarray(p_ref, dtype=float)
    if p_h.size != mesh_h.n_cells or p_ref.size != mesh_ref.n_cells:
        raise ValueError("pressure arrays do not match their meshes")
    parent = _nested_map(mesh_h, mesh_ref)
    vol = mesh_ref.cell_volumes
    if mode == "prolong":
        diff = p_h[parent] - p_ref
        num, den = np.sum(vol * diff**2), np.sum(vol * p_ref**2)
    elif mode == "average":
        avg = np.bincount(parent, weights=vol * p_ref, minlength=mesh_h.n_cells) / mesh_h.cell_volumes
        num = np.sum(mesh_h.cell_volumes * (p_h - avg) ** 2)
        den = np.sum(mesh_h.cell_volumes * avg**2)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if den == 0.0:
        raise ZeroDivisionError("reference pressure is zero")
    return float(np.sqrt(num / den))


def oscillation_index(p, mesh: StructuredMesh) -> float:
    """Dimensionless measure of checkerboard-type pressure oscillations.

    Along every grid line, each run of three consecutive face jumps with
    alternating signs (a zigzag over two cells) contributes the smallest of
    the three jump magnitudes times the face area. The total is divided by
    ``sum_T |p_T| |T|^((d-1)/d)``.

    Fields that are monotone along grid lines, including samples of linear
    functions, score zero, and so does an isolated physical extremum. A
    ``+-1`` checkerboard on an ``n^d`` grid of width ``h`` scores
    ``2 d (n - 3) / n``.
    """
    p = np.asarray(p, dtype=float)
    if p.size != mesh.n_cells:
        raise ValueError(f"expected {mesh.n_cells} cell values, got {p.size}")
    d = mesh.dim
    norm = float(np.sum(np.abs(p) * mesh.cell_volumes ** ((d - 1) / d)))
    if norm == 0.0:
        return 0.0
    grid = p.reshape(mesh.shape, order="F")
    total = 0.0
    for a in range(d):
        J = np.moveaxis(np.diff(grid, axis=a), a, 0)
        m = J.shape[0] - 2
        if m <= 0:
            continue
        J0, J1, J2 = J[:m], J[1 : m + 1], J[2 : m + 2]
        zigzag = (J0 * J1 < 0.0) & (J1 * J2 < 0.0)
        amp = np.minimum(np.minimum(np.abs(J0), np.abs(J1)), np.abs(J2))
        # area of faces normal to axis a, indexed by the transverse cell position
        widths = [np.diff(mesh.axes[k]) for k in range(d) if k != a]
        area = np.prod(np.meshgrid(*widths, indexing="ij"), axis=0)
        total += float(np.sum(np.where(zigzag, amp, 0.0) * area))
    return total / norm


def checkerboard(mesh: StructuredMesh) -> np.ndarray:
    """``(-1)^(i+j(+k))`` cell field."""
    return np.where(mesh.cell_index.sum(axis=1) % 2 == 0, 1.0, -1.0)


def convergence_slope(hs, errors) -> float:
    """Least-squares slope of ``log(error)`` against ``log(h)``."""
    hs = np.asarray(hs, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if hs.size != errors.size or hs.size < 3:
        raise ValueError("need at least three (h, error) pairs")
    if np.any(errors <= 0.0) or np.any(hs <= 0.0):
        raise ValueError("h and errors must be positive")
    return float(np.polyfit(np.log(hs), np.log(errors), 1)[0])


# ----------------------------------------------------------------------
@dataclass
class MetricReport:
    """Per-refinement errors plus summary metrics."""

    rows: list = field(default_factory=list)
    slope: float = float("nan")
    oscillation: float = float("nan")

    columns = ("h", "formulation", "stabilized", "error")

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns + ("slope",))
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in self.columns] + [_fmt(self.slope)])
        return path


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.10e}"
    return str(v)


def barry_mercer_convergence(
    levels=(8, 16, 32, 64),
    n_ref: int = 128,
    formulation: str = MHFE,
    stabilized: bool = True,
    dt_factor: float = 1.0 / 8.0,
    mode: str = "prolong",
) -> MetricReport:
    """Self-convergence of the Barry-Mercer pressure at ``beta_hat t = pi/2``."""
    ref_case = barry_mercer_case(n_ref, dt_factor).with_options(formulation=formulation, stabilized=stabilized)
    mesh_ref, _, _, st = ref_case.run()
    p_ref = st[-1].p
    report = MetricReport()
    for n in levels:
        case = barry_mercer_case(n, dt_factor).with_options(formulation=formulation, stabilized=stabilized)
        mesh, _, _, st = case.run()
        err = l2_pressure_error(st[-1].p, mesh, p_ref, mesh_ref, mode=mode)
        report.rows.append({"h": 1.0 / n, "formulation": formulation, "stabilized": stabilized, "error": err})
        logger.info("n=%d error=%.4e", n, err)
    report.slope = convergence_slope([r["h"] for r in report.rows], [r["error"] for r in report.rows])
    return report


def iteration_rhs(system: BlockSystem, protocol: str = "random", seed: int = 0) -> np.ndarray:
    """Right-hand side used for iteration-count studies.

    ``"random"``: seeded standard-normal vector over all unknowns;
    ``"step"``: the first backward-Euler step from rest.
    """
    if protocol == "random":
        return np.random.default_rng(seed).standard_normal(system.n_dofs)
    if protocol == "step":
        return system.rhs(zero_state(system.mesh, system.formulation), system.dt)
    raise ValueError(f"unknown rhs protocol {protocol!r}")


@dataclass
class IterationResult:
    formulation: str
    stabilized: bool
    dt: float
    h_inv: int
    n_it: int
    converged: bool
    T_p: float
    T_s: float

    @property
    def T_t(self) -> float:
        return self.T_p + self.T_s


def count_iterations(
    system: BlockSystem, tol: float = 1e-6, max_it: int = 1000, protocol: str = "random", seed: int = 0
) -> IterationResult:
    import time

    t0 = time.perf_counter()
    prec = build_preconditioner(system)
    T_p = time.perf_counter() - t0
    b = iteration_rhs(system, protocol, seed)
    _, rep = gmres(system.matrix().dot, prec.apply, b, tol=tol, max_it=max_it)
    return IterationResult(
        formulation=system.formulation,
        stabilized=system.stabilized,
        dt=system.dt,
        h_inv=int(system.mesh.shape[0]),
        n_it=rep.n_it,
        converged=rep.converged,
        T_p=T_p,
        T_s=rep.T_s,
    )


def stabilization_pair(case: CaseDefinition, formulation: str = MHFE):
    """Final pressures and meshes of the unstabilized and stabilized runs."""
    out = {}
    for stab in (False, True):
        mesh, _, _, st = case.run(formulation=formulation, stabilized=stab)
        out[stab] = st[-1].p
    return mesh, out[False], out[True]


__all__ = [
    "CaseDefinition",
    "MetricReport",
    "IterationResult",
    "barry_mercer_case",
    "barry_mercer_beta",
    "undrained_dt_barry_mercer",
    "cantilever_case",
    "drained_box_case",
    "heterogeneous_case",
    "l2_pressure_error",
    "oscillation_index",
    "checkerboard",
    "convergence_slope",
    "barry_mercer_convergence",
    "iteration_rhs",
    "count_iterations",
    "stabilization_pair",
    "MFE",
    "MHFE",
    "MacroElementSet",
]
