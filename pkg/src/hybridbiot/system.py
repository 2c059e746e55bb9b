"""Global MFE / MHFE block systems, stabilization and backward-Euler stepping.

Block orderings of the unknown vector:

* MFE:  ``[u, q, p]`` with the matrix
  ``[[A_uu, 0, A_up], [0, A_qq, A_qp], [A_pu, dt*A_pq, A_pp + A_stab]]``;
* MHFE: ``[u, p, pi]`` with the matrix
  ``[[A_uu, A_up, 0], [A_pu, Abar_pp + A_stab, dt*A_ppi], [0, A_pip, A_pipi]]``.

Dirichlet displacement components, Gamma_q face velocities (MFE) and Gamma_p
interface pressures (MHFE) are removed from the unknowns; their lifting goes
to the right-hand side.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sps

from .element import CellMaterial, elem_condense, elem_matrices
from .grid import BoundarySets, MacroElementSet, StructuredMesh, build_macro_elements

logger = logging.getLogger(__name__)

MFE, MHFE = "MFE", "MHFE"


def cell_materials(mesh: StructuredMesh, materials) -> list[CellMaterial]:
    if isinstance(materials, CellMaterial):
        return [materials] * mesh.n_cells
    materials = list(materials)
    if len(materials) != mesh.n_cells:
        raise ValueError(f"got {len(materials)} materials for {mesh.n_cells} cells")
    return materials


def _groups(mesh, mats):
    """Cells sharing identical element data, in first-appearance order."""
    groups: dict = {}
    for c in range(mesh.n_cells):
        key = (tuple(mesh.cell_widths[c]), mats[c])
        groups.setdefault(key, []).append(c)
    return [(w, m, np.asarray(cells)) for (w, m), cells in groups.items()]


def _scatter(rows, cols, local):
    """COO assembly of one dense local block per cell."""
    nr, nc = local.shape
    r = np.repeat(rows, nc, axis=1).ravel()
    c = np.tile(cols, (1, nr)).ravel()
    v = np.broadcast_to(local.ravel(), (rows.shape[0], nr * nc)).ravel()
    return r, c, v


def _coo(parts, shape):
    if not parts:
        return sps.csr_matrix(shape)
    r = np.concatenate([p[0] for p in parts])
    c = np.concatenate([p[1] for p in parts])
    v = np.concatenate([p[2] for p in parts])
    m = sps.coo_matrix((v, (r, c)), shape=shape).tocsr()
    m.sum_duplicates()
    m.sort_indices()
    return m


def _udofs(mesh, cells):
    d = mesh.dim
    nodes = mesh.cell_nodes[cells]
    return (d * nodes[:, :, None] + np.arange(d)).reshape(len(cells), -1)


def assemble_mechanics(mesh: StructuredMesh, materials):
    """Full (unconstrained) ``A_uu`` and ``A_up`` over all nodal dofs."""
    mats = cell_materials(mesh, materials)
    nu = mesh.dim * mesh.n_nodes
    K, B = [], []
    for widths, mat, cells in _groups(mesh, mats):
        em = elem_matrices(widths, mat)
        dofs = _udofs(mesh, cells)
        K.append(_scatter(dofs, dofs, em.A_uu))
        B.append(_scatter(dofs, cells[:, None], em.A_up))
    return _coo(K, (nu, nu)), _coo(B, (nu, mesh.n_cells))


def compute_beta(material: CellMaterial, dim: int) -> float:
    """Macro-element stabilization coefficient [1/Pa]."""
    G, lam, b = material.G, material.lam, material.b
    return _beta(G, lam, b, dim)


def _beta(G, lam, b, dim):
    if dim == 2:
        return (b / 2.0) ** 2 / (2.0 * G + lam)
    if dim == 3:
        return (3.0 * b) ** 2 / (32.0 * (lam + 4.0 * G))
    raise ValueError(f"dim must be 2 or 3, got {dim}")


def macro_beta(mesh, macros: MacroElementSet, materials) -> np.ndarray:
    """Per-macro beta from the arithmetic mean of member (G, lambda, b)."""
    mats = cell_materials(mesh, materials)
    G = np.array([m.G for m in mats])
    lam = np.array([m.lam for m in mats])
    b = np.array([m.b for m in mats])
    return np.array(
        [_beta(G[c].mean(), lam[c].mean(), b[c].mean(), mesh.dim) for c in macros.cells]
    )


def assemble_stab(mesh: StructuredMesh, macros: MacroElementSet, materials, beta=None):
    """Pressure-jump matrix summed over the internal faces of every macro-element.

    ``beta`` overrides the per-macro coefficients (scalar or one per macro).
    """
    if beta is None:
        beta = macro_beta(mesh, macros, materials)
    coef = np.broadcast_to(np.asarray(beta, dtype=float), (len(macros),)) * macros.measure
    faces = macros.internal_faces
    k = mesh.face_cells[faces, 0].ravel()
    l = mesh.face_cells[faces, 1].ravel()
    c = np.repeat(coef, faces.shape[1])
    rows = np.concatenate([k, l, k, l])
    cols = np.concatenate([k, l, l, k])
    vals = np.concatenate([c, c, -c, -c])
    return _coo([(rows, cols, vals)], (mesh.n_cells, mesh.n_cells))


# ----------------------------------------------------------------------
@dataclass
class State:
    """Solution at one time level.

    ``u`` holds every nodal component (Dirichlet values included), ``q`` the
    face velocities along the global face orientation (MFE), ``w`` the outward
    cell velocities (n_cells, 2d) and ``pi`` the interface pressure on every
    face, boundary values included (MHFE).
    """

    t: float
    u: np.ndarray
    p: np.ndarray
    q: np.ndarray | None = None
    w: np.ndarray | None = None
    pi: np.ndarray | None = None


def zero_state(mesh: StructuredMesh, formulation: str, t: float = 0.0) -> State:
    s = State(t=t, u=np.zeros(mesh.dim * mesh.n_nodes), p=np.zeros(mesh.n_cells))
    if formulation == MFE:
        s.q = np.zeros(mesh.n_faces)
    else:
        s.w = np.zeros((mesh.n_cells, 2 * mesh.dim))
        s.pi = np.zeros(mesh.n_faces)
    return s


SourceFn = Callable[[StructuredMesh, float], np.ndarray]


@dataclass
class BlockSystem:
    """Assembled block operator plus everything needed to build right-hand sides."""

    formulation: str
    dt: float
    mesh: StructuredMesh
    bcs: BoundarySets
    materials: list
    stabilized: bool
    blocks: dict
    u_free: np.ndarray
    flow_free: np.ndarray  # free q faces (MFE) or free pi faces (MHFE)
    full: dict = field(repr=False)
    source: SourceFn | None = None
    _matrix: sps.csr_matrix | None = field(default=None, repr=False)
    _lu: object = field(default=None, repr=False)

    @property
    def n_u(self) -> int:
        return int(self.u_free.size)

    @property
    def n_flow(self) -> int:
        return int(self.flow_free.size)

    @property
    def n_p(self) -> int:
        return self.mesh.n_cells

    @property
    def sizes(self) -> tuple[int, int, int]:
        """Block sizes in matrix order."""
        if self.formulation == MFE:
            return self.n_u, self.n_flow, self.n_p
        return self.n_u, self.n_p, self.n_flow

    @property
    def n_dofs(self) -> int:
        return sum(self.sizes)

    def split(self, x):
        a, b, _ = self.sizes
        return x[:a], x[a : a + b], x[a + b :]

    def pressure_block(self) -> sps.csr_matrix:
        """Diagonal block of the pressure row (stabilization included)."""
        key = "A_pp" if self.formulation == MFE else "Abar_pp"
        return (self.blocks[key] + self.blocks["A_stab"]).tocsr()

    def matrix(self) -> sps.csr_matrix:
        if self._matrix is None:
            B, dt = self.blocks, self.dt
            if self.formulation == MFE:
                M = sps.bmat(
                    [
                        [B["A_uu"], None, B["A_up"]],
                        [None, B["A_qq"], B["A_qp"]],
                        [B["A_pu"], dt * B["A_pq"], self.pressure_block()],
                    ],
                    format="csr",
                )
            else:
                M = sps.bmat(
                    [
                        [B["A_uu"], B["A_up"], None],
                        [B["A_pu"], self.pressure_block(), dt * B["A_ppi"]],
                        [None, B["A_pip"], B["A_pipi"]],
                    ],
                    format="csr",
                )
            M.sort_indices()
            self._matrix = M
        return self._matrix

    # ------------------------------------------------------------------
    def rhs(self, prev: State, t: float) -> np.ndarray:
        """Right-hand side at time ``t`` given the state at the previous level."""
        mesh, bcs, F, dt = self.mesh, self.bcs, self.full, self.dt
        ubar = bcs.displacement_values(t).ravel()
        fixed = ~F["u_free_mask"]
        ulift = np.where(fixed, ubar, 0.0)

        f_u = F["traction"](t) - F["A_uu"] @ ulift
        f_p = F["A_pu"] @ prev.u + F["A_pp"] @ prev.p - F["A_pu"] @ ulift
        if self.source is not None:
            f_p = f_p + dt * np.asarray(self.source(mesh, t), dtype=float)

        pfaces, qfaces = bcs.pressure_faces, bcs.flux_faces
        pbar, qbar = bcs.pressure_values(t), bcs.flux_values(t)
        area = mesh.face_area
        if self.formulation == MFE:
            qglob = np.zeros(mesh.n_faces)
            qglob[qfaces] = F["outward_sign"][qfaces] * qbar
            f_q = -F["A_qq"] @ qglob
            f_q[pfaces] -= F["outward_sign"][pfaces] * area[pfaces] * pbar
            f_p = f_p - dt * (F["A_pq"] @ qglob)
            return np.concatenate([f_u[self.u_free], f_q[self.flow_free], f_p])

        pi_bar = np.zeros(mesh.n_faces)
        pi_bar[pfaces] = pbar
        f_pi = -F["A_pipi"] @ pi_bar
        f_pi[qfaces] -= area[qfaces] * qbar
        f_p = f_p - dt * (F["A_ppi"] @ pi_bar)
        return np.concatenate([f_u[self.u_free], f_p, f_pi[self.flow_free]])

    def expand(self, x: np.ndarray, t: float) -> State:
        """Scatter a solution vector back onto all entities."""
        mesh, bcs, F = self.mesh, self.bcs, self.full
        u = np.where(F["u_free_mask"], 0.0, bcs.displacement_values(t).ravel())
        if self.formulation == MFE:
            xu, xq, xp = self.split(x)
            u[self.u_free] = xu
            q = np.zeros(mesh.n_faces)
            qf = bcs.flux_faces
            q[qf] = F["outward_sign"][qf] * bcs.flux_values(t)
            q[self.flow_free] = xq
            return State(t=t, u=u, p=np.array(xp), q=q)
        xu, xp, xpi = self.split(x)
        u[self.u_free] = xu
        pi = np.zeros(mesh.n_faces)
        pi[bcs.pressure_faces] = bcs.pressure_values(t)
        pi[self.flow_free] = xpi
        w = reconstruct_velocity(self, xp, pi)
        return State(t=t, u=u, p=np.array(xp), w=w, pi=pi)

    def direct_solve(self, b: np.ndarray, refine: int = 3) -> np.ndarray:
        """Sparse LU solve with the factorization cached across time steps.

        The blocks differ in scale by many orders of magnitude, so a few
        steps of iterative refinement recover full accuracy in the small
        pressure and interface rows.
        """
        if self._lu is None:
            import scipy.sparse.linalg as spla

            self._lu = spla.splu(self.matrix().tocsc())
        A = self.matrix()
        x = self._lu.solve(b)
        for _ in range(refine):
            x = x + self._lu.solve(b - A @ x)
        return x


def _outward_sign_on_boundary(mesh):
    # +1 where the global orientation points out of the domain
    sign = np.zeros(mesh.n_faces)
    fc = mesh.face_cells
    sign[fc[:, 1] < 0] = 1.0
    sign[fc[:, 0] < 0] = -1.0
    return sign


def _traction_assembler(mesh: StructuredMesh, bcs: BoundarySets):
    """Callable ``t -> f_u`` with the consistent boundary traction load."""
    d = mesh.dim
    gp = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
    pts = np.array(np.meshgrid(*([gp] * (d - 1)), indexing="ij")).reshape(d - 1, -1).T
    n_corner = 2 ** (d - 1)
    bits = np.array([[(c >> j) & 1 for j in range(d - 1)] for c in range(n_corner)])
    # Q1 face shape functions at the face Gauss points: (n_gauss, n_corner)
    shape = np.prod(np.where(bits[None] == 1, pts[:, None, :], 1.0 - pts[:, None, :]), axis=2)

    prepared = []
    for faces, fn in bcs.traction_sides():
        a = int(mesh.face_axis[faces[0]])
        tang = [k for k in range(d) if k != a]
        fidx = np.stack(np.unravel_index(faces - mesh.face_offsets[a], mesh.face_shapes[a], order="F"), axis=1)
        nodes = np.empty((faces.size, n_corner), dtype=np.int64)
        for c in range(n_corner):
            idx = fidx.copy()
            idx[:, tang] += bits[c]
            nodes[:, c] = np.ravel_multi_index(tuple(idx.T), mesh.node_shape, order="F")
        lo = mesh.node_coords[nodes[:, 0]]
        wd = np.stack([np.diff(mesh.axes[k])[fidx[:, k]] for k in tang], axis=1)
        x = np.repeat(lo[None], pts.shape[0], axis=0)
        x[:, :, tang] += pts[:, None, :] * wd[None]
        weight = mesh.face_area[faces] / pts.shape[0]
        prepared.append((fn, nodes, x, weight))

    def load(t):
        f = np.zeros(d * mesh.n_nodes)
        for fn, nodes, x, weight in prepared:
            for g in range(x.shape[0]):
                tr = np.asarray(fn(x[g], t), dtype=float)
                for c in range(n_corner):
                    dofs = d * nodes[:, c][:, None] + np.arange(d)
                    np.add.at(f, dofs, (weight * shape[g, c])[:, None] * tr)
        return f

    return load


def assemble(
    mesh: StructuredMesh,
    materials,
    bcs: BoundarySets,
    dt: float,
    formulation: str = MHFE,
    stabilized: bool = True,
    macros: MacroElementSet | None = None,
    source: SourceFn | None = None,
    beta=None,
) -> BlockSystem:
    """Assemble the MFE or MHFE block system for one time-step size.

    Parameters
    ----------
    materials : CellMaterial or sequence of CellMaterial
        Uniform or per-cell material.
    source : callable, optional
        ``source(mesh, t)`` returning the integral of the fluid source over
        each cell.
    beta : float or array, optional
        Override of the per-macro stabilization coefficient.
    """
    if formulation not in (MFE, MHFE):
        raise ValueError(f"formulation must be 'MFE' or 'MHFE', got {formulation!r}")
    if not dt >= 0.0:
        raise ValueError(f"dt must be nonnegative, got {dt}")
    if stabilized and macros is None:
        raise ValueError("stabilized assembly needs a macro-element partition")
    mats = cell_materials(mesh, materials)
    d, nc, nf = mesh.dim, mesh.n_cells, mesh.n_faces

    K, Bup = assemble_mechanics(mesh, mats)
    App = sps.diags(np.array([m.S for m in mats]) * mesh.cell_volumes).tocsr()
    sign = mesh.local_face_sign  # outward sign of each local face
    faces_of = mesh.cell_faces

    full = {"A_uu": K, "A_up": Bup, "A_pu": (-Bup.T).tocsr(), "A_pp": App}
    u_free_mask = ~bcs.u_fixed.ravel()
    u_free = np.flatnonzero(u_free_mask)
    full["u_free_mask"] = u_free_mask
    full["outward_sign"] = _outward_sign_on_boundary(mesh)
    full["traction"] = _traction_assembler(mesh, bcs)

    blocks = {
        "A_uu": K[u_free][:, u_free].tocsr(),
        "A_up": Bup[u_free].tocsr(),
    }
    blocks["A_pu"] = (-blocks["A_up"].T).tocsr()

    if stabilized:
        blocks["A_stab"] = assemble_stab(mesh, macros, mats, beta=beta)
    else:
        blocks["A_stab"] = sps.csr_matrix((nc, nc))

    groups = _groups(mesh, mats)
    if formulation == MFE:
        Q, D = [], []
        for widths, mat, cells in groups:
            em = elem_matrices(widths, mat)
            S = np.diag(sign)
            Q.append(_scatter(faces_of[cells], faces_of[cells], S @ em.A_ww @ S))
            D.append(_scatter(faces_of[cells], cells[:, None], (S @ em.A_wp)))
        Aqq = _coo(Q, (nf, nf))
        Aqp = _coo(D, (nf, nc))
        full["A_qq"], full["A_qp"] = Aqq, Aqp
        full["A_pq"] = (-Aqp.T).tocsr()
        free = np.setdiff1d(np.arange(nf), bcs.flux_faces)
        blocks["A_qq"] = Aqq[free][:, free].tocsr()
        blocks["A_qp"] = Aqp[free].tocsr()
        blocks["A_pq"] = (-blocks["A_qp"].T).tocsr()
        blocks["A_pp"] = App
    else:
        abar = np.zeros(nc)
        C, P = [], []
        for widths, mat, cells in groups:
            em = elem_matrices(widths, mat)
            a_pp, a_ppi, a_pipi = elem_condense(em, dt)
            abar[cells] = a_pp
            C.append(_scatter(cells[:, None], faces_of[cells], a_ppi))
            P.append(_scatter(faces_of[cells], faces_of[cells], a_pipi))
        Appi = _coo(C, (nc, nf))
        Apipi = _coo(P, (nf, nf))
        full["A_ppi"], full["A_pipi"] = Appi, Apipi
        free = np.setdiff1d(np.arange(nf), bcs.pressure_faces)
        blocks["Abar_pp"] = sps.diags(abar).tocsr()
        blocks["A_ppi"] = Appi[:, free].tocsr()
        blocks["A_pip"] = blocks["A_ppi"].T.tocsr()
        blocks["A_pipi"] = Apipi[free][:, free].tocsr()
        blocks["A_pp"] = App

    return BlockSystem(
        formulation=formulation,
        dt=float(dt),
        mesh=mesh,
        bcs=bcs,
        materials=mats,
        stabilized=stabilized,
        blocks=blocks,
        u_free=u_free,
        flow_free=free,
        full=full,
        source=source,
    )


# ----------------------------------------------------------------------
def reconstruct_velocity(system: BlockSystem, p: np.ndarray, pi_full: np.ndarray) -> np.ndarray:
    """Cell-wise outward velocities ``w = -A_ww^{-1} (A_wp p_T + A_wpi pi_dT)``."""
    mesh = system.mesh
    w = np.empty((mesh.n_cells, 2 * mesh.dim))
    for widths, mat, cells in _groups(mesh, system.materials):
        em = elem_matrices(widths, mat)
        rhs = -(em.A_wp[:, 0][None, :] * p[cells, None] + pi_full[mesh.cell_faces[cells]] * em.face_areas)
        w[cells] = np.linalg.solve(em.A_ww, rhs.T).T
    return w


def advance_timestep(system: BlockSystem, prev: State, t: float | None = None, solve=None):
    """One backward-Euler step from ``prev`` to ``t = prev.t + dt``.

    ``solve(system, b)`` returns the solution vector; the default is a cached
    sparse direct solve. Returns ``(state, info)`` where ``info`` is whatever
    the solver reported (``None`` for the direct path).
    """
    if t is None:
        t = prev.t + system.dt
    b = system.rhs(prev, t)
    info = None
    if solve is None:
        x = system.direct_solve(b)
    else:
        out = solve(system, b)
        x, info = out if isinstance(out, tuple) else (out, None)
    return system.expand(x, t), info


def run_steps(system: BlockSystem, state: State, n_steps: int, solve=None) -> State:
    for _ in range(n_steps):
        state, info = advance_timestep(system, state, solve=solve)
        if info is not None and not info.converged:
            raise RuntimeError(f"linear solver did not converge at t={state.t}: {info}")
    return state


# ----------------------------------------------------------------------
def _balance_terms(system: BlockSystem, prev: State, new: State):
    mesh, F, dt = system.mesh, system.full, system.dt
    if system.formulation == MFE:
        qf = new.q[mesh.cell_faces] * mesh.local_face_sign  # outward
        outflow = (qf * mesh.face_area[mesh.cell_faces]).sum(axis=1)
    else:
        outflow = (new.w * mesh.face_area[mesh.cell_faces]).sum(axis=1)
    storage = F["A_pp"] @ (new.p - prev.p)
    mech = F["A_pu"] @ (new.u - prev.u)
    src = np.zeros(mesh.n_cells) if system.source is None else dt * np.asarray(system.source(mesh, new.t))
    return mech, dt * outflow, storage, src


def continuity_residual(system: BlockSystem, prev: State, new: State, include_stab: bool = True) -> np.ndarray:
    """Cell-wise mass balance residual recomputed from physical fluxes.

    ``b div u_n + dt * (outflow) + S p_n + [A_stab p_n] - ftilde_n`` per cell,
    with the outflow taken from the face velocities rather than the matrix
    rows of the solved system.
    """
    mech, flow, storage, src = _balance_terms(system, prev, new)
    r = mech + flow + storage - src
    if include_stab:
        r = r + system.blocks["A_stab"] @ new.p
    return r


@dataclass
class MassBalance:
    """Largest mass-balance residuals relative to the largest balance term."""

    cell: float
    macro: float
    scale: float


def mass_balance(system: BlockSystem, prev: State, new: State, macros: MacroElementSet | None = None) -> MassBalance:
    """Physical (stabilization-free) mass balance per cell and per macro-element.

    The jump term moves fluid between the cells of a macro-element but sums to
    zero over each one, so the stabilized scheme is conservative on
    macro-elements; the unstabilized one is conservative cell by cell.
    """
    terms = _balance_terms(system, prev, new)
    r = terms[0] + terms[1] + terms[2] - terms[3]
    scale = max(float(np.max(np.abs(t))) for t in terms)
    scale = scale if scale > 0.0 else 1.0
    macro = float("nan")
    if macros is not None:
        macro = float(np.max(np.abs(r[macros.cells].sum(axis=1)))) / scale
    return MassBalance(cell=float(np.max(np.abs(r))) / scale, macro=macro, scale=scale)


def flux_mismatch(system: BlockSystem, state: State) -> float:
    """Largest sum of the two outward fluxes over interior faces (MHFE)."""
    mesh = system.mesh
    tot = np.zeros(mesh.n_faces)
    np.add.at(tot, mesh.cell_faces.ravel(), state.w.ravel())
    inner = mesh.interior_faces()
    return float(np.max(np.abs(tot[inner]))) if inner.size else 0.0


# ----------------------------------------------------------------------
@dataclass
class MacroEigenReport:
    eigenvalues: np.ndarray
    beta: float
    n_zero: int


def macro_schur_eigencheck(
    mesh: StructuredMesh,
    macro: int,
    macros: MacroElementSet,
    materials,
    beta: float,
    zero_tol: float = 1e-10,
) -> MacroEigenReport:
    """Spectrum of ``B_p^M = A_stab^M - A_pu^M (A_uu^M)^-1 A_up^M`` on one macro-element.

    Displacements are clamped on the macro's outer boundary, so only the
    interior nodes carry unknowns.
    """
    cells = macros.cells[macro]
    mats = cell_materials(mesh, materials)
    d = mesh.dim
    lo = mesh.cell_lower[cells[0]]
    mid = mesh.cell_lower[cells[-1]]
    hi = mid + mesh.cell_widths[cells[-1]]
    local = StructuredMesh([np.array([lo[a], mid[a], hi[a]]) for a in range(d)])
    local_mats = [mats[c] for c in cells]
    K, B = assemble_mechanics(local, local_mats)
    interior = np.flatnonzero(np.all(local.node_index == 1, axis=1))
    free = (d * interior[:, None] + np.arange(d)).ravel()
    Kf = K[free][:, free].toarray()
    Bf = B[free].toarray()
    S = assemble_stab(local, build_macro_elements(local), local_mats, beta=beta).toarray()
    Bp = S + Bf.T @ np.linalg.solve(Kf, Bf)
    ev = np.linalg.eigvalsh(0.5 * (Bp + Bp.T))
    scale = max(float(np.max(np.abs(ev))), np.finfo(float).tiny)
    n_zero = int(np.sum(np.abs(ev) <= zero_tol * scale))
    return MacroEigenReport(eigenvalues=ev, beta=float(beta), n_zero=n_zero)
