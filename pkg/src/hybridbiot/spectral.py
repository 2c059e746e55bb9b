"""Dense spectral checks of the preconditioned MHFE operator.

Everything here densifies the system, so it is meant for small meshes only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .solver import MHFEPreconditioner, build_schur_btilde, build_schur_ctilde, factor_spd
from .system import MHFE, BlockSystem, _groups, elem_condense, elem_matrices

DENSE_LIMIT = 3000


class DenseLimitError(ValueError):
    pass


def _check_limit(system: BlockSystem, dense_limit: int):
    if system.n_dofs > dense_limit:
        raise DenseLimitError(f"{system.n_dofs} dofs exceed the dense limit {dense_limit}")


def exact_pressure_schur(system: BlockSystem) -> np.ndarray:
    """Dense ``B_p = Abar_pp + A_stab - A_pu A_uu^{-1} A_up``."""
    B = system.blocks
    X = factor_spd(B["A_uu"]).solve(B["A_up"].toarray())
    Bp = system.pressure_block().toarray() - B["A_pu"].toarray() @ X
    return 0.5 * (Bp + Bp.T)


@dataclass
class SpectralReport:
    """Eigen-information of ``T = A M^{-1}`` and of its perturbation ``Z``.

    ``n_unit`` counts eigenvalues of ``T`` within ``unit_tol`` of 1 and
    ``n_unit_geometric`` is the nullity of ``T - I``; both should be at least
    ``expected_unit = n_u + n_pi - n_p``. ``bound`` is
    ``eps + sqrt(eps^2 + 2 dt gamma eps)`` and ``bound_excess`` the largest
    ``|mu| - bound`` over the eigenvalues ``mu`` of ``Z``.
    """

    eig_T: np.ndarray
    eig_Z: np.ndarray
    n_unit: int
    n_unit_geometric: int
    expected_unit: int
    eps: float
    gamma: float
    bound: float
    bound_excess: float
    unit_tol: float

    @property
    def multiplicity_ok(self) -> bool:
        return self.n_unit >= self.expected_unit

    @property
    def bound_ok(self) -> bool:
        return self.bound_excess <= 1e-10

    @property
    def max_unit_deviation(self) -> float:
        return float(np.max(np.abs(self.eig_T - 1.0)))


def spectral_diagnostics(
    system: BlockSystem,
    prec: MHFEPreconditioner | None = None,
    exact_bp: bool = False,
    dense_limit: int = DENSE_LIMIT,
    unit_tol: float = 1e-8,
) -> SpectralReport:
    """Eigenvalues of the right-preconditioned MHFE operator.

    Parameters
    ----------
    prec : MHFEPreconditioner, optional
        Defaults to the diagonal-surrogate preconditioner, or to the one built
        on the exact ``B_p`` when ``exact_bp`` is set.
    """
    if system.formulation != MHFE:
        raise ValueError("spectral diagnostics are defined for MHFE systems")
    _check_limit(system, dense_limit)
    if prec is None:
        prec = MHFEPreconditioner(system, btilde=exact_pressure_schur(system) if exact_bp else None)
    A = system.matrix().toarray()
    M = prec.dense()
    T = sla.solve(M.T, A.T).T
    eig_T = np.linalg.eigvals(T)
    n = T.shape[0]
    sv = np.linalg.svd(T - np.eye(n), compute_uv=False)
    rank = int(np.sum(sv > unit_tol * max(sv[0], 1.0)))

    n_u, n_p, n_pi = system.sizes
    dt = system.dt
    B = system.blocks
    Bp = exact_pressure_schur(system)
    Bt = prec.btilde if np.ndim(prec.btilde) == 2 else np.diag(prec.btilde)
    Bt_inv = np.linalg.inv(Bt)
    Ep = Bp @ Bt_inv - np.eye(n_p)
    Appi = B["A_ppi"].toarray()
    Apip = B["A_pip"].toarray()
    C = prec.ctilde.toarray()
    K = sla.solve(C.T, Appi.T).T  # A_ppi C^-1
    Z = np.block([[Ep, -dt * Ep @ K], [Apip @ Bt_inv, np.zeros((n_pi, n_pi))]])
    eig_Z = np.linalg.eigvals(Z)
    eps = 0.5 * np.linalg.norm(Ep, 2)
    gamma = np.linalg.norm(K @ Apip @ Bt_inv, 2)
    bound = eps + np.sqrt(eps**2 + 2.0 * dt * gamma * eps)
    return SpectralReport(
        eig_T=eig_T,
        eig_Z=eig_Z,
        n_unit=int(np.sum(np.abs(eig_T - 1.0) <= unit_tol)),
        n_unit_geometric=n - rank,
        expected_unit=n_u + n_pi - n_p,
        eps=float(eps),
        gamma=float(gamma),
        bound=float(bound),
        bound_excess=float(np.max(np.abs(eig_Z)) - bound),
        unit_tol=unit_tol,
    )


# ----------------------------------------------------------------------
def ctilde_limit(system: BlockSystem) -> np.ndarray:
    """Large-``dt`` floor of ``Ctilde_pi``.

    Element by element, ``a_pipi - a_pip a_ppi / d_w`` with
    ``d_w = A_wp^T A_ww^{-1} A_wp``. Because ``Btilde_p >= dt * d_w``
    entrywise, ``Ctilde_pi(dt)`` dominates this matrix for every ``dt``.
    """
    mesh = system.mesh
    nf = mesh.n_faces
    C = np.zeros((nf, nf))
    for widths, mat, cells in _groups(mesh, system.materials):
        em = elem_matrices(widths, mat)
        _, a_ppi, a_pipi = elem_condense(em, 0.0)
        d_w = float((em.A_wp.T @ np.linalg.solve(em.A_ww, em.A_wp))[0, 0])
        local = a_pipi - a_ppi.T @ a_ppi / d_w
        for c in cells:
            f = mesh.cell_faces[c]
            C[np.ix_(f, f)] += local
    free = system.flow_free
    C = C[np.ix_(free, free)]
    return 0.5 * (C + C.T)


@dataclass
class CtildeSweep:
    dts: np.ndarray
    eigenvalues: np.ndarray  # (n_dt, n_pi), ascending per row
    spd: np.ndarray
    floor: np.ndarray  # ascending eigenvalues of the large-dt floor
    messages: list

    @property
    def nonincreasing(self) -> bool:
        ev = self.eigenvalues
        scale = np.max(np.abs(ev))
        return bool(np.all(np.diff(ev, axis=0) <= 1e-10 * scale))

    @property
    def bounded_below(self) -> bool:
        # Loewner order implies index-wise ordering of sorted eigenvalues
        tol = 1e-10 * np.max(np.abs(self.eigenvalues))
        return bool(self.floor[0] > 0.0 and np.all(self.eigenvalues >= self.floor - tol))


def ctilde_sweep(assemble_at, dts) -> CtildeSweep:
    """SPD and monotonicity check of ``Ctilde_pi`` across time-step sizes.

    ``assemble_at(dt)`` must return an MHFE :class:`BlockSystem`.
    """
    dts = np.sort(np.asarray(dts, dtype=float))
    eigs, spd, msgs = [], [], []
    floor = None
    for dt in dts:
        system = assemble_at(dt)
        C = build_schur_ctilde(system, build_schur_btilde(system))
        try:
            factor_spd(C)
            spd.append(True)
        except np.linalg.LinAlgError as exc:
            spd.append(False)
            msgs.append(f"dt={dt:g}: {exc}")
        eigs.append(np.linalg.eigvalsh(C.toarray()))
        if floor is None:
            floor = np.linalg.eigvalsh(ctilde_limit(system))
    return CtildeSweep(
        dts=dts, eigenvalues=np.array(eigs), spd=np.array(spd), floor=floor, messages=msgs
    )



def exact_schur_unit_deviation(system: BlockSystem, dps: int = 50, dense_limit: int = 400) -> float:
    """``max |lambda - 1|`` over ``eig(A M^{-1})`` with the exact ``B_p`` in ``M``.

    With ``Btilde_p = B_p`` the operator ``T - I`` is nilpotent, so its
    eigenvalues are defective and a double-precision eigensolver can only
    resolve them to about ``eps**(1/k)``. The whole chain (Schur complements,
    ``M``, ``T`` and the eigenvalues) is therefore carried out in
    ``dps``-digit arithmetic, starting from the double-precision blocks.
    """
    import mpmath

    if system.formulation != MHFE:
        raise ValueError("needs an MHFE system")
    _check_limit(system, dense_limit)
    n_u, n_p, n_pi = system.sizes
    B = system.blocks
    with mpmath.workdps(dps):
        def mp(M):
            return mpmath.matrix(M.toarray().tolist())

        Auu, Aup, Apu = mp(B["A_uu"]), mp(B["A_up"]), mp(B["A_pu"])
        Bpp = mp(system.pressure_block())
        Appi, Apip, Apipi = mp(B["A_ppi"]), mp(B["A_pip"]), mp(B["A_pipi"])
        dt = mpmath.mpf(system.dt)
        Bp = Bpp - Apu * mpmath.inverse(Auu) * Aup
        C = Apipi - dt * Apip * mpmath.inverse(Bp) * Appi
        n = n_u + n_p + n_pi
        o_p, o_pi = n_u, n_u + n_p

        def place(entries):
            out = mpmath.zeros(n, n)
            for r0, c0, blk in entries:
                for i in range(blk.rows):
                    for j in range(blk.cols):
                        out[r0 + i, c0 + j] = blk[i, j]
            return out

        # both operators are built from the same high-precision blocks
        A = place([(0, 0, Auu), (0, o_p, Aup), (o_p, 0, Apu), (o_p, o_p, Bpp),
                   (o_p, o_pi, dt * Appi), (o_pi, o_p, Apip), (o_pi, o_pi, Apipi)])
        M = place([(0, 0, Auu), (0, o_p, Aup), (o_p, o_p, Bp),
                   (o_p, o_pi, dt * Appi), (o_pi, o_pi, C)])
        T = A * mpmath.inverse(M)
        ev = mpmath.eig(T, left=False, right=False)
        return float(max(abs(e - 1) for e in ev))
