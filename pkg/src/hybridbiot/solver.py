"""Sparse kernels, block-triangular preconditioners and right-preconditioned GMRES."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .system import MFE, MHFE, BlockSystem

logger = logging.getLogger(__name__)


class NotSPDError(np.linalg.LinAlgError):
    pass


class SPDFactor:
    """Sparse LDL^T-style factorization of an SPD matrix.

    SuperLU runs in symmetric mode with a fill-reducing ordering of A + A^T and
    no off-diagonal pivoting, so the pivots are those of a Cholesky
    factorization and a non-positive one proves the input is not SPD.
    """

    def __init__(self, A):
        A = sps.csc_matrix(A, dtype=float)
        n, m = A.shape
        if n != m:
            raise ValueError(f"matrix must be square, got {A.shape}")
        self.shape = A.shape
        if n == 0:
            self._lu = None
            return
        asym = abs(A - A.T).max() if A.nnz else 0.0
        scale = abs(A).max() if A.nnz else 0.0
        if asym > 1e-12 * max(scale, np.finfo(float).tiny):
            raise NotSPDError(f"not SPD: matrix is not symmetric (|A - A^T| = {asym:.3e})")
        try:
            lu = spla.splu(
                A,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as exc:
            raise NotSPDError(f"not SPD: {exc}") from exc
        if not np.array_equal(lu.perm_r, lu.perm_c):
            raise NotSPDError("not SPD: factorization needed off-diagonal pivoting")
        piv = lu.U.diagonal()
        if np.any(piv <= 0.0):
            raise NotSPDError(f"not SPD: non-positive pivot {piv.min():.3e}")
        self._lu = lu
        self.nnz = lu.L.nnz + lu.U.nnz

    def solve(self, b):
        if self._lu is None:
            return np.zeros_like(b)
        return self._lu.solve(np.asarray(b, dtype=float))


def factor_spd(A) -> SPDFactor:
    """Factor an SPD sparse matrix; raises :class:`NotSPDError` otherwise."""
    return SPDFactor(A)


# ----------------------------------------------------------------------
def fixed_stress_diagonal(system: BlockSystem) -> np.ndarray:
    """``diag(A_up^T diag(A_uu)^{-1} A_up)``."""
    Auu, Aup = system.blocks["A_uu"], system.blocks["A_up"]
    dg = Auu.diagonal()
    if np.any(dg == 0.0):
        raise ZeroDivisionError("A_uu has a zero diagonal entry")
    return np.asarray(Aup.multiply(Aup).T @ (1.0 / dg)).ravel()


def build_schur_btilde(system: BlockSystem) -> np.ndarray:
    """Diagonal first-level Schur surrogate for MHFE, returned as a vector."""
    if system.formulation != MHFE:
        raise ValueError("build_schur_btilde needs an MHFE system")
    return (
        system.blocks["Abar_pp"].diagonal()
        + system.blocks["A_stab"].diagonal()
        + fixed_stress_diagonal(system)
    )


def build_schur_ctilde(system: BlockSystem, btilde: np.ndarray, dt: float | None = None):
    """``A_pipi - dt A_pip diag(btilde)^{-1} A_ppi`` (sparse, symmetric)."""
    dt = system.dt if dt is None else dt
    if np.any(np.asarray(btilde) <= 0.0):
        raise ValueError("btilde must be positive")
    B = system.blocks
    C = B["A_pipi"] - dt * (B["A_pip"] @ sps.diags(1.0 / btilde) @ B["A_ppi"])
    C = 0.5 * (C + C.T)
    return sps.csr_matrix(C)


def lumped_diagonal(A) -> np.ndarray:
    """Absolute row sums."""
    return np.asarray(abs(A).sum(axis=1)).ravel()


def build_schur_ctilde_mixed(system: BlockSystem):
    """Mixed-form pressure Schur surrogate.

    ``A_stab + A_pp + diag(A_up^T diag(A_uu)^-1 A_up) + dt A_qp^T L^-1 A_qp``
    with ``L`` the lumped ``A_qq``; the last term equals
    ``-dt A_pq L^-1 A_qp`` since ``A_pq = -A_qp^T``.
    """
    if system.formulation != MFE:
        raise ValueError("build_schur_ctilde_mixed needs an MFE system")
    B = system.blocks
    L = lumped_diagonal(B["A_qq"])
    if np.any(L == 0.0):
        raise ZeroDivisionError("lumped A_qq has a zero entry")
    C = (
        B["A_stab"]
        + B["A_pp"]
        + sps.diags(fixed_stress_diagonal(system))
        - system.dt * (B["A_pq"] @ sps.diags(1.0 / L) @ B["A_qp"])
    )
    C = 0.5 * (C + C.T)
    return sps.csr_matrix(C)


# ----------------------------------------------------------------------
class MHFEPreconditioner:
    """Upper block-triangular preconditioner for ``[u, p, pi]``.

    Inner solves are exact factorizations of ``A_uu`` and ``Ctilde_pi``.
    ``btilde`` defaults to the diagonal surrogate; a square matrix (e.g. the
    exact pressure Schur complement) is accepted for spectral studies.
    """

    variant = "MHFE-M_I"

    def __init__(self, system: BlockSystem, btilde=None):
        if system.formulation != MHFE:
            raise ValueError("MHFEPreconditioner needs an MHFE system")
        self.system = system
        B = system.blocks
        self.dt = system.dt
        self.A_up = B["A_up"]
        self.A_ppi = B["A_ppi"]
        self.Auu = factor_spd(B["A_uu"])
        if btilde is None:
            btilde = build_schur_btilde(system)
        if sps.issparse(btilde) or np.ndim(btilde) == 2:
            Bd = btilde.toarray() if sps.issparse(btilde) else np.asarray(btilde, dtype=float)
            self.btilde = Bd
            lu = scipy.linalg.lu_factor(Bd)
            self._binv = lambda v: scipy.linalg.lu_solve(lu, v)
            K = self._binv(B["A_ppi"].toarray())
            C = B["A_pipi"].toarray() - self.dt * (B["A_pip"] @ K)
            self.ctilde = sps.csr_matrix(0.5 * (C + C.T))
        else:
            self.btilde = np.asarray(btilde, dtype=float)
            self.ctilde = build_schur_ctilde(system, self.btilde)
            inv = 1.0 / self.btilde
            self._binv = lambda v: inv * v if v.ndim == 1 else inv[:, None] * v
        self.C = factor_spd(self.ctilde)

    def apply(self, r):
        r_u, r_p, r_pi = self.system.split(r)
        z_pi = self.C.solve(r_pi)
        z_p = self._binv(r_p - self.dt * (self.A_ppi @ z_pi))
        z_u = self.Auu.solve(r_u - self.A_up @ z_p)
        return np.concatenate([z_u, z_p, z_pi])

    def dense(self):
        """Dense ``M`` for spectral checks."""
        B, dt = self.system.blocks, self.dt
        Bt = self.btilde if self.btilde.ndim == 2 else np.diag(self.btilde)
        return sps.bmat(
            [
                [B["A_uu"], B["A_up"], None],
                [None, sps.csr_matrix(Bt), dt * B["A_ppi"]],
                [None, None, self.ctilde],
            ]
        ).toarray()


class MFEPreconditioner:
    """Lower block-triangular preconditioner for ``[u, q, p]``."""

    variant = "MFE-M_I"

    def __init__(self, system: BlockSystem):
        self.system = system
        B = system.blocks
        self.dt = system.dt
        self.A_pu = B["A_pu"]
        self.A_pq = B["A_pq"]
        self.Auu = factor_spd(B["A_uu"])
        self.Aqq = factor_spd(B["A_qq"])
        self.ctilde = build_schur_ctilde_mixed(system)
        self.C = factor_spd(self.ctilde)

    def apply(self, r):
        r_u, r_q, r_p = self.system.split(r)
        z_u = self.Auu.solve(r_u)
        z_q = self.Aqq.solve(r_q)
        z_p = self.C.solve(r_p - self.A_pu @ z_u - self.dt * (self.A_pq @ z_q))
        return np.concatenate([z_u, z_q, z_p])

    def dense(self):
        B, dt = self.system.blocks, self.dt
        return sps.bmat(
            [
                [B["A_uu"], None, None],
                [None, B["A_qq"], None],
                [B["A_pu"], dt * B["A_pq"], self.ctilde],
            ]
        ).toarray()


def build_preconditioner(system: BlockSystem):
    if system.formulation == MHFE:
        return MHFEPreconditioner(system)
    return MFEPreconditioner(system)


def apply_precond(prec, r):
    return prec.apply(r)


# ----------------------------------------------------------------------
@dataclass
class SolverReport:
    n_it: int
    residuals: list = field(default_factory=list)
    T_p: float = 0.0
    T_s: float = 0.0
    converged: bool = False

    @property
    def T_t(self) -> float:
        return self.T_p + self.T_s

    def __repr__(self):
        res = self.residuals[-1] if self.residuals else float("nan")
        return (
            f"SolverReport(n_it={self.n_it}, converged={self.converged}, "
            f"rel_res={res:.3e}, T_p={self.T_p:.3f}, T_s={self.T_s:.3f})"
        )


def gmres(apply_A, apply_M, b, tol: float = 1e-6, max_it: int = 500):
    """Full GMRES on ``A M^{-1}`` with zero initial guess.

    Modified Gram-Schmidt Arnoldi with Givens rotations; no restart. The
    stopping test is on the 2-norm of the true residual relative to ``b``,
    which right preconditioning leaves unchanged.

    Returns
    -------
    x : ndarray
    report : SolverReport
        ``residuals`` holds the relative residual after each iteration,
        starting with 1.0 for the initial guess.
    """
    b = np.asarray(b, dtype=float)
    n = b.size
    if apply_M is None:
        apply_M = lambda v: v  # noqa: E731
    t0 = time.perf_counter()
    beta = np.linalg.norm(b)
    report = SolverReport(n_it=0, residuals=[1.0])
    if beta == 0.0:
        report.converged = True
        report.T_s = time.perf_counter() - t0
        return np.zeros(n), report

    m = min(max_it, n)
    V = np.zeros((m + 1, n))
    H = np.zeros((m + 1, m))
    cs = np.zeros(m)
    sn = np.zeros(m)
    g = np.zeros(m + 1)
    g[0] = beta
    V[0] = b / beta
    k = 0
    for j in range(m):
        w = np.array(apply_A(apply_M(V[j])), dtype=float)  # operators may return their input
        w_norm = np.linalg.norm(w)
        for i in range(j + 1):
            H[i, j] = np.dot(V[i], w)
            w -= H[i, j] * V[i]
        H[j + 1, j] = np.linalg.norm(w)
        for i in range(j):
            t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
            H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
            H[i, j] = t
        rho = np.hypot(H[j, j], H[j + 1, j])
        cs[j], sn[j] = H[j, j] / rho, H[j + 1, j] / rho
        H[j, j] = rho
        H[j + 1, j] = 0.0
        g[j + 1] = -sn[j] * g[j]
        g[j] = cs[j] * g[j]
        k = j + 1
        report.residuals.append(abs(g[j + 1]) / beta)
        if abs(g[j + 1]) <= tol * beta:
            break
        h_next = np.linalg.norm(w)
        if h_next <= 1e-14 * w_norm:
            # happy breakdown: the Krylov space is invariant
            break
        V[j + 1] = w / h_next

    y = np.linalg.solve(np.triu(H[:k, :k]), g[:k])
    x = apply_M(V[:k].T @ y)
    report.n_it = k
    true_res = np.linalg.norm(b - apply_A(x)) / beta
    report.converged = bool(true_res <= tol * (1.0 + 1e-8))
    report.T_s = time.perf_counter() - t0
    if not report.converged:
        logger.warning("GMRES stopped after %d iterations, rel. residual %.3e", k, true_res)
    return x, report


def solve_gmres(system: BlockSystem, b, tol: float = 1e-6, max_it: int = 1000, prec=None):
    """Build the M_I preconditioner (unless given) and run GMRES."""
    t0 = time.perf_counter()
    if prec is None:
        prec = build_preconditioner(system)
    T_p = time.perf_counter() - t0
    A = system.matrix()
    x, report = gmres(A.dot, prec.apply, b, tol=tol, max_it=max_it)
    report.T_p = T_p
    return x, report


class GmresStepper:
    """``solve`` callback for time stepping that keeps one preconditioner."""

    def __init__(self, tol: float = 1e-6, max_it: int = 1000):
        self.tol = tol
        self.max_it = max_it
        self.prec = None
        self.reports: list[SolverReport] = []

    def __call__(self, system, b):
        t0 = time.perf_counter()
        if self.prec is None or self.prec.system is not system:
            self.prec = build_preconditioner(system)
        T_p = time.perf_counter() - t0
        x, rep = gmres(system.matrix().dot, self.prec.apply, b, tol=self.tol, max_it=self.max_it)
        rep.T_p = T_p
        self.reports.append(rep)
        return x, rep


# ----------------------------------------------------------------------
def export_matrix_market(system: BlockSystem, directory) -> list[Path]:
    """Write every block and the assembled operator as ``.mtx`` files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    items = dict(system.blocks)
    items["A_full"] = system.matrix()
    for name, M in sorted(items.items()):
        path = directory / f"{system.formulation}_{name}.mtx"
        scipy.io.mmwrite(str(path), sps.coo_matrix(M), precision=17)
        written.append(path)
    return written
