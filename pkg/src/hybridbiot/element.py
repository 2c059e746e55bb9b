"""Elemental matrices on one axis-aligned cell and their static condensation.

Local displacement dofs are node-major: dof ``d*c + k`` is component ``k`` at
corner ``c``. Local velocity dofs follow the local face order ``2*a + s``.
The RT0 basis function of face ``i`` has unit outward normal component on
that face and zero on the others, so ``A_wpi = diag(|e|)`` and
``A_wp = -|e|``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

_GAUSS = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])


@dataclass(frozen=True)
class CellMaterial:
    """Isotropic poroelastic material with diagonal permeability.

    Parameters
    ----------
    E, nu : float
        Drained Young's modulus [Pa] and Poisson ratio.
    b : float
        Biot coefficient.
    S : float
        Constrained specific storage [1/Pa].
    kappa : float or tuple
        Permeability [m^2], scalar or one value per axis.
    mu : float
        Fluid viscosity [Pa s].
    """

    E: float
    nu: float
    b: float = 1.0
    S: float = 0.0
    kappa: float | tuple = 1.0
    mu: float = 1.0

    def __post_init__(self):
        if not self.E > 0:
            raise ValueError(f"E must be positive, got {self.E}")
        if not 0.0 <= self.nu < 0.5:
            raise ValueError(f"nu must lie in [0, 0.5), got {self.nu}")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError(f"b must lie in [0, 1], got {self.b}")
        if not self.S >= 0.0:
            raise ValueError(f"S must be nonnegative, got {self.S}")
        if not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        k = np.atleast_1d(np.asarray(self.kappa, dtype=float))
        if np.any(k <= 0):
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        object.__setattr__(self, "kappa", tuple(float(v) for v in k) if k.size > 1 else float(k[0]))

    @property
    def G(self) -> float:
        return self.E / (2.0 * (1.0 + self.nu))

    @property
    def lam(self) -> float:
        return self.E * self.nu / ((1.0 + self.nu) * (1.0 - 2.0 * self.nu))

    def kappa_axes(self, dim: int) -> np.ndarray:
        k = np.atleast_1d(np.asarray(self.kappa, dtype=float))
        if k.size == 1:
            return np.full(dim, k[0])
        if k.size < dim:
            raise ValueError(f"kappa has {k.size} entries, need {dim}")
        return k[:dim]


@dataclass(frozen=True)
class ElementMatrices:
    A_uu: np.ndarray
    A_up: np.ndarray
    A_ww: np.ndarray
    A_wp: np.ndarray
    A_wpi: np.ndarray
    A_pp: float
    volume: float
    face_areas: np.ndarray


def _q1_gradients(widths):
    """Physical shape-function gradients at the 2**d Gauss points.

    Returns an array of shape (n_gauss, n_corners, d) and the point weight.
    """
    d = len(widths)
    corners = np.array([[(c >> a) & 1 for a in range(d)] for c in range(2**d)])
    pts = np.array(np.meshgrid(*([_GAUSS] * d), indexing="ij")).reshape(d, -1).T
    grads = np.empty((pts.shape[0], corners.shape[0], d))
    for g, xi in enumerate(pts):
        # 1D factors: N = xi for bit 1, 1 - xi for bit 0
        val = np.where(corners == 1, xi, 1.0 - xi)
        der = np.where(corners == 1, 1.0, -1.0)
        for a in range(d):
            prod = der[:, a] / widths[a]
            for k in range(d):
                if k != a:
                    prod = prod * val[:, k]
            grads[g, :, a] = prod
    weight = np.prod(widths) / pts.shape[0]
    return grads, weight


def elasticity_stiffness(widths, G: float, lam: float) -> np.ndarray:
    """Q1 stiffness ``(sym grad eta_i, C : sym grad eta_j)`` by 2-point Gauss per axis."""
    d = len(widths)
    grads, w = _q1_gradients(np.asarray(widths, dtype=float))
    n = grads.shape[1]
    K = np.zeros((d * n, d * n))
    for B in grads:
        # K[(a,i),(b,j)] = lam di_a dj_b + G (delta_ij grad_a . grad_b + dj_a di_b)
        dot = B @ B.T
        blk = lam * np.einsum("ai,bj->aibj", B, B) + G * np.einsum("aj,bi->aibj", B, B)
        blk += G * np.einsum("ab,ij->aibj", dot, np.eye(d))
        K += w * blk.reshape(d * n, d * n)
    return K


def elem_matrices(widths, material: CellMaterial) -> ElementMatrices:
    """Uncondensed elemental blocks on a box with edge lengths ``widths``."""
    widths = np.asarray(widths, dtype=float)
    if widths.ndim != 1 or widths.size not in (2, 3):
        raise ValueError(f"widths must have 2 or 3 entries, got {widths}")
    if np.any(widths <= 0.0):
        raise ValueError(f"degenerate cell with widths {widths}")
    return _elem_cached(tuple(widths), material)


@lru_cache(maxsize=4096)
def _elem_cached(widths: tuple, material: CellMaterial) -> ElementMatrices:
    widths = np.asarray(widths)
    d = widths.size
    vol = float(np.prod(widths))
    A_uu = elasticity_stiffness(widths, material.G, material.lam)

    # -(div eta, b) = -b * int dN/dx_k, exact for Q1 on a box
    grads, w = _q1_gradients(widths)
    A_up = -material.b * w * grads.sum(axis=0).reshape(-1, 1)

    areas = np.repeat(vol / widths, 2)
    inv_k = material.mu / material.kappa_axes(d)
    A_ww = np.zeros((2 * d, 2 * d))
    pair = np.array([[1.0 / 3.0, -1.0 / 6.0], [-1.0 / 6.0, 1.0 / 3.0]])
    for a in range(d):
        A_ww[2 * a : 2 * a + 2, 2 * a : 2 * a + 2] = inv_k[a] * vol * pair
    A_wp = -areas.reshape(-1, 1)
    A_wpi = np.diag(areas)
    for arr in (A_uu, A_up, A_ww, A_wp, A_wpi, areas):
        arr.setflags(write=False)
    return ElementMatrices(
        A_uu=A_uu,
        A_up=A_up,
        A_ww=A_ww,
        A_wp=A_wp,
        A_wpi=A_wpi,
        A_pp=material.S * vol,
        volume=vol,
        face_areas=areas,
    )


def elem_condense(em: ElementMatrices, dt: float):
    """Eliminate the cell velocities.

    Returns ``(Abar_pp, A_ppi, A_pipi)`` where ``Abar_pp`` is a scalar,
    ``A_ppi`` has shape (1, 2d) and ``A_pipi`` is (2d, 2d) symmetric.
    """
    try:
        L = np.linalg.cholesky(em.A_ww)
    except np.linalg.LinAlgError as exc:
        raise ValueError("A_ww is not positive definite") from exc
    Winv_wp = _cho_solve(L, em.A_wp)
    Winv_wpi = _cho_solve(L, em.A_wpi)
    A_pw = -em.A_wp.T
    A_piw = -em.A_wpi.T
    Abar_pp = em.A_pp - dt * float((A_pw @ Winv_wp)[0, 0])
    A_ppi = -A_pw @ Winv_wpi
    A_pipi = -A_piw @ Winv_wpi
    A_pipi = 0.5 * (A_pipi + A_pipi.T)
    return Abar_pp, A_ppi, A_pipi


def _cho_solve(L, B):
    y = np.linalg.solve(L, B)
    return np.linalg.solve(L.T, y)
