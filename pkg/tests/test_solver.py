import numpy as np
import pytest
import scipy.io
import scipy.sparse as sps
from hypothesis import given, strategies as st

from hybridbiot.bench import cantilever_case, drained_box_case
from hybridbiot.element import CellMaterial
from hybridbiot.grid import SideBC, build_structured_mesh, tag_boundary
from hybridbiot.solver import (
    GmresStepper,
    MFEPreconditioner,
    MHFEPreconditioner,
    NotSPDError,
    apply_precond,
    build_preconditioner,
    build_schur_btilde,
    build_schur_ctilde,
    build_schur_ctilde_mixed,
    export_matrix_market,
    factor_spd,
    fixed_stress_diagonal,
    gmres,
    solve_gmres,
)
from hybridbiot.system import MFE, MHFE, assemble, run_steps, zero_state


# ---------------------------------------------------------------- factor_spd
def test_factor_spd_2x2():
    f = factor_spd(sps.csr_matrix([[4.0, 1.0], [1.0, 3.0]]))
    np.testing.assert_allclose(f.solve(np.array([1.0, 2.0])), [1 / 11, 7 / 11], rtol=1e-14)


def test_factor_spd_identity(rng):
    b = rng.standard_normal(7)
    np.testing.assert_array_equal(factor_spd(sps.identity(7)).solve(b), b)


@pytest.mark.parametrize("A", [
    [[1.0, 2.0], [2.0, 1.0]],
    [[-1.0, 0.0], [0.0, 1.0]],
    [[1.0, 0.5], [0.0, 1.0]],
    [[0.0, 1.0], [1.0, 0.0]],
])
def test_factor_spd_rejects(A):
    with pytest.raises(NotSPDError, match="not SPD"):
        factor_spd(sps.csr_matrix(A))


@given(st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_factor_spd_random(n, seed):
    r = np.random.default_rng(seed)
    X = r.standard_normal((n, n))
    A = X @ X.T + n * np.eye(n)
    b = r.standard_normal(n)
    x = factor_spd(sps.csr_matrix(A)).solve(b)
    assert np.linalg.norm(A @ x - b) <= 1e-12 * np.linalg.norm(b) * np.linalg.cond(A)


def test_factor_spd_clamped_elasticity():
    _, _, s = cantilever_case(2, 4, 0.1).setup(formulation=MHFE)
    factor_spd(s.blocks["A_uu"])


# ---------------------------------------------------------------- gmres
def test_gmres_identity(rng):
    b = rng.standard_normal(20)
    x, rep = gmres(lambda v: v, None, b)
    assert rep.n_it == 1 and rep.converged
    np.testing.assert_allclose(x, b)


def test_gmres_zero_rhs():
    x, rep = gmres(lambda v: v, None, np.zeros(5))
    assert rep.converged and rep.n_it == 0 and not x.any()


@given(st.integers(2, 40), st.integers(0, 2**32 - 1))
def test_gmres_random_nonsymmetric(n, seed):
    r = np.random.default_rng(seed)
    A = np.eye(n) * 3 + r.standard_normal((n, n)) / np.sqrt(n)
    b = r.standard_normal(n)
    x, rep = gmres(A.dot, None, b, tol=1e-10)
    assert rep.converged and rep.n_it <= n
    assert np.linalg.norm(b - A @ x) <= 1e-9 * np.linalg.norm(b)
    res = np.array(rep.residuals)
    assert np.all(np.diff(res) <= 1e-12)


def test_gmres_right_preconditioning_exact_inverse(rng):
    n = 15
    A = rng.standard_normal((n, n)) + 5 * np.eye(n)
    Ainv = np.linalg.inv(A)
    b = rng.standard_normal(n)
    x, rep = gmres(A.dot, Ainv.dot, b)
    assert rep.n_it == 1
    np.testing.assert_allclose(A @ x, b, atol=1e-10)


def test_gmres_max_it_partial(rng):
    n = 50
    A = np.diag(np.linspace(1, 1e4, n))
    b = rng.standard_normal(n)
    x, rep = gmres(A.dot, None, b, tol=1e-12, max_it=3)
    assert not rep.converged and rep.n_it == 3
    assert np.linalg.norm(b - A @ x) < np.linalg.norm(b)
    assert rep.T_t >= 0 and "converged=False" in repr(rep)


# ---------------------------------------------------------------- Schur surrogates
def _one_cell(formulation, S=0.0, b=0.0, sides=None):
    mesh = build_structured_mesh(2, 1, 1.0)
    mat = CellMaterial(E=1.0, nu=0.2, b=b, S=S, kappa=1.0, mu=1.0)
    if sides is None:
        sides = {s: SideBC(flux=0.0) for s in ("xmin", "xmax", "ymin", "ymax")}
        sides["xmin"] = SideBC(fixed=(0, 1), flux=0.0)
    return assemble(mesh, mat, tag_boundary(mesh, sides), 1.0, formulation, False, None)


def test_btilde_single_element_24():
    s = _one_cell(MHFE)
    np.testing.assert_allclose(build_schur_btilde(s), [24.0], rtol=1e-13)


def test_btilde_nondecreasing_in_dt():
    case = cantilever_case(2, 4, 0.0)
    prev = None
    for dt in (0.0, 1e-6, 1e-3, 1.0, 1e3):
        _, _, s = case.setup(formulation=MHFE, dt=dt)
        bt = build_schur_btilde(s)
        assert np.all(bt > 0)
        if prev is not None:
            assert np.all(bt >= prev)
        prev = bt


def test_btilde_undrained_is_fixed_stress_plus_stab():
    _, _, s = cantilever_case(2, 4, 0.0).setup(formulation=MHFE, stabilized=False)
    np.testing.assert_array_equal(build_schur_btilde(s), fixed_stress_diagonal(s))


def test_ctilde_dt_zero_and_spd():
    _, _, s = drained_box_case(2, 4, 0.1).setup(formulation=MHFE)
    bt = build_schur_btilde(s)
    C0 = build_schur_ctilde(s, bt, dt=0.0)
    assert abs(C0 - s.blocks["A_pipi"]).max() == 0.0
    C = build_schur_ctilde(s, bt)
    factor_spd(C)
    pat = (abs(s.blocks["A_pipi"]) + abs(s.blocks["A_pip"]) @ abs(s.blocks["A_ppi"])).tocsr()
    r, c = C.nonzero()
    assert np.all(np.asarray(pat[r, c]).ravel() > 0)
    with pytest.raises(ValueError):
        build_schur_ctilde(s, -bt)


def test_ctilde_mixed_single_cell():
    sides = {s: SideBC(fixed=(0, 1), pressure=0.0) for s in ("xmin", "xmax", "ymin", "ymax")}
    mesh = build_structured_mesh(2, 1, 1.0)
    mat = CellMaterial(E=1.0, nu=0.2, b=1.0, S=0.5, kappa=1.0, mu=1.0)
    s = assemble(mesh, mat, tag_boundary(mesh, sides), 2.0, MFE, False, None)
    # lumped A_qq rows are 1/3 + 1/6; four unit divergence entries
    np.testing.assert_allclose(build_schur_ctilde_mixed(s).toarray(), [[0.5 + 2.0 * 4 / 0.5]], rtol=1e-13)


def test_ctilde_mixed_undrained_fixed_stress():
    _, _, s = cantilever_case(2, 4, 0.0).setup(formulation=MFE, stabilized=False)
    C = build_schur_ctilde_mixed(s)
    np.testing.assert_allclose(C.toarray(), np.diag(fixed_stress_diagonal(s)))


def test_ctilde_mixed_spd_3d():
    _, _, s = cantilever_case(3, 10, 0.1).setup(formulation=MFE)
    factor_spd(build_schur_ctilde_mixed(s))


def test_formulation_guards():
    _, _, s = cantilever_case(2, 2, 0.1).setup(formulation=MFE)
    with pytest.raises(ValueError):
        build_schur_btilde(s)
    with pytest.raises(ValueError):
        MHFEPreconditioner(s)
    _, _, h = cantilever_case(2, 2, 0.1).setup(formulation=MHFE)
    with pytest.raises(ValueError):
        build_schur_ctilde_mixed(h)


# ---------------------------------------------------------------- preconditioner application
@pytest.mark.parametrize("formulation", [MFE, MHFE])
def test_precond_dense_oracle(formulation, rng):
    _, _, s = cantilever_case(2, 2, 0.1).setup(formulation=formulation)
    prec = build_preconditioner(s)
    assert isinstance(prec, MFEPreconditioner if formulation == MFE else MHFEPreconditioner)
    M = prec.dense()
    for _ in range(3):
        r = rng.standard_normal(s.n_dofs)
        z = apply_precond(prec, r)
        assert np.linalg.norm(M @ z - r) <= 1e-12 * np.linalg.norm(r) * 1e3
        assert np.linalg.norm(M @ z - r) <= 1e-10 * np.linalg.norm(r)
    assert not apply_precond(prec, np.zeros(s.n_dofs)).any()


def test_mhfe_precond_dense_btilde_matches_vector(rng):
    _, _, s = cantilever_case(2, 4, 0.1).setup(formulation=MHFE)
    bt = build_schur_btilde(s)
    a = MHFEPreconditioner(s)
    b = MHFEPreconditioner(s, btilde=np.diag(bt))
    r = rng.standard_normal(s.n_dofs)
    np.testing.assert_allclose(a.apply(r), b.apply(r), rtol=1e-10)


@pytest.mark.parametrize("formulation", [MFE, MHFE])
def test_solve_gmres_matches_direct(formulation):
    case = cantilever_case(2, 4, 0.1)
    mesh, _, s = case.setup(formulation=formulation)
    b = s.rhs(zero_state(mesh, formulation), s.dt)
    x, rep = solve_gmres(s, b, tol=1e-10)
    assert rep.converged
    xd = s.direct_solve(b)
    assert np.linalg.norm(s.matrix() @ x - b) <= 1e-10 * np.linalg.norm(b) * 1.0001
    assert np.linalg.norm(x - xd) <= 1e-4 * np.linalg.norm(xd)


def test_gmres_stepper_reuses_preconditioner():
    case = cantilever_case(2, 4, 0.1, n_steps=3)
    mesh, _, s = case.setup(formulation=MHFE)
    stepper = GmresStepper(tol=1e-8)
    run_steps(s, zero_state(mesh, MHFE), 3, solve=stepper)
    assert len(stepper.reports) == 3 and all(r.converged for r in stepper.reports)
    assert stepper.reports[0].T_p >= stepper.reports[-1].T_p * 0.0


def test_matrix_market_roundtrip(tmp_path):
    _, _, s = cantilever_case(2, 2, 0.1).setup(formulation=MHFE)
    paths = export_matrix_market(s, tmp_path)
    full = [p for p in paths if p.name == "MHFE_A_full.mtx"][0]
    A = scipy.io.mmread(str(full)).tocsr()
    assert abs(A - s.matrix()).max() == 0.0
