import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hybridbiot.bench import (
    BURDEN_KAPPA,
    MetricReport,
    barry_mercer_beta,
    barry_mercer_case,
    cantilever_case,
    checkerboard,
    convergence_slope,
    count_iterations,
    heterogeneous_case,
    iteration_rhs,
    l2_pressure_error,
    oscillation_index,
    stabilization_pair,
    undrained_dt_barry_mercer,
)
from hybridbiot.grid import build_structured_mesh
from hybridbiot.system import MFE, MHFE


def test_barry_mercer_parameters():
    case = barry_mercer_case(16)
    m = case.materials
    assert (m.E, m.nu, m.b, m.S, m.kappa, m.mu) == (1e5, 0.1, 1.0, 0.0, 1e-9, 1e-3)
    assert m.lam == pytest.approx(11363.636363636364, rel=1e-14)
    assert m.G == pytest.approx(45454.545454545456, rel=1e-14)
    assert barry_mercer_beta() == pytest.approx(0.10227272727272728, rel=1e-13)
    assert undrained_dt_barry_mercer() == pytest.approx(1.536e-5, rel=1e-3)
    assert case.mesh().shape == (16, 16)
    assert case.params["x0"] == (0.25, 0.25)
    # the default schedule reaches the normalized time pi/2
    assert case.n_steps * case.dt * barry_mercer_beta() == pytest.approx(math.pi / 2)
    assert barry_mercer_case(16, dt_factor=1e-6).n_steps == 1
    with pytest.raises(ValueError):
        barry_mercer_case(2)


def test_cantilever_parameters():
    case = cantilever_case(3, 10, 1e-5)
    m = case.materials
    assert (m.E, m.nu, m.b, m.S, m.kappa, m.mu) == (1e5, 0.4, 1.0, 0.0, 1e-7, 1e-3)
    assert case.mesh().n_cells == 1000 and case.dt == 1e-5
    assert cantilever_case(2, 20, 1e-5).mesh().shape == (20, 20)
    with pytest.raises(ValueError):
        cantilever_case(4, 4, 0.1)


def test_heterogeneous_case():
    homo = heterogeneous_case(0, 1.0)
    mats = homo.materials
    res = [m for m in mats if m.kappa != BURDEN_KAPPA]
    assert len({m.kappa for m in res}) == 1
    assert len(mats) - len(res) == 2 * 2 * 64
    m0 = mats[0]
    assert (m0.E, m0.nu, m0.b, m0.mu) == (5e9, 0.25, 1.0, 3e-3)
    het = heterogeneous_case(3, 1e6)
    kh = np.array([m.kappa[0] for m in het.materials if m.kappa != BURDEN_KAPPA])
    assert 1e4 < kh.max() / kh.min() <= 1e6
    # deterministic in the seed
    again = heterogeneous_case(3, 1e6)
    assert again.materials == het.materials
    assert heterogeneous_case(4, 1e6).materials != het.materials
    with pytest.raises(ValueError):
        heterogeneous_case(0, 0.5)


def test_case_configs_deterministic():
    a, b = cantilever_case(2, 8, 0.1), cantilever_case(2, 8, 0.1)
    assert repr(a.sides) == repr(b.sides) and a.materials == b.materials


# ---------------------------------------------------------------- metrics
@pytest.mark.parametrize("mode", ["prolong", "average"])
def test_l2_identities(mode, rng):
    fine = build_structured_mesh(2, 8, 1.0)
    coarse = build_structured_mesh(2, 4, 1.0)
    p_ref = rng.standard_normal(fine.n_cells)
    assert l2_pressure_error(p_ref, fine, p_ref, fine, mode=mode) == 0.0
    assert l2_pressure_error(2 * p_ref, fine, p_ref, fine, mode=mode) == pytest.approx(1.0)
    # a coarse field equal to the fine averages has zero averaged error
    from hybridbiot.bench import _nested_map

    parent = _nested_map(coarse, fine)
    avg = np.bincount(parent, weights=p_ref, minlength=coarse.n_cells) / 4
    e = l2_pressure_error(avg, coarse, p_ref, fine, mode=mode)
    if mode == "average":
        assert e == pytest.approx(0.0, abs=1e-14)
    else:
        assert e > 0


def test_l2_non_nested_rejected():
    with pytest.raises(ValueError):
        l2_pressure_error(np.ones(9), build_structured_mesh(2, 3, 1.0), np.ones(16), build_structured_mesh(2, 4, 1.0))
    with pytest.raises(ValueError):
        l2_pressure_error(np.ones(4), build_structured_mesh(2, 2, 1.0), np.ones(4), build_structured_mesh(2, 2, 2.0))


@given(st.floats(0.1, 10.0), st.floats(0.5, 3.0))
def test_convergence_slope_powers(c, k):
    hs = np.array([1 / 8, 1 / 16, 1 / 32, 1 / 64])
    assert convergence_slope(hs, c * hs**k) == pytest.approx(k, abs=1e-10)


def test_convergence_slope_errors():
    with pytest.raises(ValueError):
        convergence_slope([0.1, 0.2], [1.0, 2.0])
    with pytest.raises(ValueError):
        convergence_slope([0.1, 0.2, 0.3], [1.0, 0.0, 2.0])


@pytest.mark.parametrize("dim, n", [(2, 4), (2, 20), (3, 6), (3, 3)])
def test_checkerboard_closed_form(dim, n):
    mesh = build_structured_mesh(dim, n, 2.0)
    assert oscillation_index(checkerboard(mesh), mesh) == pytest.approx(2 * dim * (n - 3) / n, rel=1e-13)


@given(st.sampled_from([2, 3]), st.integers(2, 7), st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_oscillation_zero_for_linear(dim, n, coef):
    mesh = build_structured_mesh(dim, n, 1.0)
    p = coef[0] + mesh.cell_centers @ np.asarray(coef[1 : dim + 1])
    assert oscillation_index(p, mesh) == 0.0
    assert oscillation_index(np.full(mesh.n_cells, 3.0), mesh) == 0.0


def test_oscillation_ignores_single_peak():
    mesh = build_structured_mesh(2, 9, 1.0)
    p = np.zeros(mesh.n_cells)
    p[mesh.locate_cell((0.5, 0.5))] = 1.0
    assert oscillation_index(p, mesh) == 0.0


def test_metric_report_csv_deterministic(tmp_path):
    rep = MetricReport(rows=[{"h": 0.5, "formulation": "MFE", "stabilized": True, "error": 0.1}], slope=1.0)
    a = rep.to_csv(tmp_path / "a.csv").read_bytes()
    b = rep.to_csv(tmp_path / "b.csv").read_bytes()
    assert a == b and a.startswith(b"h,formulation,stabilized,error,slope\n")


# ---------------------------------------------------------------- drivers
def test_iteration_rhs_protocols():
    s = cantilever_case(2, 4, 0.1).setup(formulation=MHFE)[2]
    r1 = iteration_rhs(s, "random", 7)
    np.testing.assert_array_equal(r1, iteration_rhs(s, "random", 7))
    assert r1.size == s.n_dofs
    assert np.linalg.norm(iteration_rhs(s, "step")) > 0
    with pytest.raises(ValueError):
        iteration_rhs(s, "bogus")


@pytest.mark.parametrize("formulation", [MFE, MHFE])
def test_count_iterations_small(formulation):
    s = cantilever_case(2, 4, 0.1).setup(formulation=formulation)[2]
    res = count_iterations(s)
    assert res.converged and 1 <= res.n_it <= s.n_dofs
    assert res.h_inv == 4 and res.T_t >= 0


def test_stabilization_pair_shapes():
    mesh, p0, p1 = stabilization_pair(cantilever_case(2, 4, 1e-5))
    assert p0.shape == p1.shape == (mesh.n_cells,)
