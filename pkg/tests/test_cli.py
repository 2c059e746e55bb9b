import csv

import numpy as np
import pytest

from hybridbiot.cli import ConfigError, RunConfig, main, parse_config, read_vtk, run_study, write_vtk
from hybridbiot.grid import build_structured_mesh
from hybridbiot.system import State


def write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_parse_table2_file(tmp_path):
    cfg = parse_config(write(tmp_path, 'command = "table2"\nh_inv = 10\ndt = 0.1\n'))
    assert isinstance(cfg, RunConfig)
    assert (cfg.command, cfg.h_inv, cfg.dt) == ("table2", 10, 0.1)


def test_missing_command(tmp_path):
    with pytest.raises(ConfigError, match="command"):
        parse_config(write(tmp_path, "h_inv = 10\n"))


def test_flag_overrides_file(tmp_path):
    p = write(tmp_path, 'command = "run"\ntol = 1e-4\n')
    assert parse_config(p, ["--tol", "1e-6"]).tol == 1e-6
    assert parse_config(flags=["--config", str(p), "--tol", "1e-6"]).tol == 1e-6
    assert parse_config(flags=["eigencheck", "--config", str(p)]).command == "eigencheck"


@pytest.mark.parametrize("text, key", [
    ('command = "run"\nbogus = 1\n', "bogus"),
    ('command = "run"\nh_inv = "ten"\n', "h_inv"),
    ('command = "run"\ntol = true\n', "tol"),
    ('command = "run"\nlevels = [8, 1.5]\n', "levels"),
    ('command = "run"\nformulation = "DG"\n', "formulation"),
    ('command = "run"\nh_inv = 0\n', "h_inv"),
    ('command = "fly"\n', "command"),
    ('command = "run"\nstabilized = "maybe"\n', "stabilized"),
])
def test_config_errors_name_key(tmp_path, text, key):
    with pytest.raises(ConfigError, match=repr(key)):
        parse_config(write(tmp_path, text))


def test_bad_flag_value():
    with pytest.raises(ConfigError, match="max_it"):
        parse_config(flags=["run", "--max-it", "many"])


def test_invalid_toml(tmp_path):
    with pytest.raises(ConfigError, match="invalid TOML"):
        parse_config(write(tmp_path, "command = \n"))


def test_list_and_both_flags():
    cfg = parse_config(flags=["convergence", "--levels", "4,8,16", "--formulation", "both", "--stabilized", "both"])
    assert cfg.levels == [4, 8, 16]
    assert cfg.formulations() == ["MFE", "MHFE"] and cfg.stab_flags() == [False, True]


# ---------------------------------------------------------------- VTK
def test_vtk_single_cell(tmp_path):
    mesh = build_structured_mesh(2, 1, 1.0)
    st = State(t=0.0, u=np.arange(8.0), p=np.array([2.5]))
    data = read_vtk(write_vtk(mesh, st, tmp_path / "one.vtk"))
    assert data["points"].shape == (4, 3) and data["pressure"].shape == (1,)
    assert data["dimensions"] == (2, 2, 1)


def test_vtk_roundtrip_and_stable(tmp_path, rng):
    mesh = build_structured_mesh(3, (2, 3, 2), (1.0, 2.0, 0.5))
    st = State(t=0.1, u=rng.standard_normal(3 * mesh.n_nodes), p=rng.standard_normal(mesh.n_cells) * 1e5)
    a = write_vtk(mesh, st, tmp_path / "a.vtk")
    b = write_vtk(mesh, st, tmp_path / "b.vtk")
    assert a.read_bytes() == b.read_bytes()
    data = read_vtk(a)
    assert data["pressure"].size == mesh.n_cells
    np.testing.assert_allclose(data["pressure"], st.p, rtol=1e-12)
    np.testing.assert_allclose(data["displacement"], st.u.reshape(-1, 3), rtol=1e-12)
    np.testing.assert_allclose(data["points"], mesh.node_coords, rtol=1e-12)


def test_vtk_size_mismatch(tmp_path):
    mesh = build_structured_mesh(2, 2, 1.0)
    with pytest.raises(ValueError):
        write_vtk(mesh, State(t=0.0, u=np.zeros(18), p=np.zeros(3)), tmp_path / "x.vtk")


# ---------------------------------------------------------------- studies
def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_run_study_deterministic(tmp_path):
    flags = ["run", "--case", "cantilever", "--dim", "2", "--h-inv", "4", "--dt", "1e-5",
             "--n-steps", "2", "--formulation", "both", "--stabilized", "both"]
    out = []
    for k in range(2):
        cfg = parse_config(flags=flags + ["--output", str(tmp_path / f"o{k}")])
        path, rows, ok = run_study(cfg)
        assert ok and len(rows) == 8
        out.append(path.read_bytes())
    assert out[0] == out[1]
    # the direct solver is the default for physics runs
    rows = read_rows(tmp_path / "o0" / "run.csv")
    assert all(float(r["mass_residual"]) < 1e-10 for r in rows)
    assert (tmp_path / "o0" / "cantilever_MHFE_stab.vtk").exists()


def test_run_study_gmres(tmp_path):
    cfg = parse_config(flags=["run", "--dim", "2", "--h-inv", "4", "--dt", "1e-5", "--solver", "gmres",
                              "--tol", "1e-10", "--vtk", "false", "--output", str(tmp_path)])
    _, rows, ok = run_study(cfg)
    assert ok and rows[0]["n_it"] > 0 and rows[0]["converged"]


def test_table2_small_and_deterministic(tmp_path):
    flags = ["table2", "--dim", "2", "--h-inv", "4", "--dt", "0.1", "--formulation", "both",
             "--stabilized", "both", "--timings", "false", "--dump-matrices", "true"]
    paths = []
    for k in range(2):
        path, rows, ok = run_study(parse_config(flags=flags + ["--output", str(tmp_path / f"t{k}")]))
        assert ok and len(rows) == 4
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    header = paths[0].read_text().splitlines()[0]
    assert header == "h_inv,formulation,stabilized,dt,n_it,T_p,T_s,T_t,converged"
    assert (tmp_path / "t0" / "matrices" / "MHFE_stab" / "MHFE_A_full.mtx").exists()


def test_table2_single_flag(tmp_path):
    cfg = parse_config(flags=["table2", "--dim", "2", "--h-inv", "4", "--output", str(tmp_path)])
    _, rows, _ = run_study(cfg)
    assert [r["stabilized"] for r in rows] == [True]


def test_eigencheck_small(tmp_path):
    cfg = parse_config(flags=["eigencheck", "--eig-meshes", "2", "--eig-dts", "0.1", "--output", str(tmp_path)])
    path, rows, ok = run_study(cfg)
    assert ok
    checks = {r["check"] for r in rows}
    assert {"unit multiplicity", "exact Schur unit deviation", "Ctilde SPD"} <= checks


def test_main_exit_codes(tmp_path, capsys):
    assert main(["--h-inv", "4"]) == 2
    assert "command" in capsys.readouterr().err
    code = main(["run", "--dim", "2", "--h-inv", "4", "--solver", "direct", "--vtk", "false",
                 "--output", str(tmp_path)])
    assert code == 0
    assert "all checks passed" in capsys.readouterr().out
