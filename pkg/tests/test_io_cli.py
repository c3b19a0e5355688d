import json

import numpy as np
import pytest

from geoxray import cli, io, synth
from geoxray.errors import ConfigError, IndexOutOfRange, NoConvergence
from geoxray.grids import Grid
from geoxray.layers import build_partition
from geoxray.metric import Domain, GriddedSpeed, analytic_speed
from geoxray.traveltime import Measurement

DOMAIN = Domain()
GRID = Grid.for_domain(DOMAIN, 0.08)


def test_speed_round_trip(tmp_path):
    v = np.random.default_rng(0).uniform(1, 2, (4, 5, 6))
    io.write_speed(tmp_path / "c.bin", GriddedSpeed([0.1, 0.2, 0.3], 0.05, v))
    back = io.read_speed(tmp_path / "c.bin")
    np.testing.assert_array_equal(back.values, v)
    np.testing.assert_array_equal(back.origin, [0.1, 0.2, 0.3])
    assert back.spacing[0] == 0.05


def test_grid_function_round_trip(tmp_path):
    gf = GRID.sample(lambda p: np.sin(p[:, 0]) / 3)
    io.write_grid_function(tmp_path / "f.bin", gf, DOMAIN)
    back = io.read_grid_function(tmp_path / "f.bin")
    np.testing.assert_array_equal(back.values, gf.values)
    np.testing.assert_array_equal(back.grid.support, GRID.support)
    np.testing.assert_array_equal(back.grid.inside, GRID.inside)


def test_field_file_rejects_truncation(tmp_path):
    io.write_field(tmp_path / "f.bin", np.ones((2, 2, 2)), np.zeros(3), 1.0)
    raw = (tmp_path / "f.bin").read_bytes()
    (tmp_path / "g.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        io.read_field(tmp_path / "g.bin")


def test_measurement_and_state_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    m = Measurement(rng.normal(size=(7, 6)), rng.normal(size=(7, 6)), rng.uniform(size=7) / 3)
    io.write_measurements(tmp_path / "m.csv", m, {"seed": 3})
    back, header = io.read_measurements(tmp_path / "m.csv")
    np.testing.assert_array_equal(back.as_array(), m.as_array())
    assert header["seed"] == "3"
    io.write_states(tmp_path / "s.csv", m.initial)
    np.testing.assert_array_equal(io.read_states(tmp_path / "s.csv")[0], m.initial)


def test_dataset_round_trip(tmp_path):
    part = build_partition(DOMAIN, GRID, 2, None)
    funcs = {n: synth.reference_function(n) for n in ("f1", "f4")}
    data = synth.xray_dataset(part, analytic_speed("radial_cosine"), funcs, 30, 0.01)
    io.write_xray_dataset(tmp_path / "d.csv", data)
    states, exit_time, values, names, _ = io.read_xray_dataset(tmp_path / "d.csv")
    np.testing.assert_array_equal(states, data.initial)
    np.testing.assert_array_equal(values, data.meta["values"])
    np.testing.assert_array_equal(exit_time, [g.exit_time for g in data.geodesics])
    assert names == ["f1", "f4"]


def test_config_round_trip(tmp_path):
    cfg = {"h": "0.05", "functions": "f1,f2", "speed_params": '{"value": 2.0}'}
    io.write_config(tmp_path / "c.cfg", cfg)
    assert io.read_config(tmp_path / "c.cfg") == cfg
    (tmp_path / "bad.cfg").write_text("no equals sign\n")
    with pytest.raises(ConfigError):
        io.read_config(tmp_path / "bad.cfg")


def test_config_file_then_flags(tmp_path):
    (tmp_path / "run.cfg").write_text("# comment\nh = 0.08\nlayers = 3\nfunctions = f2 f5\n")
    cfg = cli.load_config(io.read_config(tmp_path / "run.cfg"), {"layers": 2, "rays": None})
    assert (cfg.h, cfg.layers, cfg.functions, cfg.rays) == (0.08, 2, ("f2", "f5"), 900)
    with pytest.raises(ConfigError):
        cli.load_config({"nonsense": "1"}, {})
    with pytest.raises(ConfigError):
        cli.load_config({"h": "abc"}, {})


def test_noise_levels():
    values = np.random.default_rng(2).normal(size=200)
    clean = synth.add_noise(values, 0.0, np.random.default_rng(3))
    np.testing.assert_array_equal(clean, values)
    noisy = synth.add_noise(values, 0.05, np.random.default_rng(3))
    assert np.linalg.norm(noisy - values) / np.linalg.norm(values) == pytest.approx(0.05, abs=1e-12)
    np.testing.assert_array_equal(noisy, synth.add_noise(values, 0.05, np.random.default_rng(3)))
    with pytest.raises(ConfigError):
        synth.add_noise(values, -0.1, np.random.default_rng(3))


def test_reference_functions():
    p = np.array([[0.2, 0.3, 0.4]])
    assert synth.reference_function("f3")(p)[0] == pytest.approx(0.2 + 0.09 + 0.08)
    assert synth.reference_function("f5")(p)[0] == pytest.approx(0.2 + np.exp(0.5))
    with pytest.raises(ConfigError):
        synth.reference_function("f9")


def test_slices():
    const = GRID.sample(lambda p: np.full(len(p), 2.5))
    mid = GRID.shape[2] // 2
    table = io.slice_table(const, 2, mid)
    inside = ~np.isnan(table[:, 3])
    assert inside.any() and (~inside).any()
    np.testing.assert_array_equal(table[inside, 3], 2.5)
    f3 = GRID.sample(synth.reference_function("f3"))
    t3 = io.slice_table(f3, 0, GRID.shape[0] // 2)
    ok = ~np.isnan(t3[:, 3])
    np.testing.assert_allclose(t3[ok, 3], synth.reference_function("f3")(t3[ok, :3]), atol=1e-14)
    dist = np.linalg.norm(t3[:, :3] - DOMAIN.center, axis=1)
    assert np.all(np.isnan(t3[dist > DOMAIN.radius + 1e-12, 3]))
    with pytest.raises(IndexOutOfRange):
        io.slice_table(f3, 1, GRID.shape[1])


def test_speed_references(tmp_path):
    c = io.speed_from_ref('analytic:constant:{"value": 3.0}')
    assert c.speed(DOMAIN.center) == 3.0
    assert io.speed_from_ref("linear", {"c0": 2.0}).speed(np.zeros(3)) == pytest.approx(2.0)
    io.write_speed(tmp_path / "c.bin", GriddedSpeed(np.zeros(3), 0.5, np.full((3, 3, 3), 1.5)))
    assert io.speed_from_ref(str(tmp_path / "c.bin")).speed(np.full(3, 0.3)) == pytest.approx(1.5)


def _events(capsys):
    return [json.loads(line) for line in capsys.readouterr().out.splitlines()]


def test_cli_xray_pipeline(tmp_path, capsys):
    args = ["--h", "0.08", "--layers", "2", "--rays", "30", "--directions", "axes", "--out", str(tmp_path)]
    assert cli.main(["synth", "--functions", "f3"] + args) == 0
    assert cli.main(["invert-xray", "--dataset", str(tmp_path / "dataset.csv")] + args) == 0
    assert cli.main(["export", "--field", str(tmp_path / "recon_f3.bin"), "--axis", "2", "--index", "7",
                     "--out", str(tmp_path)]) == 0
    assert cli.main(["trace", "--rays", "5", "--out", str(tmp_path)]) == 0
    io.write_states(tmp_path / "s.csv", io.read_xray_dataset(tmp_path / "dataset.csv")[0][:4])
    assert cli.main(["forward", "--states", str(tmp_path / "s.csv"), "--functions", "f1",
                     "--out", str(tmp_path)]) == 0
    events = _events(capsys)
    assert [e["event"] for e in events if e["event"] != "done"] == [
        "synth", "invert-xray", "export", "trace", "forward"]
    inv = next(e for e in events if e["event"] == "invert-xray")
    assert len(inv["term_errors"]) == 5
    tr = next(e for e in events if e["event"] == "trace")
    assert tr["max_h_drift"] <= 1e-6
    assert (tmp_path / "slice_axis2_7.csv").exists() and (tmp_path / "geodesics.csv").exists()


def test_cli_exit_codes(tmp_path, capsys, monkeypatch):
    out = tmp_path / "never"
    assert cli.main(["synth", "--rays", "0", "--out", str(out)]) == 2
    assert not out.exists()
    assert cli.main(["synth", "--speed", "no_such_speed", "--out", str(out)]) == 2
    assert cli.main(["invert-xray", "--dataset", str(tmp_path / "missing.csv"), "--out", str(out)]) == 4

    def boom(cfg, states_path=None):
        raise NoConvergence("forced")
    monkeypatch.setattr(cli, "cmd_trace", boom)
    assert cli.main(["trace", "--out", str(out)]) == 3
    kinds = [e["kind"] for e in _events(capsys) if e["event"] == "error"]
    assert kinds[-1] == "NoConvergence"
