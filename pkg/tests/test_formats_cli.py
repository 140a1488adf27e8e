import csv
import json

import numpy as np
import pytest

from ebsdflow import cli, formats, synth
from ebsdflow.experiment import ConfigError, ExperimentConfig, apply_overrides, error_map, load_config, run_experiment
from ebsdflow.field import DisplacementField
from ebsdflow.formats import ParseError

TINY_SOLVER = {"base_iterations": 2, "mu0": 16.0, "s_min": 2.0}


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


class TestOrientationFiles:
    def test_round_trip_bit_exact(self, tmp_path):
        img = synth.make_grain_image(9, 4, "622", 3)
        p = tmp_path / "a.txt"
        formats.write_orientation_image(p, img)
        back = formats.read_orientation_image(p)
        np.testing.assert_array_equal(back.data, img.data)
        assert back.group.name == "622" and len(back.group) == 24
        assert formats.format_orientation_image(back) == p.read_text()

    def test_any_record_order(self, tmp_path):
        img = synth.make_grain_image(3, 2, "trivial", 0)
        lines = formats.format_orientation_image(img).splitlines()
        p = write_lines(tmp_path / "r.txt", [lines[0], "# comment", ""] + lines[1:][::-1])
        np.testing.assert_array_equal(formats.read_orientation_image(p).data, img.data)

    def test_normalizes(self, tmp_path):
        rows = [f"{i} {j} 2 0 0 0" for j in range(2) for i in range(2)]
        img = formats.read_orientation_image(write_lines(tmp_path / "n.txt", ["EBSDGRID v1 2 2 432"] + rows))
        np.testing.assert_array_equal(img.data[..., 0], 1.0)

    @pytest.mark.parametrize("bad,line,msg", [
        ("1 0 0 0 0 0", 3, "not normalizable"),
        ("1 0 1 0 0", 3, "expected 6 fields"),
        ("1 0 a 0 0 0", 3, "non-numeric"),
        ("5 0 1 0 0 0", 3, "outside"),
        ("0 0 1 0 0 0", 3, "duplicate"),
        ("1 0 nan 0 0 0", 3, "non-finite"),
    ])
    def test_bad_rows(self, tmp_path, bad, line, msg):
        lines = ["EBSDGRID v1 2 2 trivial", "0 0 1 0 0 0", bad, "0 1 1 0 0 0", "1 1 1 0 0 0"]
        with pytest.raises(ParseError, match=msg) as err:
            formats.read_orientation_image(write_lines(tmp_path / "b.txt", lines))
        assert err.value.line == line

    def test_missing_cells_and_header(self, tmp_path):
        lines = ["EBSDGRID v1 2 2 trivial", "0 0 1 0 0 0", "1 0 1 0 0 0"]
        with pytest.raises(ParseError, match="missing"):
            formats.read_orientation_image(write_lines(tmp_path / "m.txt", lines))
        with pytest.raises(ParseError, match="unknown phase") as err:
            formats.read_orientation_image(write_lines(tmp_path / "p.txt", ["EBSDGRID v1 2 2 xyz"]))
        assert err.value.line == 1
        with pytest.raises(ParseError, match="header"):
            formats.read_orientation_image(write_lines(tmp_path / "h.txt", ["GRID 2 2"]))
        (tmp_path / "e.txt").write_text("")
        with pytest.raises(ParseError, match="empty"):
            formats.read_orientation_image(tmp_path / "e.txt")


class TestOtherFormats:
    def test_displacement_round_trip(self, tmp_path):
        u = DisplacementField(2.0, np.random.default_rng(0).normal(size=(5, 4, 2)))
        formats.write_displacement(tmp_path / "u.txt", u)
        v = formats.read_displacement(tmp_path / "u.txt")
        assert v.s == 2.0
        np.testing.assert_array_equal(v.coeffs, u.coeffs)

    def test_ppm_round_trip(self, tmp_path):
        rgb = np.random.default_rng(1).integers(0, 256, size=(5, 3, 3)).astype(np.uint8)
        formats.write_ppm(tmp_path / "x.ppm", rgb)
        assert (tmp_path / "x.ppm").read_bytes().startswith(b"P6\n5 3\n255\n")
        np.testing.assert_array_equal(formats.read_ppm(tmp_path / "x.ppm"), rgb)

    def test_colorize(self):
        q = np.array([[1, 0, 0, 0], [0, 2 ** -0.5, 2 ** -0.5, 0], [0, 0, 0, 1]], dtype=float)
        rgb = formats.colorize(q)
        np.testing.assert_array_equal(rgb[0], [0, 0, 0])
        assert rgb[1, 0] == rgb[1, 1] > 0 and rgb[1, 2] == 0
        np.testing.assert_array_equal(rgb[2], [0, 0, 255])

    def test_colorize_scalar_clips(self):
        rgb = formats.colorize_scalar(np.array([-5.0, 0.0, 20.0, 99.0]))
        np.testing.assert_array_equal(rgb[0], rgb[1])
        np.testing.assert_array_equal(rgb[2], rgb[3])
        np.testing.assert_array_equal(rgb[3], [255, 0, 0])

    def test_grid_polylines(self, tmp_path):
        formats.write_grid_polylines(tmp_path / "g.txt", DisplacementField.zeros(2.0, 4, 2))
        blocks = (tmp_path / "g.txt").read_text().strip().split("\n\n")
        assert len(blocks) == 2 + 3
        assert blocks[0].splitlines()[-1] == "4.0 0.0"


class TestErrorMap:
    def test_rigid_instance(self):
        inst = synth.make_rotated_square(64)
        x = synth.node_points(64, 64)
        lo, hi = inst.square
        inner = np.all((x > lo + 2) & (x < hi - 2), axis=-1)
        aware = error_map(inst.I1, inst.I2, inst.u_true)
        naive = error_map(inst.I1, inst.I2, inst.u_true, mode="naive")
        assert aware[inner].max() < 0.5
        np.testing.assert_allclose(naive[inner], 30.0, atol=0.5)
        with pytest.raises(ValueError):
            error_map(inst.I1, inst.I2, inst.u_true, mode="other")


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig(synth={"kind": "identical", "size": 16})
        p = cfg.energy_params()
        assert (p.alpha1, p.alpha2, p.beta, p.mu) == (0.1, 0.5, 0.1, 1.0)

    @pytest.mark.parametrize("d", [
        {},
        {"synth": {"kind": "nope"}},
        {"synth": {"kind": "identical"}, "warp": "sideways"},
        {"synth": {"kind": "identical"}, "params": {"mu": -1}},
        {"synth": {"kind": "identical"}, "solver": {"iters": 3}},
        {"synth": {"kind": "identical"}, "colour": "red"},
        {"inputs": {"I1": "a"}},
    ])
    def test_invalid(self, d):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(d)

    def test_overrides(self, tmp_path):
        d = {"synth": {"kind": "identical"}, "solver": {"base_iterations": 10}}
        out = apply_overrides(d, ["solver.base_iterations=3", "params.variant=TV2", "synth.size=8"])
        assert out["solver"]["base_iterations"] == 3 and out["params"]["variant"] == "TV2"
        assert d["solver"]["base_iterations"] == 10
        with pytest.raises(ConfigError):
            apply_overrides(d, ["novalue"])
        p = tmp_path / "c.json"
        p.write_text(json.dumps(d))
        assert load_config(p, ["synth.size=8"]).synth["size"] == 8
        p.write_text("{bad")
        with pytest.raises(ConfigError, match="invalid JSON"):
            load_config(p)


def identical_config(tmp_path, name="run"):
    return ExperimentConfig.from_dict({
        "output": str(tmp_path / name),
        "synth": {"kind": "identical", "size": 16, "group": "432", "n_grains": 5},
        "solver": TINY_SOLVER,
    })


class TestRunExperiment:
    def test_identical_images(self, tmp_path):
        summary = run_experiment(identical_config(tmp_path))
        assert summary["error_deg"]["mean"] < 0.1
        out = tmp_path / "run"
        for name in ("config.json", "I1.ppm", "I2.ppm", "trace.csv", "errormap.txt", "errormap.ppm", "u1.txt",
                     "du1_dx1.txt", "du1_dx1.ppm", "reconstructed.ppm", "summary.json", "u_level0.txt",
                     "grid_level0.txt"):
            assert (out / name).exists(), name
        assert json.loads((out / "summary.json").read_text())["numerical_failure"] is False

    def test_trace_columns_and_rerun(self, tmp_path):
        run_experiment(identical_config(tmp_path, "a"))
        run_experiment(identical_config(tmp_path, "b"))
        a = (tmp_path / "a" / "trace.csv").read_bytes()
        assert a == (tmp_path / "b" / "trace.csv").read_bytes()
        rows = list(csv.DictReader(a.decode().splitlines()))
        assert list(rows[0]) == list(formats.TRACE_COLUMNS)
        assert len(rows) == 2 + 4  # levels s = 4, 2
        mu = [16.0] * 2 + [32.0] * 4
        for r, m in zip(rows, mu):
            v = {k: float(r[k]) for k in ("data", "tv1", "tv2", "barrier", "penalty", "energy", "total")}
            assert v["energy"] == pytest.approx(v["data"] + 0.1 * v["tv1"] + 0.5 * v["tv2"] + 0.1 * v["barrier"],
                                                rel=1e-12)
            assert v["total"] == pytest.approx(v["energy"] + 0.5 * m * v["penalty"], rel=1e-12, abs=1e-12)

    def test_tearing_panels(self, tmp_path):
        cfg = ExperimentConfig.from_dict({
            "output": str(tmp_path / "tear"),
            "synth": {"kind": "tearing_square", "size": 32},
            "solver": {"levels": [[8, 4, 1, 16.0], [4, 2, 1, 32.0]]},
        })
        summary = run_experiment(cfg)
        out = tmp_path / "tear"
        assert (out / "u1.ppm").exists() and (out / "du1_dx1.ppm").exists() and (out / "reconstructed.ppm").exists()
        assert "error_deg_square" in summary


class TestCLI:
    def test_synth_errormap_render(self, tmp_path, capsys):
        d = tmp_path / "inst"
        assert cli.main(["synth", "rotated_square", "--size", "32", "--out", str(d)]) == 0
        assert cli.main(["errormap", str(d / "I1.txt"), str(d / "I2.txt"), str(d / "u_true.txt"),
                         "--out", str(tmp_path / "e.ppm"), "--txt", str(tmp_path / "e.txt")]) == 0
        assert "mean" in capsys.readouterr().out
        assert np.loadtxt(tmp_path / "e.txt").shape == (33, 33)
        assert cli.main(["render", str(d / "I2.txt"), "--out", str(tmp_path / "i.ppm")]) == 0
        assert cli.main(["render", str(tmp_path / "e.txt"), "--out", str(tmp_path / "t.ppm"), "--vmax", "20"]) == 0
        assert formats.read_ppm(tmp_path / "t.ppm").shape == (33, 33, 3)

    def test_solve(self, tmp_path, capsys):
        cfgp = tmp_path / "c.json"
        cfgp.write_text(json.dumps({"synth": {"kind": "identical", "size": 16}, "solver": TINY_SOLVER}))
        assert cli.main(["solve", str(cfgp), "--out", str(tmp_path / "o"), "--set", "solver.base_iterations=1"]) == 0
        assert json.loads(capsys.readouterr().out)["iterations"] == 1 + 2

    def test_exit_codes(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("EBSDGRID v1 2 2 trivial\n0 0 0 0 0 0\n")
        assert cli.main(["render", str(bad), "--out", str(tmp_path / "x.ppm")]) == cli.EXIT_PARSE
        assert cli.main(["solve", str(tmp_path / "missing.json")]) == cli.EXIT_CONFIG
        cfgp = tmp_path / "c.json"
        cfgp.write_text(json.dumps({"synth": {"kind": "identical"}, "warp": "sideways"}))
        assert cli.main(["solve", str(cfgp)]) == cli.EXIT_CONFIG
        with pytest.raises(SystemExit) as exc:
            cli.main(["frobnicate"])
        assert exc.value.code == 2

    def test_numerical_failure_exit(self, tmp_path, monkeypatch):
        from ebsdflow import experiment

        def failing(cfg, callback=None):
            return {"numerical_failure": True}

        monkeypatch.setattr(cli, "run_experiment", failing)
        cfgp = tmp_path / "c.json"
        cfgp.write_text(json.dumps({"synth": {"kind": "identical"}}))
        assert cli.main(["solve", str(cfgp)]) == cli.EXIT_NUMERICAL
        assert experiment.run_experiment is not failing
