import csv
import json
import math
import shutil
import zlib
from pathlib import Path

import numpy as np
import pytest
import yaml

from stab import runner
from stab.cli import main
from stab.config import DEFAULTS, ConfigError, load_scenario, scenario_from_dict, sub_seed
from stab.report import EXIT_CONFIG, EXIT_OK, EXIT_PROPERTY, Check, RunReport, margin_check, revalidate
from stab.stabilize import ShellTable

SCEN = Path(__file__).resolve().parents[1] / "scenarios"

SMALL = {
    "version": 1, "name": "small", "dim": 2, "n": 12, "r": 0.2, "R": 2.0,
    "initial": {"w2": 2.0, "mean": [1.5, 0.0]},
    "horizon": 4.0, "partition": {"delta": 0.04}, "infconv": {"probes": 8},
    "outputs": {"snapshot_stride": 20, "figures": False},
}


def small(**changes):
    return scenario_from_dict(SMALL).replace(**changes) if changes else scenario_from_dict(SMALL)


class TestScenario:
    def test_defaults_filled(self):
        sc = small()
        assert sc["mode"] == "local" and sc["field"]["label"] == "linear_steer"
        assert sc["integrator"]["max_dt"] == DEFAULTS["integrator"]["max_dt"]
        assert sc["partition"]["rule"] == "uniform"

    def test_yaml_round_trip(self, tmp_path):
        sc = small()
        p = tmp_path / "s.yaml"
        p.write_text(yaml.safe_dump(sc.data))
        back = load_scenario(p)
        assert back.data == sc.data and back.hash == sc.hash

    def test_shipped_scenarios_load(self):
        names = {p.stem for p in SCEN.glob("*.yaml")}
        assert {"local_linear", "global_linear", "negative_c0", "constant_control"} <= names
        for p in SCEN.glob("*.yaml"):
            load_scenario(p)

    @pytest.mark.parametrize("change, word", [
        ({"r": 3.0}, "r must be smaller than R"),
        ({"field": {"label": "nope"}}, "linear_steer"),
        ({"bogus": 1}, "bogus"),
        ({"partition": {"rule": "random"}}, "partition.rule"),
        ({"initial": {"kind": "file", "path": "missing.csv"}}, "initial.path"),
        ({"version": 2}, "version"),
        ({"n": 0}, "n must"),
        ({"shells": {"i_min": 1}}, "shells"),
    ])
    def test_invalid(self, change, word):
        raw = json.loads(json.dumps(SMALL))
        for k, v in change.items():
            if isinstance(v, dict) and isinstance(raw.get(k), dict):
                raw[k].update(v)
            else:
                raw[k] = v
        with pytest.raises(ConfigError, match=word):
            scenario_from_dict(raw)

    def test_missing_required(self):
        raw = dict(SMALL)
        del raw["R"]
        with pytest.raises(ConfigError, match="R"):
            scenario_from_dict(raw)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_scenario(tmp_path / "none.yaml")

    def test_sub_seeds(self):
        assert sub_seed(0, "initial") == sub_seed(0, "initial")
        assert len({sub_seed(0, n) for n in runner.SEED_NAMES}) == len(runner.SEED_NAMES)
        assert sub_seed(0, "initial") != sub_seed(1, "initial")
        assert sub_seed(5, "x") == int(np.random.SeedSequence([5, zlib.crc32(b"x")]).generate_state(1)[0])

    def test_initial_radius(self):
        m = small().initial()
        assert m.n == 12
        assert math.sqrt(np.mean(np.sum(m.points**2, axis=1))) == pytest.approx(2.0, rel=1e-12)


class TestReport:
    def test_margin_check(self):
        assert margin_check("a", [0.1, float("nan"), -1e-10], 1e-9).passed
        c = margin_check("a", [0.1, -1e-3], 1e-9)
        assert not c.passed and c.worst_margin == -1e-3 and c.trials == 2
        assert margin_check("a", [], 0.0).passed

    def test_duplicate_check(self):
        rep = RunReport("x", {}, "h")
        rep.add(Check("a", 1, 0.0, True))
        with pytest.raises(ValueError):
            rep.add(Check("a", 1, 0.0, True))

    def test_json_safe(self, tmp_path):
        rep = RunReport("x", {}, "h", constants={"T": float("inf")})
        rep.add(Check("a", 0, float("nan"), True))
        d = RunReport.read(rep.write(tmp_path / "r.json"))
        assert d["constants"]["T"] == "inf" and d["status"] == "pass"


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("small")
    return runner.simulate(small(**{"outputs.figures": True}), out), out


class TestSimulate:
    def test_passes_and_writes(self, small_run):
        rep, out = small_run
        assert rep.exit_code == EXIT_OK, rep.error
        for name in ("report.json", "trajectory.csv", "w2.png", "phi.png"):
            assert (out / name).is_file()
        assert any((out / "snapshots").iterdir())

    def test_report_contents(self, small_run):
        _, out = small_run
        d = RunReport.read(out / "report.json")
        for key in ("scenario", "scenario_hash", "seeds", "parameters", "moduli", "constants", "checks", "verdicts",
                    "timings"):
            assert key in d
        assert {"S", "I", "Rcal"} <= set(d["moduli"])
        assert {"M_ke", "N_ke", "Delta"} <= set(d["constants"])
        names = {c["name"] for c in d["checks"]}
        assert {"pairing_bound", "phi_kappa_decrease", "step_bound", "knot_decrease"} <= names
        assert all("trials" in c and "worst_margin" in c for c in d["checks"])

    def test_revalidate_consistent(self, small_run):
        assert revalidate(small_run[1]) == (True, [])

    def test_revalidate_detects_tampering(self, small_run, tmp_path):
        out = tmp_path / "copy"
        shutil.copytree(small_run[1], out)
        d = json.loads((out / "report.json").read_text())
        for c in d["checks"]:
            if c["name"] == "step_bound":
                c["worst_margin"] = 123.0
        (out / "report.json").write_text(json.dumps(d))
        ok, problems = revalidate(out)
        assert not ok and any("step_bound" in p for p in problems)

    def test_deterministic(self, small_run, tmp_path):
        runner.simulate(small(**{"outputs.figures": True}), tmp_path)
        assert (tmp_path / "trajectory.csv").read_bytes() == (small_run[1] / "trajectory.csv").read_bytes()

    def test_seed_changes_start(self, small_run, tmp_path):
        runner.simulate(small(seed=1), tmp_path)
        assert (tmp_path / "trajectory.csv").read_bytes() != (small_run[1] / "trajectory.csv").read_bytes()


class TestExitCodes:
    def test_negative_control_fails_step_bound(self, tmp_path):
        sc = load_scenario(SCEN / "negative_c0.yaml")
        rep = runner.verify(sc, "lemmas", tmp_path)
        assert rep.exit_code == EXIT_PROPERTY
        assert not rep.check("step_bound").passed

    def test_constant_control_fails_reach(self, tmp_path):
        sc = load_scenario(SCEN / "constant_control.yaml").replace(**{"outputs.figures": False})
        rep = runner.simulate(sc, tmp_path)
        assert rep.exit_code == EXIT_PROPERTY
        assert {v["name"]: v["status"] for v in rep.verdicts["verdicts"]}["reach"] == "fail"

    def test_config_error_exit(self, tmp_path):
        p = tmp_path / "bad.yaml"
        p.write_text(yaml.safe_dump(dict(SMALL, r=5.0)))
        assert main(["simulate", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_infeasible_overrides_exit(self, tmp_path):
        rep = runner.simulate(small(**{"overrides.kappa": 0.5, "overrides.eps": 0.01}), tmp_path)
        assert not rep.check("selector_conditions").passed
        assert rep.exit_code != EXIT_OK
        assert (tmp_path / "report.json").is_file()


class TestVerify:
    def test_transport_suite(self, tmp_path):
        rep = runner.verify(small(), "transport", tmp_path)
        assert rep.exit_code == EXIT_OK
        assert rep.check("permutation_oracle").detail["agree"] == 50
        assert rep.check("symmetry").trials == 200

    def test_proximal_suite_small(self, tmp_path):
        rep = runner.verify(small(**{"verify.trials": 3, "verify.probes": 16}), "proximal", tmp_path)
        assert rep.exit_code == EXIT_OK, [c for c in rep.checks if not c.passed]
        assert rep.check("subgradient_negative_control").passed


class TestShellsAndSweep:
    def test_shells_command(self, tmp_path):
        sc = small(mode="global", **{"shells.i_min": -2, "shells.i_max": 3})
        assert main(["shells", "--out", str(tmp_path), _write(sc, tmp_path)]) == EXIT_OK
        tab = ShellTable.from_csv(tmp_path / "shells.csv")
        assert tab.indices == list(range(-2, 4))
        for i in tab.indices[:-1]:
            assert tab.Q[i + 1] / tab.Q[i] == pytest.approx(2 * math.sqrt(2), rel=1e-12)
        with open(tmp_path / "shells.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert all(r["twoQ_le_Rcal_next"] == "true" for r in rows)

    def test_empty_sweep(self, tmp_path):
        rows = runner.sweep(small(), "N", [], tmp_path)
        assert rows == []
        assert (tmp_path / "sweep.csv").read_text().strip() == ",".join(runner.SWEEP_COLUMNS)

    def test_n_sweep_time_to_ball(self, tmp_path):
        rows = runner.sweep(small(), "N", ["8", "16", "24"], tmp_path, jobs=2)
        assert [r["exit_code"] for r in rows] == [0, 0, 0]
        t = np.array([r["time_to_ball"] for r in rows], dtype=float)
        assert (t.max() - t.min()) / t.mean() < 0.10

    def test_bad_axis(self, tmp_path):
        with pytest.raises(ConfigError):
            runner.sweep(small(), "mass", [1], tmp_path)


def _write(sc, d: Path) -> str:
    p = d / "scenario.yaml"
    p.write_text(yaml.safe_dump(sc.data))
    return str(p)


def test_cli_simulate_and_revalidate(tmp_path, capsys):
    cfg = _write(small(horizon=2.0), tmp_path)
    code = main(["simulate", cfg, "--out", str(tmp_path / "o")])
    text = capsys.readouterr().out
    assert "step_bound" in text and "PASS" in text
    assert code in (EXIT_OK, EXIT_PROPERTY)
    assert main(["revalidate", str(tmp_path / "o")]) == EXIT_OK
