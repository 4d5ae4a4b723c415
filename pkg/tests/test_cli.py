import csv
import io
import json

import pytest

from trainplan.arch import ModelSpec
from trainplan.cli import main, parse_vary, InputError
from trainplan.cluster import ClusterSpec
from trainplan.memory import MemoryReport
from trainplan.parallel import ParallelConfig
from trainplan.perf import EfficiencyKnobs, ThroughputEstimate
from trainplan.pipesim import parse_timeline


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_plan_1t_recipe(capsys):
    code, out, _ = run(capsys, "plan", "--model", "1T", "--preset", "frontier", "--tp", "8", "--pp", "64",
                       "--mbs", "1", "--gbs", "1600", "--zero", "1", "--nodes", "128")
    assert code == 0
    plan = json.loads(out)
    assert plan["derived"]["dp"] == 2 and plan["derived"]["m"] == 800
    assert plan["oom"] is False
    assert plan["warnings"] == []


def test_plan_round_trips_into_types(capsys):
    code, out, _ = run(capsys, "plan", "--model", "22B", "--tp", "4", "--pp", "2", "--gbs", "16")
    assert code == 0
    plan = json.loads(out)
    assert ModelSpec.from_dict(plan["model"]).to_dict() == plan["model"]
    assert ClusterSpec.from_dict(plan["cluster"]).to_dict() == plan["cluster"]
    assert ParallelConfig.from_dict(plan["parallel"]).to_dict() == plan["parallel"]
    assert EfficiencyKnobs.from_dict(plan["knobs"]).to_dict() == plan["knobs"]
    assert MemoryReport.from_dict(plan["memory"]).to_dict() == plan["memory"]
    assert ThroughputEstimate.from_dict(plan["estimate"]).to_dict() == plan["estimate"]


def test_plan_oom_is_exit_zero(capsys):
    code, out, _ = run(capsys, "plan", "--model", "1T", "--tp", "1", "--pp", "1", "--nodes", "1")
    assert code == 0
    assert json.loads(out)["oom"] is True


def test_plan_violation_exit_one(capsys):
    code, out, err = run(capsys, "plan", "--model", "175B", "--pp", "13", "--nodes", "13")
    assert code == 1
    assert "L mod pp" in err
    assert out == ""


def test_plan_saturation_warning(capsys):
    code, out, _ = run(capsys, "plan", "--model", "22B", "--pp", "8", "--gbs", "1")
    assert code == 0
    assert any("not saturated" in w for w in json.loads(out)["warnings"])


def test_config_file_and_flag_precedence(capsys, tmp_path):
    cfg = tmp_path / "plan.json"
    cfg.write_text(json.dumps({
        "model": {"num_layers": 4, "hidden_size": 256, "num_heads": 8, "seq_length": 128},
        "cluster": "frontier",
        "parallel": {"tp": 2, "pp": 2, "gbs": 8},
        "knobs": {"kernel_efficiency": 0.3},
    }))
    code, out, _ = run(capsys, "plan", "--config", str(cfg), "--tp", "4")
    assert code == 0
    plan = json.loads(out)
    assert plan["parallel"]["tp"] == 4          # flag beats file
    assert plan["parallel"]["pp"] == 2          # file beats default
    assert plan["model"]["hidden_size"] == 256  # file beats preset
    assert plan["knobs"]["kernel_efficiency"] == 0.3


@pytest.mark.parametrize("content", ["{not json", "[1, 2]", '{"model": "13B"}', '{"parallel": {"tp": 0}}'])
def test_bad_config_exit_two(capsys, tmp_path, content):
    cfg = tmp_path / "bad.json"
    cfg.write_text(content)
    code, _, err = run(capsys, "plan", "--config", str(cfg))
    assert code == 2
    assert err.startswith("error:")


def test_missing_file_exit_two(capsys, tmp_path):
    assert run(capsys, "plan", "--config", str(tmp_path / "nope.json"))[0] == 2
    assert run(capsys, "scaling", "--mode", "weak", "--series", str(tmp_path / "nope.csv"))[0] == 2


def test_unknown_subcommand_and_flag(capsys):
    assert run(capsys, "bogus")[0] == 2
    assert run(capsys, "plan", "--frobnicate")[0] == 2


def test_simulate_gpipe(capsys):
    code, out, _ = run(capsys, "simulate", "--kind", "gpipe", "-p", "4", "-m", "4")
    assert code == 0
    tl = parse_timeline(out, num_devices=4)
    assert tl.bubble_fraction == pytest.approx(0.75, abs=1e-12)


def test_simulate_to_file_emits_summary(capsys, tmp_path):
    path = tmp_path / "t.csv"
    code, out, _ = run(capsys, "simulate", "--kind", "interleaved", "-p", "4", "-m", "8", "-v", "2", "--out", str(path))
    assert code == 0
    summary = json.loads(out)
    assert summary["analytic_bubble"] == pytest.approx(3 / 16)
    assert parse_timeline(path.read_text()).bubble_fraction == pytest.approx(summary["bubble_fraction"])


def test_simulate_bad_shape(capsys):
    assert run(capsys, "simulate", "--kind", "gpipe", "-p", "4", "-m", "4", "-v", "2")[0] == 1
    assert run(capsys, "simulate", "--kind", "zigzag", "-p", "4", "-m", "4")[0] == 1


def test_sweep(capsys):
    code, out, _ = run(capsys, "sweep", "--model", "22B", "--tp", "4", "--pp", "4", "--nodes", "2", "--vary", "gbs=8..64")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [int(r["gbs"]) for r in rows] == [8, 16, 32, 64]
    vals = [float(r["peak_fraction"]) for r in rows]
    assert vals == sorted(vals)


def test_sweep_marks_invalid_points(capsys):
    code, out, _ = run(capsys, "sweep", "--model", "22B", "--nodes", "1", "--vary", "tp=1,3,8")
    assert code == 0
    status = [r["status"] for r in csv.DictReader(io.StringIO(out))]
    assert status[1] == "invalid"


def test_parse_vary():
    assert parse_vary("gbs=64..2048") == ("gbs", [64, 128, 256, 512, 1024, 2048])
    assert parse_vary("zero=0,1") == ("zero_stage", [0, 1])
    for bad in ("gbs", "color=1,2", "gbs=a..b", "gbs=8..4"):
        with pytest.raises(InputError):
            parse_vary(bad)


def test_search_outputs(capsys, tmp_path):
    out_csv = tmp_path / "trials.csv"
    code, out, _ = run(capsys, "search", "--budget", "20", "--seed", "3", "--out", str(out_csv))
    assert code == 0
    rows = list(csv.reader(io.StringIO(out_csv.read_text())))
    assert rows[0] == ["trial", "pp", "tp", "mbs", "gas", "zero1", "nodes", "objective", "failure_kind"]
    assert len(rows) == 21
    best = json.loads(out)["best"]
    assert best["failure_kind"] == "NONE"


def test_search_seed_from_env(capsys, tmp_path, monkeypatch):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    monkeypatch.setenv("TRAINPLAN_SEED", "9")
    run(capsys, "search", "--budget", "20", "--out", str(a))
    run(capsys, "search", "--budget", "20", "--seed", "9", "--out", str(b))
    assert a.read_bytes() == b.read_bytes()
    monkeypatch.setenv("TRAINPLAN_SEED", "nine")
    assert run(capsys, "search", "--budget", "5", "--out", str(a))[0] == 2


def test_search_custom_space(capsys, tmp_path):
    space = tmp_path / "space.json"
    space.write_text(json.dumps({"pp": [4], "tp": [8], "mbs": {"low": 1, "high": 2}, "gas": [5],
                                 "zero1": [True], "nodes": [12]}))
    code, out, _ = run(capsys, "search", "--space", str(space), "--budget", "10", "--seed", "1", "--out", str(tmp_path / "t.csv"))
    assert code == 0
    assert json.loads(out)["best"]["pp"] == 4


def test_flops_counters_and_log(capsys, tmp_path):
    counters = tmp_path / "c.csv"
    counters.write_text("SQ_INSTS_VALU_MFMA_MOPS_F16,SQ_INSTS_VALU_FMA_F32\n1000,10\n")
    code, out, _ = run(capsys, "flops", "--counters", str(counters))
    assert code == 0
    assert json.loads(out)["hw_flops"] == 512 * 1000 + 64 * 2 * 10
    code, out, _ = run(capsys, "flops", "--counters", str(counters), "--coeff-mode", "frontier-guide")
    assert json.loads(out)["hw_flops"] == 1024 * 1000 + 64 * 2 * 10

    log = tmp_path / "run.log"
    log.write_text(" iteration 1/ 2 | elapsed time per iteration (ms): 1000.0 | TFLOPs: 140.18 |\n")
    code, out, _ = run(capsys, "flops", "--log", str(log), "--hw-tflops", "69.24", "--cfg-mbs", "1", "--ds-mbs", "2")
    assert code == 0
    report = json.loads(out)
    assert report["model_tflops"] == 140.18
    assert report["diagnosis"]["status"] == "mismatch"


def test_flops_needs_input(capsys, tmp_path):
    assert run(capsys, "flops")[0] == 2
    bad = tmp_path / "c.csv"
    bad.write_text("SQ_INSTS_VALU_ADD_F16\n-1\n")
    assert run(capsys, "flops", "--counters", str(bad))[0] == 2


def test_scaling(capsys, tmp_path):
    series = tmp_path / "s.csv"
    series.write_text("gpus,iter_time\n128,1.0\n1024,0.13899699766485043\n")
    code, out, _ = run(capsys, "scaling", "--mode", "strong", "--series", str(series))
    assert code == 0
    assert json.loads(out)["efficiency"][1] == pytest.approx(0.8993, abs=1e-4)


def test_topology(capsys):
    code, out, _ = run(capsys, "topology", "--nodes", "2")
    assert code == 0
    rows = list(csv.reader(io.StringIO(out)))
    assert len(rows) == 17
    assert float(rows[1][2]) == 200e9 and float(rows[1][3]) == 100e9 and float(rows[1][9]) == 25e9
