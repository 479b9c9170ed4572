import json
import subprocess
import sys

import pytest

from agentattn.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_verify_full_suite_passes(capsys):
    code, out, err = run(capsys, "verify", "--seed", "7", "--trials", "50")
    assert code == 0
    lines = [json.loads(x) for x in out.splitlines()]
    assert lines and all(r["passed"] for r in lines)
    assert "checks passed" in err


def test_verify_injection_fails_exactly_one_and_reports_it_last(capsys):
    code, out, _ = run(capsys, "verify", "--inject", "rowsum")
    assert code == 1
    lines = [json.loads(x) for x in out.splitlines()]
    failed = [r for r in lines if not r["passed"]]
    assert len(failed) == 1
    assert lines[-1] == failed[0]
    assert failed[0]["name"] == "row_stochastic"


@pytest.mark.parametrize("argv", [
    ["verify", "--trials", "0"],
    ["verify", "--trials", "x"],
    ["verify", "--inject", "no-such-property"],
    ["bench", "--Ns", "512,256"],
    ["bench", "--Ns", "64,a"],
    ["bench", "--Ns", "16", "--n", "49"],
    ["bench", "--Ns", "64", "--repeats", "3"],
    ["params", "--preset", "missing-file.json"],
    ["params"],
    ["frobnicate"],
    [],
])
def test_usage_errors_exit_2(capsys, argv):
    code, _, _ = run(capsys, *argv)
    assert code == 2


def test_verify_out_file(tmp_path, capsys):
    path = tmp_path / "r.jsonl"
    code, out, _ = run(capsys, "verify", "--out", str(path))
    assert code == 0 and out == ""
    assert all(json.loads(x)["passed"] for x in path.read_text().splitlines())


def test_bench_three_rows(capsys):
    code, out, err = run(capsys, "bench", "--kernel", "agent", "--n", "49", "--d", "64", "--Ns", "256,512,1024")
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "kernel,N,n,d,dtype,wall_ns,mac_count"
    assert len(lines) == 4
    assert lines[1].startswith("agent,256,49,64,f32,")
    assert "slope" in json.loads(err.strip().splitlines()[-1])["agent"]


def test_bench_heads_and_dtype(capsys):
    code, out, _ = run(capsys, "bench", "--kernel", "softmax", "--Ns", "32,64", "--d", "8", "--heads", "2",
                       "--dtype", "f64")
    assert code == 0
    row = out.splitlines()[1].split(",")
    assert row[4] == "f64" and int(row[6]) == 2 * 2 * 32 * 32 * 8


def test_params_deit_t(capsys):
    code, out, _ = run(capsys, "params", "--preset", "agent-deit-t.json")
    assert code == 0
    data = json.loads(out)
    assert abs(data["params"]["total"] - 6.0e6) / 6.0e6 < 0.03
    assert data["flops_2mac"] == 2 * data["flops"]


def test_params_deit_s_448(capsys):
    code, out, _ = run(capsys, "params", "--preset", "agent-deit-s-448")
    assert code == 0
    assert abs(json.loads(out)["params"]["total"] - 23.1e6) / 23.1e6 < 0.03


def test_params_preset_from_path(tmp_path, capsys):
    from agentattn.model_zoo import load_preset

    path = tmp_path / "mine.json"
    path.write_text(load_preset("agent-deit-t").replace(name="mine", depth=1, agent_n=49).to_json())
    code, out, _ = run(capsys, "params", "--preset", str(path))
    assert code == 0 and json.loads(out)["preset"] == "mine"


def test_params_deterministic(capsys):
    _, a, _ = run(capsys, "params", "--preset", "agent-deit-t", "--seed", "5")
    _, b, _ = run(capsys, "params", "--preset", "agent-deit-t", "--seed", "5")
    assert a == b


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "agentattn", "params", "--preset", "nope"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "nope" in proc.stderr
