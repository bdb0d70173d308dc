import json
import subprocess
import sys

import pytest

from chainkv.cli import CONFIG_ERROR, OK, VIOLATION, main, parse_args

SIM = ["sim", "--seed", "7", "--txns", "40", "--servers", "4", "--clients", "4"]


def run_cli(capsys, argv):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_sim_output_is_byte_identical():
    cmd = [sys.executable, "-m", "chainkv"] + SIM
    a = subprocess.run(cmd, capture_output=True, check=True).stdout
    b = subprocess.run(cmd, capture_output=True, check=True).stdout
    assert a == b
    doc = json.loads(a)
    assert doc["serializable"] is True and doc["metrics"]["issued"] == 40


def test_sim_requires_seed(capsys):
    code, out, err = run_cli(capsys, ["sim", "--txns", "5"])
    assert code == CONFIG_ERROR and out == "" and "--seed" in err


def test_sim_history_out_is_checkable(capsys, tmp_path):
    path = tmp_path / "h.json"
    code, _, _ = run_cli(capsys, SIM + ["--history-out", str(path)])
    assert code == OK
    code, out, _ = run_cli(capsys, ["check", str(path)])
    assert code == OK and json.loads(out)["serializable"] is True


def test_check_reports_cycle(capsys):
    code, out, _ = run_cli(capsys, ["check", "tests/fixtures/cyclic_history.json"])
    assert code == VIOLATION
    assert len(json.loads(out)["cycle"]) >= 2


def test_check_bad_file(capsys, tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("[1, 2")
    code, _, err = run_cli(capsys, ["check", str(p)])
    assert code == CONFIG_ERROR and "cannot load history" in err


def test_search_modes(capsys):
    code, out, _ = run_cli(capsys, ["sim", "--seed", "0", "--search", "cycle", "-f", "0"])
    assert code == OK and json.loads(out)["exhaustive"] is True
    code, out, _ = run_cli(capsys, ["sim", "--seed", "0", "--search", "cycle", "-f", "0", "--no-order-check"])
    doc = json.loads(out)
    assert code == VIOLATION and doc["cycle"] is True and doc["trace"]


def test_config_file_supplies_defaults_and_flags_win(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"txns": 11, "seed": 3, "write-fraction": 0.25}))
    args = parse_args(["sim", "--config", str(cfg)])
    assert (args.txns, args.seed, args.write_fraction) == (11, 3, 0.25)
    args = parse_args(["sim", "--config", str(cfg), "--txns", "5"])
    assert args.txns == 5 and args.seed == 3


def test_config_file_errors(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"no_such_option": 1}))
    code, _, err = run_cli(capsys, ["sim", "--config", str(cfg)])
    assert code == CONFIG_ERROR and "no_such_option" in err
    code, _, err = run_cli(capsys, ["sim", "--config", str(tmp_path / "missing.json")])
    assert code == CONFIG_ERROR


def test_negative_fault_tolerance(capsys):
    code, _, _ = run_cli(capsys, ["sim", "--seed", "1", "-f", "-1"])
    assert code == CONFIG_ERROR


def test_bad_server_list():
    with pytest.raises(SystemExit):
        parse_args(["coordinator", "--servers", "zero=host:1"])


def test_tpcc_sim_smoke(capsys):
    code, out, _ = run_cli(capsys, ["sim", "--seed", "2", "--workload", "tpcc-lite", "--txns", "30",
                                    "--clients", "4"])
    doc = json.loads(out)
    assert code == OK and doc["metrics"]["issued"] == 30
    assert set(doc["metrics"]["by_profile"]) <= {"new_order", "payment", "order_status", "stock_level"}
