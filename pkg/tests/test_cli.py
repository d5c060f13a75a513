import json
import subprocess
import sys

import numpy as np
import pytest

from fpt.cli import main
from fpt.runner import compare_grad_tables, default_config


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(default_config("tiny")))
    return str(path)


def _run_main(capsys, argv):
    code = main(argv)
    captured = capsys.readouterr()
    records = [json.loads(line) for line in captured.out.splitlines() if line]
    return code, records, captured.err


def test_gen_prints_config(capsys):
    code, records, _ = _run_main(capsys, ["gen", "--preset", "tiny"])
    assert code == 0
    assert records[0]["config"] == default_config("tiny")


def test_forward_exit_zero_and_records(capsys, tiny_config):
    code, records, _ = _run_main(capsys, ["forward", "--config", tiny_config, "--seed", "1"])
    assert code == 0
    kinds = [r["record"] for r in records]
    assert kinds[0] == "meta"
    assert kinds.count("level") == 3
    assert "timing" in kinds


def test_forward_writes_out_file(capsys, tiny_config, tmp_path):
    out = tmp_path / "report.jsonl"
    code, records, _ = _run_main(
        capsys, ["forward", "--config", tiny_config, "--out", str(out)]
    )
    assert code == 0
    lines = [json.loads(line) for line in out.read_text().splitlines()]
    assert lines == records


def test_forward_train_mode_flag(capsys, tiny_config):
    code, eval_recs, _ = _run_main(capsys, ["forward", "--config", tiny_config])
    code2, train_recs, _ = _run_main(
        capsys, ["forward", "--config", tiny_config, "--mode", "train"]
    )
    assert code == code2 == 0
    ev = [r["checksum"] for r in eval_recs if r["record"] == "level"]
    tr = [r["checksum"] for r in train_recs if r["record"] == "level"]
    assert ev != tr


def test_count_reports_added_costs(capsys, tiny_config):
    code, records, _ = _run_main(capsys, ["count", "--config", tiny_config])
    assert code == 0
    added = [r for r in records if r["record"] == "added"]
    assert {r["kind"] for r in added} == {"params", "flops"}


def test_bench_repeats_flag(capsys, tiny_config):
    code, records, _ = _run_main(
        capsys, ["bench", "--config", tiny_config, "--repeats", "2"]
    )
    assert code == 0
    assert any(r["record"] == "bench" for r in records)


def test_bad_config_exits_one(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"fpt": {"task": "video"}}))
    code, records, err = _run_main(capsys, ["forward", "--config", str(bad)])
    assert code == 1
    assert records == []
    assert "ConfigError" in err


def test_gradcheck_small_passes(capsys, tmp_path):
    config = {
        "fpt": {"task": "instance", "d_model": 4, "n_st": 2, "n_gt": 2,
                "dropblock": {"block_size": 1, "keep_prob": 0.9}},
        "pyramid": {"source": "synth", "levels": [[4, 3, 3]]},
    }
    path = tmp_path / "small.json"
    path.write_text(json.dumps(config))
    code, records, _ = _run_main(
        capsys, ["gradcheck", "--config", str(path), "--h", "1e-5", "--tol", "1e-5"]
    )
    assert code == 0
    verdict = [r for r in records if r["record"] == "verdict"][0]
    assert verdict["pass"]


def test_gradcheck_train_mode_exits_one(capsys, tiny_config):
    code, _records, err = _run_main(
        capsys, ["gradcheck", "--config", tiny_config, "--mode", "train"]
    )
    assert code == 1
    assert "DropBlock" in err


def test_negative_control_corrupted_gradient_fails():
    # the comparison machinery must flag a deliberately corrupted gradient
    analytic = {"w": np.array([1.0, 2.0]), "b": np.array([0.5])}
    numeric = {"w": np.array([1.0, 2.0]), "b": np.array([0.5])}
    rows, ok = compare_grad_tables(analytic, numeric, tol=1e-5)
    assert ok
    analytic["w"] = analytic["w"] + 1e-2
    rows, ok = compare_grad_tables(analytic, numeric, tol=1e-5)
    assert not ok
    assert [r for r in rows if not r["pass"]][0]["name"] == "w"


def test_console_entry_point_subprocess(tiny_config):
    proc = subprocess.run(
        [sys.executable, "-m", "fpt.cli", "forward", "--config", tiny_config],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    lines = [json.loads(line) for line in proc.stdout.splitlines()]
    assert any(r["record"] == "level" for r in lines)
