import csv
import json
import math

import pytest

from fedload.cli import main


def run_cli(capsys, *args):
    code = main(list(args))
    assert code == 0
    return capsys.readouterr().out


def test_gen_data_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    run_cli(capsys, "gen-data", "--out", str(a), "--n-clients", "3", "--days", "2", "--seed", "9")
    run_cli(capsys, "gen-data", "--out", str(b), "--n-clients", "3", "--days", "2", "--seed", "9")
    assert a.read_bytes() == b.read_bytes()
    rows = list(csv.reader(a.open()))
    assert rows[0] == ["client_id", "acorn_group", "timestamp_iso8601", "kwh"]
    assert len(rows) == 1 + 3 * 48


def test_gen_data_append_and_prefix(tmp_path, capsys):
    out = tmp_path / "pool.csv"
    run_cli(capsys, "gen-data", "--out", str(out), "--n-clients", "2", "--days", "2",
            "--seed", "1", "--acorn-groups", "H", "--prefix", "h-")
    run_cli(capsys, "gen-data", "--out", str(out), "--n-clients", "2", "--days", "2",
            "--seed", "2", "--acorn-groups", "L", "--prefix", "l-", "--append")
    ids = {row[0] for row in list(csv.reader(out.open()))[1:]}
    assert ids == {"h-synth-000", "h-synth-001", "l-synth-000", "l-synth-001"}


def test_preprocess(tmp_path, capsys):
    src = tmp_path / "raw.csv"
    run_cli(capsys, "gen-data", "--out", str(src), "--n-clients", "2", "--days", "2", "--seed", "4")
    run_cli(capsys, "preprocess", "--csv", str(src), "--out", str(tmp_path / "treated"))
    assert (tmp_path / "treated" / "treated_hourly.csv").exists()
    summary = json.loads((tmp_path / "treated" / "treatment_summary.json").read_text())
    assert len(summary) == 2
    assert all(v["hours"] == 48 for v in summary.values())


def test_cluster_subcommand(tmp_path, capsys):
    src = tmp_path / "raw.csv"
    run_cli(capsys, "gen-data", "--out", str(src), "--n-clients", "5", "--days", "6",
            "--seed", "2", "--shared-weight", "0.9")
    out = run_cli(capsys, "cluster", "--csv", str(src), "--out", str(tmp_path / "cl"),
                  "--size", "3", "--lookback", "6")
    selection = json.loads(out.strip().splitlines()[-1])
    assert len(selection["ids"]) == 3
    assert -1.0 <= selection["correlation_rate"] <= 1.0
    matrix_lines = (tmp_path / "cl" / "correlation_matrix.csv").read_text().splitlines()
    assert len(matrix_lines) == 6  # header + 5 clients


def test_accountant_subcommand(tmp_path, capsys):
    out = run_cli(capsys, "accountant", "--rounds", "100", "--q", "1.0", "--z", "1.0",
                  "--delta", "1e-3", "--out", str(tmp_path / "acct.csv"))
    assert "epsilon=" in out and "best_alpha=" in out
    rows = list(csv.reader((tmp_path / "acct.csv").open()))
    assert rows[0] == ["alpha", "total_rdp", "epsilon"]
    # q=1 rows must follow the plain Gaussian formula alpha/(2 z^2) * rounds
    alpha, rdp, eps = (float(v) for v in rows[5])
    assert rdp == pytest.approx(100 * alpha / 2.0, rel=1e-12)


def test_simulate_with_overrides(tmp_path, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(
        "scenario: A\n"
        "seed: 2\n"
        f"output_dir: {tmp_path / 'out'}\n"
        "lookback: 6\n"
        "data:\n  synthetic: {n_clients: 4, days: 6, noise_std: 0.02}\n"
        "model: {architecture: stacked_lstm, lstm_hidden: [3, 3]}\n"
        "train: {batch_size: 32}\n"
        "federation: {sizes: [2, 3], communication_rounds: 2, local_epochs_per_round: 1}\n"
    )
    out = run_cli(capsys, "simulate", "--config", str(cfg), "--set", "federation.sizes=[2]")
    assert "scenario A [2]" in out and "[3]" not in out
    results = (tmp_path / "out" / "scenario_A_results.csv").read_text().splitlines()
    assert len(results) == 2


def test_train_central_forces_scenario_0(tmp_path, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(
        "scenario: A\n"
        "seed: 2\n"
        f"output_dir: {tmp_path / 'out0'}\n"
        "lookback: 6\n"
        "max_central_epochs: 2\n"
        "data:\n  synthetic: {n_clients: 3, days: 6, noise_std: 0.02}\n"
        "model: {architecture: stacked_lstm, lstm_hidden: [3, 3]}\n"
        "train: {batch_size: 32}\n"
        "federation: {sizes: [2]}\n"
    )
    out = run_cli(capsys, "train-central", "--config", str(cfg))
    assert "scenario 0 [2]" in out
    assert (tmp_path / "out0" / "scenario_0_results.csv").exists()


def test_report_reemission(tmp_path, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(
        "scenario: A\n"
        "seed: 7\n"
        f"output_dir: {tmp_path / 'out'}\n"
        "lookback: 6\n"
        "data:\n  synthetic: {n_clients: 3, days: 6}\n"
        "model: {architecture: stacked_lstm, lstm_hidden: [3, 3]}\n"
        "train: {batch_size: 32}\n"
        "federation: {sizes: [2], communication_rounds: 2, local_epochs_per_round: 1}\n"
    )
    run_cli(capsys, "simulate", "--config", str(cfg))
    run_cli(capsys, "report", "--result", str(tmp_path / "out" / "scenario_A_result.json"),
            "--out", str(tmp_path / "re"))
    assert (tmp_path / "re" / "scenario_A_results.csv").read_bytes() == (
        tmp_path / "out" / "scenario_A_results.csv"
    ).read_bytes()


def test_output_root_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("FEDLOAD_OUTPUT_ROOT", str(tmp_path))
    run_cli(capsys, "gen-data", "--out", "nested/data.csv", "--n-clients", "2", "--days", "2")
    assert (tmp_path / "nested" / "data.csv").exists()
