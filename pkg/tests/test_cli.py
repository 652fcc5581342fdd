import csv
import json

import numpy as np
import pytest

from ofdmwave.channel import read_channel_file
from ofdmwave.cli import ExperimentConfig, main
from ofdmwave.rx import read_llr_file

SMALL = {
    "grid": {"n": 9, "m": 4},
    "spectral": {"draws": 300, "t_cp_fractions": [0.0, 0.05, 0.1]},
    "baseline": {"k": 2, "r": 2, "slots": 3, "snr_db": [0.0, 20.0], "covariance_samples": 500},
    "papr": {"slots": 10},
    "train": {"batch_size": 4, "sgd_steps": 1, "outer_iterations": 2, "covariance_samples": 300,
              "eval_batch_size": 4},
    "channels_count": 20,
}

COMMANDS = {
    "spectral-sweep": ["spectral_sweep.csv"],
    "papr-ccdf": ["papr_ccdf_qam.csv", "papr_summary_qam.json"],
    "tr-baseline": ["tr_baseline.csv", "tr_reports.json"],
    "gen-channels": ["channels.bin"],
    "simulate-baseline": ["simulate_baseline.csv"],
    "train": ["trace.csv", "params.json"],
}


def write_config(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def read_rows(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# ofdmwave ")
    return list(csv.DictReader(lines[1:]))


@pytest.mark.parametrize("command", sorted(COMMANDS))
def test_commands_are_byte_identical_on_rerun(command, tmp_path):
    cfg = write_config(tmp_path, SMALL)
    for run in ("a", "b"):
        assert main([command, "--config", cfg, "--seed", "5", "--out-dir", str(tmp_path / run)]) == 0
    for name in COMMANDS[command]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    resolved = json.loads((tmp_path / "a" / f"{command}.config.json").read_text())
    assert resolved["seed"] == 5 and resolved["grid"]["n"] == 9


def test_different_seed_changes_output(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    main(["papr-ccdf", "--config", cfg, "--seed", "1", "--out-dir", str(tmp_path / "a")])
    main(["papr-ccdf", "--config", cfg, "--seed", "2", "--out-dir", str(tmp_path / "b")])
    assert (tmp_path / "a" / "papr_ccdf_qam.csv").read_bytes() != (tmp_path / "b" / "papr_ccdf_qam.csv").read_bytes()


def test_stamp_contents(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    main(["papr-ccdf", "--config", cfg, "--out-dir", str(tmp_path)])
    summary = json.loads((tmp_path / "papr_summary_qam.json").read_text())
    digest = ExperimentConfig.from_dict(SMALL).digest()
    assert summary["meta"] == {"tool": "ofdmwave", "version": "0.1.0", "config_sha256": digest, "seed": 0}
    assert f"config_sha256={digest}" in (tmp_path / "papr_ccdf_qam.csv").read_text().splitlines()[0]
    assert set(summary["papr_db"]) == {"0.01", "0.001", "0.0001"}


def test_spectral_sweep_trend(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    main(["spectral-sweep", "--config", cfg, "--out-dir", str(tmp_path)])
    rows = read_rows(tmp_path / "spectral_sweep.csv")
    assert [float(r["t_cp_fraction"]) for r in rows] == [0.0, 0.05, 0.1]
    e = [float(r["mean_in_band_energy"]) for r in rows]
    assert e[0] < e[1] < e[2]
    assert all(len(r["aclr_db"].split(".")[1]) == 6 for r in rows)


def test_tr_mode_beats_qam_on_same_seed(tmp_path):
    data = dict(SMALL, grid={"n": 25, "m": 14}, baseline=dict(SMALL["baseline"], r=6), papr={"slots": 40})
    cfg = write_config(tmp_path, data)
    for mode in ("qam", "tr"):
        assert main(["papr-ccdf", "--config", cfg, "--mode", mode, "--out-dir", str(tmp_path)]) == 0
    qam_db = json.loads((tmp_path / "papr_summary_qam.json").read_text())["papr_db"]["0.001"]
    tr_db = json.loads((tmp_path / "papr_summary_tr.json").read_text())["papr_db"]["0.001"]
    assert tr_db <= qam_db


def test_oversampled_peak_reported(tmp_path):
    cfg = write_config(tmp_path, dict(SMALL, grid={"n": 75, "m": 2, "oversampling": 5}, papr={"slots": 5}))
    assert main(["papr-ccdf", "--config", cfg, "--out-dir", str(tmp_path)]) == 0
    s = json.loads((tmp_path / "papr_summary_qam.json").read_text())
    assert s["max_peak_db_oversampled"] >= s["max_peak_db_nyquist"]


def test_trained_mode_and_eval(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    assert main(["train", "--config", cfg, "--out-dir", str(tmp_path)]) == 0
    params = tmp_path / "params.json"
    assert json.loads(params.read_text())["params"]["n"] == 9
    assert main(["papr-ccdf", "--config", cfg, "--mode", "trained", "--params", str(params),
                 "--out-dir", str(tmp_path)]) == 0
    assert main(["eval-trained", "--config", cfg, "--params", str(params), "--out-dir", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "eval_trained.csv")
    assert len(rows) == 2 and all(float(r["rate_bits_per_re"]) <= 2 for r in rows)
    trace = read_rows(tmp_path / "trace.csv")
    assert list(trace[0]) == ["iter", "l_c", "l_peak", "l_leak", "lambda_p", "lambda_l", "mu_p", "mu_l",
                              "papr_db", "aclr_db"]


def test_gen_channels_file(tmp_path):
    assert main(["gen-channels", "--count", "7", "--n", "9", "--profile", "flat", "--out-dir", str(tmp_path)]) == 0
    h = read_channel_file(tmp_path / "channels.bin")
    assert h.shape == (7, 9)
    np.testing.assert_allclose(h, h[:, :1] * np.ones(9))


def test_simulate_high_snr_and_llr_dump(tmp_path):
    data = dict(SMALL, channel={"kind": "awgn"}, baseline=dict(SMALL["baseline"], snr_db=[60.0], slots=200))
    cfg = write_config(tmp_path, data)
    assert main(["simulate-baseline", "--config", cfg, "--out-dir", str(tmp_path),
                 "--llr-dir", str(tmp_path / "llr")]) == 0
    row = read_rows(tmp_path / "simulate_baseline.csv")[0]
    assert float(row["ber"]) < 1e-5
    assert float(row["rate_bits_per_re"]) <= 2.0
    llrs = read_llr_file(tmp_path / "llr" / "llrs_snr+60.0dB.bin")
    assert llrs.shape == (200, 4, 9, 2)


@pytest.mark.parametrize("argv,extra", [
    (["papr-ccdf", "--oversampling", "1"], {}),
    (["papr-ccdf", "--mode", "trained"], {}),
    (["papr-ccdf", "--mode", "trained", "--params", "missing.json"], {}),
    (["spectral-sweep"], {"bogus": 1}),
    (["spectral-sweep"], {"grid": {"n": 8}}),
    (["train"], {"train": {"gamma_peak": 0.5}}),
    (["spectral-sweep", "--threads", "0"], {}),
])
def test_config_errors_exit_2(argv, extra, tmp_path):
    cfg = write_config(tmp_path, {**SMALL, **extra})
    assert main(argv + ["--config", cfg, "--out-dir", str(tmp_path)]) == 2


def test_invalid_json_exit_2(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert main(["spectral-sweep", "--config", str(path)]) == 2


def test_io_error_exit_4(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = write_config(tmp_path, SMALL)
    assert main(["spectral-sweep", "--config", cfg, "--out-dir", str(blocker / "sub")]) == 4
    assert main(["spectral-sweep", "--config", str(tmp_path / "nope.json")]) == 4


def test_divergence_exit_3(tmp_path):
    data = dict(SMALL, train=dict(SMALL["train"], lr=1e200))
    cfg = write_config(tmp_path, data)
    with np.errstate(all="ignore"):
        assert main(["train", "--config", cfg, "--out-dir", str(tmp_path)]) == 3
    assert (tmp_path / "trace.csv").exists()
