import csv
import io

import numpy as np
import pytest

from rtfbeam import cli, pipeline, rtf, simulator, stft


@pytest.fixture(scope="module")
def bundle_dir(tmp_path_factory, static_bundle):
    """Static 30 dB bundle written to disk once for the CLI tests."""
    root = tmp_path_factory.mktemp("bundles")
    out = root / "seed3"
    cli.write_bundle(out, static_bundle)
    return out


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------- bundles


def test_write_load_bundle_round_trip(bundle_dir, static_bundle):
    loaded = cli.load_bundle(bundle_dir)
    assert loaded.scenario.to_json() == static_bundle.scenario.to_json()
    assert loaded.snr_db == static_bundle.snr_db
    assert loaded.noise_frames == static_bundle.noise_frames
    # WAV payloads are float32, so round-trip within single precision
    np.testing.assert_allclose(loaded.mixture, static_bundle.mixture, atol=1e-6)
    np.testing.assert_array_equal(
        loaded.truth.active_frames, static_bundle.truth.active_frames
    )


def test_bundle_snr_remeasured_from_files(tmp_path):
    rc = cli.main(
        ["simulate", "--seed", "11", "--count", "1", "--snr", "0", "--static",
         "--out", str(tmp_path)]
    )
    assert rc == cli.EXIT_OK
    out = next(tmp_path.iterdir())
    _, clean = stft.read_wav(out / "clean.wav")
    _, mixture = stft.read_wav(out / "mixture.wav")
    scaled_noise = mixture[0] - clean[0]
    ratio = np.mean(clean[0] ** 2) / np.mean(scaled_noise**2)
    assert abs(10.0 * np.log10(ratio)) < 1e-3  # 0 dB at the reference channel


def test_simulate_count_makes_multiple_bundles(tmp_path):
    rc = cli.main(
        ["simulate", "--seed", "20", "--count", "2", "--snr", "10", "--static",
         "--out", str(tmp_path)]
    )
    assert rc == cli.EXIT_OK
    dirs = sorted(p.name for p in tmp_path.iterdir())
    assert len(dirs) == 2
    for d in dirs:
        assert (tmp_path / d / "scenario.json").exists()
        assert (tmp_path / d / "mixture.wav").exists()


# ---------------------------------------------------------- subcommands


def test_estimate_rtf_oracle_hits_floor(bundle_dir):
    rc = cli.main(["estimate-rtf", "--bundle", str(bundle_dir), "--method", "oracle"])
    assert rc == cli.EXIT_OK
    rows = _read_csv(bundle_dir / "rtf_mse.csv")
    assert {r["side"] for r in rows} == {"left", "right"}
    for r in rows:
        assert float(r["mse_db"]) == -120.0


def test_estimate_rtf_past_static_high_snr(bundle_dir):
    rc = cli.main(["estimate-rtf", "--bundle", str(bundle_dir), "--method", "past"])
    assert rc == cli.EXIT_OK
    for r in _read_csv(bundle_dir / "rtf_mse.csv"):
        assert float(r["mse_db"]) <= -20.0
    traj, meta = rtf.load_trajectory(bundle_dir / "rtf_est_left.rtfb")
    assert traj.side == "left"
    assert meta["window_len"] == 512


def test_estimate_rtf_bad_path_exit_code():
    assert cli.main(["estimate-rtf", "--bundle", "/nonexistent"]) == cli.EXIT_CONFIG


@pytest.fixture(scope="module")
def bundle_dir_10db(tmp_path_factory, static_bundle):
    """The same static scene remixed to 10 dB, where MVDR has noise to remove."""
    out = tmp_path_factory.mktemp("bundles10") / "seed3"
    cli.write_bundle(out, pipeline.remix(static_bundle, 10.0))
    return out


def test_beamform_oracle_improves_si_sdr(bundle_dir_10db, tmp_path):
    results = tmp_path / "results.csv"
    rc = cli.main(
        ["beamform", "--bundle", str(bundle_dir_10db), "--method", "oracle",
         "--results", str(results)]
    )
    assert rc == cli.EXIT_OK
    (row,) = _read_csv(results)
    assert float(row["si_sdr_left"]) > float(row["si_sdr_input_left"])
    assert float(row["si_sdr_right"]) > float(row["si_sdr_input_right"])
    assert (bundle_dir_10db / "enhanced_left.wav").exists()


def test_beamform_none_is_reference_passthrough(bundle_dir, tmp_path, static_bundle):
    rc = cli.main(
        ["beamform", "--bundle", str(bundle_dir), "--method", "none",
         "--results", str(tmp_path / "r.csv")]
    )
    assert rc == cli.EXIT_OK
    _, enhanced = stft.read_wav(bundle_dir / "enhanced_left.wav")
    ref = static_bundle.mixture[0]
    n = min(enhanced.shape[1], ref.shape[0])
    lo, hi = 512, n - 512  # interior, outside the analysis-window taper
    err = np.linalg.norm(enhanced[0, lo:hi] - ref[lo:hi]) / np.linalg.norm(ref[lo:hi])
    assert err < 1e-5


def test_beamform_missing_bundle():
    assert (
        cli.main(["beamform", "--bundle", "/nonexistent", "--results", "/tmp/x.csv"])
        == cli.EXIT_CONFIG
    )


def test_beampattern_outputs(bundle_dir):
    rc = cli.main(
        ["beampattern", "--bundle", str(bundle_dir), "--method", "oracle",
         "--angle-step", "5"]
    )
    assert rc == cli.EXIT_OK
    rows = _read_csv(bundle_dir / "beampattern_wideband.csv")
    n_angles = len(np.arange(-90.0, 95.0, 5.0))
    n_frames = {int(r["frame"]) for r in rows}
    assert len(rows) == n_angles * len(n_frames)
    narrow = np.load(bundle_dir / "beampattern_narrowband.npy")
    assert narrow.shape[1] == n_angles
    errs = _read_csv(bundle_dir / "doa_error.csv")
    vals = [float(r["doa_error_deg"]) for r in errs if r["doa_error_deg"]]
    assert np.mean(vals) <= 10.0


# ------------------------------------------------------------- evaluate


def test_evaluate_grid_and_resume(tmp_path):
    out = tmp_path / "results.csv"
    args = ["evaluate", "--seed", "3", "--count", "1", "--static",
            "--snrs", "0,10,20", "--methods", "cw-batch,past,oracle",
            "--out", str(out)]
    assert cli.main(args) == cli.EXIT_OK
    rows = _read_csv(out)
    assert len(rows) == 9  # 3 methods x 3 SNRs
    assert all(r["status"] == "ok" for r in rows)
    before = out.read_bytes()
    # resume: everything is already done, so the file must not change
    assert cli.main(args) == cli.EXIT_OK
    assert out.read_bytes() == before


def test_evaluate_mse_monotone_over_snr(tmp_path):
    out = tmp_path / "results.csv"
    rc = cli.main(
        ["evaluate", "--seed", "3", "--count", "1", "--static",
         "--snrs=-10,0,10,20,30", "--methods", "cw-batch", "--out", str(out)]
    )
    assert rc == cli.EXIT_OK
    mses = [float(r["rtf_mse_db"]) for r in _read_csv(out)]
    assert len(mses) == 5
    assert all(b < a for a, b in zip(mses, mses[1:]))


def test_evaluate_unknown_method_exit_code(tmp_path):
    rc = cli.main(
        ["evaluate", "--seed", "0", "--count", "1", "--methods", "magic",
         "--out", str(tmp_path / "r.csv")]
    )
    assert rc == cli.EXIT_CONFIG


def test_evaluate_records_failure_rows(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("synthetic failure")

    monkeypatch.setattr(pipeline, "evaluate_bundle", boom)
    out = tmp_path / "results.csv"
    rc = cli.main(
        ["evaluate", "--seed", "3", "--count", "1", "--static", "--snrs", "10",
         "--methods", "past", "--out", str(out)]
    )
    assert rc == cli.EXIT_OK
    (row,) = _read_csv(out)
    assert row["status"].startswith("error:")


def test_bad_arguments_exit_code():
    assert cli.main(["simulate", "--seed", "notanint"]) == cli.EXIT_CONFIG
    assert cli.main(["unknowncmd"]) == cli.EXIT_CONFIG
