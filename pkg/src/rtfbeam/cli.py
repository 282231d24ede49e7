"""Command-line interface: simulate / estimate-rtf / beamform / beampattern /
evaluate.

Scenario bundles are directories with fixed filenames (scenario.json,
mixture.wav, ...). All writes go through a temp file + atomic rename, so a
failed run leaves no partial files. Exit codes: 0 success, 2 configuration
errors, 1 runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import beamformer, covariance, metrics, pipeline, rtf, simulator, stft

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

RESULT_FIELDS = [
    "scenario_id",
    "snr_db",
    "method",
    "status",
    "si_sdr_left",
    "si_sdr_right",
    "si_sdr_input_left",
    "si_sdr_input_right",
    "rtf_mse_db",
    "doa_error_mean_deg",
]


class ConfigError(ValueError):
    pass


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_text(path: Path, text: str) -> None:
    _atomic_write_bytes(path, text.encode())


def _write_wav(path: Path, rate: int, signal: np.ndarray) -> None:
    buf = io.BytesIO()
    stft.write_wav(buf, rate, signal)
    _atomic_write_bytes(path, buf.getvalue())


def _write_trajectory(path: Path, traj, config) -> None:
    buf = io.BytesIO()
    rtf.save_trajectory(buf, traj, config)
    _atomic_write_bytes(path, buf.getvalue())


def _csv_text(fieldnames: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def write_bundle(out_dir: Path, bundle: pipeline.SimBundle) -> None:
    rate = bundle.scenario.sample_rate
    out_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write_text(out_dir / "scenario.json", bundle.scenario.to_json())
    _write_wav(out_dir / "mixture.wav", rate, bundle.mixture)
    _write_wav(out_dir / "clean.wav", rate, bundle.clean)
    _write_wav(out_dir / "noise.wav", rate, bundle.noise)
    _write_wav(out_dir / "clean_ref_left.wav", rate, bundle.truth.clean_ref_left)
    _write_wav(out_dir / "clean_ref_right.wav", rate, bundle.truth.clean_ref_right)
    _write_trajectory(out_dir / "rtf_true_left.rtfb", bundle.truth.rtf_left, bundle.config)
    _write_trajectory(out_dir / "rtf_true_right.rtfb", bundle.truth.rtf_right, bundle.config)
    meta = {
        "snr_db": bundle.snr_db,
        "noise_frames": bundle.noise_frames,
        "doa_per_frame_deg": [float(x) for x in bundle.truth.doa_per_frame],
        "active_frames": [bool(x) for x in bundle.truth.active_frames],
        "stft": {
            "sample_rate_hz": bundle.config.sample_rate_hz,
            "window_len": bundle.config.window_len,
            "hop": bundle.config.hop,
            "window": bundle.config.window,
        },
    }
    _atomic_write_text(out_dir / "ground_truth.json", json.dumps(meta, indent=2))
    doa_rows = [
        {"frame": l, "doa_deg": float(d), "active": int(a)}
        for l, (d, a) in enumerate(
            zip(bundle.truth.doa_per_frame, bundle.truth.active_frames)
        )
    ]
    _atomic_write_text(
        out_dir / "doa.csv", _csv_text(["frame", "doa_deg", "active"], doa_rows)
    )


def load_bundle(bundle_dir: Path) -> pipeline.SimBundle:
    if not (bundle_dir / "scenario.json").exists():
        raise ConfigError(f"not a scenario bundle: {bundle_dir}")
    scenario = simulator.Scenario.from_json((bundle_dir / "scenario.json").read_text())
    meta = json.loads((bundle_dir / "ground_truth.json").read_text())
    s = meta["stft"]
    config = stft.StftConfig(s["sample_rate_hz"], s["window_len"], s["hop"], s["window"])
    rate = scenario.sample_rate
    _, mixture = stft.read_wav(bundle_dir / "mixture.wav", rate)
    _, clean = stft.read_wav(bundle_dir / "clean.wav", rate)
    _, noise = stft.read_wav(bundle_dir / "noise.wav", rate)
    _, ref_l = stft.read_wav(bundle_dir / "clean_ref_left.wav", rate)
    _, ref_r = stft.read_wav(bundle_dir / "clean_ref_right.wav", rate)
    rtf_l, _ = rtf.load_trajectory(bundle_dir / "rtf_true_left.rtfb")
    rtf_r, _ = rtf.load_trajectory(bundle_dir / "rtf_true_right.rtfb")
    truth = simulator.GroundTruth(
        doa_per_frame=np.asarray(meta["doa_per_frame_deg"]),
        rtf_left=rtf_l,
        rtf_right=rtf_r,
        clean_ref_left=ref_l[0],
        clean_ref_right=ref_r[0],
        active_frames=np.asarray(meta["active_frames"], dtype=bool),
    )
    return pipeline.SimBundle(
        scenario, config, clean, noise, mixture, truth, float(meta["snr_db"])
    )


def cmd_simulate(args) -> int:
    out_root = Path(args.out)
    for i in range(args.count):
        seed = args.seed + i
        bundle = pipeline.simulate(seed, args.snr, static=args.static)
        name = f"seed{seed:05d}_snr{args.snr:+05.1f}"
        write_bundle(out_root / name, bundle)
        print(f"wrote {out_root / name}")
    return EXIT_OK


def _estimation_inputs(bundle, args):
    mix_spec = stft.analyze(bundle.mixture, bundle.config)
    ln = args.noise_frames if args.noise_frames else bundle.noise_frames
    stats = pipeline.noise_stats(mix_spec, ln, args.loading)
    return mix_spec, ln, stats


def cmd_estimate_rtf(args) -> int:
    bundle_dir = Path(args.bundle)
    bundle = load_bundle(bundle_dir)
    mix_spec, ln, stats = _estimation_inputs(bundle, args)
    m = bundle.scenario.num_mics
    mse_rows = []
    for side, ref in (("left", 0), ("right", m - 1)):
        traj = pipeline.estimate_trajectory(
            mix_spec, stats, ln, args.method, ref, side, args.beta, bundle.truth
        )
        _write_trajectory(bundle_dir / f"rtf_est_{side}.rtfb", traj, bundle.config)
        truth_traj = bundle.truth.rtf_left if side == "left" else bundle.truth.rtf_right
        mse = rtf.rtf_mse(traj, truth_traj)
        mse_rows.append({"side": side, "method": args.method, "mse_db": mse})
        print(f"{side}: MSE {mse:.2f} dB")
    _atomic_write_text(
        bundle_dir / "rtf_mse.csv", _csv_text(["side", "method", "mse_db"], mse_rows)
    )
    return EXIT_OK


def cmd_beamform(args) -> int:
    bundle_dir = Path(args.bundle)
    bundle = load_bundle(bundle_dir)
    report = pipeline.evaluate_bundle(
        bundle, args.method, args.beta, args.loading, args.mvdr_loading
    )
    mix_spec, ln, stats = _estimation_inputs(bundle, args)
    m = bundle.scenario.num_mics
    for side, ref in (("left", 0), ("right", m - 1)):
        if args.method == "none":
            traj = rtf.RtfTrajectory(
                pipeline._trivial_rtf(m, mix_spec.num_bins, mix_spec.num_frames, ref),
                ref, side,
            )
        else:
            traj = pipeline.estimate_trajectory(
                mix_spec, stats, ln, args.method, ref, side, args.beta, bundle.truth
            )
        signal, _ = pipeline.beamform_side(
            mix_spec, stats, traj, args.method, args.mvdr_loading
        )
        _write_wav(
            bundle_dir / f"enhanced_{side}.wav", bundle.scenario.sample_rate, signal
        )
    row = report.csv_row()
    row["status"] = "ok"
    append_result_row(Path(args.results), row)
    print(
        f"SI-SDR L/R: {report.si_sdr_left:.2f}/{report.si_sdr_right:.2f} dB "
        f"(input {report.si_sdr_input_left:.2f}/{report.si_sdr_input_right:.2f})"
    )
    return EXIT_OK


def cmd_beampattern(args) -> int:
    bundle_dir = Path(args.bundle)
    bundle = load_bundle(bundle_dir)
    mix_spec, ln, stats = _estimation_inputs(bundle, args)
    m = bundle.scenario.num_mics
    if args.method == "none":
        traj = rtf.RtfTrajectory(
            pipeline._trivial_rtf(m, mix_spec.num_bins, mix_spec.num_frames, 0),
            0, "left",
        )
    else:
        traj = pipeline.estimate_trajectory(
            mix_spec, stats, ln, args.method, 0, "left", args.beta, bundle.truth
        )
    weights = (
        beamformer.mvdr_weights(traj, stats.phi_nn, args.mvdr_loading)
        if args.method != "none"
        else beamformer.BeamformerWeights(traj.values.copy())
    )
    angles = np.arange(-90.0, 90.0 + args.angle_step, args.angle_step)
    grid = beamformer.narrowband_beampattern(
        weights, bundle.scenario.mic_axis_offsets(), bundle.config, angles
    )
    rows = []
    for ti, theta in enumerate(grid.angles_deg):
        for l in range(grid.wideband.shape[1]):
            rows.append(
                {"frame": l, "bin": "wideband", "theta_deg": theta,
                 "value": grid.wideband[ti, l]}
            )
    _atomic_write_text(
        bundle_dir / "beampattern_wideband.csv",
        _csv_text(["frame", "bin", "theta_deg", "value"], rows),
    )
    buf = io.BytesIO()
    np.save(buf, grid.narrowband.astype(np.float32))
    _atomic_write_bytes(bundle_dir / "beampattern_narrowband.npy", buf.getvalue())
    errs, mean_err, excluded = metrics.doa_error(grid, bundle.truth)
    err_rows = [
        {"frame": l, "doa_error_deg": "" if np.isnan(e) else e}
        for l, e in enumerate(errs)
    ]
    _atomic_write_text(
        bundle_dir / "doa_error.csv", _csv_text(["frame", "doa_error_deg"], err_rows)
    )
    print(f"mean DOA error {mean_err:.2f} deg ({excluded} frames excluded)")
    return EXIT_OK


def append_result_row(path: Path, row: dict) -> None:
    """Single-writer append; creates the file with a header when missing."""
    path.parent.mkdir(parents=True, exist_ok=True)
    exists = path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, lineterminator="\n")
        if not exists:
            writer.writeheader()
        writer.writerow({k: row.get(k, "") for k in RESULT_FIELDS})


def completed_keys(path: Path) -> set[tuple]:
    if not path.exists():
        return set()
    with open(path, newline="") as fh:
        return {
            (r["scenario_id"], r["snr_db"], r["method"])
            for r in csv.DictReader(fh)
        }


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    done = completed_keys(out)
    seeds = list(range(args.seed, args.seed + args.count))
    snrs = [float(s) for s in args.snrs.split(",")]
    methods = args.methods.split(",")
    for method in methods:
        if method not in pipeline.METHODS:
            raise ConfigError(f"unknown method {method!r}")
    for seed in seeds:
        rendered = None
        for snr in snrs:
            if rendered is None:
                rendered = pipeline.simulate(seed, snr, static=args.static)
                bundle = rendered
            else:
                bundle = pipeline.remix(rendered, snr)
            for method in methods:
                key = (f"seed{seed}", repr(snr), method)
                if (key[0], key[1], key[2]) in done:
                    continue
                row = {"scenario_id": f"seed{seed}", "snr_db": repr(snr),
                       "method": method}
                try:
                    report = pipeline.evaluate_bundle(
                        bundle, method, args.beta, args.loading, args.mvdr_loading
                    )
                    row.update(
                        {k: repr(v) if isinstance(v, float) else v
                         for k, v in report.csv_row().items()}
                    )
                    row["snr_db"] = repr(snr)
                    row["status"] = "ok"
                except Exception as exc:  # record the failure, keep sweeping
                    row["status"] = f"error: {exc}"
                append_result_row(out, row)
                print(f"seed {seed} snr {snr} method {method}: {row['status']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rtfbeam",
        description="Moving-speaker RTF estimation, beamforming and evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common_est(p):
        p.add_argument("--method", default="past", choices=pipeline.METHODS,
                       help="RTF source (default: past)")
        p.add_argument("--beta", type=float, default=rtf.DEFAULT_BETA,
                       help="PAST forgetting factor (default: %(default)s)")
        p.add_argument("--loading", type=float, default=covariance.DEFAULT_LOADING,
                       help="whitening diagonal loading (default: %(default)s)")
        p.add_argument("--mvdr-loading", type=float, default=beamformer.MVDR_LOADING,
                       help="MVDR diagonal loading (default: %(default)s)")
        p.add_argument("--noise-frames", type=int, default=0,
                       help="noise-only frame count; 0 = derive from lead silence")

    p = sub.add_parser("simulate", help="render scenario bundles to disk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--snr", type=float, default=10.0)
    p.add_argument("--static", action="store_true", help="pin the source")
    p.add_argument("--out", default=os.environ.get("RTFBEAM_OUT", "bundles"))
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate-rtf", help="estimate RTF trajectories for a bundle")
    p.add_argument("--bundle", required=True)
    common_est(p)
    p.set_defaults(func=cmd_estimate_rtf)

    p = sub.add_parser("beamform", help="beamform a bundle and score it")
    p.add_argument("--bundle", required=True)
    p.add_argument("--results", default="results.csv")
    common_est(p)
    p.set_defaults(func=cmd_beamform)

    p = sub.add_parser("beampattern", help="export beampattern data for a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--angle-step", type=float, default=1.0)
    common_est(p)
    p.set_defaults(func=cmd_beampattern)

    p = sub.add_parser("evaluate", help="run a seeds x SNR x method sweep")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--snrs", default="-10,0,10,20,30")
    p.add_argument("--methods", default="cw-batch,past,oracle")
    p.add_argument("--static", action="store_true")
    p.add_argument("--beta", type=float, default=rtf.DEFAULT_BETA)
    p.add_argument("--loading", type=float, default=covariance.DEFAULT_LOADING)
    p.add_argument("--mvdr-loading", type=float, default=beamformer.MVDR_LOADING)
    p.add_argument("--out", default=os.environ.get("RTFBEAM_OUT", "results.csv"))
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
