"""Command-line surface: generation, detection, simulation, analysis, serving.

Every subcommand is a thin adapter over the library so results are equally
obtainable through imports; the CLI adds no hidden state. Randomized paths
take --seed and reproduce byte-identically.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

from . import __version__
from .audio_beacon import (
    ToneSchedule,
    detect_pulses,
    read_wav,
    read_wav_manifest,
    synthesize,
    write_wav,
    write_wav_manifest,
)
from .exporter import (
    DetectionRecord,
    ExporterState,
    make_server,
    read_log,
    record_to_dict,
    render_exposition,
    snapshot_from_records,
    write_log,
)
from .metrics import (
    AUDIO,
    VIDEO,
    build_report,
    latencies_from_log,
    write_epoch_series_csv,
)
from .netsim import run_physical, run_scenario
from .scenario import ConfigError, scenario_from_file
from .video_beacon import (
    CrcMismatch,
    FinderNotFound,
    FrameManifest,
    beacon_emission,
    detect_decode,
    encode_beacon,
    frame_paths,
    rasterize,
    read_frame_manifest,
    read_pgm,
    write_frame_sequence,
)

log = logging.getLogger("xrprobe")

_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING,
               "info": logging.INFO, "debug": logging.DEBUG}


def _configure_logging() -> None:
    name = os.environ.get("XRPROBE_LOG_LEVEL", "warn").lower()
    logging.basicConfig(level=_LOG_LEVELS.get(name, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xrprobe",
        description="QoS measurement toolkit for edge-rendered multiuser XR",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-video", help="write a beacon-stamped PGM frame sequence")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--fps", type=int, default=30)
    p.add_argument("--duration-s", type=float, default=2.0)
    p.add_argument("--start-ts", type=int, default=0, help="first frame timestamp, ms")
    p.add_argument("--device-id", default="probe")
    p.add_argument("--scale", type=int, default=8, help="pixels per module")
    p.add_argument("--interval-ms", type=int, default=10, help="beacon refresh grid")

    p = sub.add_parser("detect-video", help="decode beacons from a frame sequence")
    p.add_argument("frames", help="directory written by gen-video or simulate --physical")
    p.add_argument("--out", help="detection log path (default: stdout)")

    p = sub.add_parser("gen-audio", help="write a beacon tone WAV with sidecar manifest")
    p.add_argument("--out", required=True, help="output .wav path")
    p.add_argument("--duration-s", type=float, default=10.0)
    p.add_argument("--start-ts", type=int, default=0, help="stream start timestamp, ms")
    p.add_argument("--device-id", default="probe")
    p.add_argument("--rate", type=int, default=48000)

    p = sub.add_parser("detect-audio", help="detect beacon pulses in a WAV stream")
    p.add_argument("wav", help=".wav path with sidecar manifest")
    p.add_argument("--out", help="detection log path (default: stdout)")

    p = sub.add_parser("simulate", help="run a scenario and write its detection log")
    p.add_argument("--scenario", required=True, help="scenario JSON path")
    p.add_argument("--seed", type=int, default=None, help="override scenario seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--physical", action="store_true",
                   help="render real PGM/WAV media and run the detectors on them")

    p = sub.add_parser("analyze", help="aggregate a detection log into a report")
    p.add_argument("--log", required=True, help="detection log path or simulate output dir")
    p.add_argument("--epoch-ms", type=int, default=1000)
    p.add_argument("--out", help="report directory (default: alongside the log)")

    p = sub.add_parser("serve", help="expose a log's metrics over HTTP")
    p.add_argument("--log", required=True, help="detection log path or simulate output dir")
    p.add_argument("--serve-port", type=int, default=9464,
                   help="TCP port; 0 prints the exposition once and exits")
    return parser


# --- subcommand bodies --------------------------------------------------------------

def _cmd_gen_video(args) -> int:
    frame_count = max(1, round(args.duration_s * args.fps))
    manifest = FrameManifest(device_id=args.device_id, fps=float(args.fps),
                             start_ts=args.start_ts, frame_count=frame_count)
    frames = []
    for i in range(frame_count):
        ts = manifest.frame_playout(i)
        emission = beacon_emission(args.start_ts, ts, args.interval_ms)
        frames.append(rasterize(encode_beacon(emission), scale=args.scale))
    write_frame_sequence(args.out, frames, manifest)
    print(f"wrote {frame_count} frames to {args.out}")
    return 0


def _emit_log(records: list[DetectionRecord], out: str | None) -> None:
    if out:
        write_log(out, records)
    else:
        for rec in records:
            print(json.dumps(record_to_dict(rec), sort_keys=True))


def _cmd_detect_video(args) -> int:
    manifest = read_frame_manifest(args.frames)
    tally: Counter = Counter()
    records = []
    for i, path in enumerate(frame_paths(args.frames, manifest.frame_count)):
        try:
            det = detect_decode(read_pgm(path), manifest.frame_playout(i),
                                manifest.device_id)
        except FinderNotFound:
            tally["finder_not_found"] += 1
            continue
        except CrcMismatch:
            tally["crc_mismatch"] += 1
            continue
        records.append(DetectionRecord(media=VIDEO, device=det.device_id,
                                       emission_ts=det.emission_ts,
                                       playout_ts=det.playout_ts))
    _emit_log(records, args.out)
    print(f"{len(records)} detections, {sum(tally.values())} undecodable frames",
          file=sys.stderr)
    return 0


def _cmd_gen_audio(args) -> int:
    schedule = ToneSchedule(epoch_ts=args.start_ts)
    n_slots = max(1, round(args.duration_s * 1000.0 / schedule.pulse_period_ms))
    pcm = synthesize(schedule, start_slot=0, n_slots=n_slots, rate=args.rate)
    write_wav(args.out, pcm)
    write_wav_manifest(args.out, args.device_id, schedule, stream_start_ts=args.start_ts)
    print(f"wrote {n_slots} pulses ({pcm.duration_ms / 1000.0:.1f} s) to {args.out}")
    return 0


def _cmd_detect_audio(args) -> int:
    device_id, schedule, start_ts, _ = read_wav_manifest(args.wav)
    pcm = read_wav(args.wav)
    tally: Counter = Counter()
    dets = detect_pulses(
        pcm, lambda s: start_ts + round(s * 1000.0 / pcm.sample_rate),
        schedule, device_id, tally=tally,
    )
    records = [DetectionRecord(media=AUDIO, device=d.device_id,
                               emission_ts=d.emission_ts, playout_ts=d.playout_ts,
                               frequency=d.frequency_hz, confidence=d.confidence)
               for d in dets]
    _emit_log(records, args.out)
    print(f"{len(records)} pulses detected", file=sys.stderr)
    return 0


def _cmd_simulate(args) -> int:
    scenario = scenario_from_file(args.scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.physical:
        physical, symbolic = run_physical(scenario, out / "physical", seed=args.seed)
        write_log(out / "log.jsonl", physical.records)
        write_log(out / "log_symbolic.jsonl", symbolic.records)
        tally = physical.tally + symbolic.tally
        n = len(physical.records)
    else:
        result = run_scenario(scenario, seed=args.seed)
        write_log(out / "log.jsonl", result.records)
        tally = result.tally
        n = len(result.records)
    (out / "tally.json").write_text(json.dumps(dict(sorted(tally.items())), indent=2) + "\n")
    print(f"{n} records -> {out / 'log.jsonl'}")
    return 0


def _resolve_log(path_arg: str) -> Path:
    path = Path(path_arg)
    if path.is_dir():
        path = path / "log.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no detection log at {path}")
    return path


def _load_tally(log_path: Path) -> Counter:
    sidecar = log_path.parent / "tally.json"
    if sidecar.exists():
        return Counter(json.loads(sidecar.read_text()))
    return Counter()


def _cmd_analyze(args) -> int:
    log_path = _resolve_log(args.log)
    records = read_log(log_path)
    tally = _load_tally(log_path)
    report = build_report(records, epoch_width_ms=args.epoch_ms, tally=tally)
    out = Path(args.out) if args.out else log_path.parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_epoch_series_csv(out / "epochs.csv", latencies_from_log(records),
                           epoch_width_ms=args.epoch_ms)
    total = sum(report["sample_count"].values())
    means = ", ".join(f"{media} {value:.1f} ms"
                      for media, value in sorted(report["mean_latency_ms"].items()))
    print(f"{total} samples ({means or 'no latencies'}) -> {out / 'report.json'}")
    return 0


def _cmd_serve(args) -> int:
    log_path = _resolve_log(args.log)
    records = read_log(log_path)
    snapshot = snapshot_from_records(records, tally=_load_tally(log_path))
    state = ExporterState(snapshot=snapshot)
    if args.serve_port == 0:
        sys.stdout.write(render_exposition(state.snapshot()))
        return 0
    server = make_server(state, port=args.serve_port)
    host, port = server.server_address[:2]
    print(f"serving metrics on http://{host}:{port}/metrics", file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


_COMMANDS = {
    "gen-video": _cmd_gen_video,
    "detect-video": _cmd_detect_video,
    "gen-audio": _cmd_gen_audio,
    "detect-audio": _cmd_detect_audio,
    "simulate": _cmd_simulate,
    "analyze": _cmd_analyze,
    "serve": _cmd_serve,
}


def run(argv: list[str] | None = None) -> int:
    """Parse and execute; 0 success, 1 runtime error, 2 usage error."""
    _configure_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints usage/help itself
        code = exc.code
        return code if isinstance(code, int) else 2
    try:
        return _COMMANDS[args.command](args)
    except (OSError, ValueError, ConfigError) as exc:
        print(f"xrprobe {args.command}: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
