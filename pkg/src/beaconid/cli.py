"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data error (bad file, bad payload,
undecodable bits).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import protocol
from .events import (GroundTruth, StreamFormatError, StreamValidationError, read_stream,
                     scene_from_dict, simulate_scene, write_stream)
from .pipeline import ConfigError, PipelineConfig, load_config, run

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

log = logging.getLogger("beaconid")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits with 2 by default
        raise UsageError(f"{self.prog}: {message}")


def _config(path: str | None, f_beacon: float | None, mode: str | None) -> PipelineConfig:
    cfg = load_config(path) if path else PipelineConfig()
    if f_beacon is not None or mode is not None:
        cfg = PipelineConfig(
            tracking_rate_hz=cfg.tracking_rate_hz,
            f_beacon=f_beacon if f_beacon is not None else cfg.f_beacon,
            mode=mode or cfg.mode, seed=cfg.seed, workers=cfg.workers,
            cluster=cfg.cluster, tracker=cfg.tracker, flow=cfg.flow, decode=cfg.decode)
    return cfg


def cmd_simulate(args) -> int:
    doc = json.loads(Path(args.scene).read_text())
    scene = scene_from_dict(doc)
    if args.seed is not None:
        scene.seed = args.seed
    stream, truth = simulate_scene(scene)
    write_stream(stream, args.out)
    if args.truth:
        truth.save(args.truth)
    print(f"wrote {len(stream)} events to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args.config, args.f_beacon, args.mode)
    stream = read_stream(args.events)
    truth = GroundTruth.load(args.truth) if args.truth else None
    report = run(stream, truth, cfg)
    text = report.metrics_csv() if args.format == "csv" else report.to_json() + "\n"
    if args.report:
        Path(args.report).write_text(text)
        log.info("mar=%s bar=%s valid=%s", report.mar, report.bar, report.valid_payloads)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args.config, args.f_beacon, None)
    stream = read_stream(args.events)
    best = None
    for _ in range(args.repeat):
        rep = run(stream, None, cfg)
        if best is None or rep.decode_throughput_eps > best.decode_throughput_eps:
            best = rep
    target = 1_000_000
    verdict = "meets" if best.decode_throughput_eps >= target else "below"
    print(f"events: {len(stream)}")
    print(f"pipeline: {best.throughput_eps:,.0f} events/s")
    print(f"decode path: {best.decode_throughput_eps:,.0f} events/s ({verdict} {target:,} events/s)")
    return EXIT_OK


def cmd_encode(args) -> int:
    print(protocol.format_bits(protocol.encode_frame(args.payload)))
    return EXIT_OK


def cmd_decode(args) -> int:
    bits = protocol.parse_bits(args.bits)
    res = protocol.align_frame(bits)
    if res.status is protocol.AlignStatus.NO_START_CODE:
        raise DataError("NoStartCode: no rotation carries a parity-valid frame")
    if res.status is protocol.AlignStatus.AMBIGUOUS:
        raise DataError("Ambiguous: rotations decode to different payloads")
    print(res.payload)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="beaconid", description="Event-camera beacon identification")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="render a scene file into events + ground truth")
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True, help="event file (.csv or .bin)")
    s.add_argument("--truth", help="ground-truth JSON output")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="run the pipeline on an event file")
    r.add_argument("--events", required=True)
    r.add_argument("--truth")
    r.add_argument("--config")
    r.add_argument("--report", help="output path; stdout when omitted")
    r.add_argument("--format", choices=("json", "csv"), default="json")
    r.add_argument("--f-beacon", type=float)
    r.add_argument("--mode", choices=("deterministic", "concurrent"))
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="measure throughput")
    b.add_argument("--events", required=True)
    b.add_argument("--config")
    b.add_argument("--f-beacon", type=float)
    b.add_argument("--repeat", type=int, default=1)
    b.set_defaults(func=cmd_bench)

    pr = sub.add_parser("protocol", help="frame codec")
    psub = pr.add_subparsers(dest="action", required=True, parser_class=_Parser)
    e = psub.add_parser("encode")
    e.add_argument("--payload", type=int, required=True)
    e.set_defaults(func=cmd_encode)
    d = psub.add_parser("decode")
    d.add_argument("--bits", required=True)
    d.set_defaults(func=cmd_decode)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (DataError, protocol.ProtocolError, ConfigError, StreamFormatError,
            StreamValidationError, FileNotFoundError, IsADirectoryError,
            json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
