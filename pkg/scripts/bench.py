"""Throughput of the decode path and the whole pipeline on a dense synthetic stream.

    python scripts/bench.py --f-beacon 5000 --repeat 3
"""
import argparse
from dataclasses import dataclass

from beaconid.events import BeaconSpec, NoiseSpec, SensorConfig, simulate, static
from beaconid.pipeline import PipelineConfig, run


@dataclass
class BenchConfig:
    f_beacon: float = 5000.0
    n_beacons: int = 4
    radius: float = 4.0
    duration: float = 2.0
    background_rate: float = 1.0
    repeat: int = 3


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--f-beacon", type=float, default=BenchConfig.f_beacon)
    ap.add_argument("--beacons", type=int, default=BenchConfig.n_beacons)
    ap.add_argument("--repeat", type=int, default=BenchConfig.repeat)
    args = ap.parse_args()
    cfg = BenchConfig(f_beacon=args.f_beacon, n_beacons=args.beacons, repeat=args.repeat)
    sensor = SensorConfig()
    payloads = [42, 21, 5, 33, 12, 50, 3, 40]  # none of them cyclic aliases
    beacons = [BeaconSpec(payloads[i % len(payloads)], cfg.f_beacon, cfg.radius,
                          static(120 + 130 * (i % 4), 140 + 200 * (i // 4)))
               for i in range(cfg.n_beacons)]
    stream, _ = simulate(beacons, NoiseSpec(cfg.background_rate), sensor, cfg.duration, seed=0)
    best = max((run(stream, None, PipelineConfig(f_beacon=cfg.f_beacon)) for _ in range(cfg.repeat)),
               key=lambda r: r.decode_throughput_eps)
    print(f"events: {len(stream)}")
    print(f"decode path: {best.decode_throughput_eps:,.0f} events/s")
    print(f"pipeline:    {best.throughput_eps:,.0f} events/s")
    print(f"valid payloads: {best.valid_payloads}")


if __name__ == "__main__":
    main()
