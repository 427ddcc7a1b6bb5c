"""MAR of a static beacon against its blink rate under the default sensor model.

    python scripts/frequency_sweep.py --seeds 10 --out sweep.csv
"""
import argparse
import csv
import sys
from dataclasses import dataclass, field

import numpy as np

from beaconid.events import BeaconSpec, NoiseSpec, SensorConfig, simulate, static
from beaconid.pipeline import PipelineConfig, run


@dataclass
class SweepConfig:
    frequencies: list[float] = field(
        default_factory=lambda: [1000.0, 2500.0, 5000.0, 6000.0, 7500.0, 10000.0])
    seeds: int = 10
    duration: float = 2.0
    payload: int = 42
    radius: float = 3.0


def sweep(cfg: SweepConfig):
    sensor = SensorConfig()
    for f in cfg.frequencies:
        mars, bars = [], []
        for seed in range(cfg.seeds):
            b = BeaconSpec(cfg.payload, f, cfg.radius, static(sensor.width / 2, sensor.height / 2))
            stream, truth = simulate([b], NoiseSpec(), sensor, cfg.duration, seed=seed)
            rep = run(stream, truth, PipelineConfig(f_beacon=f))
            mars.append(rep.mar or 0.0)
            bars.append(rep.bar or 0.0)
        yield f, float(np.mean(mars)), float(np.min(mars)), float(np.mean(bars))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=SweepConfig.seeds)
    ap.add_argument("--duration", type=float, default=SweepConfig.duration)
    ap.add_argument("--freq", type=float, nargs="+")
    ap.add_argument("--out")
    args = ap.parse_args()
    cfg = SweepConfig(seeds=args.seeds, duration=args.duration)
    if args.freq:
        cfg.frequencies = args.freq
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(fh)
    w.writerow(["f_beacon_hz", "mar_mean", "mar_min", "bar_mean"])
    for row in sweep(cfg):
        w.writerow([f"{row[0]:g}", *(f"{v:.2f}" for v in row[1:])])
        fh.flush()


if __name__ == "__main__":
    main()
