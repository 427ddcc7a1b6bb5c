"""Paired comparison of tracking with and without optical flow on turning beacons.

    python scripts/flow_comparison.py --seeds 20
"""
import argparse
import csv
import sys
from dataclasses import dataclass

import numpy as np

from beaconid.events import simulate_scene
from beaconid.pipeline import PipelineConfig, run
from beaconid.scenarios import turning_scene


@dataclass
class ComparisonConfig:
    seeds: int = 20
    duration: float = 4.0
    window_px: float = 30.0


def compare(cfg: ComparisonConfig):
    for seed in range(cfg.seeds):
        stream, truth = simulate_scene(turning_scene(seed, duration=cfg.duration))
        row = {"seed": seed, "events": len(stream)}
        for mode in ("replace", "off"):
            pc = PipelineConfig()
            pc.tracker.flow_mode = mode
            pc.tracker.window_px = cfg.window_px
            rep = run(stream, truth, pc)
            row[f"mar_{mode}"] = rep.mar
            row[f"bar_{mode}"] = rep.bar
            row[f"tracks_{mode}"] = len(rep.tracks)
        yield row


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=ComparisonConfig.seeds)
    ap.add_argument("--duration", type=float, default=ComparisonConfig.duration)
    ap.add_argument("--window-px", type=float, default=ComparisonConfig.window_px)
    args = ap.parse_args()
    cfg = ComparisonConfig(args.seeds, args.duration, args.window_px)
    rows = []
    w = None
    for row in compare(cfg):
        if w is None:
            w = csv.DictWriter(sys.stdout, fieldnames=list(row))
            w.writeheader()
        w.writerow(row)
        sys.stdout.flush()
        rows.append(row)
    on = np.array([r["mar_replace"] for r in rows], dtype=float)
    off = np.array([r["mar_off"] for r in rows], dtype=float)
    print(f"# mean MAR with flow {on.mean():.2f}, without {off.mean():.2f}; "
          f"flow better in {(on > off).sum()}/{len(rows)}, worse in {(on < off).sum()}",
          file=sys.stderr)


if __name__ == "__main__":
    main()
