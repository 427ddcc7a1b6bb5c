"""Count Valid tracks on noise-only scenes (distractor blinkers plus background).

    python scripts/noise_rejection.py --seeds 10 --duration 30
"""
import argparse
from dataclasses import dataclass

from beaconid.events import simulate_scene
from beaconid.pipeline import run
from beaconid.scenarios import noise_scene


@dataclass
class NoiseConfig:
    seeds: int = 10
    duration: float = 30.0


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=NoiseConfig.seeds)
    ap.add_argument("--duration", type=float, default=NoiseConfig.duration)
    args = ap.parse_args()
    cfg = NoiseConfig(args.seeds, args.duration)
    print("seed,events,tracks,valid_tracks,max_confidence")
    for seed in range(cfg.seeds):
        stream, truth = simulate_scene(noise_scene(seed, duration=cfg.duration))
        rep = run(stream, truth)
        peak = max((e.get("confidence", 0) for t in rep.tracks for e in t["timeline"]), default=0)
        print(f"{seed},{len(stream)},{len(rep.tracks)},{len(rep.valid_tracks)},{peak}", flush=True)


if __name__ == "__main__":
    main()
