"""Seeded scene generators shared by the acceptance suite and scripts/."""
from __future__ import annotations

import math

import numpy as np

from .events import (BeaconSpec, Distractor, NoiseSpec, Scene, SensorConfig,
                     WaypointTrajectory, static)
from .flow import build_delay_kernels


def tuned_speeds_px_s(steps_per_s: float = 100.0) -> list[list[float]]:
    """Preferred speed of every flow unit, ``[direction][speed]`` in px/s."""
    bank = build_delay_kernels()
    return [[bank.tuned_speed(d, s) * steps_per_s for s in range(bank.n_speeds)]
            for d in range(bank.n_dirs)]


def turning_scene(seed: int, duration: float = 4.0, f_beacon: float = 1000.0,
                  payload: int = 42, width: int = 320, height: int = 240,
                  radius: float = 3.0, occlusion: float = 0.15,
                  segment: tuple[float, float] = (0.4, 0.8),
                  speed_indices: tuple[int, ...] = (0, 1)) -> Scene:
    """One beacon on a random polyline with 45-degree turns and one occlusion.

    Every segment runs along one of the eight flow directions at one of the
    flow layer's tuned speeds.
    """
    rng = np.random.default_rng(seed)
    speeds = tuned_speeds_px_s()
    margin = 20.0
    x, y, t = width / 2, height / 2, 0.0
    d = int(rng.integers(8))
    pts = [(0.0, x, y)]
    while t < duration:
        seg = float(rng.uniform(*segment))
        for _ in range(32):
            s = int(rng.choice(speed_indices))
            v = speeds[d][s]
            ang = d * math.pi / 4
            nx = x + v * seg * math.cos(ang)
            ny = y + v * seg * math.sin(ang)
            if margin <= nx <= width - margin and margin <= ny <= height - margin:
                break
            d = (d + int(rng.choice([-3, -2, -1, 1, 2, 3, 4]))) % 8
        else:
            nx, ny = x, y
        t += seg
        x, y = nx, ny
        pts.append((t, x, y))
        d = (d + int(rng.choice([-2, -1, 1, 2]))) % 8
    t_occ = float(rng.uniform(1.0, duration - 1.0))
    beacon = BeaconSpec(payload, f_beacon, radius, WaypointTrajectory(pts),
                        occlusions=[(t_occ, t_occ + occlusion)] if occlusion > 0 else [],
                        phase_offset=float(rng.uniform(0, 11 / f_beacon)))
    return Scene([beacon], NoiseSpec(), SensorConfig(width=width, height=height),
                 duration, seed)


def noise_scene(seed: int, duration: float = 30.0, width: int = 160, height: int = 120,
                n_distractors: int = 5, background_rate: float = 0.5) -> Scene:
    """Random blinkers of mixed sizes and background noise, no beacon."""
    rng = np.random.default_rng(seed)
    distractors = []
    for _ in range(n_distractors):
        x = float(rng.uniform(15, width - 15))
        y = float(rng.uniform(15, height - 15))
        r = float(rng.uniform(1.5, 5.0))
        rate = float(rng.choice([2.0, 20.0, 200.0, 1000.0]))
        distractors.append(Distractor(static(x, y), r, rate))
    return Scene([], NoiseSpec(background_rate, distractors),
                 SensorConfig(width=width, height=height), duration, seed)
