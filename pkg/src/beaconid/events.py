"""Event data model, stream file formats and a synthetic event-camera simulator.

Streams are numpy structured arrays with fields ``t`` (µs), ``x``, ``y`` and
``p`` (+1/-1). The simulator is edge-triggered: a beacon only produces events
when it switches state or moves while lit.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import protocol

logger = logging.getLogger(__name__)

EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])
BIN_MAGIC = b"EVS1"
CSV_HEADER = "t_us,x,y,p"


class StreamFormatError(ValueError):
    """Malformed stream file."""


class StreamValidationError(ValueError):
    """Stream content violates the event model (bounds, polarity, order)."""


@dataclass(frozen=True)
class Event:
    t: int
    x: int
    y: int
    p: int


@dataclass
class EventStream:
    events: np.ndarray
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.events.dtype != EVENT_DTYPE:
            self.events = np.asarray(self.events).astype(EVENT_DTYPE)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        for t, x, y, p in self.events.tolist():
            yield Event(t, x, y, p)

    @classmethod
    def from_events(cls, events: Sequence[Event], width: int, height: int) -> "EventStream":
        arr = np.array([(e.t, e.x, e.y, e.p) for e in events], dtype=EVENT_DTYPE)
        return cls(arr, width, height)

    @property
    def duration_us(self) -> int:
        return int(self.events["t"][-1]) if len(self.events) else 0

    def validate(self) -> None:
        ev = self.events
        if len(ev) == 0:
            return
        if np.any(ev["x"] >= self.width) or np.any(ev["y"] >= self.height):
            raise StreamValidationError(
                f"event coordinates outside {self.width}x{self.height} sensor")
        if not np.all(np.isin(ev["p"], (1, -1))):
            raise StreamValidationError("polarity must be +1 or -1")

    def is_sorted(self) -> bool:
        t = self.events["t"]
        return bool(np.all(t[1:] >= t[:-1]))

    def equals(self, other: "EventStream") -> bool:
        return (self.width == other.width and self.height == other.height
                and np.array_equal(self.events, other.events))


# --------------------------------------------------------------------- file io

def write_stream(stream: EventStream, path: str | Path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = fmt or ("bin" if path.suffix in (".bin", ".evs") else "csv")
    if fmt == "csv":
        ev = stream.events
        with path.open("w", newline="\n") as fh:
            fh.write(CSV_HEADER + "\n")
            if len(ev):
                cols = np.column_stack([ev["t"].astype(np.int64), ev["x"], ev["y"], ev["p"]])
                np.savetxt(fh, cols, fmt="%d", delimiter=",")
    elif fmt == "bin":
        with path.open("wb") as fh:
            fh.write(BIN_MAGIC)
            fh.write(struct.pack("<II", stream.width, stream.height))
            fh.write(stream.events.astype(EVENT_DTYPE, copy=False).tobytes())
    else:
        raise ValueError(f"unknown stream format {fmt!r}")


def read_stream(path: str | Path, width: int | None = None,
                height: int | None = None) -> EventStream:
    """Read a CSV or binary stream; the format is sniffed from the magic.

    CSV files carry no sensor size; pass ``width``/``height`` to validate
    against one, otherwise the bounding size of the data is used.
    """
    path = Path(path)
    with path.open("rb") as fh:
        head = fh.read(4)
    if head == BIN_MAGIC:
        stream = _read_bin(path)
        if width is not None or height is not None:
            stream = EventStream(stream.events, width or stream.width, height or stream.height)
    else:
        stream = _read_csv(path, width, height)
    stream.validate()
    return stream


def _read_bin(path: Path) -> EventStream:
    data = path.read_bytes()
    if len(data) < 12:
        raise StreamFormatError(f"{path}: truncated header")
    w, h = struct.unpack_from("<II", data, 4)
    body = data[12:]
    if len(body) % EVENT_DTYPE.itemsize:
        off = 12 + (len(body) // EVENT_DTYPE.itemsize) * EVENT_DTYPE.itemsize
        raise StreamFormatError(f"{path}: truncated record at byte offset {off}")
    events = np.frombuffer(body, dtype=EVENT_DTYPE).copy()
    return EventStream(events, w, h)


def _read_csv(path: Path, width: int | None, height: int | None) -> EventStream:
    rows: list[tuple[int, int, int, int]] = []
    with path.open() as fh:
        first = fh.readline().strip()
        if first != CSV_HEADER:
            raise StreamFormatError(f"{path}:1: expected header {CSV_HEADER!r}, got {first!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise StreamFormatError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                t, x, y, p = (int(v) for v in parts)
            except ValueError:
                raise StreamFormatError(f"{path}:{lineno}: non-integer field in {line!r}") from None
            if t < 0 or x < 0 or y < 0:
                raise StreamValidationError(f"{path}:{lineno}: negative value in {line!r}")
            if p not in (1, -1):
                raise StreamValidationError(f"{path}:{lineno}: polarity must be 1 or -1")
            rows.append((t, x, y, p))
    events = np.array(rows, dtype=EVENT_DTYPE) if rows else np.zeros(0, EVENT_DTYPE)
    if width is None:
        width = int(events["x"].max()) + 1 if rows else 1
    if height is None:
        height = int(events["y"].max()) + 1 if rows else 1
    return EventStream(events, width, height)


# ---------------------------------------------------------------- scene model

@dataclass
class SensorConfig:
    width: int = 640
    height: int = 480
    timestamp_jitter_sigma: float = 50.0   # µs
    refractory_period: float = 100.0       # µs
    event_probability: float = 1.0

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError("sensor width/height must be positive")
        if not 0.0 <= self.event_probability <= 1.0:
            raise ValueError("event_probability must be in [0, 1]")
        if self.timestamp_jitter_sigma < 0 or self.refractory_period < 0:
            raise ValueError("jitter and refractory period must be non-negative")


class Trajectory:
    def at(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def to_dict(self) -> dict[str, Any]:
        raise NotImplementedError


@dataclass
class WaypointTrajectory(Trajectory):
    """Piecewise-linear path through ``(t_s, x, y)`` points, held at the ends."""

    points: list[tuple[float, float, float]]

    def __post_init__(self) -> None:
        if not self.points:
            raise ValueError("trajectory needs at least one waypoint")
        self.points = sorted((float(t), float(x), float(y)) for t, x, y in self.points)

    def at(self, t):
        pts = np.asarray(self.points)
        t = np.asarray(t, dtype=float)
        return np.interp(t, pts[:, 0], pts[:, 1]), np.interp(t, pts[:, 0], pts[:, 2])

    def to_dict(self):
        return {"type": "waypoints", "points": [list(p) for p in self.points]}


@dataclass
class CircleTrajectory(Trajectory):
    center: tuple[float, float]
    radius: float
    omega: float  # rad/s
    phase: float = 0.0

    def at(self, t):
        a = self.omega * np.asarray(t, dtype=float) + self.phase
        return self.center[0] + self.radius * np.cos(a), self.center[1] + self.radius * np.sin(a)

    def to_dict(self):
        return {"type": "circle", "center": list(self.center), "radius": self.radius,
                "omega": self.omega, "phase": self.phase}


def static(x: float, y: float) -> WaypointTrajectory:
    return WaypointTrajectory([(0.0, x, y)])


def trajectory_from_dict(d: dict[str, Any]) -> Trajectory:
    kind = d.get("type", "waypoints")
    if kind == "waypoints":
        return WaypointTrajectory([tuple(p) for p in d["points"]])
    if kind == "circle":
        return CircleTrajectory(tuple(d["center"]), float(d["radius"]), float(d["omega"]),
                                float(d.get("phase", 0.0)))
    if kind == "static":
        return static(float(d["x"]), float(d["y"]))
    raise ValueError(f"unknown trajectory type {kind!r}")


def _check_windows(windows: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    out = sorted((float(a), float(b)) for a, b in windows)
    for a, b in out:
        if b < a:
            raise ValueError(f"occlusion window [{a}, {b}] is reversed")
    for (_, b0), (a1, _) in zip(out, out[1:]):
        if a1 < b0:
            raise ValueError("occlusion windows must be disjoint")
    return out


@dataclass
class BeaconSpec:
    payload: int
    f_beacon: float
    radius: float
    trajectory: Trajectory
    occlusions: list[tuple[float, float]] = field(default_factory=list)
    phase_offset: float = 0.0  # s, emission of bit 0 starts here

    def __post_init__(self) -> None:
        protocol.parity_bit(self.payload)
        if self.radius < 1:
            raise ValueError("beacon radius must be >= 1 px")
        if self.f_beacon <= 0:
            raise ValueError("f_beacon must be positive")
        self.occlusions = _check_windows(self.occlusions)


@dataclass
class Distractor:
    """A disc switching on/off at random (Poisson switching times)."""

    trajectory: Trajectory
    radius: float
    switch_rate: float  # switches per second

    def __post_init__(self) -> None:
        if self.switch_rate < 0:
            raise ValueError("switch_rate must be >= 0")


@dataclass
class NoiseSpec:
    background_rate: float = 0.0  # events / pixel / s
    distractors: list[Distractor] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.background_rate < 0:
            raise ValueError("background_rate must be >= 0")


@dataclass
class Scene:
    beacons: list[BeaconSpec]
    noise: NoiseSpec
    sensor: SensorConfig
    duration: float
    seed: int = 0


def scene_from_dict(d: dict[str, Any]) -> Scene:
    sensor = SensorConfig(**d.get("sensor", {}))
    beacons = [
        BeaconSpec(
            payload=int(b["payload"]),
            f_beacon=float(b["f_beacon"]),
            radius=float(b.get("radius", 3.0)),
            trajectory=trajectory_from_dict(b["trajectory"]),
            occlusions=[tuple(w) for w in b.get("occlusions", [])],
            phase_offset=float(b.get("phase_offset", 0.0)),
        )
        for b in d.get("beacons", [])
    ]
    nd = d.get("noise", {})
    noise = NoiseSpec(
        background_rate=float(nd.get("background_rate", 0.0)),
        distractors=[
            Distractor(trajectory_from_dict(x["trajectory"]), float(x.get("radius", 3.0)),
                       float(x["switch_rate"]))
            for x in nd.get("distractors", [])
        ],
    )
    return Scene(beacons, noise, sensor, float(d["duration"]), int(d.get("seed", 0)))


def scene_to_dict(scene: Scene) -> dict[str, Any]:
    s = scene.sensor
    return {
        "duration": scene.duration,
        "seed": scene.seed,
        "sensor": {"width": s.width, "height": s.height,
                   "timestamp_jitter_sigma": s.timestamp_jitter_sigma,
                   "refractory_period": s.refractory_period,
                   "event_probability": s.event_probability},
        "beacons": [{"payload": b.payload, "f_beacon": b.f_beacon, "radius": b.radius,
                     "trajectory": b.trajectory.to_dict(),
                     "occlusions": [list(w) for w in b.occlusions],
                     "phase_offset": b.phase_offset} for b in scene.beacons],
        "noise": {"background_rate": scene.noise.background_rate,
                  "distractors": [{"trajectory": x.trajectory.to_dict(), "radius": x.radius,
                                   "switch_rate": x.switch_rate}
                                  for x in scene.noise.distractors]},
    }


# --------------------------------------------------------------- ground truth

@dataclass
class BeaconTruth:
    payload: int
    bits: str
    bit_period_us: float
    t0_us: float
    radius: float
    positions: np.ndarray  # (n, 3): t_us, x, y
    occlusions: list[tuple[float, float]]  # µs
    visible: np.ndarray  # bool per position sample: lit disc centre on the sensor and not occluded

    def bit_index(self, t_us: float) -> int:
        return int(math.floor((t_us - self.t0_us) / self.bit_period_us + 0.5))

    def bit_start(self, k: int) -> float:
        return self.t0_us + k * self.bit_period_us

    def position_at(self, t_us: float) -> tuple[float, float]:
        p = self.positions
        return (float(np.interp(t_us, p[:, 0], p[:, 1])), float(np.interp(t_us, p[:, 0], p[:, 2])))

    def is_visible(self, t0_us: float, t1_us: float) -> bool:
        """Visible over the whole interval ``[t0_us, t1_us]``."""
        for a, b in self.occlusions:
            if a < t1_us and b > t0_us:
                return False
        p = self.positions
        sel = (p[:, 0] >= t0_us) & (p[:, 0] <= t1_us)
        if not np.any(sel):
            return bool(self.visible[min(np.searchsorted(p[:, 0], t0_us), len(p) - 1)])
        return bool(np.all(self.visible[sel]))

    def to_dict(self) -> dict[str, Any]:
        return {
            "payload": self.payload,
            "bits": self.bits,
            "bit_period_us": self.bit_period_us,
            "t0_us": self.t0_us,
            "radius": self.radius,
            "positions": [[int(t), round(float(x), 3), round(float(y), 3)]
                          for t, x, y in self.positions],
            "visible": [bool(v) for v in self.visible],
            "occlusions": [[a, b] for a, b in self.occlusions],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "BeaconTruth":
        pos = np.asarray(d["positions"], dtype=float).reshape(-1, 3)
        vis = d.get("visible")
        return cls(
            payload=int(d.get("payload", -1)),
            bits=d["bits"],
            bit_period_us=float(d["bit_period_us"]),
            t0_us=float(d.get("t0_us", 0.0)),
            radius=float(d.get("radius", 3.0)),
            positions=pos,
            occlusions=[(float(a), float(b)) for a, b in d.get("occlusions", [])],
            visible=np.asarray(vis if vis is not None else [True] * len(pos), dtype=bool),
        )


@dataclass
class GroundTruth:
    beacons: dict[str, BeaconTruth]
    duration_us: float = 0.0

    def to_json(self) -> str:
        doc = {"duration_us": self.duration_us,
               "beacons": {k: v.to_dict() for k, v in self.beacons.items()}}
        return json.dumps(doc, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        doc = json.loads(text)
        beacons = doc.get("beacons", doc)
        return cls({k: BeaconTruth.from_dict(v) for k, v in beacons.items()},
                   float(doc.get("duration_us", 0.0)))

    @classmethod
    def load(cls, path: str | Path) -> "GroundTruth":
        return cls.from_json(Path(path).read_text())


# ------------------------------------------------------------------ simulator

GT_CADENCE_US = 2000.0
MOTION_CADENCE_S = 0.0005


def _disc_pixels(cx: np.ndarray, cy: np.ndarray, radius: float):
    """Integer pixels within ``radius`` of each centre; returns (owner, x, y)."""
    r = int(math.ceil(radius)) + 1
    ox, oy = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1))
    ox, oy = ox.ravel(), oy.ravel()
    bx, by = np.round(cx).astype(np.int64), np.round(cy).astype(np.int64)
    px = bx[:, None] + ox[None, :]
    py = by[:, None] + oy[None, :]
    inside = (px - cx[:, None]) ** 2 + (py - cy[:, None]) ** 2 <= radius * radius
    owner = np.broadcast_to(np.arange(len(cx))[:, None], px.shape)
    return owner[inside], px[inside], py[inside]


def _in_windows(t: np.ndarray, windows: Sequence[tuple[float, float]]) -> np.ndarray:
    mask = np.zeros(t.shape, dtype=bool)
    for a, b in windows:
        mask |= (t >= a) & (t <= b)
    return mask


def _edge_events(times, polarity, traj, radius, windows, rng, prob):
    """Whole-disc events for every state edge; times in seconds."""
    times = np.asarray(times, dtype=float)
    polarity = np.asarray(polarity, dtype=np.int8)
    keep = ~_in_windows(times, windows)
    times, polarity = times[keep], polarity[keep]
    if len(times) == 0:
        return []
    cx, cy = traj.at(times)
    owner, px, py = _disc_pixels(cx, cy, radius)
    fire = rng.random(len(owner)) < prob
    owner, px, py = owner[fire], px[fire], py[fire]
    return [(times[owner], px, py, polarity[owner])]


def _motion_events(state_at, t_end, traj, radius, windows, rng, prob):
    """Boundary events of a lit disc each time it has moved by >= 1 px."""
    ts = np.arange(0.0, t_end, MOTION_CADENCE_S)
    if len(ts) == 0:
        return []
    xs, ys = traj.at(ts)
    if np.ptp(xs) < 1.0 and np.ptp(ys) < 1.0:
        return []
    lit = state_at(ts) & ~_in_windows(ts, windows)
    chunks = []
    last = None
    for i in range(len(ts)):
        if not lit[i]:
            last = None
            continue
        if last is None:
            last = (xs[i], ys[i])
            continue
        if (xs[i] - last[0]) ** 2 + (ys[i] - last[1]) ** 2 < 1.0:
            continue
        _, ox, oy = _disc_pixels(np.array([last[0]]), np.array([last[1]]), radius)
        _, nx, ny = _disc_pixels(np.array([xs[i]]), np.array([ys[i]]), radius)
        old = set(zip(ox.tolist(), oy.tolist()))
        new = set(zip(nx.tolist(), ny.tolist()))
        lead = sorted(new - old)
        trail = sorted(old - new)
        pix = lead + trail
        if pix:
            arr = np.array(pix, dtype=np.int64)
            pol = np.array([1] * len(lead) + [-1] * len(trail), dtype=np.int8)
            fire = rng.random(len(pix)) < prob
            chunks.append((np.full(int(fire.sum()), ts[i]), arr[fire, 0], arr[fire, 1], pol[fire]))
        last = (xs[i], ys[i])
    return chunks


def _beacon_edges(beacon: BeaconSpec, duration: float):
    frame = protocol.encode_frame(beacon.payload)
    period = 1.0 / beacon.f_beacon
    n_bits = int(math.ceil((duration - beacon.phase_offset) / period)) if duration > beacon.phase_offset else 0
    bits = np.array([frame[k % protocol.FRAME_BITS] for k in range(n_bits)], dtype=np.int8)
    prev = np.concatenate([[0], bits[:-1]]) if n_bits else bits
    edge = np.nonzero(bits != prev)[0]
    times = beacon.phase_offset + edge * period
    pol = np.where(bits[edge] == 1, 1, -1)
    sel = times < duration
    return bits, times[sel], pol[sel]


def _apply_refractory(t_us: np.ndarray, pix: np.ndarray, refractory: float) -> np.ndarray:
    """Keep-mask dropping events closer than ``refractory`` to the pixel's last kept event."""
    keep = np.ones(len(t_us), dtype=bool)
    if refractory <= 0 or len(t_us) == 0:
        return keep
    order = np.lexsort((t_us, pix))
    ps = pix[order].tolist()
    ts = t_us[order].tolist()
    last_p, last_t = None, 0.0
    drop = []
    for i, (p, t) in enumerate(zip(ps, ts)):
        if p == last_p and t - last_t < refractory:
            drop.append(i)
            continue
        last_p, last_t = p, t
    keep[order[drop]] = False
    return keep


def simulate(beacons: Sequence[BeaconSpec], noise: NoiseSpec, sensor: SensorConfig,
             duration: float, seed: int = 0) -> tuple[EventStream, GroundTruth]:
    """Render beacons, distractors and background noise into an event stream.

    Deterministic for a given seed. Events falling outside the sensor are
    dropped; ground truth records where the beacon centre was visible.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng(seed)
    chunks: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = []
    truth: dict[str, BeaconTruth] = {}
    gt_t = np.arange(0.0, duration * 1e6 + 1e-9, GT_CADENCE_US)

    for idx, b in enumerate(beacons):
        bits, times, pol = _beacon_edges(b, duration)
        chunks += _edge_events(times, pol, b.trajectory, b.radius, b.occlusions, rng,
                               sensor.event_probability)
        period = 1.0 / b.f_beacon

        def state_at(ts, bits=bits, b=b, period=period):
            k = np.floor((ts - b.phase_offset) / period).astype(np.int64)
            ok = (k >= 0) & (k < len(bits))
            out = np.zeros(ts.shape, dtype=bool)
            out[ok] = bits[k[ok]] == 1
            return out

        chunks += _motion_events(state_at, duration, b.trajectory, b.radius, b.occlusions, rng,
                                 sensor.event_probability)
        gx, gy = b.trajectory.at(gt_t / 1e6)
        on_sensor = (gx >= 0) & (gx <= sensor.width - 1) & (gy >= 0) & (gy <= sensor.height - 1)
        occl_us = [(a * 1e6, c * 1e6) for a, c in b.occlusions]
        truth[str(idx)] = BeaconTruth(
            payload=b.payload,
            bits="".join(map(str, bits.tolist())),
            bit_period_us=period * 1e6,
            t0_us=b.phase_offset * 1e6,
            radius=b.radius,
            positions=np.column_stack([gt_t, gx, gy]),
            occlusions=occl_us,
            visible=on_sensor & ~_in_windows(gt_t, occl_us),
        )

    for d in noise.distractors:
        n_sw = rng.poisson(d.switch_rate * duration) if d.switch_rate > 0 else 0
        sw = np.sort(rng.uniform(0.0, duration, n_sw))
        start_on = bool(rng.integers(0, 2))
        if start_on:
            sw = np.concatenate([[0.0], sw])
        pol = np.where(np.arange(len(sw)) % 2 == 0, 1, -1)

        def state_at(ts, sw=sw):
            return (np.searchsorted(sw, ts, side="right") % 2) == 1

        chunks += _edge_events(sw, pol, d.trajectory, d.radius, [], rng, sensor.event_probability)
        chunks += _motion_events(state_at, duration, d.trajectory, d.radius, [], rng,
                                 sensor.event_probability)

    if noise.background_rate > 0:
        n = rng.poisson(noise.background_rate * sensor.width * sensor.height * duration)
        chunks.append((rng.uniform(0.0, duration, n),
                       rng.integers(0, sensor.width, n),
                       rng.integers(0, sensor.height, n),
                       rng.choice(np.array([-1, 1], dtype=np.int8), n)))

    if chunks:
        t = np.concatenate([c[0] for c in chunks]) * 1e6
        x = np.concatenate([c[1] for c in chunks]).astype(np.int64)
        y = np.concatenate([c[2] for c in chunks]).astype(np.int64)
        p = np.concatenate([c[3] for c in chunks]).astype(np.int8)
    else:
        t = np.zeros(0)
        x = y = np.zeros(0, dtype=np.int64)
        p = np.zeros(0, dtype=np.int8)

    inb = (x >= 0) & (x < sensor.width) & (y >= 0) & (y < sensor.height)
    t, x, y, p = t[inb], x[inb], y[inb], p[inb]
    if sensor.timestamp_jitter_sigma > 0 and len(t):
        t = t + rng.normal(0.0, sensor.timestamp_jitter_sigma, len(t))
    t = np.clip(np.round(t), 0, None).astype(np.int64)
    keep = _apply_refractory(t, y * sensor.width + x, sensor.refractory_period)
    t, x, y, p = t[keep], x[keep], y[keep], p[keep]
    order = np.argsort(t, kind="stable")
    events = np.zeros(len(order), dtype=EVENT_DTYPE)
    events["t"], events["x"], events["y"], events["p"] = t[order], x[order], y[order], p[order]
    logger.debug("simulated %d events over %.3f s", len(events), duration)
    return (EventStream(events, sensor.width, sensor.height),
            GroundTruth(truth, duration * 1e6))


def simulate_scene(scene: Scene) -> tuple[EventStream, GroundTruth]:
    return simulate(scene.beacons, scene.noise, scene.sensor, scene.duration, scene.seed)
