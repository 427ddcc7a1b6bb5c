"""Multi-beacon tracking with a confidence lifecycle.

Each track runs a constant-velocity Kalman filter in pixel units with one
tracking period as the time step. Optical flow, when available, overrides
the velocity before prediction. Identification is driven by the track's bit
buffer: parity-valid, payload-consistent decodes raise the confidence,
everything else lowers it.
"""
from __future__ import annotations

import enum
import logging
import math
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import protocol
from .cluster import Target

logger = logging.getLogger(__name__)

FLOW_MODES = ("replace", "blend", "off")


class Status(enum.Enum):
    NEW = "new"
    VALID = "valid"
    INVALID = "invalid"


@dataclass
class TrackerParams:
    confidence_min: int = 0
    confidence_max: int = 20
    confidence_init: int = 10
    valid_increment: int = 2
    miss_decrement: int = 1
    delay_max_us: int = 500_000
    window_px: float = 30.0
    process_noise: float = 1.0      # px / period^2
    measurement_noise: float = 1.0  # px
    initial_velocity_std: float = 10.0  # px / period
    size_alpha: float = 0.5
    flow_mode: str = "replace"
    polarity_updates: bool = True  # tick-level sequence rule; off when a faster decoder feeds buffers
    f_beacon: float = 1000.0
    period_us: int = 100_000

    def __post_init__(self) -> None:
        if not self.confidence_min <= self.confidence_init <= self.confidence_max:
            raise ValueError("need confidence_min <= confidence_init <= confidence_max")
        if self.flow_mode not in FLOW_MODES:
            raise ValueError(f"flow_mode must be one of {FLOW_MODES}")


_F = np.array([[1, 0, 1, 0], [0, 1, 0, 1], [0, 0, 1, 0], [0, 0, 0, 1]], dtype=float)
_H = np.array([[1, 0, 0, 0], [0, 1, 0, 0]], dtype=float)


def _process_cov(sigma_a: float) -> np.ndarray:
    # piecewise-constant white acceleration, dt = 1 period
    g = np.array([0.5, 0.5, 1.0, 1.0])
    q = np.zeros((4, 4))
    for a, b in ((0, 2), (1, 3)):
        for i in (a, b):
            for j in (a, b):
                q[i, j] = g[i] * g[j]
    return sigma_a ** 2 * q


@dataclass
class Track:
    id: int
    state: np.ndarray
    cov: np.ndarray
    size: float
    created_at: int
    confidence: int
    buffer: protocol.BitBuffer = field(default_factory=protocol.BitBuffer)
    status: Status = Status.NEW
    payload: int | None = None
    last_seen: int = 0
    decodes: list[tuple[float, int]] = field(default_factory=list)  # (first-bit time s, payload)
    bit_log: list[tuple[float, int]] = field(default_factory=list)  # every appended bit, survives resets
    timeline: list[dict] = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @property
    def position(self) -> tuple[float, float]:
        return float(self.state[0]), float(self.state[1])

    @property
    def velocity(self) -> tuple[float, float]:
        return float(self.state[2]), float(self.state[3])

    @property
    def last_transition_time(self) -> int | None:
        t = self.buffer.last_transition_time
        return None if t is None else int(round(t * 1e6))

    def append_transitions(self, transitions: Sequence[protocol.Transition], f_beacon: float) -> None:
        buf = self.buffer
        with self.lock:
            for tr in transitions:
                n = len(buf.bits)
                protocol.runs_from_transitions([tr], f_beacon, buf)
                if len(buf.bits) > n:
                    self.bit_log.extend(zip(buf.times[n:], buf.bits[n:]))

    def scan(self) -> list[protocol.Decode]:
        with self.lock:
            decodes = protocol.frame_scan(self.buffer)
            for d in decodes:
                self.decodes.append((self.buffer.times[d.index], d.payload))
            return decodes


def new_track(track_id: int, target: Target, t_now: int, params: TrackerParams) -> Track:
    sm, sv = params.measurement_noise, params.initial_velocity_std
    tr = Track(
        id=track_id,
        state=np.array([target.x, target.y, 0.0, 0.0]),
        cov=np.diag([sm ** 2, sm ** 2, sv ** 2, sv ** 2]),
        size=float(target.size),
        created_at=t_now,
        confidence=params.confidence_init,
        last_seen=t_now,
    )
    tr.timeline.append({"t_us": t_now, "event": "created", "x": round(target.x, 3),
                        "y": round(target.y, 3)})
    return tr


def predict(track: Track, flow_velocity: tuple[float, float] | None,
            params: TrackerParams) -> tuple[np.ndarray, np.ndarray]:
    """Advance the track one period; flow replaces or blends the velocity."""
    x = track.state.copy()
    if flow_velocity is not None and params.flow_mode != "off":
        v = np.asarray(flow_velocity, dtype=float)
        x[2:] = v if params.flow_mode == "replace" else 0.5 * (x[2:] + v)
    x = _F @ x
    p = _F @ track.cov @ _F.T + _process_cov(params.process_noise)
    track.state, track.cov = x, p
    return x, p


def in_search_window(pred: np.ndarray, target: Target, base: float) -> bool:
    """Target inside the rectangle around ``pred`` stretched along its velocity."""
    dx, dy = target.x - pred[0], target.y - pred[1]
    speed = math.hypot(pred[2], pred[3])
    if speed < 1e-9:
        return abs(dx) <= base / 2 and abs(dy) <= base / 2
    ux, uy = pred[2] / speed, pred[3] / speed
    along = dx * ux + dy * uy
    across = -dx * uy + dy * ux
    return abs(along) <= (base + speed) / 2 and abs(across) <= base / 2


def associate(tracks: Sequence[Track], targets: Sequence[Target], params: TrackerParams):
    """Greedy L1 matching inside each track's search window.

    Returns ``(pairs, unmatched_target_indices, unmatched_tracks)`` where
    pairs are ``(track, target_index)``. Ties go to the lower track id, then
    the lower target index.
    """
    cands = []
    for tr in tracks:
        for j, tg in enumerate(targets):
            if in_search_window(tr.state, tg, params.window_px):
                l1 = abs(tg.x - tr.state[0]) + abs(tg.y - tr.state[1])
                cands.append((l1, tr.id, j, tr))
    cands.sort(key=lambda c: (c[0], c[1], c[2]))
    used_tr, used_tg, pairs = set(), set(), []
    for _, tid, j, tr in cands:
        if tid in used_tr or j in used_tg:
            continue
        used_tr.add(tid)
        used_tg.add(j)
        pairs.append((tr, j))
    unmatched_targets = [j for j in range(len(targets)) if j not in used_tg]
    unmatched_tracks = [tr for tr in tracks if tr.id not in used_tr]
    return pairs, unmatched_targets, unmatched_tracks


def update_track(track: Track, target: Target, t_now: int, params: TrackerParams) -> Track:
    r = np.eye(2) * params.measurement_noise ** 2
    z = np.array([target.x, target.y])
    s = _H @ track.cov @ _H.T + r
    k = track.cov @ _H.T @ np.linalg.inv(s)
    track.state = track.state + k @ (z - _H @ track.state)
    track.cov = (np.eye(4) - k @ _H) @ track.cov
    track.size = params.size_alpha * target.size + (1 - params.size_alpha) * track.size

    if not params.polarity_updates:
        pass
    elif target.polarity >= 0.5:
        track.append_transitions([protocol.Transition(t_now / 1e6, protocol.Direction.TO_ON)],
                                 params.f_beacon)
    elif target.polarity <= -0.5:
        track.append_transitions([protocol.Transition(t_now / 1e6, protocol.Direction.TO_OFF)],
                                 params.f_beacon)
    track.last_seen = t_now
    return track


def sequence_is_valid(track: Track, decodes: Sequence[protocol.Decode]) -> bool:
    """This tick's decodes agree on one payload consistent with the track history."""
    if not decodes:
        return False
    counts = Counter(d.payload for d in decodes).most_common()
    if len(counts) > 1 and counts[0][1] == counts[1][1]:
        return False
    best = counts[0][0]
    return track.payload is None or best == track.payload


def classify_track(track: Track, decodes: Sequence[protocol.Decode], t_now: int,
                   params: TrackerParams) -> bool:
    """Apply the confidence rule; returns True when the track should be forgotten."""
    if sequence_is_valid(track, decodes):
        track.confidence += params.valid_increment
        if track.payload is None:
            track.payload = Counter(d.payload for d in decodes).most_common(1)[0][0]
    else:
        track.confidence -= params.miss_decrement
    track.confidence = max(params.confidence_min, min(params.confidence_max, track.confidence))

    old = track.status
    if track.confidence >= params.confidence_max:
        track.status = Status.VALID
    elif track.confidence <= 0:
        track.status = Status.INVALID
    if track.status is not old:
        track.timeline.append({"t_us": t_now, "event": "status", "status": track.status.value,
                               "payload": track.payload})

    t_t = track.last_transition_time
    ref = t_t if t_t is not None else track.created_at
    return track.confidence <= params.confidence_min or t_now - ref > params.delay_max_us


FlowLookup = Callable[[Track], "tuple[float, float] | None"]


class Tracker:
    """Track registry; the tracking tick is its only writer."""

    def __init__(self, params: TrackerParams | None = None):
        self.params = params or TrackerParams()
        self.tracks: dict[int, Track] = {}
        self.forgotten: list[Track] = []
        self._next_id = 0

    def _spawn(self, target: Target, t_now: int) -> Track:
        tr = new_track(self._next_id, target, t_now, self.params)
        self._next_id += 1
        self.tracks[tr.id] = tr
        return tr

    def tick(self, targets: Sequence[Target], t_now: int,
             flow: FlowLookup | None = None) -> list[tuple[int, int]]:
        """One tracking step; returns ``(track id, payload)`` for valid tracks."""
        p = self.params
        live = [self.tracks[k] for k in sorted(self.tracks)]
        for tr in live:
            v = flow(tr) if (flow is not None and p.flow_mode != "off") else None
            predict(tr, v, p)
        pairs, unmatched, _ = associate(live, targets, p)
        for tr, j in pairs:
            update_track(tr, targets[j], t_now, p)
        drop = []
        for tr in live:
            decodes = tr.scan()
            for d in decodes:
                tr.timeline.append({"t_us": t_now, "event": "decode", "payload": d.payload})
            if classify_track(tr, decodes, t_now, p):
                drop.append(tr)
            tr.timeline.append({"t_us": t_now, "event": "pos", "x": round(tr.state[0], 3),
                                "y": round(tr.state[1], 3), "confidence": tr.confidence})
        for j in unmatched:
            self._spawn(targets[j], t_now)
        for tr in drop:
            tr.timeline.append({"t_us": t_now, "event": "forgotten"})
            self.forgotten.append(self.tracks.pop(tr.id))
        return [(tr.id, tr.payload) for tr in self.tracks.values()
                if tr.status is Status.VALID and tr.payload is not None]

    def all_tracks(self) -> list[Track]:
        return sorted([*self.tracks.values(), *self.forgotten], key=lambda t: t.id)
