"""Dual-rate runtime: a fast per-track decode path and a slow tracking tick.

Both loops are driven by stream time. Between ticks, events inside each
track's region of interest are voted into on/off transitions at twice the
beacon rate and appended to the track's bit buffer. Every tick clusters the
last window, advances the flow layer, and runs the tracker.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import protocol
from .cluster import ClusterParams, Target, accumulate_window, detect_targets
from .events import BeaconTruth, EventStream, GroundTruth, StreamValidationError
from .flow import FlowLayer, SnuParams, build_delay_kernels, event_frames, read_flow_at
from .tracker import Track, Tracker, TrackerParams

logger = logging.getLogger(__name__)

MODES = ("deterministic", "concurrent")


class ConfigError(ValueError):
    """Malformed or unknown configuration entry."""


@dataclass
class FlowConfig:
    n_dirs: int = 8
    n_speeds: int = 4
    kernel: int = 5
    max_delay: int = 10
    v_th: float = 5.0
    decay: float = 0.8
    substeps: int = 10
    read_radius: float = 12.0
    max_age: int = 10
    box_margin: int = 12


@dataclass
class DecodeParams:
    oversample: int = 2
    min_bin_events: int = 4
    roi_margin_px: float = 8.0
    roi_lead: float = 1.5  # tracking periods of predicted motion covered by the ROI


@dataclass
class PipelineConfig:
    tracking_rate_hz: float = 10.0
    f_beacon: float = 1000.0
    mode: str = "deterministic"
    seed: int = 0
    workers: int = 4
    cluster: ClusterParams = field(default_factory=ClusterParams)
    tracker: TrackerParams = field(default_factory=lambda: TrackerParams(polarity_updates=False))
    flow: FlowConfig = field(default_factory=FlowConfig)
    decode: DecodeParams = field(default_factory=DecodeParams)

    def __post_init__(self) -> None:
        if not self.tracking_rate_hz > 0:
            raise ConfigError("tracking_rate_hz must be > 0")
        if not self.f_beacon > 0:
            raise ConfigError("f_beacon must be > 0")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        # the tracker works in tracking periods and needs the bit rate
        self.tracker.f_beacon = self.f_beacon
        self.tracker.period_us = self.period_us

    @property
    def period_us(self) -> int:
        return int(round(1e6 / self.tracking_rate_hz))

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_ALIASES = {"tracking_rate": "tracking_rate_hz"}
_TOP = {"tracking_rate_hz", "f_beacon", "mode", "seed", "workers"}
_CLUSTER = {f.name for f in dataclasses.fields(ClusterParams)}


def _coerce(raw: str, like: Any, key: str) -> Any:
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc


def parse_config(text: str) -> PipelineConfig:
    """Parse ``key = value`` lines (``#`` comments) into a config."""
    cfg = PipelineConfig()
    top: dict[str, Any] = {}
    sections: dict[str, dict[str, Any]] = {"cluster": {}, "tracker": {}, "flow": {}, "decode": {}}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key in _TOP:
            top[key] = _coerce(raw, getattr(cfg, key), key)
        elif key in _CLUSTER:
            sections["cluster"][key] = _coerce(raw, getattr(cfg.cluster, key), key)
        elif key == "tracker.delay_max_ms":
            sections["tracker"]["delay_max_us"] = int(round(_coerce(raw, 0.0, key) * 1000))
        elif "." in key and key.split(".", 1)[0] in ("tracker", "flow", "decode"):
            sec, name = key.split(".", 1)
            obj = getattr(cfg, sec)
            if name not in {f.name for f in dataclasses.fields(obj)}:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            sections[sec][name] = _coerce(raw, getattr(obj, name), key)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    try:
        return PipelineConfig(
            **top,
            cluster=ClusterParams(**sections["cluster"]),
            tracker=TrackerParams(**{"polarity_updates": False, **sections["tracker"]}),
            flow=FlowConfig(**sections["flow"]),
            decode=DecodeParams(**sections["decode"]),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> PipelineConfig:
    return parse_config(Path(path).read_text())


# ------------------------------------------------------------------ decode path

@dataclass
class _Pending:
    sign: int
    tsum: float
    count: int
    last_bin: int


class RoiDecoder:
    """Per-ROI polarity vote at ``oversample * f_beacon`` bins.

    A bin with enough events and mean polarity >= 0.5 is an on vote, <= -0.5
    an off vote. Runs of adjacent same-sign bins merge into one transition
    timed at the mean event time; the last run of a batch is held back so it
    can continue into the next one.
    """

    def __init__(self, f_beacon: float, params: DecodeParams | None = None):
        self.f = f_beacon
        self.params = params or DecodeParams()
        self.pending: dict[int, _Pending] = {}
        self.events_seen = 0
        self.seconds = 0.0

    def roi(self, track: Track) -> tuple[float, float, float, float]:
        x, y = track.position
        vx, vy = track.velocity
        lead = self.params.roi_lead
        m = self.params.roi_margin_px
        xs, ys = (x, x + vx * lead), (y, y + vy * lead)
        return min(xs) - m, min(ys) - m, max(xs) + m, max(ys) + m

    def transitions(self, track_id: int, events: np.ndarray) -> list[protocol.Transition]:
        """Votes for one ROI batch; returns the transitions that are final."""
        out: list[protocol.Transition] = []
        pend = self.pending.get(track_id)
        if len(events):
            t = events["t"].astype(np.float64)
            bins = np.floor(t * (self.params.oversample * self.f) / 1e6).astype(np.int64)
            ub, inv, cnt = np.unique(bins, return_inverse=True, return_counts=True)
            psum = np.bincount(inv, weights=events["p"].astype(np.float64))
            tsum = np.bincount(inv, weights=t)
            mean = psum / cnt
            ok = cnt >= self.params.min_bin_events
            sign = np.where(ok & (mean >= 0.5), 1, np.where(ok & (mean <= -0.5), -1, 0))
            for b, s, ts, c in zip(ub.tolist(), sign.tolist(), tsum.tolist(), cnt.tolist()):
                if pend is not None and (s != pend.sign or b != pend.last_bin + 1):
                    out.append(_finish(pend))
                    pend = None
                if s == 0:
                    continue
                if pend is None:
                    pend = _Pending(s, ts, c, b)
                else:
                    pend.tsum += ts
                    pend.count += c
                    pend.last_bin = b
        if pend is None:
            self.pending.pop(track_id, None)
        else:
            self.pending[track_id] = pend
        return out

    def feed(self, tracks: Iterable[Track], batch: np.ndarray) -> None:
        start = time.perf_counter()
        xs = batch["x"].astype(np.float64)
        ys = batch["y"].astype(np.float64)
        for tr in tracks:
            x0, y0, x1, y1 = self.roi(tr)
            sel = (xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)
            trans = self.transitions(tr.id, batch[sel])
            if trans:
                tr.append_transitions(trans, self.f)
        self.events_seen += len(batch)
        self.seconds += time.perf_counter() - start

    def forget(self, track_id: int) -> None:
        self.pending.pop(track_id, None)


def _finish(p: _Pending) -> protocol.Transition:
    d = protocol.Direction.TO_ON if p.sign > 0 else protocol.Direction.TO_OFF
    return protocol.Transition(p.tsum / p.count / 1e6, d)


# ---------------------------------------------------------------------- scoring

def _truth_bit(truth: BeaconTruth, k: int) -> int | None:
    if not 0 <= k < len(truth.bits):
        return None
    return int(truth.bits[k])


def eval_frames(truth: BeaconTruth, t_start_us: float, t_end_us: float) -> list[int]:
    """Indices of whole frames inside ``[t_start, t_end]`` with the beacon visible throughout."""
    n = protocol.FRAME_BITS
    fp = n * truth.bit_period_us
    j0 = max(0, math.ceil((t_start_us - truth.t0_us) / fp - 1e-9))
    j1 = min(math.floor((t_end_us - truth.t0_us) / fp + 1e-9), len(truth.bits) // n) - 1
    out = []
    for j in range(j0, j1 + 1):
        a = truth.t0_us + j * fp
        if truth.is_visible(a, a + fp):
            out.append(j)
    return out


def mar(decodes: Sequence[tuple[float, int]], truth: BeaconTruth,
        frames: Sequence[int]) -> tuple[float | None, int, int]:
    """Message accuracy over the evaluated ``frames``.

    ``decodes`` are ``(first-bit time us, payload)``. A decode is assigned to
    the truth frame holding its middle bit; a wrong payload counts as
    incorrect, not missing. Returns ``(percent or None, correct, wrong)``.
    """
    if not frames:
        return None, 0, 0
    n = protocol.FRAME_BITS
    wanted = set(frames)
    correct: set[int] = set()
    wrong: set[int] = set()
    for t_us, payload in decodes:
        mid = truth.bit_index(t_us) + n // 2
        j = mid // n
        if j not in wanted:
            continue
        (correct if payload == truth.payload else wrong).add(j)
    wrong -= correct
    return 100.0 * len(correct) / len(wanted), len(correct), len(wrong)


def bar(bits: Sequence[tuple[float, int]], truth: BeaconTruth,
        frames: Sequence[int]) -> float | None:
    """Bit accuracy over the ground-truth bits of the evaluated frames.

    Decoded bits ``(start time us, value)`` are placed on the truth bit grid
    by timestamp; the first decoded value at a position is the one scored.
    """
    n = protocol.FRAME_BITS
    idx = [j * n + i for j in frames for i in range(n)]
    if not idx:
        return None
    got: dict[int, int] = {}
    for t_us, b in bits:
        got.setdefault(truth.bit_index(t_us), int(b))
    hits = sum(1 for k in idx if got.get(k) == _truth_bit(truth, k))
    return 100.0 * hits / len(idx)


def match_track(track: Track, truth: GroundTruth, period_us: int) -> str | None:
    """Beacon closest to the track's birth place, within twice its radius."""
    born = track.timeline[0]
    t_c, x, y = born["t_us"], born["x"], born["y"]
    best, best_d = None, math.inf
    for bid in sorted(truth.beacons):
        b = truth.beacons[bid]
        p = b.positions
        sel = (p[:, 0] >= t_c - period_us) & (p[:, 0] <= t_c)
        pts = p[sel] if np.any(sel) else np.array([[t_c, *b.position_at(t_c)]])
        d = float(np.min(np.hypot(pts[:, 1] - x, pts[:, 2] - y)))
        if d <= 2 * b.radius and d < best_d:
            best, best_d = bid, d
    return best


# ----------------------------------------------------------------------- report

@dataclass
class RunReport:
    tracks: list[dict[str, Any]] = field(default_factory=list)
    beacons: dict[str, dict[str, Any]] = field(default_factory=dict)
    mar: float | None = None
    bar: float | None = None
    n_events: int = 0
    duration_us: int = 0
    valid_payloads: list[int] = field(default_factory=list)
    throughput_eps: float = 0.0
    decode_throughput_eps: float = 0.0

    @property
    def valid_tracks(self) -> list[dict[str, Any]]:
        return [t for t in self.tracks if t["ever_valid"]]

    def to_dict(self, timing: bool = False) -> dict[str, Any]:
        d = {
            "mar": self.mar,
            "bar": self.bar,
            "n_events": self.n_events,
            "duration_us": self.duration_us,
            "n_tracks": len(self.tracks),
            "n_valid_tracks": len(self.valid_tracks),
            "valid_payloads": self.valid_payloads,
            "beacons": self.beacons,
            "tracks": self.tracks,
        }
        if timing:
            d["throughput_eps"] = self.throughput_eps
            d["decode_throughput_eps"] = self.decode_throughput_eps
        return d

    def to_json(self, timing: bool = False) -> str:
        """Deterministic JSON; wall-clock figures only when ``timing`` is set."""
        return json.dumps(self.to_dict(timing), sort_keys=True, indent=1)

    def metrics_csv(self) -> str:
        rows = [("mar", self.mar), ("bar", self.bar), ("n_tracks", len(self.tracks)),
                ("n_valid_tracks", len(self.valid_tracks)), ("n_events", self.n_events),
                ("throughput_eps", round(self.throughput_eps, 1)),
                ("decode_throughput_eps", round(self.decode_throughput_eps, 1))]
        for bid in sorted(self.beacons):
            rows.append((f"mar.{bid}", self.beacons[bid]["mar"]))
            rows.append((f"bar.{bid}", self.beacons[bid]["bar"]))
        lines = ["metric,value"] + [f"{k},{'' if v is None else v}" for k, v in rows]
        return "\n".join(lines) + "\n"


def _r(x: float | None) -> float | None:
    return None if x is None else round(x, 4)


def build_report(tracks: Sequence[Track], truth: GroundTruth | None, stream_end_us: int,
                 period_us: int, n_events: int) -> RunReport:
    rep = RunReport(n_events=n_events, duration_us=stream_end_us)
    owner: dict[int, str | None] = {}
    for tr in tracks:
        owner[tr.id] = match_track(tr, truth, period_us) if truth is not None else None
        ever_valid = any(e["event"] == "status" and e["status"] == "valid" for e in tr.timeline)
        rep.tracks.append({
            "id": tr.id,
            "status": tr.status.value,
            "payload": tr.payload,
            "ever_valid": ever_valid,
            "confidence": tr.confidence,
            "created_us": tr.created_at,
            "beacon": owner[tr.id],
            "n_decodes": len(tr.decodes),
            "timeline": tr.timeline,
        })
        if ever_valid and tr.payload is not None:
            rep.valid_payloads.append(tr.payload)
    rep.valid_payloads.sort()
    if truth is None:
        return rep

    tot_ok = tot_n = 0
    bar_hits = bar_n = 0.0
    for bid in sorted(truth.beacons):
        b = truth.beacons[bid]
        mine = [tr for tr in tracks if owner[tr.id] == bid]
        first_bits = [tr.bit_log[0][0] * 1e6 for tr in mine if tr.bit_log]
        frame_us = protocol.FRAME_BITS * b.bit_period_us
        entry: dict[str, Any] = {"track_ids": [tr.id for tr in mine], "payload": b.payload,
                                 "mar": None, "bar": None, "frames_evaluated": 0,
                                 "frames_correct": 0, "frames_wrong": 0}
        if first_bits:
            frames = eval_frames(b, min(first_bits), stream_end_us - 2 * frame_us)
            decodes = [(t * 1e6, p) for tr in mine for t, p in tr.decodes]
            bits = sorted((t * 1e6, v) for tr in mine for t, v in tr.bit_log)
            m, ok, bad = mar(decodes, b, frames)
            br = bar(bits, b, frames)
            entry.update(mar=_r(m), bar=_r(br), frames_evaluated=len(frames),
                         frames_correct=ok, frames_wrong=bad)
            tot_ok += ok
            tot_n += len(frames)
            if br is not None:
                bar_hits += br * len(frames)
                bar_n += len(frames)
        else:
            frames = eval_frames(b, 0.0, stream_end_us - 2 * frame_us)
            entry["frames_evaluated"] = len(frames)
            if frames:
                entry.update(mar=0.0, bar=0.0)
                tot_n += len(frames)
                bar_n += len(frames)
        rep.beacons[bid] = entry
    rep.mar = _r(100.0 * tot_ok / tot_n) if tot_n else None
    rep.bar = _r(bar_hits / bar_n) if bar_n else None
    return rep


# -------------------------------------------------------------------------- run

def _flow_boxes(tracks: Sequence[Track], targets: Sequence[Target], margin: int):
    boxes = []
    for tr in tracks:
        x, y = tr.position
        vx, vy = tr.velocity
        boxes.append((min(x, x + 2 * vx) - margin, min(y, y + 2 * vy) - margin,
                      max(x, x + 2 * vx) + margin + 1, max(y, y + 2 * vy) + margin + 1))
    for tg in targets:
        boxes.append((tg.x - margin, tg.y - margin, tg.x + margin + 1, tg.y + margin + 1))
    return boxes


def run(stream: EventStream, truth: GroundTruth | None = None,
        config: PipelineConfig | None = None) -> RunReport:
    """Process a whole stream and score it against ``truth`` when given."""
    cfg = config or PipelineConfig()
    if not stream.is_sorted():
        raise StreamValidationError("stream is not sorted by timestamp")
    ev = stream.events
    if len(ev) == 0:
        return RunReport()
    wall = time.perf_counter()
    period = cfg.period_us
    ts = np.ascontiguousarray(ev["t"])
    t_last = int(ts[-1])
    n_ticks = t_last // period + 1

    tracker = Tracker(cfg.tracker)
    decoder = RoiDecoder(cfg.f_beacon, cfg.decode)
    use_flow = cfg.tracker.flow_mode != "off"
    layer = None
    if use_flow:
        bank = build_delay_kernels(cfg.flow.n_dirs, cfg.flow.n_speeds, cfg.flow.kernel,
                                   cfg.flow.max_delay)
        layer = FlowLayer(stream.width, stream.height, bank,
                          SnuParams(v_th=cfg.flow.v_th, decay=cfg.flow.decay))
    step_us = period // cfg.flow.substeps

    def window_targets(k: int) -> list[Target]:
        t1 = (k + 1) * period
        w = accumulate_window(ev, t1 - cfg.cluster.window_us, cfg.cluster.window_us, ts)
        return detect_targets(w, cfg.cluster, t1)

    pool = None
    futures = None
    if cfg.mode == "concurrent":
        pool = ThreadPoolExecutor(max_workers=max(1, cfg.workers))
        futures = [pool.submit(window_targets, k) for k in range(n_ticks)]
    try:
        for k in range(n_ticks):
            t0, t1 = k * period, (k + 1) * period
            batch = accumulate_window(ev, t0, period, ts)
            live = [tracker.tracks[i] for i in sorted(tracker.tracks)]
            decoder.feed(live, batch)

            targets = futures[k].result() if futures is not None else window_targets(k)

            lookup = None
            if layer is not None:
                frames = event_frames(ev, t0, step_us, cfg.flow.substeps,
                                      stream.width, stream.height, ts)
                boxes = _flow_boxes(live, targets, cfg.flow.box_margin)
                for f in frames:
                    layer.step(f, boxes)
                layer.field.prune(layer.t - cfg.flow.max_age - 2 * cfg.flow.max_delay)
                now = layer.t

                def lookup(tr: Track, now=now):
                    return read_flow_at(layer.field, tr.position, cfg.flow.read_radius,
                                        cfg.flow.max_age, now, cfg.flow.substeps)

            before = set(tracker.tracks)
            tracker.tick(targets, t1, lookup)
            for gone in before - set(tracker.tracks):
                decoder.forget(gone)
    finally:
        if pool is not None:
            pool.shutdown(wait=True)

    rep = build_report(tracker.all_tracks(), truth, t_last + 1, period, len(ev))
    elapsed = time.perf_counter() - wall
    rep.throughput_eps = len(ev) / elapsed if elapsed > 0 else 0.0
    rep.decode_throughput_eps = decoder.events_seen / decoder.seconds if decoder.seconds > 0 else 0.0
    return rep
