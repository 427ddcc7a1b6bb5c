"""Sparse optical flow from a layer of delayed spiking units.

Every pixel hosts ``n_dirs * n_speeds`` units. Each unit sees the 5x5
neighbourhood of the input through per-synapse delays that grow along its
preferred direction, so an edge moving at the preferred velocity arrives at
the unit in one synchronous volley.

Kernel offsets use convolution orientation: offset ``(dx, dy)`` reads the
input pixel ``p - (dx, dy)``. Delays grow with the projection of the offset
on the preferred direction, which is therefore the upstream side.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass
class SnuParams:
    v_th: float = 5.0
    decay: float = 0.8
    weight: float = 1.0

    def __post_init__(self) -> None:
        if self.v_th <= 0:
            raise ValueError("v_th must be positive")
        if not 0.0 <= self.decay < 1.0:
            raise ValueError("decay must be in [0, 1)")


@dataclass
class DelayKernelBank:
    delays: np.ndarray  # int [n_dirs, n_speeds, k, k], indexed [d, s, dy + h, dx + h]
    max_delay: int
    max_proj: np.ndarray  # per direction, largest |projection| over the kernel (px)

    @property
    def n_dirs(self) -> int:
        return self.delays.shape[0]

    @property
    def n_speeds(self) -> int:
        return self.delays.shape[1]

    @property
    def k(self) -> int:
        return self.delays.shape[2]

    @property
    def n_units(self) -> int:
        return self.n_dirs * self.n_speeds

    def unit(self, d: int, s: int) -> int:
        return d * self.n_speeds + s

    def unit_ds(self, u: int) -> tuple[int, int]:
        return divmod(int(u), self.n_speeds)

    def angle(self, d: int) -> float:
        return 2.0 * math.pi * d / self.n_dirs

    def tuned_speed(self, d: int, s: int) -> float:
        """Edge speed (px per flow step) that the rounded delays of unit (d, s) favour.

        Least-squares slope of delay against the offset's projection on the
        preferred direction, inverted. Rounding makes this differ slightly
        from the nominal ``2 * max_proj / span``.
        """
        h = (self.k - 1) // 2
        dy, dx = np.mgrid[-h:h + 1, -h:h + 1]
        a = self.angle(d)
        proj = (dx * round(math.cos(a), 12) + dy * round(math.sin(a), 12)).ravel()
        dl = self.delays[d, s].ravel().astype(float)
        pc = proj - proj.mean()
        slope = float((pc * (dl - dl.mean())).sum() / (pc * pc).sum())
        return 1.0 / slope

    def velocity(self, d: int, s: int, steps: float = 1.0) -> tuple[float, float]:
        v = self.tuned_speed(d, s) * steps
        a = self.angle(d)
        return (v * round(math.cos(a), 12), v * round(math.sin(a), 12))


def build_delay_kernels(n_dirs: int = 8, n_speeds: int = 4, k: int = 5,
                        max_delay: int = 10) -> DelayKernelBank:
    if k < 3 or k % 2 == 0:
        raise ValueError("kernel size must be odd and >= 3")
    if max_delay < n_speeds:
        raise ValueError("max_delay must be >= n_speeds")
    h = (k - 1) // 2
    dy, dx = np.mgrid[-h:h + 1, -h:h + 1]
    delays = np.zeros((n_dirs, n_speeds, k, k), dtype=np.int64)
    max_proj = np.zeros(n_dirs)
    for d in range(n_dirs):
        a = 2.0 * math.pi * d / n_dirs
        raw = dx * round(math.cos(a), 12) + dy * round(math.sin(a), 12)
        max_proj[d] = np.abs(raw).max()
        proj = raw * h / max_proj[d]
        for s in range(n_speeds):
            val = max_delay * (s + 1) / n_speeds * (proj + h) / (k - 1)
            # half-to-even, like round(); cleaner synchrony on the diagonals than half-up
            delays[d, s] = np.clip(np.round(np.round(val, 9)), 0, max_delay)
    return DelayKernelBank(delays, max_delay, max_proj)


def snu_step(state, prev_out, drive, params: SnuParams):
    """One update of a delayed spiking unit (identity input, unit-step output).

    ``drive`` is the weighted sum of inputs delivered this step.
    """
    s = params.weight * np.asarray(drive, dtype=float) \
        + params.decay * np.asarray(state, dtype=float) * (1 - np.asarray(prev_out))
    y = (s >= params.v_th).astype(np.int8)
    if np.ndim(s) == 0:
        return float(s), int(y)
    return s, y


# ------------------------------------------------------------------ flow field

@dataclass
class FlowEntry:
    x: int
    y: int
    direction: int
    speed: int
    step: int
    strength: float


@dataclass
class FlowField:
    """Firings of the layer: at most one per pixel and step.

    ``entries()`` applies temporal non-maximum suppression: a firing is kept
    only if no stronger firing happens at the same pixel within ``nms_window``
    steps either side. This is what makes the field direction selective,
    since a straight edge alone already lines up ``k`` coincident inputs on
    units tuned along it.
    """

    bank: DelayKernelBank
    nms_window: int = 10
    _rows: list = field(default_factory=list)  # chunks of (step, y, x, unit, strength)
    _cache: np.ndarray | None = field(default=None, repr=False)

    def add(self, step: int, ys: np.ndarray, xs: np.ndarray, units: np.ndarray,
            strength: np.ndarray) -> None:
        if len(ys) == 0:
            return
        chunk = np.zeros((len(ys), 5))
        chunk[:, 0] = step
        chunk[:, 1] = ys
        chunk[:, 2] = xs
        chunk[:, 3] = units
        chunk[:, 4] = strength
        self._rows.append(chunk)
        self._cache = None

    def prune(self, before_step: int) -> None:
        kept = []
        for c in self._rows:
            c = c[c[:, 0] >= before_step]
            if len(c):
                kept.append(c)
        self._rows = kept
        self._cache = None

    def raw(self) -> np.ndarray:
        if not self._rows:
            return np.zeros((0, 5))
        if len(self._rows) > 1:
            self._rows = [np.concatenate(self._rows)]
        return self._rows[0]

    def __len__(self) -> int:
        return len(self.raw())

    def resolved(self) -> np.ndarray:
        if self._cache is not None:
            return self._cache
        rows = self.raw()
        if len(rows) == 0:
            return rows
        order = np.lexsort((rows[:, 0], rows[:, 2], rows[:, 1]))
        rows = rows[order]
        pix = rows[:, 1] * 1_000_003 + rows[:, 2]
        step, unit, st = rows[:, 0], rows[:, 3], rows[:, 4]
        keep = np.ones(len(rows), dtype=bool)
        w = self.nms_window
        # rows are grouped by pixel and time-sorted, so comparing each row with
        # the one k places later covers every pair until the window runs out
        for k in range(1, len(rows)):
            pair = (pix[:-k] == pix[k:]) & (step[k:] - step[:-k] <= w)
            if not pair.any():
                break
            a = np.nonzero(pair)[0]
            b = a + k
            # dominance: stronger, then lower unit index, then earlier (a is earlier)
            b_wins = (st[b] > st[a]) | ((st[b] == st[a]) & (unit[b] < unit[a]))
            keep[a[b_wins]] = False
            keep[b[~b_wins]] = False
        self._cache = rows[keep]
        return self._cache

    def entries(self) -> list[FlowEntry]:
        out = []
        for step, y, x, u, st in self.resolved().tolist():
            d, s = self.bank.unit_ds(u)
            out.append(FlowEntry(int(x), int(y), d, s, int(step), st))
        return out


def read_flow_at(field_: FlowField, position: tuple[float, float], radius: float,
                 max_age: int, now: int, steps_per_period: float = 10.0):
    """Velocity (px per tracking period) of the best entry near ``position``.

    Candidates are resolved entries within ``radius`` and ``max_age`` steps.
    The strongest wins; ties go to the nearest, then the most recent.
    Returns ``None`` when nothing qualifies.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    rows = field_.resolved()
    if len(rows) == 0:
        return None
    age = now - rows[:, 0]
    dist2 = (rows[:, 2] - position[0]) ** 2 + (rows[:, 1] - position[1]) ** 2
    ok = (age >= 0) & (age <= max_age) & (dist2 <= radius * radius)
    if not np.any(ok):
        return None
    cand = np.nonzero(ok)[0]
    best = cand[np.lexsort((age[cand], dist2[cand], -rows[cand, 4]))[0]]
    d, s = field_.bank.unit_ds(rows[best, 3])
    return field_.bank.velocity(d, s, steps_per_period)


# ----------------------------------------------------------------------- layer

def _merge_boxes(boxes):
    boxes = [list(b) for b in boxes]
    merged = True
    while merged:
        merged = False
        out = []
        while boxes:
            b = boxes.pop()
            for o in out:
                if b[0] < o[2] and o[0] < b[2] and b[1] < o[3] and o[1] < b[3]:
                    o[0], o[1] = min(o[0], b[0]), min(o[1], b[1])
                    o[2], o[3] = max(o[2], b[2]), max(o[3], b[3])
                    merged = True
                    break
            else:
                out.append(b)
        boxes = out
    return [tuple(b) for b in sorted(boxes)]


class FlowLayer:
    """Stateful layer over a ``height x width`` sensor.

    ``step`` consumes one binary event frame. With ``onset=True`` only pixels
    that turned active since the previous step drive the units, so a lit
    blinking blob contributes its moving front rather than a static disc.
    Computation can be limited to boxes ``(x0, y0, x1, y1)``; pixels outside
    are skipped and their state decays lazily when they come back.
    """

    def __init__(self, width: int, height: int, bank: DelayKernelBank | None = None,
                 params: SnuParams | None = None, onset: bool = True):
        self.width, self.height = width, height
        self.bank = bank or build_delay_kernels()
        self.params = params or SnuParams()
        self.onset = onset
        self.L = self.bank.max_delay + 1
        self.hist = np.zeros((self.L, height, width), dtype=np.uint8)
        self.prev_active = np.zeros((height, width), dtype=bool)
        n_u = self.bank.n_units
        self.state = np.zeros((n_u, height, width), dtype=np.float32)
        self.out = np.zeros((n_u, height, width), dtype=np.uint8)
        self.last_step = np.full((height, width), -1, dtype=np.int64)
        self.t = -1
        k = self.bank.k
        self.half = (k - 1) // 2
        # window index (iy, ix) reads p + (iy - h, ix - h), i.e. kernel offset (h - ix, h - iy)
        flipped = self.bank.delays[:, :, ::-1, ::-1]
        self.delay_w = flipped.reshape(n_u, k, k)
        # synapses grouped by delay for the sparse drive: (unit, iy, ix) per delay value
        self._by_delay = []
        for tau in range(self.bank.max_delay + 1):
            u, iy, ix = np.nonzero(self.delay_w == tau)
            self._by_delay.append((u.astype(np.int64), iy.astype(np.int64), ix.astype(np.int64)))
        self.field = FlowField(self.bank, nms_window=self.bank.max_delay)

    def step(self, frame: np.ndarray, boxes=None) -> int:
        """Advance one step; returns the number of pixels that produced a firing."""
        self.t += 1
        frame = np.asarray(frame, dtype=bool)
        drive_in = frame & ~self.prev_active if self.onset else frame
        self.prev_active = frame
        self.hist[self.t % self.L] = drive_in
        if boxes is None:
            boxes = [(0, 0, self.width, self.height)]
        else:
            boxes = _merge_boxes(
                (max(0, int(x0)), max(0, int(y0)), min(self.width, int(x1)), min(self.height, int(y1)))
                for x0, y0, x1, y1 in boxes)
        fired = 0
        for x0, y0, x1, y1 in boxes:
            if x1 > x0 and y1 > y0:
                fired += self._step_box(x0, y0, x1, y1)
        return fired

    def _padded_history(self, x0, y0, x1, y1) -> np.ndarray:
        h = self.half
        bh, bw = y1 - y0, x1 - x0
        pad = np.zeros((self.L, bh + 2 * h, bw + 2 * h), dtype=np.uint8)
        sy0, sy1 = max(0, y0 - h), min(self.height, y1 + h)
        sx0, sx1 = max(0, x0 - h), min(self.width, x1 + h)
        pad[:, sy0 - (y0 - h):sy1 - (y0 - h), sx0 - (x0 - h):sx1 - (x0 - h)] = \
            self.hist[:, sy0:sy1, sx0:sx1]
        return pad

    def _drive_dense(self, pad: np.ndarray, bh: int, bw: int) -> np.ndarray:
        """Reference drive: gather every synapse from a sliding window."""
        k = self.bank.k
        win = sliding_window_view(pad, (k, k), axis=(1, 2))  # (L, bh, bw, k, k)
        ring = (self.t - self.delay_w) % self.L  # (U, k, k)
        drive = np.zeros((self.bank.n_units, bh, bw), dtype=np.float32)
        for iy in range(k):
            for ix in range(k):
                drive += win[ring[:, iy, ix], :, :, iy, ix]
        return drive

    def _drive_sparse(self, pad: np.ndarray, bh: int, bw: int) -> np.ndarray:
        """Same drive as :meth:`_drive_dense`, scattered from the active inputs."""
        n_u = self.bank.n_units
        idx = []
        for tau, (u, iy, ix) in enumerate(self._by_delay):
            if len(u) == 0:
                continue
            py, px = np.nonzero(pad[(self.t - tau) % self.L])
            if len(py) == 0:
                continue
            oy = py[None, :] - iy[:, None]
            ox = px[None, :] - ix[:, None]
            ok = (oy >= 0) & (oy < bh) & (ox >= 0) & (ox < bw)
            uu = np.broadcast_to(u[:, None], ok.shape)
            idx.append(((uu[ok] * bh + oy[ok]) * bw + ox[ok]))
        if not idx:
            return np.zeros((n_u, bh, bw), dtype=np.float32)
        flat = np.bincount(np.concatenate(idx), minlength=n_u * bh * bw)
        return flat.reshape(n_u, bh, bw).astype(np.float32)

    def _step_box(self, x0, y0, x1, y1) -> int:
        bh, bw = y1 - y0, x1 - x0
        pad = self._padded_history(x0, y0, x1, y1)
        if not pad.any():
            # no drive anywhere in reach: state only decays, caught up lazily later
            return 0
        drive = self._drive_sparse(pad, bh, bw)

        st = self.state[:, y0:y1, x0:x1]
        yo = self.out[:, y0:y1, x0:x1]
        gap = self.t - self.last_step[y0:y1, x0:x1]
        stale = gap > 1
        if np.any(stale):
            # skipped steps had zero drive: the first resets fired units, later ones decay
            fade = (self.params.decay ** np.minimum(gap - 1, 1000)).astype(np.float32)
            st[:, stale] *= fade[stale] * (1 - yo[:, stale])
            yo[:, stale] = 0
        s, y = snu_step(st, yo, drive, self.params)
        self.state[:, y0:y1, x0:x1] = s
        self.out[:, y0:y1, x0:x1] = y
        self.last_step[y0:y1, x0:x1] = self.t

        any_fire = y.any(axis=0)
        if not any_fire.any():
            return 0
        masked = np.where(y.astype(bool), s, -np.inf)
        win_u = np.argmax(masked, axis=0)  # first max: lowest direction, then speed
        py, px = np.nonzero(any_fire)
        units = win_u[py, px]
        self.field.add(self.t, py + y0, px + x0, units, s[units, py, px])
        return len(py)


def event_frames(events: np.ndarray, t0: int, step_us: int, n_steps: int,
                 width: int, height: int, times: np.ndarray | None = None) -> np.ndarray:
    """Binarize time-sorted events into ``n_steps`` frames of ``step_us``."""
    frames = np.zeros((n_steps, height, width), dtype=bool)
    t = events["t"] if times is None else times
    key = np.array([max(t0, 0), max(t0 + n_steps * step_us, 0)]).astype(t.dtype)
    lo, hi = np.searchsorted(t, key, side="left")
    ev = events[lo:hi]
    if len(ev):
        k = ((ev["t"].astype(np.int64) - t0) // step_us).astype(np.int64)
        frames[k, ev["y"].astype(np.int64), ev["x"].astype(np.int64)] = True
    return frames
