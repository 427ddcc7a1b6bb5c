"""Codec for the 11-bit beacon frame.

A frame is the start code ``1110``, a 6-bit payload (MSB first) and one
parity bit. Beacons repeat the same frame forever, so a receiver sees an
arbitrary rotation of it and has to re-align on the start code.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

START_CODE = (1, 1, 1, 0)
PAYLOAD_BITS = 6
FRAME_BITS = len(START_CODE) + PAYLOAD_BITS + 1
MAX_PAYLOAD = (1 << PAYLOAD_BITS) - 1


class ProtocolError(ValueError):
    """Raised on contract violations (payload range, window length)."""


class Direction(enum.Enum):
    TO_ON = 1
    TO_OFF = -1


@dataclass(frozen=True)
class Transition:
    time: float  # seconds
    direction: Direction


class AlignStatus(enum.Enum):
    OK = "ok"
    NO_START_CODE = "no_start_code"
    AMBIGUOUS = "ambiguous"


@dataclass(frozen=True)
class Alignment:
    status: AlignStatus
    payload: int | None = None
    offset: int | None = None

    @property
    def ok(self) -> bool:
        return self.status is AlignStatus.OK


@dataclass
class BitBuffer:
    """Run-length decoded bits of one track, most recent last.

    ``times`` holds the start time (seconds) of every bit so decodes can be
    scored against ground truth. ``consumed`` is the index up to which
    :func:`frame_scan` has already looked.
    """

    bits: list[int] = field(default_factory=list)
    times: list[float] = field(default_factory=list)
    last_transition_time: float | None = None
    consumed: int = 0
    resets: int = 0

    def __len__(self) -> int:
        return len(self.bits)

    def reset(self, seed_time: float | None = None) -> None:
        self.bits.clear()
        self.times.clear()
        self.consumed = 0
        self.last_transition_time = seed_time
        self.resets += 1


def _check_payload(payload: int) -> None:
    if not isinstance(payload, (int,)) or isinstance(payload, bool):
        raise ProtocolError(f"payload must be an int, got {payload!r}")
    if not 0 <= payload <= MAX_PAYLOAD:
        raise ProtocolError(f"payload {payload} outside [0, {MAX_PAYLOAD}]")


def parity_bit(payload: int) -> int:
    """1 when the payload has an even number of ones (zero included)."""
    _check_payload(payload)
    return 1 if bin(payload).count("1") % 2 == 0 else 0


def payload_bits(payload: int) -> list[int]:
    _check_payload(payload)
    return [(payload >> (PAYLOAD_BITS - 1 - i)) & 1 for i in range(PAYLOAD_BITS)]


def encode_frame(payload: int) -> list[int]:
    return [*START_CODE, *payload_bits(payload), parity_bit(payload)]


def bits_to_int(bits: Sequence[int]) -> int:
    value = 0
    for b in bits:
        value = (value << 1) | int(b)
    return value


def rotate(bits: Sequence[int], r: int) -> list[int]:
    """Left rotation by ``r`` positions."""
    n = len(bits)
    if n == 0:
        return []
    r %= n
    return list(bits[r:]) + list(bits[:r])


def frame_is_valid(frame: Sequence[int]) -> bool:
    """Start code present and parity consistent, at this exact alignment."""
    if len(frame) != FRAME_BITS:
        return False
    if tuple(frame[:4]) != START_CODE:
        return False
    return int(frame[-1]) == parity_bit(bits_to_int(frame[4:-1]))


def align_frame(window: Sequence[int]) -> Alignment:
    """Search all 11 rotations of ``window`` for a parity-valid frame.

    Several rotations can validate when the start code also appears inside
    payload+parity. If they all carry the same payload it is returned
    (first offset); distinct payloads give ``AMBIGUOUS``.
    """
    if len(window) != FRAME_BITS:
        raise ProtocolError(f"window must have {FRAME_BITS} bits, got {len(window)}")
    found: dict[int, int] = {}
    for r in range(FRAME_BITS):
        cand = rotate(window, r)
        if frame_is_valid(cand):
            found.setdefault(bits_to_int(cand[4:-1]), r)
    if not found:
        return Alignment(AlignStatus.NO_START_CODE)
    if len(found) > 1:
        return Alignment(AlignStatus.AMBIGUOUS)
    (payload, offset), = found.items()
    return Alignment(AlignStatus.OK, payload, offset)


def runs_from_transitions(
    transitions: Sequence[Transition],
    f_beacon: float,
    buffer: BitBuffer,
) -> BitBuffer:
    """Expand transitions into bit runs, in place.

    The gap since the previous transition counts ``round(gap * f_beacon)``
    identical bits: zeros before an on transition, ones before an off
    transition. The very first transition only seeds the timestamp.
    Gaps of zero bit periods are jitter and are dropped; gaps longer than a
    frame mean the signal was lost and clear the buffer.
    """
    if f_beacon <= 0:
        raise ProtocolError("f_beacon must be positive")
    period = 1.0 / f_beacon
    for tr in transitions:
        t_t = buffer.last_transition_time
        if t_t is None:
            buffer.last_transition_time = tr.time
            continue
        if tr.time < t_t:
            raise ProtocolError("transitions must be time-sorted and after the buffer's last transition")
        n = int(round((tr.time - t_t) * f_beacon))
        if n == 0:
            continue
        if n > FRAME_BITS:
            buffer.reset(seed_time=tr.time)
            continue
        bit = 0 if tr.direction is Direction.TO_ON else 1
        buffer.bits.extend([bit] * n)
        buffer.times.extend(t_t + i * period for i in range(n))
        buffer.last_transition_time = tr.time
    return buffer


@dataclass(frozen=True)
class Decode:
    payload: int
    index: int  # index of the window's first bit in the buffer


def frame_scan(buffer: BitBuffer) -> list[Decode]:
    """Decode every complete frame added since the last scan.

    Windows advance by a full frame after a success and by one bit after a
    failure, so the scanner re-anchors past junk bits.
    """
    out: list[Decode] = []
    i = buffer.consumed
    bits = buffer.bits
    while i + FRAME_BITS <= len(bits):
        res = align_frame(bits[i:i + FRAME_BITS])
        if res.ok:
            out.append(Decode(res.payload, i))
            i += FRAME_BITS
        else:
            i += 1
    buffer.consumed = i
    return out


def parse_bits(text: str) -> list[int]:
    text = text.strip()
    if not text or set(text) - {"0", "1"}:
        raise ProtocolError(f"bit string must contain only 0/1, got {text!r}")
    return [int(c) for c in text]


def format_bits(bits: Sequence[int]) -> str:
    return "".join(str(int(b)) for b in bits)
