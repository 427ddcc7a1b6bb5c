import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from beaconid import protocol
from beaconid.cluster import Target
from beaconid.events import BeaconSpec, NoiseSpec, SensorConfig, simulate, static
from beaconid.pipeline import PipelineConfig, run
from beaconid.protocol import Direction, Transition
from beaconid.tracker import (Status, Tracker, TrackerParams, associate, classify_track,
                              in_search_window, new_track, predict, update_track)

P = TrackerParams()


def target(x, y, pol=0.0, size=20):
    return Target(float(x), float(y), size, pol, 0)


def track_at(x, y, vx=0.0, vy=0.0, tid=0, params=P):
    tr = new_track(tid, target(x, y), 0, params)
    tr.state[2:] = (vx, vy)
    return tr


def decode(payload):
    return protocol.Decode(payload, 0)


# ---------------------------------------------------------------- predict


def test_predict_linear():
    tr = track_at(10, 10, 2, 0)
    x, _ = predict(tr, None, P)
    assert x[:2].tolist() == [12, 10]


def test_flow_replaces_velocity():
    tr = track_at(10, 10, 2, 0)
    x, _ = predict(tr, (0.0, 3.0), P)
    assert x[:2].tolist() == [10, 13]


def test_flow_blend_and_off():
    x, _ = predict(track_at(10, 10, 2, 0), (0.0, 4.0), TrackerParams(flow_mode="blend"))
    assert x[:2].tolist() == [11, 12]
    x, _ = predict(track_at(10, 10, 2, 0), (0.0, 4.0), TrackerParams(flow_mode="off"))
    assert x[:2].tolist() == [12, 10]


def test_stationary_covariance_grows():
    tr = track_at(5, 5)
    c0 = tr.cov.copy()
    x, c1 = predict(tr, None, P)
    assert x[:2].tolist() == [5, 5]
    assert np.all(np.diag(c1) > np.diag(c0))


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-5, 5), st.floats(-5, 5),
       st.integers(1, 20))
def test_predict_only_is_linear(x0, y0, vx, vy, n):
    tr = track_at(x0, y0, vx, vy)
    for _ in range(n):
        predict(tr, None, P)
    assert tr.state[0] == pytest.approx(x0 + n * vx, abs=1e-9)
    assert tr.state[1] == pytest.approx(y0 + n * vy, abs=1e-9)


# -------------------------------------------------------------- associate


def test_associate_example():
    params = TrackerParams(window_px=8)
    tr = track_at(5, 5, params=params)
    pairs, unmatched, lost = associate([tr], [target(6, 5), target(20, 20)], params)
    assert [(t.id, j) for t, j in pairs] == [(0, 0)]
    assert unmatched == [1] and lost == []


def test_tie_goes_to_lower_track_id():
    a, b = track_at(4, 5, tid=3), track_at(6, 5, tid=1)
    pairs, _, lost = associate([a, b], [target(5, 5)], P)
    assert [(t.id, j) for t, j in pairs] == [(1, 0)] and [t.id for t in lost] == [3]


def test_search_window_elongates_along_motion():
    pred = np.array([0.0, 0.0, 10.0, 0.0])
    assert in_search_window(pred, target(8, 0), 8)
    assert not in_search_window(pred, target(0, 8), 8)
    assert not in_search_window(np.array([0.0, 0, 0, 0]), target(8, 0), 8)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 40), st.integers(0, 40)), max_size=8),
       st.lists(st.tuples(st.integers(0, 40), st.integers(0, 40)), max_size=8))
def test_association_is_injective(track_pts, target_pts):
    tracks = [track_at(x, y, tid=i) for i, (x, y) in enumerate(track_pts)]
    tgs = [target(x, y) for x, y in target_pts]
    pairs, unmatched, lost = associate(tracks, tgs, P)
    ids = [t.id for t, _ in pairs]
    js = [j for _, j in pairs]
    assert len(set(ids)) == len(ids) and len(set(js)) == len(js)
    assert sorted(js + unmatched) == list(range(len(tgs)))
    assert sorted(ids + [t.id for t in lost]) == list(range(len(tracks)))


# ----------------------------------------------------------------- update


def seeded(direction):
    tr = track_at(5, 5)
    tr.append_transitions([Transition(0.0, direction)], 1000.0)
    return tr


def test_on_transition_appends_zeros():
    tr = seeded(Direction.TO_OFF)
    update_track(tr, target(5, 5, pol=1.0), 3000, P)
    assert tr.buffer.bits == [0, 0, 0] and tr.last_transition_time == 3000


def test_low_polarity_moves_only():
    tr = seeded(Direction.TO_OFF)
    update_track(tr, target(7, 5, pol=0.2), 3000, P)
    assert tr.buffer.bits == [] and tr.last_transition_time == 0
    assert tr.state[0] > 5 and tr.last_seen == 3000


def test_off_transition_appends_one():
    tr = seeded(Direction.TO_ON)
    update_track(tr, target(5, 5, pol=-1.0), 1000, P)
    assert tr.buffer.bits == [1]


def test_size_smoothing():
    tr = track_at(5, 5)
    update_track(tr, target(5, 5, size=40), 0, P)
    assert tr.size == 30.0


def test_polarity_rule_can_be_disabled():
    tr = seeded(Direction.TO_OFF)
    update_track(tr, target(5, 5, pol=1.0), 3000, TrackerParams(polarity_updates=False))
    assert tr.buffer.bits == []


# --------------------------------------------------------------- classify


def test_five_valid_frames_make_valid():
    tr = track_at(0, 0)
    for k in range(5):
        assert not classify_track(tr, [decode(42)], k, P)
    assert tr.confidence == 20 and tr.status is Status.VALID and tr.payload == 42


def test_ten_misses_forget():
    tr = track_at(0, 0)
    forget = [classify_track(tr, [], k, P) for k in range(10)]
    assert forget == [False] * 9 + [True]
    assert tr.confidence == 0 and tr.status is Status.INVALID


def test_inconsistent_payload_is_a_miss():
    tr = track_at(0, 0)
    classify_track(tr, [decode(42)], 0, P)
    classify_track(tr, [decode(17)], 1, P)
    assert tr.confidence == 11 and tr.payload == 42


def test_timeout_forgets():
    tr = track_at(0, 0)
    tr.confidence = 20
    assert not classify_track(tr, [decode(1)], 400_000, P)
    assert classify_track(tr, [decode(1)], 600_000, P)


def test_confidence_clamped_at_max():
    tr = track_at(0, 0)
    for k in range(20):
        classify_track(tr, [decode(9)], k, P)
    assert tr.confidence == 20


def test_params_invariant():
    with pytest.raises(ValueError):
        TrackerParams(confidence_init=30)
    with pytest.raises(ValueError):
        TrackerParams(flow_mode="sideways")


# -------------------------------------------------------------------- tick


def test_empty_tick():
    tk = Tracker()
    assert tk.tick([], 100_000) == [] and tk.tracks == {}


def test_targets_without_tracks_spawn_at_initial_confidence():
    tk = Tracker()
    tk.tick([target(5, 5), target(50, 50)], 100_000)
    assert [t.confidence for t in tk.tracks.values()] == [10, 10]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.lists(st.tuples(st.integers(0, 60), st.integers(0, 60),
                                             st.sampled_from([1.0, -1.0, 0.0])), max_size=4),
                          st.lists(st.integers(0, 63), max_size=2)),
                min_size=1, max_size=30))
def test_tick_invariants(script):
    tk = Tracker(TrackerParams(delay_max_us=10**9))
    seen_ids, valid_payload = set(), {}
    for k, (tgs, payloads) in enumerate(script):
        # inject decodes directly into live buffers as whole frames
        for tr in tk.tracks.values():
            for p in payloads:
                bits = protocol.encode_frame(p)
                tr.buffer.bits.extend(bits)
                tr.buffer.times.extend([k * 0.1] * len(bits))
        born = set(tk.tracks)
        out = tk.tick([target(x, y, pol) for x, y, pol in tgs], (k + 1) * 100_000)
        new = set(tk.tracks) - born
        assert not (new & seen_ids)
        seen_ids |= set(tk.tracks) | {t.id for t in tk.forgotten}
        for tr in tk.tracks.values():
            assert 0 <= tr.confidence <= 20
        for tid, p in out:
            assert valid_payload.setdefault(tid, p) == p


# ------------------------------------------------------------ end to end


def clean_run(duration, occlusions=()):
    b = BeaconSpec(42, 1000.0, 3.0, static(60, 40), occlusions=list(occlusions))
    stream, truth = simulate([b], NoiseSpec(), SensorConfig(width=128, height=96), duration, seed=0)
    return run(stream, truth, PipelineConfig())


def test_clean_beacon_becomes_valid():
    rep = clean_run(3.0)
    valid = rep.valid_tracks
    assert len(valid) == 1 and valid[0]["payload"] == 42


def test_occlusion_keeps_the_same_track():
    rep = clean_run(3.0, occlusions=[(1.4, 1.6)])
    valid = rep.valid_tracks
    assert len(valid) == 1
    tl = valid[0]["timeline"]
    assert not any(e["event"] == "forgotten" for e in tl)
    decode_times = [e["t_us"] for e in tl if e["event"] == "decode"]
    assert min(decode_times) < 1_400_000 and max(decode_times) > 1_700_000
