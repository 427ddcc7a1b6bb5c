import json

import numpy as np
import pytest

from beaconid import protocol
from beaconid.events import (BeaconSpec, BeaconTruth, EventStream, NoiseSpec, SensorConfig,
                             StreamValidationError, simulate, simulate_scene, static)
from beaconid.pipeline import (ConfigError, PipelineConfig, RunReport, bar, eval_frames, mar,
                               parse_config, run)
from beaconid.scenarios import noise_scene

IDEAL = SensorConfig(width=64, height=48, timestamp_jitter_sigma=0, refractory_period=0)


@pytest.fixture(scope="module")
def truth10():
    """Ground truth of a static 1 kHz beacon emitting exactly 10 frames."""
    b = BeaconSpec(42, 1000.0, 3.0, static(30, 20))
    _, truth = simulate([b], NoiseSpec(), IDEAL, 0.110, seed=0)
    return truth.beacons["0"]


@pytest.fixture(scope="module")
def clean_2s():
    b = BeaconSpec(42, 1000.0, 3.0, static(60, 40))
    return simulate([b], NoiseSpec(), SensorConfig(width=128, height=96), 2.0, seed=0)


# ----------------------------------------------------------------- config


def test_parse_config_sections():
    cfg = parse_config("""
        # comment
        tracking_rate = 20
        f_beacon = 2500   # trailing comment
        eps = 2.5
        tracker.delay_max_ms = 250
        tracker.flow_mode = off
        flow.v_th = 4
        decode.min_bin_events = 3
        mode = concurrent
    """)
    assert cfg.tracking_rate_hz == 20 and cfg.period_us == 50_000
    assert cfg.f_beacon == 2500 and cfg.cluster.eps == 2.5
    assert cfg.tracker.delay_max_us == 250_000 and cfg.tracker.flow_mode == "off"
    assert cfg.tracker.f_beacon == 2500 and cfg.tracker.period_us == 50_000
    assert cfg.flow.v_th == 4.0 and cfg.decode.min_bin_events == 3
    assert cfg.mode == "concurrent"


@pytest.mark.parametrize("text", ["bogus = 1", "tracker.nope = 1", "eps", "f_beacon = fast",
                                  "f_beacon = 0", "mode = turbo", "tracker.flow_mode = sideways",
                                  "shape_ratio = 2", "tracking_rate = -1"])
def test_parse_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_default_config_disables_tick_polarity_rule():
    assert PipelineConfig().tracker.polarity_updates is False


# ---------------------------------------------------------------- metrics


def starts(truth, frames):
    return [truth.bit_start(j * protocol.FRAME_BITS) for j in frames]


def test_eval_frames_counts_whole_frames(truth10):
    assert eval_frames(truth10, 0, 110_000) == list(range(10))
    assert eval_frames(truth10, 5_000, 110_000) == list(range(1, 10))


def test_mar_nine_of_ten(truth10):
    frames = list(range(10))
    dec = [(t, 42) for t in starts(truth10, frames[:9])]
    assert mar(dec, truth10, frames) == (90.0, 9, 0)


def test_mar_nothing_decoded(truth10):
    assert mar([], truth10, list(range(10)))[0] == 0.0


def test_mar_wrong_payload_is_incorrect(truth10):
    frames = list(range(10))
    dec = [(t, 42) for t in starts(truth10, frames[:8])] + [(starts(truth10, [8])[0], 17)]
    pct, ok, wrong = mar(dec, truth10, frames)
    assert pct == 80.0 and ok == 8 and wrong == 1


def test_mar_undefined_without_frames(truth10):
    assert mar([(0.0, 42)], truth10, [])[0] is None
    assert bar([(0.0, 1)], truth10, []) is None


def test_mar_rotated_decode_lands_on_its_frame(truth10):
    # a decode that starts mid-frame counts for the frame holding its middle bit
    t = truth10.bit_start(3 * protocol.FRAME_BITS + 4)
    assert mar([(t, 42)], truth10, [3])[0] == 100.0


def test_bar_perfect(truth10):
    bits = [(truth10.bit_start(k), int(truth10.bits[k])) for k in range(110)]
    assert bar(bits, truth10, list(range(10))) == 100.0


def test_bar_reset_drops_eleven_bits(truth10):
    bits = [(truth10.bit_start(k), int(truth10.bits[k])) for k in range(110) if not 33 <= k < 44]
    assert bar(bits, truth10, list(range(10))) == pytest.approx(90.0)


def test_bar_all_ones_on_alternating_truth():
    alt = BeaconTruth(payload=0, bits="10" * 55, bit_period_us=1000.0, t0_us=0.0, radius=3.0,
                      positions=np.array([[0, 30, 20], [110_000, 30, 20]], dtype=float),
                      occlusions=[], visible=np.array([True, True]))
    ones = [(alt.bit_start(k), 1) for k in range(110)]
    assert bar(ones, alt, list(range(10))) == 50.0


# --------------------------------------------------------------------- run


def test_clean_static_beacon(clean_2s):
    stream, truth = clean_2s
    rep = run(stream, truth)
    assert rep.mar == 100.0 and rep.bar == 100.0
    assert len(rep.valid_tracks) == 1 and rep.valid_payloads == [42]
    assert rep.beacons["0"]["track_ids"] == [rep.valid_tracks[0]["id"]]


def test_noise_only_has_no_valid_track():
    stream, truth = simulate_scene(noise_scene(0, duration=5.0))
    rep = run(stream, truth)
    assert rep.valid_tracks == [] and rep.mar is None


def test_deterministic_reports(clean_2s):
    stream, truth = clean_2s
    assert run(stream, truth).to_json() == run(stream, truth).to_json()


def test_concurrent_matches_deterministic(clean_2s):
    stream, truth = clean_2s
    a = run(stream, truth, PipelineConfig(mode="deterministic"))
    b = run(stream, truth, PipelineConfig(mode="concurrent", workers=3))
    assert a.to_json() == b.to_json()


def test_unsorted_stream_rejected():
    ev = np.zeros(2, dtype=EventStream.from_events([], 8, 8).events.dtype)
    ev["t"] = [5, 1]
    with pytest.raises(StreamValidationError):
        run(EventStream(ev, 8, 8))


def test_empty_stream_gives_empty_report():
    rep = run(EventStream.from_events([], 8, 8))
    assert rep.tracks == [] and rep.mar is None and rep.n_events == 0


def test_report_serialisations(clean_2s):
    stream, truth = clean_2s
    rep = run(stream, truth)
    doc = json.loads(rep.to_json())
    assert doc["mar"] == 100.0 and "throughput_eps" not in doc
    assert "throughput_eps" in json.loads(rep.to_json(timing=True))
    csv = rep.metrics_csv().splitlines()
    assert csv[0] == "metric,value" and "mar,100.0" in csv
    assert 0 <= doc["bar"] <= 100


def test_tracking_work_independent_of_beacon_rate():
    # same geometry at two bit rates: the number of tracking ticks is set by stream time
    reps = []
    for f in (1000.0, 2500.0):
        b = BeaconSpec(42, f, 3.0, static(60, 40))
        stream, truth = simulate([b], NoiseSpec(), SensorConfig(width=128, height=96), 1.0, seed=0)
        reps.append(run(stream, truth, PipelineConfig(f_beacon=f)))
    pos = [sum(1 for e in r.valid_tracks[0]["timeline"] if e["event"] == "pos") for r in reps]
    assert pos[0] == pos[1]


def test_report_type():
    assert isinstance(run(EventStream.from_events([], 4, 4)), RunReport)
