"""Label alignment, capture labeling, scan paths and record I/O."""

import math
import socket
import time

import numpy as np
import pytest

from pldl import labeling as lb
from pldl.ingest import IQBlock, StreamDescriptor
from pldl.timebase import IDENTITY_ESTIMATE, ClockEstimate, ClockModel, run_sync_session

MS = 1_000_000  # ns


def ps(t_ns, x, y=0.0, source="mocap", **kw):
    return lb.PositionSample(source_id=source, t_ns=t_ns, x=x, y=y, **kw)


def test_position_sample_validation():
    with pytest.raises(ValueError):
        ps(0, 0.0, qw=0.5)  # |q| far from 1
    with pytest.raises(ValueError):
        ps(0, 0.0, quality=1.5)
    s = ps(0, 1.0, qw=1.0 + 5e-7)  # within the 1e-6 norm tolerance
    assert s.x == 1.0


def test_policy_validation_and_default_rate_rule():
    with pytest.raises(ValueError):
        lb.LabelPolicy(max_gap_ns=0)
    with pytest.raises(ValueError):
        lb.LabelPolicy(max_gap_ns=1, interpolation="spline")
    p = lb.policy_for_rate(100.0)  # 3 periods of a 100 Hz stream
    assert p.max_gap_ns == 30 * MS


def test_align_constant_series():
    series = [ps(t * MS, 2.0, 3.0) for t in range(0, 100, 10)]
    pol = lb.LabelPolicy(max_gap_ns=20 * MS)
    got = lb.align(series, 45 * MS, pol)
    assert (got.x, got.y) == (2.0, 3.0)


def test_align_linear_midpoint():
    series = [ps(0, 0.0), ps(10**9, 1.0)]
    pol = lb.LabelPolicy(max_gap_ns=2 * 10**9)
    got = lb.align(series, 5 * 10**8, pol)
    assert got.x == pytest.approx(0.5, abs=1e-15)
    assert got.t_ns == 5 * 10**8


def test_align_exact_hit_returns_stored_sample():
    series = [ps(0, 0.0), ps(10 * MS, 1.0), ps(20 * MS, 2.0)]
    for interp in ("linear", "nearest"):
        pol = lb.LabelPolicy(max_gap_ns=MS, interpolation=interp)
        assert lb.align(series, 10 * MS, pol) is series[1]


def test_align_stale_gap():
    series = [ps(0, 0.0), ps(5 * 10**9, 1.0)]
    pol = lb.LabelPolicy(max_gap_ns=10**9)
    with pytest.raises(lb.StaleLabel):
        lb.align(series, 2 * 10**9, pol)


def test_align_outside_span():
    series = [ps(10 * MS, 1.0), ps(20 * MS, 2.0)]
    pol = lb.LabelPolicy(max_gap_ns=5 * MS)
    assert lb.align(series, 7 * MS, pol) is series[0]  # within max_gap
    assert lb.align(series, 24 * MS, pol) is series[1]
    with pytest.raises(lb.StaleLabel):
        lb.align(series, 1 * MS, pol)
    with pytest.raises(lb.StaleLabel):
        lb.align([], 0, pol)


def test_align_nearest_policy():
    series = [ps(0, 0.0), ps(10 * MS, 1.0)]
    pol = lb.LabelPolicy(max_gap_ns=20 * MS, interpolation="nearest")
    assert lb.align(series, 4 * MS, pol) is series[0]
    assert lb.align(series, 6 * MS, pol) is series[1]
    assert lb.align(series, 5 * MS, pol) is series[0]  # tie -> earlier
    tight = lb.LabelPolicy(max_gap_ns=4 * MS, interpolation="nearest")
    with pytest.raises(lb.StaleLabel):
        lb.align(series, 5 * MS, tight)


def test_align_exact_on_affine_motion():
    # positions on x(t) = a + b t are reproduced exactly by interpolation
    rng = np.random.default_rng(1)
    a, b = 0.7, 2.5e-9
    times = np.sort(rng.choice(np.arange(1, 10**6), size=200, replace=False))
    series = [ps(int(t), a + b * t) for t in times]
    pol = lb.LabelPolicy(max_gap_ns=10**9)
    for t in rng.integers(times[0], times[-1], size=50):
        got = lb.align(series, int(t), pol)
        expect = a + b * t
        assert got.x == pytest.approx(expect, rel=1e-12)


def test_align_quaternion_nlerp():
    q0 = (1.0, 0.0, 0.0, 0.0)
    q1 = (math.cos(math.pi / 4), math.sin(math.pi / 4), 0.0, 0.0)
    series = [
        ps(0, 0.0, qw=q0[0], qx=q0[1], qy=q0[2], qz=q0[3]),
        ps(10 * MS, 0.0, qw=q1[0], qx=q1[1], qy=q1[2], qz=q1[3]),
    ]
    pol = lb.LabelPolicy(max_gap_ns=20 * MS)
    mid = lb.align(series, 5 * MS, pol)
    n = math.sqrt(mid.qw**2 + mid.qx**2 + mid.qy**2 + mid.qz**2)
    assert n == pytest.approx(1.0, abs=1e-12)
    # nlerp midpoint of a 90 deg rotation is the 45 deg rotation
    assert mid.qw == pytest.approx(math.cos(math.pi / 8), abs=1e-12)
    assert mid.qx == pytest.approx(math.sin(math.pi / 8), abs=1e-12)
    # antipodal representation of the same rotation: shorter arc taken
    series_neg = [series[0], lb.PositionSample(
        "mocap", 10 * MS, 0.0, 0.0, qw=-q1[0], qx=-q1[1])]
    mid2 = lb.align(series_neg, 5 * MS, pol)
    assert mid2.qw == pytest.approx(mid.qw, abs=1e-12)


# ----------------------------------------------------------- label_capture


def mkblocks(n_blocks, samples_per_block, fs=1e6):
    out = []
    for i in range(n_blocks):
        start = i * samples_per_block
        out.append(
            IQBlock(
                stream_id="s0",
                seq=i,
                start_sample_index=start,
                start_time_local_ns=round(start / fs * 1e9),
                samples=np.full((1, samples_per_block), i + 1, dtype=np.complex64),
            )
        )
    return out


DESC = StreamDescriptor("s0", sample_rate_sps=1e6)


def test_label_capture_static_scene():
    blocks = mkblocks(5, 10_000)
    series = {"mocap": [ps(t * MS, 1.5, 2.5) for t in range(0, 200, 10)]}
    cap = lb.label_capture(
        blocks, series, IDENTITY_ESTIMATE, lb.policy_for_rate(100.0), DESC
    )
    assert len(cap.labels) == 5
    for per_block in cap.labels:
        assert per_block["mocap"].x == 1.5
        assert per_block["mocap"].y == 2.5
    assert cap.stale_counts == {"mocap": 0}


def test_label_capture_linear_motion_closed_form():
    # 1 m/s along x, 100 Hz labels, 10 ms blocks: label k = (k + 0.5) cm
    blocks = mkblocks(10, 10_000)
    series = {"mocap": [ps(k * 10 * MS, k * 0.01) for k in range(30)]}
    cap = lb.label_capture(
        blocks, series, IDENTITY_ESTIMATE, lb.policy_for_rate(100.0), DESC
    )
    for k, per_block in enumerate(cap.labels):
        expect = (k + 0.5) * 0.01
        assert per_block["mocap"].x == pytest.approx(expect, abs=1e-9)
    xs = [pb["mocap"].x for pb in cap.labels]
    steps = np.diff(xs)
    assert np.allclose(steps, 0.01, atol=1e-9)


def test_label_capture_stream_stops_mid_capture():
    blocks = mkblocks(10, 10_000)
    series = {"mocap": [ps(k * 10 * MS, k * 0.01) for k in range(5)]}  # 40 ms
    cap = lb.label_capture(
        blocks, series, IDENTITY_ESTIMATE, lb.policy_for_rate(100.0), DESC
    )
    labeled = [pb["mocap"] is not None for pb in cap.labels]
    assert labeled[0] and labeled[3]
    assert not labeled[-1]
    assert cap.stale_counts["mocap"] == labeled.count(False)
    assert labeled == sorted(labeled, reverse=True)  # stale only at the end


def test_label_capture_maps_clock_domains():
    # the stream clock runs 1 ms ahead of global; labels are on global time
    stream_clock = ClockModel("dev", offset_s=1e-3)
    blocks = [
        IQBlock(
            stream_id=b.stream_id,
            seq=b.seq,
            start_sample_index=b.start_sample_index,
            start_time_local_ns=stream_clock.local_time_ns(b.start_time_local_ns),
            samples=b.samples,
        )
        for b in mkblocks(4, 10_000)
    ]
    est = ClockEstimate(1e-3, 0.0, 0.0, 0.0, 8)  # perfect knowledge
    series = {"mocap": [ps(k * 10 * MS, k * 0.01) for k in range(20)]}
    cap = lb.label_capture(
        blocks, series, est, lb.policy_for_rate(100.0), DESC
    )
    for k, pb in enumerate(cap.labels):
        assert pb["mocap"].x == pytest.approx((k + 0.5) * 0.01, abs=1e-9)


def test_label_capture_label_clock_mapping():
    # label stream timestamps lag global by 2 ms; supply its estimate
    blocks = mkblocks(4, 10_000)
    lag = ClockEstimate(-2e-3, 0.0, 0.0, 0.0, 8)
    series = {"mocap": [ps(k * 10 * MS - 2 * MS, k * 0.01) for k in range(20)]}
    cap = lb.label_capture(
        blocks,
        series,
        IDENTITY_ESTIMATE,
        lb.policy_for_rate(100.0),
        DESC,
        label_clock_ests={"mocap": lag},
    )
    for k, pb in enumerate(cap.labels):
        assert pb["mocap"].x == pytest.approx((k + 0.5) * 0.01, abs=1e-9)


def test_label_capture_preserves_payloads_and_order():
    blocks = mkblocks(3, 100)
    before = [b.samples.tobytes() for b in blocks]
    cap = lb.label_capture(
        blocks, {}, IDENTITY_ESTIMATE, lb.policy_for_rate(100.0), DESC
    )
    assert [b.samples.tobytes() for b in cap.blocks] == before
    assert [b.seq for b in cap.blocks] == [0, 1, 2]
    with pytest.raises(ValueError):
        lb.label_capture(
            list(reversed(blocks)), {}, IDENTITY_ESTIMATE,
            lb.policy_for_rate(100.0), DESC,
        )


# ------------------------------------------------------------- scan paths


def test_raster_3x3():
    path = lb.raster_path(0.0, 1.0, 0.0, 1.0, 0.5)
    assert len(path) == 9
    assert len(set(path)) == 9  # every node exactly once
    assert path[0] == (0.0, 0.0)
    assert path[2] == (1.0, 0.0)
    assert path[3] == (1.0, 0.5)  # serpentine turn
    for a, b in zip(path, path[1:]):
        dx, dy = abs(a[0] - b[0]), abs(a[1] - b[1])
        assert (dx == 0) != (dy == 0)  # exactly one coordinate moves
        assert max(dx, dy) <= 0.5 + 1e-12


def test_raster_degenerate_and_line():
    assert lb.raster_path(1.0, 1.0, 2.0, 2.0, 0.5) == [(1.0, 2.0)]
    line = lb.raster_path(0.0, 1.0, 0.0, 0.0, 0.5)
    assert line == [(0.0, 0.0), (0.5, 0.0), (1.0, 0.0)]


def test_raster_float_ratio_tolerance():
    # 0.3/0.1 is 2.9999... in floats; still 4 columns
    path = lb.raster_path(0.0, 0.3, 0.0, 0.0, 0.1)
    assert len(path) == 4


def test_raster_validation():
    with pytest.raises(ValueError):
        lb.raster_path(1.0, 0.0, 0.0, 1.0, 0.5)
    with pytest.raises(ValueError):
        lb.raster_path(0.0, 1.0, 0.0, 1.0, 0.0)


def test_simulate_motion_two_waypoints():
    s = lb.simulate_motion([(0.0, 0.0), (1.0, 0.0)], speed_mps=1.0, rate_hz=10.0)
    assert len(s) == 11
    assert s[0].t_ns == 0 and s[-1].t_ns == 10**9
    for k, p in enumerate(s):
        assert p.x == pytest.approx(0.1 * k, abs=1e-12)
        assert (p.qw, p.qx, p.qy, p.qz) == (1.0, 0.0, 0.0, 0.0)
        assert p.quality == 1.0


def test_simulate_motion_single_waypoint():
    s = lb.simulate_motion([(2.0, 3.0)], speed_mps=1.0, rate_hz=10.0)
    assert len(s) == 1
    assert (s[0].x, s[0].y, s[0].t_ns) == (2.0, 3.0, 0)


def test_simulate_motion_serpentine_duration():
    path = lb.raster_path(0.0, 1.0, 0.0, 1.0, 0.5)  # 3x3, length 4 m
    s = lb.simulate_motion(path, speed_mps=1.0, rate_hz=10.0)
    assert s[-1].t_ns == 4 * 10**9
    assert len(s) == 41
    assert (s[-1].x, s[-1].y) == pytest.approx(path[-1])


def test_simulate_motion_validation_and_noise():
    with pytest.raises(lb.EmptyPath):
        lb.simulate_motion([], 1.0, 10.0)
    with pytest.raises(ValueError):
        lb.simulate_motion([(0, 0)], 0.0, 10.0)
    a = lb.simulate_motion([(0, 0), (1, 0)], 1.0, 50.0, seed=3,
                           position_noise_std_m=0.01)
    b = lb.simulate_motion([(0, 0), (1, 0)], 1.0, 50.0, seed=3,
                           position_noise_std_m=0.01)
    assert [(p.x, p.y) for p in a] == [(p.x, p.y) for p in b]
    assert any(p.x != pytest.approx(0.02 * k) for k, p in enumerate(a))


# ------------------------------------------------------------- record I/O


def test_label_line_round_trip():
    s = lb.PositionSample(
        "cam-1", 123456789, 1.25, -0.5, 0.125,
        qw=math.sqrt(0.5), qx=0.0, qy=math.sqrt(0.5), qz=0.0, quality=0.75,
    )
    line = lb.format_label_line(s)
    back = lb.parse_label_line(line)
    assert back == s  # float repr round-trip is exact
    assert "\n" not in line


def test_label_file_round_trip(tmp_path):
    samples = lb.simulate_motion([(0, 0), (0.5, 0)], 1.0, 20.0)
    p = tmp_path / "labels.jsonl"
    lb.write_label_file(str(p), samples)
    assert lb.read_label_file(str(p)) == samples


def test_parse_label_line_rejects_missing_fields():
    with pytest.raises(ValueError):
        lb.parse_label_line('{"source_id": "x", "t_ns": 0}')


def test_label_collector_tcp():
    with lb.LabelCollector(port=0) as coll:
        a = [ps(k * MS, k * 0.1, source="cam-a") for k in range(5)]
        b = [ps(k * MS, k * 0.2, source="cam-b") for k in range(3)]
        lb.send_labels("127.0.0.1", coll.port, a + b)
        deadline = time.monotonic() + 5.0
        while time.monotonic() < deadline:
            got = coll.series()
            if len(got.get("cam-a", [])) == 5 and len(got.get("cam-b", [])) == 3:
                break
            time.sleep(0.01)
        got = coll.series()
        assert got["cam-a"] == a
        assert got["cam-b"] == b
        # malformed line counted, not fatal
        with socket.create_connection(("127.0.0.1", coll.port)) as sock:
            sock.sendall(b"not json\n")
        deadline = time.monotonic() + 5.0
        while coll.malformed == 0 and time.monotonic() < deadline:
            time.sleep(0.01)
        assert coll.malformed == 1
