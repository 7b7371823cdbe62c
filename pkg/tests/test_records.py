"""Log parsing, sessionization, and trip assembly."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wifimode.records import (BIKE, DRIVE, WALK, ConnectionRecord, Pod,
                              PodDeployment, apply_roster, assemble_trips,
                              parse_log, parse_mode, serialize_log,
                              sessionize, trip_id)

GOOD_LINE = "aa:bb:cc,-67.0,1000.000,p1"


def rec(device="aa", rssi=-60.0, ts=0.0, pod="p1"):
    return ConnectionRecord(device, rssi, ts, pod)


class TestParse:
    def test_single_good_line(self):
        out = parse_log(GOOD_LINE)
        assert out.errors == []
        assert out.records == [ConnectionRecord("aa:bb:cc", -67.0, 1000.0, "p1")]

    def test_header_skipped_without_error(self):
        out = parse_log("device_id,rssi_dbm,unix_timestamp,pod_id\n" + GOOD_LINE)
        assert len(out.records) == 1
        assert out.errors == []

    def test_device_id_lowercased(self):
        out = parse_log("AA:BB:CC,-67.0,1.0,p1")
        assert out.records[0].device_id == "aa:bb:cc"

    @pytest.mark.parametrize("line,reason_part", [
        ("a,-67.0,1.0", "4 fields"),
        ("a,-67.0,1.0,p1,extra", "4 fields"),
        (",-67.0,1.0,p1", "device"),
        ("a,-67.0,1.0,", "pod"),
        ("a,abc,1.0,p1", "non-numeric"),
        ("a,-67.0,xyz,p1", "non-numeric"),
        ("a,nan,1.0,p1", "non-finite"),
        ("a,-67.0,inf,p1", "non-finite"),
        ("a,0.0,1.0,p1", "negative"),
        ("a,12.5,1.0,p1", "negative"),
    ])
    def test_malformed_line_reported_not_fatal(self, line, reason_part):
        out = parse_log(GOOD_LINE + "\n" + line)
        assert len(out.records) == 1
        assert len(out.errors) == 1
        assert reason_part in out.errors[0].reason
        assert out.errors[0].line_no == 2

    def test_blank_lines_ignored(self):
        out = parse_log("\n\n" + GOOD_LINE + "\n   \n")
        assert len(out.records) == 1
        assert out.errors == []

    def test_exact_duplicates_collapse_keep_first(self):
        out = parse_log(GOOD_LINE + "\n" + GOOD_LINE)
        assert len(out.records) == 1
        assert out.duplicates_dropped == 1

    def test_near_duplicates_kept(self):
        out = parse_log(GOOD_LINE + "\naa:bb:cc,-67.1,1000.000,p1")
        assert len(out.records) == 2

    def test_roundtrip_fixed_records(self):
        records = [rec("dev1", -44.5, 12.0, "p1"), rec("dev2", -101.3, 99.999, "p2")]
        assert parse_log(serialize_log(records)).records == records


@settings(max_examples=200, deadline=None)
@given(st.lists(
    st.builds(
        ConnectionRecord,
        device_id=st.text(alphabet="abcdef0123456789:", min_size=1, max_size=12),
        rssi_dbm=st.floats(min_value=-120.0, max_value=-0.1).map(lambda v: round(v, 1)),
        timestamp=st.floats(min_value=0.0, max_value=2e9).map(lambda v: round(v, 3)),
        pod_id=st.text(alphabet="podxyz123", min_size=1, max_size=6),
    ),
    max_size=20, unique_by=lambda r: (r.device_id, r.rssi_dbm, r.timestamp, r.pod_id)))
def test_parse_emit_roundtrip(records):
    out = parse_log(serialize_log(records))
    assert out.errors == []
    assert sorted(out.records, key=str) == sorted(records, key=str)


class TestSessionize:
    def test_splits_on_idle_gap(self):
        # gaps: 100 (held), 121 (split, just over), 120 (held, boundary)
        records = [rec(ts=t) for t in (0.0, 100.0, 221.0, 341.0)]
        visits = sessionize(records, idle_gap_s=120.0)
        assert [(v.t_first, v.t_last) for v in visits] == [(0.0, 100.0), (221.0, 341.0)]

    def test_separate_devices_and_pods_do_not_interact(self):
        records = [rec("a", ts=0.0), rec("b", ts=1.0), rec("a", ts=2.0, pod="p2")]
        visits = sessionize(records)
        assert len(visits) == 3
        assert all(v.message_count == 1 for v in visits)

    def test_unsorted_input(self):
        records = [rec(ts=50.0), rec(ts=0.0), rec(ts=25.0)]
        (v,) = sessionize(records)
        assert (v.t_first, v.t_last) == (0.0, 50.0)
        assert [r.timestamp for r in v.records] == [0.0, 25.0, 50.0]

    def test_dwell_and_count(self):
        (v,) = sessionize([rec(ts=t) for t in (5.0, 6.0, 9.5)])
        assert v.dwell_s == 4.5
        assert v.message_count == 3

    def test_requires_positive_gap(self):
        with pytest.raises(ValueError):
            sessionize([rec()], idle_gap_s=0.0)


def visit_seq(device, *pods_and_times):
    """Build one record per visit: (pod, t_first, t_last) triples."""
    records = []
    for pod, t0, t1 in pods_and_times:
        records.append(rec(device, ts=t0, pod=pod))
        records.append(rec(device, ts=t1, pod=pod))
    return sessionize(records)


class TestAssemble:
    def test_consecutive_distinct_pods_make_trips(self):
        visits = visit_seq("a", ("p1", 0, 10), ("p2", 50, 60), ("p3", 100, 110))
        trips, report = assemble_trips(visits)
        assert [(t.origin.pod_id, t.destination.pod_id) for t in trips] == \
            [("p1", "p2"), ("p2", "p3")]
        assert report.candidates == 2 and report.emitted == 2

    def test_same_pod_pair_dropped(self):
        visits = visit_seq("a", ("p1", 0, 10), ("p1", 200, 210))
        trips, report = assemble_trips(visits)
        assert trips == []
        assert report.dropped_same_pod == 1

    def test_long_gap_dropped_boundary_kept(self):
        visits = visit_seq("a", ("p1", 0, 10), ("p2", 1810.0, 1820.0),
                           ("p3", 3620.5, 3630.0))
        trips, report = assemble_trips(visits, max_gap_s=1800.0)
        # first gap exactly 1800 -> kept; second gap 1800.5 -> dropped
        assert len(trips) == 1
        assert report.dropped_long_gap == 1

    def test_nonpositive_gap_dropped(self):
        visits = visit_seq("a", ("p1", 0, 100), ("p2", 90, 200))
        trips, report = assemble_trips(visits)
        assert trips == []
        assert report.dropped_nonpositive_gap == 1

    def test_accounting_identity(self):
        visits = visit_seq("a", ("p1", 0, 10), ("p1", 200, 210), ("p2", 215, 220),
                           ("p3", 5000, 5010))
        trips, report = assemble_trips(visits)
        assert report.candidates == 3
        assert report.emitted == 1
        assert report.dropped_same_pod == 1
        assert report.dropped_long_gap == 1
        assert (report.emitted + report.dropped_same_pod
                + report.dropped_nonpositive_gap + report.dropped_long_gap) == 3

    def test_labels_from_roster(self):
        visits = visit_seq("a", ("p1", 0, 10), ("p2", 50, 60)) \
            + visit_seq("b", ("p1", 0, 10), ("p2", 50, 60))
        trips, _ = assemble_trips(visits)
        labelled, unlabelled = apply_roster(trips, {"a": DRIVE})
        assert [t.label for t in labelled] == [DRIVE]
        assert [t.device_id for t in unlabelled] == ["b"]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abc"), st.sampled_from(["p1", "p2", "p3"]),
                          st.floats(min_value=0, max_value=1e6)),
                max_size=30))
def test_assembly_accounting_property(raw):
    records = [rec(d, ts=round(t, 3), pod=p) for d, p, t in raw]
    trips, report = assemble_trips(sessionize(records))
    assert report.emitted == len(trips)
    assert (report.emitted + report.dropped_same_pod + report.dropped_nonpositive_gap
            + report.dropped_long_gap) == report.candidates
    for t in trips:
        assert t.origin.pod_id != t.destination.pod_id
        assert 0 < t.gap_s <= 1800.0


class TestDeployment:
    def test_gap_distance_symmetric_lookup(self):
        dep = PodDeployment([Pod("p1", 0, 0, 50), Pod("p2", 200, 0, 50)],
                            {("p1", "p2"): 100.0})
        assert dep.gap_distance("p1", "p2") == 100.0
        assert dep.gap_distance("p2", "p1") == 100.0

    def test_missing_pair_raises(self):
        dep = PodDeployment([Pod("p1", 0, 0, 50), Pod("p2", 200, 0, 50)], {})
        with pytest.raises(KeyError):
            dep.gap_distance("p1", "p2")

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError):
            PodDeployment([Pod("p1", 0, 0, 50), Pod("p1", 9, 9, 50)])

    def test_json_roundtrip(self, tmp_path):
        dep = PodDeployment([Pod("p1", 0.5, -3.0, 50.0), Pod("p2", 200.0, 0.0, 50.0)],
                            {("p1", "p2"): 114.43})
        path = str(tmp_path / "dep.json")
        dep.save(path)
        again = PodDeployment.load(path)
        assert again.pods == dep.pods
        assert again.gap_m == dep.gap_m


def test_parse_mode_aliases():
    assert parse_mode("walk") == parse_mode("Walking") == WALK
    assert parse_mode(" bike ") == BIKE
    assert parse_mode("DRIVING") == DRIVE
    with pytest.raises(ValueError):
        parse_mode("teleport")


def test_trip_id_format():
    assert trip_id(0) == "t00000"
    assert trip_id(12345) == "t12345"
