"""Connection-log ingest: parsing, sessionization, trip assembly.

A log row is one beacon heard by one roadside pod:
``device_id,rssi_dbm,unix_timestamp,pod_id``.  Rows arrive unordered and
dirty; everything downstream works on validated ConnectionRecord values.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace

WALK, BIKE, DRIVE = 0, 1, 2
MODE_NAMES = ("walk", "bike", "drive")

_MODE_ALIASES = {
    "walk": WALK, "walking": WALK, "pedestrian": WALK,
    "bike": BIKE, "biking": BIKE, "cycling": BIKE, "bicycle": BIKE,
    "drive": DRIVE, "driving": DRIVE, "car": DRIVE,
}

DEFAULT_IDLE_GAP_S = 120.0
DEFAULT_MAX_TRIP_GAP_S = 1800.0

LOG_HEADER = ("device_id", "rssi_dbm", "unix_timestamp", "pod_id")


def parse_mode(text: str) -> int:
    key = text.strip().lower()
    if key not in _MODE_ALIASES:
        raise ValueError(f"unknown transportation mode: {text!r}")
    return _MODE_ALIASES[key]


@dataclass(frozen=True)
class ConnectionRecord:
    """One validated beacon observation."""

    device_id: str
    rssi_dbm: float
    timestamp: float
    pod_id: str


@dataclass(frozen=True)
class ParseError:
    line_no: int
    reason: str
    raw: str


@dataclass
class ParseResult:
    records: list[ConnectionRecord]
    errors: list[ParseError]
    duplicates_dropped: int = 0


def _looks_like_header(fields: list[str]) -> bool:
    lowered = {f.strip().lower() for f in fields}
    return bool(lowered & {"device_id", "rssi_dbm", "unix_timestamp", "pod_id"})


def parse_log(text: str) -> ParseResult:
    """Parse raw log text into records plus per-line error entries.

    Malformed lines never abort the parse.  Exact duplicates (all four
    fields equal) are dropped, first occurrence wins.  Device ids are
    case-insensitive and normalized to lowercase.
    """
    records: list[ConnectionRecord] = []
    errors: list[ParseError] = []
    seen: set[tuple[str, float, float, str]] = set()
    dups = 0

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        fields = line.split(",")
        if line_no == 1 and _looks_like_header(fields):
            continue
        if len(fields) != 4:
            errors.append(ParseError(line_no, f"expected 4 fields, got {len(fields)}", raw))
            continue
        device = fields[0].strip().lower()
        pod = fields[3].strip()
        if not device:
            errors.append(ParseError(line_no, "empty device_id", raw))
            continue
        if not pod:
            errors.append(ParseError(line_no, "empty pod_id", raw))
            continue
        try:
            rssi = float(fields[1])
            ts = float(fields[2])
        except ValueError:
            errors.append(ParseError(line_no, "non-numeric rssi or timestamp", raw))
            continue
        if not (math.isfinite(rssi) and math.isfinite(ts)):
            errors.append(ParseError(line_no, "non-finite rssi or timestamp", raw))
            continue
        if rssi >= 0:
            errors.append(ParseError(line_no, f"rssi must be negative dBm, got {fields[1].strip()}", raw))
            continue
        key = (device, rssi, ts, pod)
        if key in seen:
            dups += 1
            continue
        seen.add(key)
        records.append(ConnectionRecord(device, rssi, ts, pod))

    return ParseResult(records, errors, dups)


def parse_log_file(path: str) -> ParseResult:
    with open(path, encoding="utf-8") as fh:
        return parse_log(fh.read())


def serialize_log(records: list[ConnectionRecord]) -> str:
    """Canonical text form; parse(serialize(r)) == r for valid records."""
    lines = [",".join(LOG_HEADER)]
    for r in records:
        lines.append(f"{r.device_id},{r.rssi_dbm!r},{r.timestamp:.3f},{r.pod_id}")
    return "\n".join(lines) + "\n"


def write_log(records: list[ConnectionRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_log(records))


@dataclass(frozen=True)
class PodVisit:
    """Maximal run of beacons from one device at one pod."""

    device_id: str
    pod_id: str
    t_first: float
    t_last: float
    records: tuple[ConnectionRecord, ...]

    @property
    def dwell_s(self) -> float:
        return self.t_last - self.t_first

    @property
    def message_count(self) -> int:
        return len(self.records)


def sessionize(records: list[ConnectionRecord], idle_gap_s: float = DEFAULT_IDLE_GAP_S) -> list[PodVisit]:
    """Group per (device, pod), sort by time, split where the gap between
    consecutive beacons exceeds ``idle_gap_s``."""
    if idle_gap_s <= 0:
        raise ValueError("idle_gap_s must be positive")
    groups: dict[tuple[str, str], list[ConnectionRecord]] = {}
    for r in records:
        groups.setdefault((r.device_id, r.pod_id), []).append(r)

    visits: list[PodVisit] = []
    for (device, pod), recs in groups.items():
        recs.sort(key=lambda r: (r.timestamp, r.rssi_dbm))
        run: list[ConnectionRecord] = [recs[0]]
        for r in recs[1:]:
            if r.timestamp - run[-1].timestamp > idle_gap_s:
                visits.append(_close_visit(device, pod, run))
                run = [r]
            else:
                run.append(r)
        visits.append(_close_visit(device, pod, run))

    visits.sort(key=lambda v: (v.device_id, v.t_first, v.t_last, v.pod_id))
    return visits


def _close_visit(device: str, pod: str, run: list[ConnectionRecord]) -> PodVisit:
    return PodVisit(device, pod, run[0].timestamp, run[-1].timestamp, tuple(run))


@dataclass(frozen=True)
class Trip:
    """Transition between two consecutive visits at distinct pods."""

    device_id: str
    origin: PodVisit
    destination: PodVisit
    label: int | None = None

    @property
    def gap_s(self) -> float:
        return self.destination.t_first - self.origin.t_last


@dataclass
class TripAssemblyReport:
    candidates: int = 0
    emitted: int = 0
    dropped_same_pod: int = 0
    dropped_nonpositive_gap: int = 0
    dropped_long_gap: int = 0

    def check(self) -> None:
        total = (self.emitted + self.dropped_same_pod
                 + self.dropped_nonpositive_gap + self.dropped_long_gap)
        if total != self.candidates:
            raise AssertionError(f"trip accounting leak: {self} ")


def assemble_trips(visits: list[PodVisit],
                   max_gap_s: float = DEFAULT_MAX_TRIP_GAP_S) -> tuple[list[Trip], TripAssemblyReport]:
    """Pair consecutive visits of each device into trips.

    A pair is a trip only when the pods differ and the time gap between
    the visits is positive and at most ``max_gap_s``; every candidate pair
    is either emitted or counted under exactly one drop reason.
    """
    if max_gap_s <= 0:
        raise ValueError("max_gap_s must be positive")
    per_device: dict[str, list[PodVisit]] = {}
    for v in visits:
        per_device.setdefault(v.device_id, []).append(v)

    report = TripAssemblyReport()
    trips: list[Trip] = []
    for device in sorted(per_device):
        seq = sorted(per_device[device], key=lambda v: (v.t_first, v.t_last, v.pod_id))
        for a, b in zip(seq, seq[1:]):
            report.candidates += 1
            if a.pod_id == b.pod_id:
                report.dropped_same_pod += 1
            elif b.t_first - a.t_last <= 0:
                report.dropped_nonpositive_gap += 1
            elif b.t_first - a.t_last > max_gap_s:
                report.dropped_long_gap += 1
            else:
                trips.append(Trip(device, a, b))
                report.emitted += 1
    report.check()
    return trips, report


def load_roster(path: str) -> dict[str, int]:
    """Read ``device_id,mode`` rows into a device -> mode-id map."""
    roster: dict[str, int] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row_no, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            if row_no == 1 and row[0].strip().lower() == "device_id":
                continue
            if len(row) != 2:
                raise ValueError(f"roster line {row_no}: expected 2 fields, got {len(row)}")
            device = row[0].strip().lower()
            if device in roster:
                raise ValueError(f"roster line {row_no}: duplicate device {device!r}")
            roster[device] = parse_mode(row[1])
    return roster


def write_roster(roster: dict[str, int], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("device_id,mode\n")
        for device in sorted(roster):
            fh.write(f"{device},{MODE_NAMES[roster[device]]}\n")


def apply_roster(trips: list[Trip], roster: dict[str, int]) -> tuple[list[Trip], list[Trip]]:
    """Split trips into (labelled, unlabelled) by roster membership."""
    labelled, unlabelled = [], []
    for t in trips:
        mode = roster.get(t.device_id)
        if mode is None:
            unlabelled.append(t)
        else:
            labelled.append(replace(t, label=mode))
    return labelled, unlabelled


@dataclass(frozen=True)
class Pod:
    pod_id: str
    x_m: float
    y_m: float
    radius_m: float


@dataclass
class PodDeployment:
    """Pod positions plus configured inter-pod path distances.

    ``gap_m`` maps an unordered pod pair to the uncovered street distance
    between their coverage boundaries.
    """

    pods: list[Pod]
    gap_m: dict[tuple[str, str], float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        ids = [p.pod_id for p in self.pods]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate pod ids in deployment")
        for p in self.pods:
            if p.radius_m <= 0:
                raise ValueError(f"pod {p.pod_id}: radius must be positive")
        for (a, b), d in self.gap_m.items():
            if a == b:
                raise ValueError(f"gap distance defined for identical pods {a!r}")
            if d < 0 or not math.isfinite(d):
                raise ValueError(f"gap distance for ({a},{b}) must be finite and >= 0")

    def pod(self, pod_id: str) -> Pod:
        for p in self.pods:
            if p.pod_id == pod_id:
                return p
        raise KeyError(f"unknown pod {pod_id!r}")

    def gap_distance(self, a: str, b: str) -> float:
        if (a, b) in self.gap_m:
            return self.gap_m[(a, b)]
        if (b, a) in self.gap_m:
            return self.gap_m[(b, a)]
        raise KeyError(f"no gap distance configured for pod pair ({a}, {b})")

    def to_dict(self) -> dict:
        return {
            "pods": [{"pod_id": p.pod_id, "x_m": p.x_m, "y_m": p.y_m, "radius_m": p.radius_m}
                     for p in self.pods],
            "gap_m": [{"a": a, "b": b, "distance_m": d}
                      for (a, b), d in sorted(self.gap_m.items())],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PodDeployment":
        pods = [Pod(p["pod_id"], float(p["x_m"]), float(p["y_m"]), float(p["radius_m"]))
                for p in data["pods"]]
        gaps = {(g["a"], g["b"]): float(g["distance_m"]) for g in data.get("gap_m", [])}
        return cls(pods, gaps)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "PodDeployment":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def trip_id(index: int) -> str:
    return f"t{index:05d}"


def write_trips_csv(trips: list[Trip], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("trip_id,device_id,origin_pod,dest_pod,"
                 "t_origin_first,t_origin_last,t_dest_first,t_dest_last,label\n")
        for i, t in enumerate(trips):
            label = MODE_NAMES[t.label] if t.label is not None else ""
            fh.write(f"{trip_id(i)},{t.device_id},{t.origin.pod_id},{t.destination.pod_id},"
                     f"{t.origin.t_first:.3f},{t.origin.t_last:.3f},"
                     f"{t.destination.t_first:.3f},{t.destination.t_last:.3f},{label}\n")
