"""Synthetic downtown-loop generator for connection logs with known modes.

Agents walk, bike, or drive laps of a rectangular street loop that has
one Wi-Fi pod per side (mid-block, offset a few meters off the curb).
Inside a pod's coverage sphere the device produces beacons on an
exponential clock; each beacon gets a log-distance RSSI with Gaussian
noise.  The geometry and kinematics are chosen so the resulting trips
are classifiable but not trivially separable on any single feature, and
so consecutive passes of the same pod stay farther apart in time than
the ingest idle gap.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .records import (MODE_NAMES, ConnectionRecord, Pod, PodDeployment,
                      parse_mode)


@dataclass(frozen=True)
class LoopGeometry:
    """Rectangular loop with one pod at each side's midpoint."""

    width_m: float = 250.0
    height_m: float = 178.5
    pod_offset_m: float = 3.0
    coverage_radius_m: float = 50.0

    def __post_init__(self) -> None:
        if min(self.width_m, self.height_m) <= 0:
            raise ValueError("loop sides must be positive")
        if self.coverage_radius_m <= self.pod_offset_m:
            raise ValueError("coverage radius must exceed the pod offset")

    @property
    def perimeter_m(self) -> float:
        return 2.0 * (self.width_m + self.height_m)

    @property
    def corners(self) -> tuple[tuple[float, float], ...]:
        w, h = self.width_m, self.height_m
        return ((0.0, 0.0), (w, 0.0), (w, h), (0.0, h))

    @property
    def side_lengths(self) -> tuple[float, ...]:
        return (self.width_m, self.height_m, self.width_m, self.height_m)

    @property
    def side_units(self) -> tuple[tuple[float, float], ...]:
        return ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))

    def point(self, side: int, offset: float) -> tuple[float, float]:
        cx, cy = self.corners[side]
        ux, uy = self.side_units[side]
        return (cx + ux * offset, cy + uy * offset)

    def pod_positions(self) -> list[tuple[str, float, float]]:
        w, h, d = self.width_m, self.height_m, self.pod_offset_m
        return [("p1", w / 2.0, -d), ("p2", w + d, h / 2.0),
                ("p3", w / 2.0, h + d), ("p4", -d, h / 2.0)]

    def pod_arc_positions(self) -> dict[str, float]:
        """Perimeter coordinate of each pod's nearest street point."""
        w, h = self.width_m, self.height_m
        return {"p1": w / 2.0, "p2": w + h / 2.0, "p3": w + h + w / 2.0,
                "p4": 2.0 * w + h + h / 2.0}

    def make_deployment(self) -> PodDeployment:
        """Pods plus shortest uncovered street distance per pod pair.

        Overlapping coverage spheres would make gap distances meaningless,
        so they are a hard error.
        """
        r = self.coverage_radius_m
        pods = [Pod(pid, x, y, r) for pid, x, y in self.pod_positions()]
        for i, a in enumerate(pods):
            for b in pods[i + 1:]:
                d = math.hypot(a.x_m - b.x_m, a.y_m - b.y_m)
                if d <= 2.0 * r:
                    raise ValueError(f"coverage spheres of {a.pod_id} and {b.pod_id} overlap "
                                     f"(centers {d:.1f} m apart, radius {r:.1f} m)")
        half_chord = math.sqrt(r * r - self.pod_offset_m ** 2)
        arc = self.pod_arc_positions()
        per = self.perimeter_m
        gaps: dict[tuple[str, str], float] = {}
        ids = sorted(arc)
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                ds = abs(arc[a] - arc[b])
                ds = min(ds, per - ds)
                gaps[(a, b)] = max(ds - 2.0 * half_chord, 1.0)
        return PodDeployment(pods, gaps)

    def to_dict(self) -> dict:
        return {"width_m": self.width_m, "height_m": self.height_m,
                "pod_offset_m": self.pod_offset_m, "coverage_radius_m": self.coverage_radius_m}

    @classmethod
    def from_dict(cls, d: dict) -> "LoopGeometry":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class ModeProfile:
    """Kinematics of one mode: cruise range, per-segment jitter, signal stops."""

    speed_lo: float
    speed_hi: float
    speed_jitter: float
    stop_prob: float
    stop_lo_s: float
    stop_hi_s: float

    def __post_init__(self) -> None:
        if not 0 < self.speed_lo <= self.speed_hi:
            raise ValueError("need 0 < speed_lo <= speed_hi")
        if not 0.0 <= self.stop_prob <= 1.0:
            raise ValueError("stop_prob must be a probability")
        if not 0.0 <= self.stop_lo_s <= self.stop_hi_s:
            raise ValueError("need 0 <= stop_lo_s <= stop_hi_s")

    def to_dict(self) -> dict:
        return {"speed_lo": self.speed_lo, "speed_hi": self.speed_hi,
                "speed_jitter": self.speed_jitter, "stop_prob": self.stop_prob,
                "stop_lo_s": self.stop_lo_s, "stop_hi_s": self.stop_hi_s}

    @classmethod
    def from_dict(cls, d: dict) -> "ModeProfile":
        return cls(**{k: float(v) for k, v in d.items()})


# Bikes are capped at 6 m/s, so even a stop-free lap spends ~126 s
# outside any one pod's sphere (857 m perimeter minus ~100 m of coverage)
# and never re-enters its origin pod inside the 120 s ingest idle gap.
# Fast drive laps with few stops CAN dip under that gap, fusing the two
# same-pod visits and costing the trips around them; that few-percent
# leak is kept as realistic sessionization noise.  Speed ranges overlap
# on purpose: slow drives look like bikes, fast walks brush slow bikes,
# and drive's frequent corner stops push its pod-to-pod times back up
# into bike territory, so the classes are not separable on any single
# feature.
DEFAULT_PROFILES: dict[int, ModeProfile] = {
    0: ModeProfile(1.0, 2.0, 0.20, 0.35, 5.0, 30.0),
    1: ModeProfile(2.4, 6.0, 0.15, 0.50, 5.0, 35.0),
    2: ModeProfile(3.2, 13.0, 0.20, 0.75, 15.0, 55.0),
}


@dataclass(frozen=True)
class RSSIModel:
    """Log-distance path loss with Gaussian shadowing, beaconing clock."""

    tx_power_dbm: float = -40.0
    path_loss_exponent: float = 2.7
    noise_sigma_db: float = 4.0
    beacon_interval_s: float = 2.0
    floor_dbm: float = -120.0

    def __post_init__(self) -> None:
        if self.beacon_interval_s <= 0:
            raise ValueError("beacon_interval_s must be positive")

    def rssi_at(self, distance_m: float, noise_db: float) -> float:
        raw = (self.tx_power_dbm
               - 10.0 * self.path_loss_exponent * math.log10(max(distance_m, 1.0))
               + noise_db)
        return min(max(round(raw, 1), self.floor_dbm), -0.1)

    def to_dict(self) -> dict:
        return {"tx_power_dbm": self.tx_power_dbm,
                "path_loss_exponent": self.path_loss_exponent,
                "noise_sigma_db": self.noise_sigma_db,
                "beacon_interval_s": self.beacon_interval_s,
                "floor_dbm": self.floor_dbm}

    @classmethod
    def from_dict(cls, d: dict) -> "RSSIModel":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass
class ScenarioSpec:
    """Everything simulate() needs; serializable so runs can be replayed."""

    seed: int = 0
    geometry: LoopGeometry = field(default_factory=LoopGeometry)
    profiles: dict[int, ModeProfile] = field(default_factory=lambda: dict(DEFAULT_PROFILES))
    rssi: RSSIModel = field(default_factory=RSSIModel)
    labelled_trip_targets: dict[int, int] = field(
        default_factory=lambda: {0: 213, 1: 184, 2: 451})
    unlabelled_trip_target: int = 1990
    unlabelled_mode_shares: tuple[float, float, float] = (0.25, 0.25, 0.5)
    max_rounds: int = 10
    unlabelled_rounds: tuple[int, int] = (1, 3)
    start_window_s: float = 10800.0

    def __post_init__(self) -> None:
        if abs(sum(self.unlabelled_mode_shares) - 1.0) > 1e-9:
            raise ValueError("unlabelled_mode_shares must sum to 1")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        lo, hi = self.unlabelled_rounds
        if not 1 <= lo <= hi:
            raise ValueError("unlabelled_rounds must be an increasing range from >= 1")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "geometry": self.geometry.to_dict(),
            "profiles": {MODE_NAMES[m]: p.to_dict() for m, p in sorted(self.profiles.items())},
            "rssi": self.rssi.to_dict(),
            "labelled_trip_targets": {MODE_NAMES[m]: t
                                      for m, t in sorted(self.labelled_trip_targets.items())},
            "unlabelled_trip_target": self.unlabelled_trip_target,
            "unlabelled_mode_shares": list(self.unlabelled_mode_shares),
            "max_rounds": self.max_rounds,
            "unlabelled_rounds": list(self.unlabelled_rounds),
            "start_window_s": self.start_window_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        return cls(
            seed=int(d.get("seed", 0)),
            geometry=LoopGeometry.from_dict(d["geometry"]) if "geometry" in d else LoopGeometry(),
            profiles={parse_mode(k): ModeProfile.from_dict(v)
                      for k, v in d.get("profiles", {}).items()} or dict(DEFAULT_PROFILES),
            rssi=RSSIModel.from_dict(d["rssi"]) if "rssi" in d else RSSIModel(),
            labelled_trip_targets={parse_mode(k): int(v)
                                   for k, v in d.get("labelled_trip_targets",
                                                     {"walk": 213, "bike": 184, "drive": 451}).items()},
            unlabelled_trip_target=int(d.get("unlabelled_trip_target", 1990)),
            unlabelled_mode_shares=tuple(d.get("unlabelled_mode_shares", (0.25, 0.25, 0.5))),
            max_rounds=int(d.get("max_rounds", 10)),
            unlabelled_rounds=tuple(int(v) for v in d.get("unlabelled_rounds", (1, 3))),
            start_window_s=float(d.get("start_window_s", 10800.0)),
        )

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "ScenarioSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class _Segment:
    """Straight move (or stop, when the endpoints coincide) on one side."""

    t0: float
    t1: float
    x0: float
    y0: float
    x1: float
    y1: float


@dataclass(frozen=True)
class AgentPlan:
    device_id: str
    mode: int
    rounds: int
    labelled: bool

    @property
    def expected_trips(self) -> int:
        return 4 * self.rounds - 1


@dataclass(frozen=True)
class TruthTrip:
    device_id: str
    mode: int
    origin_pod: str
    dest_pod: str
    t_exit: float
    t_enter: float


@dataclass
class SimResult:
    records: list[ConnectionRecord]
    roster: dict[str, int]
    truth: list[TruthTrip]
    deployment: PodDeployment
    agents: list[AgentPlan]

    @property
    def expected_labelled_trips(self) -> dict[int, int]:
        out = {0: 0, 1: 0, 2: 0}
        for a in self.agents:
            if a.labelled:
                out[a.mode] += a.expected_trips
        return out

    @property
    def expected_unlabelled_trips(self) -> int:
        return sum(a.expected_trips for a in self.agents if not a.labelled)


def _plan_rounds(target_trips: int, max_rounds: int) -> list[int]:
    """Round counts whose 4R-1 trip totals land within 2 of the target."""
    plans: list[int] = []
    remaining = target_trips
    while remaining > 0:
        r = min(max_rounds, max(1, round((remaining + 1) / 4)))
        plans.append(r)
        remaining -= 4 * r - 1
    return plans


def allocate_agents(spec: ScenarioSpec, alloc_rng: np.random.Generator) -> list[AgentPlan]:
    agents: list[AgentPlan] = []
    prefixes = {0: "w", 1: "b", 2: "d"}
    for mode in sorted(spec.labelled_trip_targets):
        for i, rounds in enumerate(_plan_rounds(spec.labelled_trip_targets[mode],
                                                spec.max_rounds)):
            agents.append(AgentPlan(f"{prefixes[mode]}{i:03d}", mode, rounds, True))

    lo, hi = spec.unlabelled_rounds
    shares = np.asarray(spec.unlabelled_mode_shares)
    remaining = spec.unlabelled_trip_target
    i = 0
    while remaining > 0:
        mode = int(alloc_rng.choice(3, p=shares))
        rounds = int(alloc_rng.integers(lo, hi + 1))
        if 4 * rounds - 1 > remaining:
            rounds = min(hi, max(lo, round((remaining + 1) / 4)))
        agents.append(AgentPlan(f"u{i:04d}", mode, rounds, False))
        remaining -= 4 * rounds - 1
        i += 1
    return agents


def build_trajectory(geom: LoopGeometry, profile: ModeProfile, rounds: int,
                     rng: np.random.Generator, t_start: float) -> list[_Segment]:
    """Piecewise-linear lap path: per-side cruise segments, corner stops."""
    base = rng.uniform(profile.speed_lo, profile.speed_hi)
    corner = int(rng.integers(0, 4))
    direction = 1 if rng.random() < 0.5 else -1

    lengths = geom.side_lengths
    if direction == 1:
        side, off = corner, 0.0
    else:
        side = (corner - 1) % 4
        off = lengths[side]

    segments: list[_Segment] = []
    remaining = rounds * geom.perimeter_m
    t = t_start
    while remaining > 1e-9:
        to_corner = (lengths[side] - off) if direction == 1 else off
        step = min(to_corner, remaining)
        jitter = rng.uniform(-profile.speed_jitter, profile.speed_jitter)
        speed = min(max(base * (1.0 + jitter), profile.speed_lo), profile.speed_hi)
        new_off = off + direction * step
        x0, y0 = geom.point(side, off)
        x1, y1 = geom.point(side, new_off)
        t1 = t + step / speed
        segments.append(_Segment(t, t1, x0, y0, x1, y1))
        t, off, remaining = t1, new_off, remaining - step

        at_corner = (off >= lengths[side] - 1e-9) if direction == 1 else (off <= 1e-9)
        if at_corner:
            if direction == 1:
                side = (side + 1) % 4
                off = 0.0
            else:
                side = (side - 1) % 4
                off = lengths[side]
            if remaining > 1e-9 and rng.random() < profile.stop_prob:
                dur = rng.uniform(profile.stop_lo_s, profile.stop_hi_s)
                cx, cy = geom.point(side, off)
                segments.append(_Segment(t, t + dur, cx, cy, cx, cy))
                t += dur
    return segments


def coverage_intervals(segments: list[_Segment], pod: Pod) -> list[tuple[float, float]]:
    """Merged [t_in, t_out] windows where the path is inside the sphere."""
    raw: list[tuple[float, float]] = []
    r2 = pod.radius_m ** 2
    for s in segments:
        ax, ay = s.x0 - pod.x_m, s.y0 - pod.y_m
        if s.t1 <= s.t0:
            continue
        vx = (s.x1 - s.x0) / (s.t1 - s.t0)
        vy = (s.y1 - s.y0) / (s.t1 - s.t0)
        a = vx * vx + vy * vy
        if a == 0.0:
            if ax * ax + ay * ay <= r2:
                raw.append((s.t0, s.t1))
            continue
        b = 2.0 * (ax * vx + ay * vy)
        c = ax * ax + ay * ay - r2
        disc = b * b - 4.0 * a * c
        if disc <= 0.0:
            continue
        sq = math.sqrt(disc)
        lo = s.t0 + (-b - sq) / (2.0 * a)
        hi = s.t0 + (-b + sq) / (2.0 * a)
        lo, hi = max(lo, s.t0), min(hi, s.t1)
        if hi > lo:
            raw.append((lo, hi))
    raw.sort()
    merged: list[tuple[float, float]] = []
    for lo, hi in raw:
        if merged and lo - merged[-1][1] <= 1e-6:
            merged[-1] = (merged[-1][0], max(merged[-1][1], hi))
        else:
            merged.append((lo, hi))
    return merged


def _position_at(segments: list[_Segment], t: float, hint: int) -> tuple[float, float, int]:
    """Point on the path at time t; hint speeds up in-order queries."""
    i = hint
    while i + 1 < len(segments) and t > segments[i].t1:
        i += 1
    s = segments[i]
    if s.t1 <= s.t0:
        return s.x0, s.y0, i
    f = min(max((t - s.t0) / (s.t1 - s.t0), 0.0), 1.0)
    return s.x0 + f * (s.x1 - s.x0), s.y0 + f * (s.y1 - s.y0), i


def simulate(spec: ScenarioSpec) -> SimResult:
    """Generate records, roster, and zone-truth trips for one scenario."""
    deployment = spec.geometry.make_deployment()
    ss = np.random.SeedSequence(spec.seed)
    alloc_rng = np.random.default_rng(ss.spawn(1)[0])
    agents = allocate_agents(spec, alloc_rng)
    agent_seqs = ss.spawn(len(agents))

    records: list[ConnectionRecord] = []
    truth: list[TruthTrip] = []
    roster: dict[str, int] = {}

    for agent, child in zip(agents, agent_seqs):
        rng = np.random.default_rng(child)
        profile = spec.profiles[agent.mode]
        t_start = rng.uniform(0.0, spec.start_window_s)
        segments = build_trajectory(spec.geometry, profile, agent.rounds, rng, t_start)

        visits: list[tuple[float, float, str]] = []
        for pod in deployment.pods:
            for lo, hi in coverage_intervals(segments, pod):
                visits.append((lo, hi, pod.pod_id))
        visits.sort()

        for (lo_a, hi_a, pod_a), (lo_b, hi_b, pod_b) in zip(visits, visits[1:]):
            if pod_a != pod_b:
                truth.append(TruthTrip(agent.device_id, agent.mode, pod_a, pod_b,
                                       hi_a, lo_b))

        pod_by_id = {p.pod_id: p for p in deployment.pods}
        for lo, hi, pod_id in visits:
            pod = pod_by_id[pod_id]
            hint = 0
            t = lo + rng.exponential(spec.rssi.beacon_interval_s)
            while t < hi:
                x, y, hint = _position_at(segments, t, hint)
                dist = math.hypot(x - pod.x_m, y - pod.y_m)
                noise = rng.normal(0.0, spec.rssi.noise_sigma_db)
                records.append(ConnectionRecord(agent.device_id,
                                                spec.rssi.rssi_at(dist, noise),
                                                round(t, 3), pod_id))
                t += rng.exponential(spec.rssi.beacon_interval_s)

        if agent.labelled:
            roster[agent.device_id] = agent.mode

    records.sort(key=lambda r: (r.timestamp, r.device_id, r.pod_id, r.rssi_dbm))
    seen: set[tuple[str, float, float, str]] = set()
    unique: list[ConnectionRecord] = []
    for r in records:
        key = (r.device_id, r.rssi_dbm, r.timestamp, r.pod_id)
        if key not in seen:
            seen.add(key)
            unique.append(r)

    return SimResult(unique, roster, truth, deployment, agents)


def write_truth_csv(truth: list[TruthTrip], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("device_id,mode,origin_pod,dest_pod,t_zone_exit,t_zone_enter\n")
        for t in truth:
            fh.write(f"{t.device_id},{MODE_NAMES[t.mode]},{t.origin_pod},{t.dest_pod},"
                     f"{t.t_exit:.3f},{t.t_enter:.3f}\n")
