"""Per-trip feature extraction and min-max normalization.

Each trip maps to a 15-dimensional vector describing how fast the device
crossed the uncovered gap between two pods and how its signal behaved
inside each coverage zone.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .records import MODE_NAMES, PodDeployment, PodVisit, Trip, parse_mode, trip_id

FEATURE_NAMES = (
    "gap_speed",
    "gap_time",
    "trip_duration",
    "origin_dwell",
    "dest_dwell",
    "dwell_ratio",
    "origin_msgs",
    "dest_msgs",
    "total_msgs",
    "origin_rssi_var",
    "dest_rssi_var",
    "origin_rssi_d1",
    "dest_rssi_d1",
    "origin_rssi_d2",
    "dest_rssi_d2",
)

N_FEATURES = len(FEATURE_NAMES)


def rssi_variance(visit: PodVisit) -> float:
    """Population variance of the raw RSSI series (0.0 for a single beacon)."""
    values = np.array([r.rssi_dbm for r in visit.records], dtype=np.float64)
    if values.size <= 1:
        return 0.0
    return float(np.var(values))


def _collapsed_series(visit: PodVisit) -> tuple[np.ndarray, np.ndarray]:
    # Beacons sharing a timestamp are averaged so derivative steps never
    # divide by a zero time delta.
    ts: list[float] = []
    means: list[float] = []
    i = 0
    recs = visit.records
    while i < len(recs):
        j = i
        acc = 0.0
        while j < len(recs) and recs[j].timestamp == recs[i].timestamp:
            acc += recs[j].rssi_dbm
            j += 1
        ts.append(recs[i].timestamp)
        means.append(acc / (j - i))
        i = j
    return np.array(ts), np.array(means)


def rssi_derivatives(visit: PodVisit) -> tuple[float, float]:
    """Mean |first derivative| and mean |second derivative| of RSSI over time.

    Derivatives are finite differences on the timestamp-collapsed series;
    series too short for a step contribute exactly 0.0.
    """
    ts, vals = _collapsed_series(visit)
    if ts.size <= 1:
        return 0.0, 0.0
    dt = np.diff(ts)
    d1 = np.diff(vals) / dt
    mean_d1 = float(np.mean(np.abs(d1)))
    if ts.size <= 2:
        return mean_d1, 0.0
    # second derivative over the time between interval midpoints
    mid = (ts[1:] + ts[:-1]) / 2.0
    d2 = np.diff(d1) / np.diff(mid)
    return mean_d1, float(np.mean(np.abs(d2)))


def extract_features(trip: Trip, deployment: PodDeployment,
                     degenerate_speed: float | None = None) -> np.ndarray:
    """15-vector for one trip; needs the deployment for the gap distance.

    ``degenerate_speed`` substitutes for gap_speed when the gap time is not
    positive (clock skew between pods); without a substitute that case is an
    error.
    """
    o, d = trip.origin, trip.destination
    gap_t = d.t_first - o.t_last
    dist = deployment.gap_distance(o.pod_id, d.pod_id)
    if gap_t > 0:
        speed = dist / gap_t
    elif degenerate_speed is not None:
        speed = degenerate_speed
    else:
        raise ValueError(f"non-positive gap time {gap_t:.3f}s for {o.pod_id}->{d.pod_id}")

    o_var = rssi_variance(o)
    d_var = rssi_variance(d)
    o_d1, o_d2 = rssi_derivatives(o)
    d_d1, d_d2 = rssi_derivatives(d)

    x = np.array([
        speed,
        gap_t,
        d.t_last - o.t_first,
        o.dwell_s,
        d.dwell_s,
        o.dwell_s / (d.dwell_s + 1.0),
        float(o.message_count),
        float(d.message_count),
        float(o.message_count + d.message_count),
        o_var,
        d_var,
        o_d1,
        d_d1,
        o_d2,
        d_d2,
    ], dtype=np.float64)
    if not np.all(np.isfinite(x)):
        bad = [FEATURE_NAMES[i] for i in np.flatnonzero(~np.isfinite(x))]
        raise ValueError(f"non-finite features {bad} for trip {o.pod_id}->{d.pod_id}")
    return x


def extract_feature_matrix(trips: list[Trip], deployment: PodDeployment) -> np.ndarray:
    """Feature matrix (n_trips, 15) in trip order.

    Trips with a non-positive gap time get the fastest well-defined gap
    speed in the batch instead of an undefined one, which keeps an ordinal
    "fast" reading without blowing up the column range.
    """
    gap_speeds = np.full(len(trips), np.nan)
    for i, t in enumerate(trips):
        gap_t = t.destination.t_first - t.origin.t_last
        if gap_t > 0:
            dist = deployment.gap_distance(t.origin.pod_id, t.destination.pod_id)
            gap_speeds[i] = dist / gap_t
    fallback = float(np.nanmax(gap_speeds)) if not np.all(np.isnan(gap_speeds)) else 0.0

    X = np.empty((len(trips), N_FEATURES), dtype=np.float64)
    for i, t in enumerate(trips):
        X[i] = extract_features(t, deployment, degenerate_speed=fallback)
    return X


@dataclass
class NormalizationStats:
    """Per-column min/max fitted on training data only."""

    col_min: np.ndarray
    col_max: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "NormalizationStats":
        if X.ndim != 2 or X.shape[0] == 0:
            raise ValueError(f"expected non-empty 2-d matrix, got shape {X.shape}")
        return cls(X.min(axis=0).copy(), X.max(axis=0).copy())

    @classmethod
    def identity(cls, n_features: int = N_FEATURES) -> "NormalizationStats":
        return cls(np.zeros(n_features), np.ones(n_features))

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Scale into [0,1]; unseen out-of-range values are clipped."""
        span = self.col_max - self.col_min
        safe = np.where(span > 0, span, 1.0)
        Xn = (X - self.col_min) / safe
        Xn = np.where(span > 0, Xn, 0.0)  # constant training column -> 0
        return np.clip(Xn, 0.0, 1.0)

    def to_dict(self) -> dict:
        return {"col_min": self.col_min.tolist(), "col_max": self.col_max.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "NormalizationStats":
        return cls(np.asarray(data["col_min"], dtype=np.float64),
                   np.asarray(data["col_max"], dtype=np.float64))


@dataclass
class FeatureSet:
    """Feature rows ready for training: ids, raw features, labels (-1 = none)."""

    trip_ids: list[str]
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        if self.X.shape != (len(self.trip_ids), N_FEATURES):
            raise ValueError(f"feature matrix shape {self.X.shape} does not match "
                             f"{len(self.trip_ids)} trips")
        if self.y.shape != (len(self.trip_ids),):
            raise ValueError("label vector length mismatch")

    @property
    def labelled_mask(self) -> np.ndarray:
        return self.y >= 0

    def split(self) -> tuple["FeatureSet", "FeatureSet"]:
        """(labelled, unlabelled) subsets, preserving order."""
        m = self.labelled_mask
        lab = FeatureSet([t for t, keep in zip(self.trip_ids, m) if keep], self.X[m], self.y[m])
        unl = FeatureSet([t for t, keep in zip(self.trip_ids, m) if not keep],
                         self.X[~m], self.y[~m])
        return lab, unl


def build_feature_set(trips: list[Trip], deployment: PodDeployment) -> FeatureSet:
    X = extract_feature_matrix(trips, deployment)
    y = np.array([t.label if t.label is not None else -1 for t in trips], dtype=np.int64)
    ids = [trip_id(i) for i in range(len(trips))]
    return FeatureSet(ids, X, y)


def write_features_csv(fs: FeatureSet, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("trip_id," + ",".join(f"f{i+1}" for i in range(N_FEATURES)) + ",label\n")
        for tid, row, label in zip(fs.trip_ids, fs.X, fs.y):
            vals = ",".join(repr(float(v)) for v in row)
            name = MODE_NAMES[label] if label >= 0 else ""
            fh.write(f"{tid},{vals},{name}\n")


def read_features_csv(path: str) -> FeatureSet:
    ids: list[str] = []
    rows: list[list[float]] = []
    labels: list[int] = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"empty features file {path}")
        expected = ["trip_id"] + [f"f{i+1}" for i in range(N_FEATURES)] + ["label"]
        if [h.strip() for h in header] != expected:
            raise ValueError(f"unexpected features header in {path}")
        for row in reader:
            if not row:
                continue
            if len(row) != N_FEATURES + 2:
                raise ValueError(f"bad features row for {row[0] if row else '?'}")
            ids.append(row[0])
            rows.append([float(v) for v in row[1:-1]])
            labels.append(parse_mode(row[-1]) if row[-1].strip() else -1)
    return FeatureSet(ids, np.array(rows, dtype=np.float64).reshape(len(ids), N_FEATURES),
                      np.array(labels, dtype=np.int64))
