"""Waypoint tracks and path-relative geometry.

A track is an ordered, closed polyline of centerline waypoints with
per-waypoint lane half-widths.  Everything the controller and the learner
need to know about "where am I relative to the path" lives here: nearest
waypoint, cross-track error, heading error, lap progress and a local
curvature score over the ten waypoints ahead of the vehicle.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi

REQUIRED_COLUMNS = ("x_m", "y_m", "w_tr_right_m", "w_tr_left_m")


class TrackFormatError(ValueError):
    """Malformed track file (bad row, missing column, too few waypoints)."""


def wrap_angle(angle: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    return math.pi - (math.pi - angle) % TWO_PI


@dataclass(frozen=True)
class Waypoint:
    x: float
    y: float
    half_width_left: float
    half_width_right: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("waypoint coordinates must be finite")
        if not (self.half_width_left > 0.0 and self.half_width_right > 0.0):
            raise ValueError("waypoint half-widths must be positive")


@dataclass(frozen=True)
class PathProjection:
    nearest_index: int
    distance: float
    path_heading: float


class Track:
    """Immutable closed waypoint track.

    Coordinates are stored as an (N, 2) float array; all geometry queries
    are pure functions of it, so a Track can be shared freely across
    threads.
    """

    def __init__(self, xy: np.ndarray, half_width_left: np.ndarray,
                 half_width_right: np.ndarray, closed: bool = True,
                 scale_applied: float = 1.0):
        xy = np.asarray(xy, dtype=float)
        hl = np.asarray(half_width_left, dtype=float)
        hr = np.asarray(half_width_right, dtype=float)
        if xy.ndim != 2 or xy.shape[1] != 2:
            raise TrackFormatError("waypoint array must have shape (N, 2)")
        n = xy.shape[0]
        if n < 3:
            raise TrackFormatError(f"track needs at least 3 waypoints, got {n}")
        if hl.shape != (n,) or hr.shape != (n,):
            raise TrackFormatError("half-width arrays must match waypoint count")
        if not np.all(np.isfinite(xy)):
            raise TrackFormatError("waypoint coordinates must be finite")
        if not (np.all(hl > 0.0) and np.all(hr > 0.0)):
            raise TrackFormatError("half-widths must be positive")
        nxt = np.roll(xy, -1, axis=0) if closed else xy[1:]
        cur = xy if closed else xy[:-1]
        if np.any(np.all(nxt == cur, axis=1)):
            raise TrackFormatError("consecutive waypoints must be distinct")
        self._xy = xy
        self._xy.setflags(write=False)
        self._hl = hl
        self._hl.setflags(write=False)
        self._hr = hr
        self._hr.setflags(write=False)
        self.closed = bool(closed)
        self.scale_applied = float(scale_applied)

    def __len__(self) -> int:
        return self._xy.shape[0]

    @property
    def xy(self) -> np.ndarray:
        return self._xy

    @property
    def half_width_left(self) -> np.ndarray:
        return self._hl

    @property
    def half_width_right(self) -> np.ndarray:
        return self._hr

    def waypoint(self, i: int) -> Waypoint:
        return Waypoint(self._xy[i, 0], self._xy[i, 1], self._hl[i], self._hr[i])

    def half_width_at(self, i: int) -> float:
        """Lane half-width at waypoint i (the tighter of the two sides)."""
        return float(min(self._hl[i], self._hr[i]))

    def segment_heading(self, i: int) -> float:
        """Heading of the path segment from waypoint i to the next one."""
        j = (i + 1) % len(self)
        d = self._xy[j] - self._xy[i]
        return math.atan2(d[1], d[0])


def load_track(source, scale: float = 1.0) -> Track:
    """Parse a waypoint CSV stream and apply a uniform length scale.

    The format is the public racetrack-database layout: a header naming
    x_m, y_m, w_tr_right_m, w_tr_left_m (any order), one comma-separated
    record per line, '#'-prefixed comment lines allowed.
    """
    if not scale > 0.0:
        raise ValueError(f"scale must be positive, got {scale}")
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    if hasattr(source, "read"):
        raw = source.read()
    else:
        with open(source, "rb") as fh:
            raw = fh.read()
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8")

    header = None
    rows = []
    for lineno, line in enumerate(raw.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = [f.strip() for f in stripped.split(",")]
        if header is None:
            header = fields
            missing = [c for c in REQUIRED_COLUMNS if c not in header]
            if missing:
                raise TrackFormatError(
                    f"line {lineno}: header missing columns {missing}")
            col = {c: header.index(c) for c in REQUIRED_COLUMNS}
            continue
        if len(fields) != len(header):
            raise TrackFormatError(
                f"line {lineno}: expected {len(header)} fields, got {len(fields)}")
        try:
            rows.append([float(fields[col[c]]) for c in REQUIRED_COLUMNS])
        except ValueError as exc:
            raise TrackFormatError(f"line {lineno}: {exc}") from exc

    if header is None:
        raise TrackFormatError("empty stream: no header row found")
    if len(rows) < 3:
        raise TrackFormatError(f"track needs at least 3 waypoints, got {len(rows)}")

    data = np.asarray(rows, dtype=float)
    xy = data[:, 0:2] * scale
    w_right = data[:, 2] * scale
    w_left = data[:, 3] * scale
    if np.any(w_right <= 0.0) or np.any(w_left <= 0.0):
        bad = int(np.argmax((w_right <= 0.0) | (w_left <= 0.0)))
        raise TrackFormatError(f"non-positive width at waypoint {bad}")
    return Track(xy, w_left, w_right, closed=True, scale_applied=scale)


def nearest_waypoint_index(track: Track, pos) -> int:
    """Index of the waypoint closest to pos; ties go to the lowest index."""
    d = track.xy - np.asarray(pos, dtype=float)
    return int(np.argmin(np.einsum("ij,ij->i", d, d)))


def project(track: Track, pos) -> PathProjection:
    i = nearest_waypoint_index(track, pos)
    p = np.asarray(pos, dtype=float)
    dist = float(np.hypot(*(p - track.xy[i])))
    return PathProjection(i, dist, track.segment_heading(i))


def cross_track_error(track: Track, pos, mode: str = "waypoint") -> float:
    """Unsigned distance from pos to the reference path.

    mode="waypoint" measures to the nearest waypoint (the literal
    definition used by the controller); mode="segment" projects onto the
    nearest path segment, which is more robust when waypoints are sparse.
    """
    p = np.asarray(pos, dtype=float)
    if mode == "waypoint":
        d = track.xy - p
        return float(math.sqrt(np.min(np.einsum("ij,ij->i", d, d))))
    if mode == "segment":
        a = track.xy
        b = np.roll(track.xy, -1, axis=0)
        ab = b - a
        ap = p - a
        denom = np.einsum("ij,ij->i", ab, ab)
        t = np.clip(np.einsum("ij,ij->i", ap, ab) / np.maximum(denom, 1e-300), 0.0, 1.0)
        closest = a + t[:, None] * ab
        d = closest - p
        return float(math.sqrt(np.min(np.einsum("ij,ij->i", d, d))))
    raise ValueError(f"unknown xte mode: {mode!r}")


def heading_error(track: Track, pos, yaw: float) -> float:
    """Absolute wrapped angle between yaw and the local path direction, in [0, pi]."""
    i = nearest_waypoint_index(track, pos)
    return abs(wrap_angle(yaw - track.segment_heading(i)))


def curvature_window(track: Track, pos, window: int = 10) -> np.ndarray:
    """The `window` consecutive waypoints starting at the nearest index."""
    n = len(track)
    if n < window:
        raise ValueError(f"track has {n} waypoints, need at least {window}")
    i = nearest_waypoint_index(track, pos)
    idx = (i + np.arange(window)) % n
    return track.xy[idx]


def curvature_score(points: np.ndarray) -> float:
    """Sum of (1 - cos turn angle) over interior triples of a point window.

    Zero-length chords make the turn angle undefined; those triples are
    skipped with a warning because downscaled real tracks contain
    duplicate points.
    """
    pts = np.asarray(points, dtype=float)
    total = 0.0
    for j in range(1, len(pts) - 1):
        v1 = pts[j] - pts[j - 1]
        v2 = pts[j + 1] - pts[j]
        n1 = math.hypot(v1[0], v1[1])
        n2 = math.hypot(v2[0], v2[1])
        if n1 == 0.0 or n2 == 0.0:
            logger.warning("degenerate chord in curvature window at triple %d; skipped", j)
            continue
        cos_theta = (v1[0] * v2[0] + v1[1] * v2[1]) / (n1 * n2)
        total += 1.0 - cos_theta
    return total


def local_curvature(track: Track, pos) -> float:
    """Curvature score of the 10 waypoints ahead of the vehicle."""
    return curvature_score(curvature_window(track, pos, 10))


def lap_progress(track: Track, pos, prev_index: int,
                 covered: float = 1.0) -> tuple[int, bool]:
    """Advance the monotone lap index toward the waypoint nearest pos.

    Backward jitter (the nearest waypoint falling behind prev_index) keeps
    the previous index.  A wrap past waypoint 0 counts as lap completion
    only when `covered` (fraction of waypoints already visited) is at
    least 0.9.
    """
    n = len(track)
    if not 0 <= prev_index < n:
        raise IndexError(f"prev_index {prev_index} out of range for {n} waypoints")
    nearest = nearest_waypoint_index(track, pos)
    delta = (nearest - prev_index) % n
    window = max(1, n // 4)
    if delta == 0 or delta > window:
        return prev_index, False
    wrapped = prev_index + delta >= n
    return nearest, bool(wrapped and covered >= 0.9)


class LapTracker:
    """Stateful wrapper around lap_progress for one simulation loop."""

    def __init__(self, track: Track, start_index: int = 0):
        self._track = track
        self.index = start_index
        self.waypoints_covered = 0

    @property
    def covered_fraction(self) -> float:
        return self.waypoints_covered / len(self._track)

    def update(self, pos) -> bool:
        """Advance with the new position; True once the lap completes."""
        prev = self.index
        new_index, completed = lap_progress(
            self._track, pos, prev, covered=self.covered_fraction)
        self.waypoints_covered += (new_index - prev) % len(self._track)
        self.index = new_index
        return completed


def tracking_errors(track: Track, xs: np.ndarray, ys: np.ndarray,
                    yaws: np.ndarray, mode: str = "waypoint",
                    window_idx: np.ndarray | None = None):
    """Vectorized (xte, eth) for a batch of poses; used by the MPC cost.

    window_idx optionally restricts the nearest-waypoint search to a
    subset of waypoint indices (the controller passes the stretch of
    track around the vehicle, which contains the true nearest waypoint
    of every plan state).  Returns (xte array, eth array, nearest-index
    array); indices are global.
    """
    pts = np.stack([np.asarray(xs, float), np.asarray(ys, float)], axis=1)
    n = len(track)
    if window_idx is None:
        xy = track.xy
        nxt_xy = np.roll(track.xy, -1, axis=0)
    else:
        xy = track.xy[window_idx]
        nxt_xy = track.xy[(window_idx + 1) % n]
    diff = pts[:, None, :] - xy[None, :, :]
    d2 = np.einsum("kij,kij->ki", diff, diff)
    local = np.argmin(d2, axis=1)
    if mode == "waypoint":
        xte = np.sqrt(d2[np.arange(len(pts)), local])
    elif mode == "segment":
        a = xy
        ab = nxt_xy - a
        ap = pts[:, None, :] - a[None, :, :]
        denom = np.maximum(np.einsum("ij,ij->i", ab, ab), 1e-300)
        t = np.clip(np.einsum("kij,ij->ki", ap, ab) / denom, 0.0, 1.0)
        closest = a[None, :, :] + t[:, :, None] * ab[None, :, :]
        dd = pts[:, None, :] - closest
        xte = np.sqrt(np.min(np.einsum("kij,kij->ki", dd, dd), axis=1))
    else:
        raise ValueError(f"unknown xte mode: {mode!r}")
    seg = nxt_xy[local] - xy[local]
    path_heading = np.arctan2(seg[:, 1], seg[:, 0])
    raw = np.asarray(yaws, float) - path_heading
    eth = np.abs(np.pi - np.mod(np.pi - raw, TWO_PI))
    nearest = local if window_idx is None else np.asarray(window_idx)[local]
    return xte, eth, nearest
