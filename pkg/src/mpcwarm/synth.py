"""Synthetic desk-scale tracks in the waypoint-CSV format.

Four closed shapes cover the difficulty range of the experiments: a
straight, a constant-radius circle, a gently winding s-curve and a
stadium with tight hairpin ends.  Waypoints are spaced to match the
distance covered in one control step at the reference speed, so a
well-tracked plan lands on (or very near) waypoints.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .trackgeom import Track, load_track

DEFAULT_SPACING = 0.2  # meters; v_ref * dt
DEFAULT_HALF_WIDTH = 1.1  # meters; 2.2 m lane width

TRACK_NAMES = ("straight", "circle", "s_curve", "hairpin", "chicane")


def _resample_closed(points: np.ndarray, spacing: float) -> np.ndarray:
    """Resample a dense closed polyline at uniform arc-length spacing."""
    closed = np.vstack([points, points[:1]])
    seg = np.diff(closed, axis=0)
    seglen = np.hypot(seg[:, 0], seg[:, 1])
    s = np.concatenate([[0.0], np.cumsum(seglen)])
    total = s[-1]
    n = max(3, int(round(total / spacing)))
    targets = np.arange(n) * (total / n)
    x = np.interp(targets, s, closed[:, 0])
    y = np.interp(targets, s, closed[:, 1])
    return np.stack([x, y], axis=1)


def straight_points(length: float = 60.0, spacing: float = DEFAULT_SPACING) -> np.ndarray:
    n = max(3, int(round(length / spacing)) + 1)
    x = np.linspace(0.0, length, n)
    return np.stack([x, np.zeros_like(x)], axis=1)


def circle_points(radius: float = 15.0, spacing: float = DEFAULT_SPACING) -> np.ndarray:
    n = max(3, int(round(2.0 * np.pi * radius / spacing)))
    phi = np.arange(n) * (2.0 * np.pi / n)
    return radius * np.stack([np.cos(phi), np.sin(phi)], axis=1)


def s_curve_points(base_radius: float = 25.0, wiggle: float = 3.0,
                   lobes: int = 3, spacing: float = DEFAULT_SPACING) -> np.ndarray:
    """Wavy circle whose curvature alternates sign softly along the lap.

    The defaults sweep radii from about 14 m at the lobe peaks through
    near-straight transition zones, so solver effort varies with local
    difficulty instead of saturating everywhere.
    """
    phi = np.linspace(0.0, 2.0 * np.pi, 4000, endpoint=False)
    r = base_radius + wiggle * np.cos(lobes * phi)
    dense = np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1)
    return _resample_closed(dense, spacing)


def hairpin_points(straight_len: float = 350.0, radius: float = 6.0,
                   spacing: float = DEFAULT_SPACING) -> np.ndarray:
    """Stadium: two long straights joined by tight 180-degree hairpin arcs.

    Waypoint 0 is placed 30 m before the first hairpin so that a lap
    attempt meets the hard part early.
    """
    phi = np.linspace(0.0, np.pi, 1000)
    bottom = np.stack([np.linspace(0.0, straight_len, 4000),
                       np.zeros(4000)], axis=1)
    right_arc = np.stack([straight_len + radius * np.sin(phi),
                          radius * (1.0 - np.cos(phi))], axis=1)
    top = np.stack([np.linspace(straight_len, 0.0, 4000),
                    np.full(4000, 2.0 * radius)], axis=1)
    left_arc = np.stack([-radius * np.sin(phi),
                         radius * (1.0 + np.cos(phi))], axis=1)
    dense = np.vstack([bottom, right_arc[1:], top[1:], left_arc[1:-1]])
    pts = _resample_closed(dense, spacing)
    lead_in = min(30.0, 0.5 * straight_len)
    start = int(round((straight_len - lead_in) / spacing))
    return np.roll(pts, -start, axis=0)


def chicane_points(straight_len: float = 700.0,
                   spacing: float = DEFAULT_SPACING) -> np.ndarray:
    """Stadium with one S-shaped kink in the middle of each straight.

    The kinks cover medium radii in both turn directions (the hairpin
    only ever turns one way), while the straights keep corner-affected
    steps a small share of the lap.  Waypoint 0 is rolled 30 m before
    the first kink.
    """
    ds = 0.02
    pose = [0.0, 0.0, 0.0]  # x, y, heading
    pieces = [np.array([[0.0, 0.0]])]

    def advance(length: float, radius: float | None) -> None:
        n = max(1, int(round(length / ds)))
        step = length / n
        pts = np.empty((n, 2))
        x, y, h = pose
        for i in range(n):
            x += step * np.cos(h)
            y += step * np.sin(h)
            if radius is not None:
                h += step / radius  # signed: positive turns left
            pts[i] = (x, y)
        pose[0], pose[1], pose[2] = x, y, h
        pieces.append(pts)

    def kink(radius: float, angle_deg: float, sign: float) -> None:
        outer = np.radians(angle_deg) * radius
        advance(outer, sign * radius)
        advance(2.0 * outer, -sign * radius)
        advance(outer, sign * radius)

    half = 0.5 * straight_len
    end_radius = 6.0
    # bottom straight with a left-right kink, tight left end, top straight
    # with the mirror-image kink, tight left end back to the origin
    advance(half, None)
    kink(10.0, 30.0, +1.0)
    advance(half, None)
    advance(np.pi * end_radius, end_radius)
    advance(half, None)
    kink(14.0, 35.0, -1.0)
    advance(half, None)
    advance(np.pi * end_radius, end_radius)

    dense = np.vstack(pieces)[:-1]
    pts = _resample_closed(dense, spacing)
    start = int(round((half - 30.0) / spacing))
    return np.roll(pts, -start, axis=0)


_GENERATORS = {
    "straight": straight_points,
    "circle": circle_points,
    "s_curve": s_curve_points,
    "hairpin": hairpin_points,
    "chicane": chicane_points,
}


def track_csv(points: np.ndarray, half_width: float = DEFAULT_HALF_WIDTH) -> str:
    lines = ["# synthetic desk-scale track", "x_m,y_m,w_tr_right_m,w_tr_left_m"]
    for x, y in points:
        lines.append(f"{float(x)!r},{float(y)!r},{half_width!r},{half_width!r}")
    return "\n".join(lines) + "\n"


def make_track(name: str, half_width: float = DEFAULT_HALF_WIDTH, **kwargs) -> Track:
    """Build a synthetic track by name, going through the CSV loader."""
    if name not in _GENERATORS:
        raise ValueError(f"unknown track {name!r}; choose from {TRACK_NAMES}")
    pts = _GENERATORS[name](**kwargs)
    return load_track(io.StringIO(track_csv(pts, half_width)), scale=1.0)


def write_tracks(out_dir, half_width: float = DEFAULT_HALF_WIDTH) -> list[Path]:
    """Write the four synthetic track files; returns their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in TRACK_NAMES:
        path = out_dir / f"{name}.csv"
        path.write_text(track_csv(_GENERATORS[name](), half_width))
        paths.append(path)
    return paths
