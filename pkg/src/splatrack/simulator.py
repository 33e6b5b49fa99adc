"""Synthetic event streams by frame differencing of rendered log intensity."""

from dataclasses import dataclass

import numpy as np

from .events import EventArray
from .gaussian_map import EmptyMapError
from .lie import make_transform, so3_exp
from .rasterizer import render
from .trajectory import Trajectory


@dataclass(frozen=True)
class SimConfig:
    contrast_threshold: float = 0.15
    frame_rate: float = 1000.0
    jitter_sigma: float = 0.0       # seconds
    spurious_rate: float = 0.0      # events per second per pixel
    seed: int = 0

    def __post_init__(self):
        if self.contrast_threshold <= 0:
            raise ValueError("contrast threshold must be positive")
        if self.frame_rate <= 0:
            raise ValueError("frame rate must be positive")


@dataclass
class SimResult:
    events: EventArray
    frame_times: np.ndarray
    log_frames: list = None

    @property
    def frame_count(self):
        return self.frame_times.shape[0]


def _look_rotation():
    # camera axes aligned with the world: optical axis +z, image x right, y down
    return np.eye(3)


def _pose_from_center(R_wc, c):
    R_cw = R_wc.T
    return make_transform(R_cw, -R_cw @ c)


def make_trajectory(kind, duration=1.0, rate=1000.0, **params):
    """Analytic camera trajectories sampled at ``rate``.

    kinds and parameters (all positions in metres, world frame):

    * ``line``: ``start`` (3,), ``velocity`` (3,) m/s
    * ``orbit``: ``center`` (3,), ``radius``, ``angular_rate`` rad/s; the camera
      centre circles in the plane parallel to the image plane
    * ``shake``: ``center`` (3,), ``trans_amp`` m, ``rot_amp`` rad,
      ``f_min``/``f_max`` Hz, ``components``, ``seed`` -- a sum of random
      sinusoids, so the motion is band-limited and smooth
    """
    if duration <= 0 or rate <= 0:
        raise ValueError("duration and rate must be positive")
    n = int(round(duration * rate)) + 1
    times = np.arange(n) / rate
    R0 = _look_rotation()
    if kind == "line":
        start = np.asarray(params.pop("start", (0.0, 0.0, 0.0)), dtype=np.float64)
        vel = np.asarray(params.pop("velocity", (0.0, 0.0, 0.0)), dtype=np.float64)
        poses = [_pose_from_center(R0, start + vel * t) for t in times]
    elif kind == "orbit":
        center = np.asarray(params.pop("center", (0.0, 0.0, 0.0)), dtype=np.float64)
        radius = float(params.pop("radius", 0.1))
        w = float(params.pop("angular_rate", 1.0))
        if radius < 0:
            raise ValueError("orbit radius must be non-negative")
        poses = [_pose_from_center(R0, center + radius * np.array([np.cos(w * t), np.sin(w * t), 0.0]))
                 for t in times]
    elif kind == "shake":
        center = np.asarray(params.pop("center", (0.0, 0.0, 0.0)), dtype=np.float64)
        trans_amp = float(params.pop("trans_amp", 0.05))
        rot_amp = float(params.pop("rot_amp", np.deg2rad(2.0)))
        f_min = float(params.pop("f_min", 0.3))
        f_max = float(params.pop("f_max", 1.5))
        k = int(params.pop("components", 3))
        seed = int(params.pop("seed", 0))
        if not 0 < f_min <= f_max or k < 1:
            raise ValueError("invalid shake frequency band or component count")
        rng = np.random.default_rng(seed)
        freqs = rng.uniform(f_min, f_max, (6, k))
        phases = rng.uniform(0, 2 * np.pi, (6, k))
        weights = rng.uniform(0.5, 1.0, (6, k))
        weights /= weights.sum(axis=1, keepdims=True)
        amp = np.array([trans_amp] * 3 + [rot_amp] * 3)[:, None] * weights
        sig = np.einsum("ak,atk->ta", amp,
                        np.sin(2 * np.pi * freqs[:, None, :] * times[None, :, None] + phases[:, None, :]))
        poses = [_pose_from_center(so3_exp(s[3:]) @ R0, center + s[:3]) for s in sig]
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    if params:
        raise ValueError(f"unused trajectory parameters: {sorted(params)}")
    return Trajectory(times, poses)


def events_between(L_prev, L_new, L_ref, t0, t1, C):
    """Threshold crossings between two log frames; updates ``L_ref`` in place.

    Returns (t, x, y, p) arrays for this frame interval, unsorted.
    """
    diff = L_new - L_ref
    # tolerance absorbs round-off for changes that are exact multiples of C
    counts = np.floor(np.abs(diff) / C + 1e-9).astype(np.int64)
    ys, xs = np.nonzero(counts)
    if ys.size == 0:
        return (np.zeros(0), np.zeros(0, np.int32), np.zeros(0, np.int32), np.zeros(0, np.int8))
    n = counts[ys, xs]
    sign = np.sign(diff[ys, xs])
    rep = np.repeat(np.arange(ys.size), n)
    k = np.arange(rep.size) - np.repeat(np.cumsum(n) - n, n) + 1
    level = L_ref[ys, xs][rep] + sign[rep] * k * C
    a, b = L_prev[ys, xs][rep], L_new[ys, xs][rep]
    span = b - a
    frac = np.where(np.abs(span) > 0, (level - a) / np.where(span == 0, 1.0, span), 1.0)
    t = t0 + np.clip(frac, 0.0, 1.0) * (t1 - t0)
    L_ref[ys, xs] += sign * n * C
    return t, xs[rep].astype(np.int32), ys[rep].astype(np.int32), sign[rep].astype(np.int8)


def simulate_events(gmap, traj, intr, cfg, keep_frames=False):
    """Render ``traj`` at ``cfg.frame_rate`` and emit contrast-threshold events."""
    if gmap is None or len(gmap) == 0:
        raise EmptyMapError("cannot simulate from an empty map")
    n_frames = int(round((traj.end - traj.start) * cfg.frame_rate))
    if n_frames < 2:
        raise ValueError("trajectory spans fewer than two frames at the simulation rate")
    frame_times = traj.start + np.arange(n_frames) / cfg.frame_rate
    C = cfg.contrast_threshold
    chunks = []
    frames = [] if keep_frames else None
    L_prev = render(gmap, traj.pose_at(frame_times[0]), intr).log_intensity
    L_ref = L_prev.copy()
    if keep_frames:
        frames.append(L_prev)
    for i in range(1, n_frames):
        L_new = render(gmap, traj.pose_at(frame_times[i]), intr).log_intensity
        chunk = events_between(L_prev, L_new, L_ref, frame_times[i - 1], frame_times[i], C)
        if chunk[0].size:
            chunks.append(chunk)
        if keep_frames:
            frames.append(L_new)
        L_prev = L_new
    if chunks:
        t, x, y, p = (np.concatenate(c) for c in zip(*chunks))
    else:
        t, x, y, p = (np.zeros(0), np.zeros(0, np.int32), np.zeros(0, np.int32), np.zeros(0, np.int8))
    rng = np.random.default_rng(cfg.seed)
    if cfg.jitter_sigma > 0 and t.size:
        t = t + rng.normal(0.0, cfg.jitter_sigma, t.size)
    if cfg.spurious_rate > 0:
        span = frame_times[-1] - frame_times[0]
        m = rng.poisson(cfg.spurious_rate * span * intr.width * intr.height)
        t = np.concatenate([t, rng.uniform(frame_times[0], frame_times[-1], m)])
        x = np.concatenate([x, rng.integers(0, intr.width, m).astype(np.int32)])
        y = np.concatenate([y, rng.integers(0, intr.height, m).astype(np.int32)])
        p = np.concatenate([p, rng.choice(np.array([-1, 1], np.int8), m)])
    order = np.lexsort((x, y, t))
    events = EventArray(t[order], x[order], y[order], p[order])
    return SimResult(events, frame_times, frames)
