"""TUM trajectory files and absolute trajectory error after first-pose alignment.

TUM lines hold the camera-to-world pose ``t tx ty tz qx qy qz qw``; in memory
trajectories store world-to-camera matrices.
"""

from dataclasses import dataclass, field
import csv
import logging

import numpy as np
from scipy.spatial.transform import Rotation

from .lie import invert, make_transform, rotation_angle
from .trajectory import Trajectory

log = logging.getLogger(__name__)


class TrajectoryFormatError(ValueError):
    pass


def load_tum(path):
    times, poses = [], []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 8:
                raise TrajectoryFormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                vals = [float(v) for v in parts]
            except ValueError:
                raise TrajectoryFormatError(f"{path}:{lineno}: non-numeric field") from None
            if times and vals[0] <= times[-1]:
                raise TrajectoryFormatError(f"{path}:{lineno}: timestamp not increasing")
            q = np.array(vals[4:8])
            norm = np.linalg.norm(q)
            if norm == 0:
                raise TrajectoryFormatError(f"{path}:{lineno}: zero quaternion")
            if abs(norm - 1.0) > 1e-6:
                log.warning("%s:%d: quaternion norm %.6f normalized", path, lineno, norm)
            R_wc = Rotation.from_quat(q / norm).as_matrix()
            T_wc = make_transform(R_wc, vals[1:4])
            times.append(vals[0])
            poses.append(invert(T_wc))
    return Trajectory(times, np.array(poses).reshape(-1, 4, 4))


def save_tum(traj, path):
    with open(path, "w", encoding="ascii") as fh:
        for t, T_cw in traj:
            T_wc = invert(T_cw)
            q = Rotation.from_matrix(T_wc[:3, :3]).as_quat()
            vals = [t, *T_wc[:3, 3], *q]
            fh.write(" ".join(repr(float(v)) for v in vals) + "\n")


def associate(est, gt, tolerance):
    """Nearest-timestamp pairs ``(i_est, i_gt)`` within ``tolerance`` seconds."""
    pairs = []
    for i, t in enumerate(est.times):
        j = int(np.searchsorted(gt.times, t))
        best = None
        for k in (j - 1, j):
            if 0 <= k < len(gt) and abs(gt.times[k] - t) <= tolerance:
                if best is None or abs(gt.times[k] - t) < abs(gt.times[best] - t):
                    best = k
        if best is not None:
            pairs.append((i, best))
    return pairs


def align_first_pose(est, gt, tolerance=0.05):
    """Rigidly move ``est`` so its first pose coincides with the matching ground truth."""
    if len(est) == 0 or len(gt) == 0:
        raise ValueError("trajectories must be nonempty")
    pairs = associate(Trajectory(est.times[:1], est.poses[:1]), gt, tolerance)
    if not pairs:
        raise ValueError(f"first estimate at t={est.times[0]} has no ground truth within {tolerance}s")
    gt0_wc = invert(gt.poses[pairs[0][1]])
    est0_wc = invert(est.poses[0])
    A = gt0_wc @ invert(est0_wc)
    aligned = [invert(A @ invert(T)) for T in est.poses]
    return Trajectory(est.times.copy(), np.array(aligned))


@dataclass
class AteResult:
    position_rmse: float                # centimetres
    orientation_rmse: float             # degrees
    position_errors: np.ndarray = field(repr=False)
    orientation_errors: np.ndarray = field(repr=False)
    times: np.ndarray = field(repr=False)
    count: int = 0

    def __str__(self):
        return (f"ATE position: {self.position_rmse:.2f} cm, "
                f"orientation: {self.orientation_rmse:.2f} deg ({self.count} poses)")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "position_error_cm", "orientation_error_deg"])
            for row in zip(self.times, self.position_errors, self.orientation_errors):
                w.writerow([repr(float(v)) for v in row])


def ate(est, gt, assoc_tolerance=0.01):
    """Position (cm) and orientation (deg) RMSE over associated poses.

    No alignment is applied here; call :func:`align_first_pose` first.
    """
    pairs = associate(est, gt, assoc_tolerance)
    if not pairs:
        raise ValueError("no timestamps associate within tolerance")
    ie, ig = map(np.array, zip(*pairs))
    c_est = est.centers()[ie]
    c_gt = gt.centers()[ig]
    pos = np.linalg.norm(c_est - c_gt, axis=1) * 100.0
    rot = np.array([np.degrees(rotation_angle(est.poses[a][:3, :3] @ gt.poses[b][:3, :3].T))
                    for a, b in pairs])
    return AteResult(float(np.sqrt(np.mean(pos ** 2))), float(np.sqrt(np.mean(rot ** 2))),
                     pos, rot, est.times[ie], len(pairs))
