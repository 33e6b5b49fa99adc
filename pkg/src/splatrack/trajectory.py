"""Timestamped pose sequences."""

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .lie import camera_center, invert, make_transform, so3_log


class Trajectory:
    """Strictly increasing timestamps with world-to-camera poses (M, 4, 4).

    Interpolation is linear in the camera centre and spherical in rotation.
    """

    def __init__(self, times, poses):
        times = np.asarray(times, dtype=np.float64).reshape(-1)
        poses = np.asarray(poses, dtype=np.float64).reshape(-1, 4, 4)
        if times.shape[0] != poses.shape[0]:
            raise ValueError("times and poses differ in length")
        if np.any(np.diff(times) <= 0):
            i = int(np.flatnonzero(np.diff(times) <= 0)[0])
            raise ValueError(f"timestamps not strictly increasing at sample {i + 1}")
        self.times = times
        self.poses = poses
        self._slerp = None

    def __len__(self):
        return self.times.shape[0]

    def __iter__(self):
        return iter(zip(self.times, self.poses))

    @property
    def start(self):
        return float(self.times[0])

    @property
    def end(self):
        return float(self.times[-1])

    def centers(self):
        R = self.poses[:, :3, :3]
        t = self.poses[:, :3, 3]
        return -np.einsum("nji,nj->ni", R, t)

    def pose_at(self, t):
        if len(self) == 1:
            return self.poses[0].copy()
        t = float(np.clip(t, self.times[0], self.times[-1]))
        if self._slerp is None:
            R_wc = np.swapaxes(self.poses[:, :3, :3], 1, 2)
            self._slerp = Slerp(self.times, Rotation.from_matrix(R_wc))
            self._centers = self.centers()
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        k = min(max(k, 0), len(self) - 2)
        t0, t1 = self.times[k], self.times[k + 1]
        a = (t - t0) / (t1 - t0)
        if a == 0.0:
            return self.poses[k].copy()
        if a == 1.0:
            return self.poses[k + 1].copy()
        c = (1 - a) * self._centers[k] + a * self._centers[k + 1]
        R_cw = self._slerp([t]).as_matrix()[0].T
        return make_transform(R_cw, -R_cw @ c)

    def velocity_at(self, t, h=1e-4):
        """(v, omega) in the constant-velocity convention of the motion model.

        ``T(t + dt) ~= v2t(v dt, omega dt) @ T(t)``.
        """
        ta = max(t - h, self.start)
        tb = min(t + h, self.end)
        Ta, Tb = self.pose_at(ta), self.pose_at(tb)
        rel = Tb @ invert(Ta)
        dt = tb - ta
        return rel[:3, 3] / dt, so3_log(rel[:3, :3]) / dt

    def resampled(self, times):
        return Trajectory(times, [self.pose_at(t) for t in times])

    def center_at(self, t):
        return camera_center(self.pose_at(t))
