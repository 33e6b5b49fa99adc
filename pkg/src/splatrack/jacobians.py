"""Analytic derivatives of the camera-frame point and rotation w.r.t. the
pose increment (dt, dtheta) and the velocity (v, omega).

Conventions:

* column order of every 6-wide block is (translation, rotation);
* rotation derivatives are 9x6 with ``R_cw`` flattened column-major, i.e.
  rows 0..2 belong to ``R_cw[:, 0]``;
* the pose blocks are derivatives under a left perturbation of T2 and the
  velocity blocks under a left perturbation of T1 (scaled by the chain factor
  ``sign * delta_tau / 2``).  Both are exact derivatives when the perturbed
  factor is the identity, which is how the tracker linearizes.
"""

from dataclasses import dataclass

import numpy as np

from .lie import hat_batch


@dataclass(frozen=True)
class CameraDerivatives:
    d_point_d_pose: np.ndarray   # (N, 3, 6) or (3, 6)
    d_rot_d_pose: np.ndarray     # (9, 6)
    d_point_d_vel: np.ndarray    # (N, 3, 6) or (3, 6)
    d_rot_d_vel: np.ndarray      # (9, 6)


def _split(T):
    return T[:3, :3], T[:3, 3]


def point_pose_jacobian(T1, T2, T3, mu):
    """d(T1 T2 T3 mu) / d(dt, dtheta). Accepts ``mu`` of shape (3,) or (N, 3)."""
    R1, _ = _split(T1)
    R2, t2 = _split(T2)
    R3, t3 = _split(T3)
    mu = np.asarray(mu, dtype=np.float64)
    lever = (mu @ R3.T + t3) @ R2.T + t2
    block = np.concatenate(
        [np.broadcast_to(np.eye(3), lever.shape[:-1] + (3, 3)), -hat_batch(lever)],
        axis=-1)
    return R1 @ block


def _rot_stack(R_left, R_right):
    cols = R_right.T  # row i is column i of R_right
    out = np.zeros((9, 6))
    for i in range(3):
        out[3 * i:3 * i + 3, 3:] = -R_left @ hat_batch(cols[i])
    return out


def rot_pose_jacobian(T1, T2, T3):
    """d(R_cw) / d(dt, dtheta) with R_cw flattened column-major (9x6)."""
    R1 = T1[:3, :3]
    R23 = T2[:3, :3] @ T3[:3, :3]
    return _rot_stack(R1, R23)


def point_vel_jacobian(T1, T2, T3, mu, delta_tau, sign):
    """d(T1 T2 T3 mu) / d(v, omega) for the boundary selected by ``sign``."""
    if delta_tau < 0:
        raise ValueError("delta_tau must be non-negative")
    R1, t1 = _split(T1)
    R2, t2 = _split(T2)
    R3, t3 = _split(T3)
    mu = np.asarray(mu, dtype=np.float64)
    point = ((mu @ R3.T + t3) @ R2.T + t2) @ R1.T + t1
    block = np.concatenate(
        [np.broadcast_to(np.eye(3), point.shape[:-1] + (3, 3)), -hat_batch(point)],
        axis=-1)
    return (sign * 0.5 * delta_tau) * block


def rot_vel_jacobian(T1, T2, T3, delta_tau, sign):
    if delta_tau < 0:
        raise ValueError("delta_tau must be non-negative")
    R123 = T1[:3, :3] @ T2[:3, :3] @ T3[:3, :3]
    return (sign * 0.5 * delta_tau) * _rot_stack(np.eye(3), R123)


def camera_derivatives(T1, T2, T3, means, delta_tau, sign):
    return CameraDerivatives(
        d_point_d_pose=point_pose_jacobian(T1, T2, T3, means),
        d_rot_d_pose=rot_pose_jacobian(T1, T2, T3),
        d_point_d_vel=point_vel_jacobian(T1, T2, T3, means, delta_tau, sign),
        d_rot_d_vel=rot_vel_jacobian(T1, T2, T3, delta_tau, sign),
    )


def full_gradient(raster_grads, derivs):
    """Contract rasterizer gradients with the camera Jacobians.

    ``raster_grads`` and ``derivs`` are matched sequences (one entry per
    boundary render).  Each raster gradient carries ``d_point`` (N, 3) and
    ``d_rot`` (N, 3, 3).  Returns the 12-vector (dt, dtheta, v, omega).
    """
    if len(raster_grads) != len(derivs):
        raise ValueError("need one set of camera derivatives per render")
    total = np.zeros(12)
    for g, d in zip(raster_grads, derivs):
        d_point = np.asarray(g.d_point)
        n = d_point.shape[0]
        pp = np.asarray(d.d_point_d_pose)
        pv = np.asarray(d.d_point_d_vel)
        if pp.ndim == 3 and pp.shape[0] != n or pv.ndim == 3 and pv.shape[0] != n:
            raise ValueError(
                f"gaussian count mismatch: {n} gradients vs {pp.shape[0]} jacobians")
        pp = np.broadcast_to(pp, (n, 3, 6))
        pv = np.broadcast_to(pv, (n, 3, 6))
        # column-major flattening of each 3x3 rotation gradient
        d_rot = np.asarray(g.d_rot).transpose(0, 2, 1).reshape(n, 9).sum(axis=0)
        total[:6] += np.einsum("ni,nij->j", d_point, pp) + d_rot @ d.d_rot_d_pose
        total[6:] += np.einsum("ni,nij->j", d_point, pv) + d_rot @ d.d_rot_d_vel
    return total
