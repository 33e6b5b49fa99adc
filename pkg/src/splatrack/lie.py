"""Small rotation / rigid-transform helpers on plain numpy arrays.

Rigid transforms are 4x4 homogeneous matrices throughout the package.
"""

import numpy as np


def hat(w):
    """Skew-symmetric matrix of a 3-vector (``hat(a) @ b == cross(a, b)``)."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy],
                     [wz, 0.0, -wx],
                     [-wy, wx, 0.0]])


def hat_batch(w):
    w = np.asarray(w, dtype=np.float64)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def vee(S):
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def so3_exp(phi):
    """Rodrigues exponential. Below 1e-8 rad the second-order series is used."""
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi)
    K = hat(phi)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return (np.eye(3) + np.sin(theta) / theta * K
            + (1.0 - np.cos(theta)) / theta**2 * K @ K)


def so3_log(R):
    cos = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    theta = np.arccos(cos)
    if theta < 1e-8:
        return vee(R - R.T) * 0.5
    if np.pi - theta < 1e-6:
        # near pi: recover the axis from the symmetric part
        B = 0.5 * (R + np.eye(3))
        axis = np.sqrt(np.clip(np.diag(B), 0.0, None))
        k = int(np.argmax(axis))
        axis = B[:, k] / max(axis[k], 1e-12)
        axis /= np.linalg.norm(axis)
        if vee(R - R.T) @ axis < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * vee(R - R.T)


def rotation_angle(R):
    """Geodesic angle of a rotation matrix, in radians."""
    return float(np.linalg.norm(so3_log(R)))


def make_transform(R=None, t=None):
    T = np.eye(4)
    if R is not None:
        T[:3, :3] = R
    if t is not None:
        T[:3, 3] = t
    return T


def invert(T):
    R = T[:3, :3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ T[:3, 3]
    return out


def v2t(rho, phi):
    """Transform from a translation and a rotation vector.

    The rotation is the Rodrigues exponential of ``phi`` and the translation
    is ``rho`` itself (no SE(3) V-matrix coupling).
    """
    return make_transform(so3_exp(phi), np.asarray(rho, dtype=np.float64))


def se3_exp(xi):
    """Full SE(3) exponential of (rho, phi); used only as a perturbation model."""
    xi = np.asarray(xi, dtype=np.float64)
    rho, phi = xi[:3], xi[3:]
    theta = np.linalg.norm(phi)
    K = hat(phi)
    if theta < 1e-8:
        V = np.eye(3) + 0.5 * K + K @ K / 6.0
    else:
        V = (np.eye(3) + (1.0 - np.cos(theta)) / theta**2 * K
             + (theta - np.sin(theta)) / theta**3 * K @ K)
    return make_transform(so3_exp(phi), V @ rho)


def orthonormalize(R):
    """Nearest rotation matrix (polar decomposition through SVD)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def camera_center(T_cw):
    return -T_cw[:3, :3].T @ T_cw[:3, 3]
