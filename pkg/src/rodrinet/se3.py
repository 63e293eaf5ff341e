"""Rotation and rigid-transform primitives.

Rotations are 3x3 numpy arrays, poses are 4x4 homogeneous arrays with bottom
row (0, 0, 0, 1), and quaternions are length-4 arrays ordered (w, x, y, z).
Everything here is a pure function in double precision; callers that train in
single precision cast at the boundary.
"""

import numpy as np

from .errors import InvalidAxis, InvalidParameter, InvalidQuaternion

_UNIT_TOL = 1e-6


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues_rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rotation matrix about a unit axis: I + sin(t)[w] + (1 - cos(t))[w]^2."""
    axis = np.asarray(axis, dtype=np.float64)
    if abs(np.linalg.norm(axis) - 1.0) > _UNIT_TOL:
        raise InvalidAxis(f"axis must be unit length, got norm {np.linalg.norm(axis)}")
    k = skew(axis)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    q = np.asarray(q, dtype=np.float64)
    if abs(np.linalg.norm(q) - 1.0) > _UNIT_TOL:
        raise InvalidQuaternion(f"quaternion must be unit length, got norm {np.linalg.norm(q)}")
    w, i, j, k = q
    return np.array(
        [
            [1 - 2 * (j * j + k * k), 2 * (i * j - k * w), 2 * (i * k + j * w)],
            [2 * (i * j + k * w), 1 - 2 * (i * i + k * k), 2 * (j * k - i * w)],
            [2 * (i * k - j * w), 2 * (j * k + i * w), 1 - 2 * (i * i + j * j)],
        ]
    )


def quat_from_matrix(rot: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) of a rotation matrix, w >= 0."""
    m = np.asarray(rot, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    # Shepperd's method: branch on the largest of w^2, x^2, y^2, z^2.
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    q /= np.linalg.norm(q)
    if q[0] < 0.0:
        q = -q
    return q


def quat_slerp(q0: np.ndarray, q1: np.ndarray, t: float) -> np.ndarray:
    """Shortest-arc spherical interpolation between unit quaternions."""
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot > 1.0 - 1e-12:
        out = (1.0 - t) * q0 + t * q1
        return out / np.linalg.norm(out)
    omega = np.arccos(min(dot, 1.0))
    so = np.sin(omega)
    return (np.sin((1.0 - t) * omega) / so) * q0 + (np.sin(t * omega) / so) * q1


def make_pose(rotation: np.ndarray, translation: np.ndarray) -> np.ndarray:
    pose = np.eye(4)
    pose[:3, :3] = rotation
    pose[:3, 3] = translation
    return pose


def identity_pose() -> np.ndarray:
    return np.eye(4)


def pose_rotation(pose: np.ndarray) -> np.ndarray:
    return pose[:3, :3]


def pose_translation(pose: np.ndarray) -> np.ndarray:
    return pose[:3, 3]


def pose_compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b


def pose_invert(a: np.ndarray) -> np.ndarray:
    rt = a[:3, :3].T
    out = np.eye(4)
    out[:3, :3] = rt
    out[:3, 3] = -rt @ a[:3, 3]
    return out


def interpolate_pose(start: np.ndarray, end: np.ndarray, t: float) -> np.ndarray:
    """Linear translation, slerp rotation; t must lie in [0, 1]."""
    if not 0.0 <= t <= 1.0:
        raise InvalidParameter(f"interpolation parameter must be in [0, 1], got {t}")
    trans = (1.0 - t) * start[:3, 3] + t * end[:3, 3]
    q = quat_slerp(quat_from_matrix(start[:3, :3]), quat_from_matrix(end[:3, :3]), t)
    return make_pose(quat_to_matrix(q), trans)


def geodesic_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Angle in [0, pi] of the relative rotation a^T b."""
    rel = a.T @ b
    c = (np.trace(rel) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def rotation_vector(rot: np.ndarray) -> np.ndarray:
    """Axis-angle 3-vector (log map) of a rotation; used for twist errors."""
    c = np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(c)
    off = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    if angle < 1e-10:
        return 0.5 * off
    if np.pi - angle < 1e-6:
        # Near pi the off-diagonal difference vanishes; recover the axis from
        # R ~ 2*a*a^T - I instead.
        diag = np.diag(rot)
        idx = int(np.argmax(diag))
        axis = np.zeros(3)
        axis[idx] = np.sqrt(max(0.0, (diag[idx] + 1.0) / 2.0))
        for j in range(3):
            if j != idx:
                axis[j] = (rot[idx, j] + rot[j, idx]) / (4.0 * axis[idx])
        axis /= np.linalg.norm(axis)
        # Fix the sign so exp(angle * axis) matches rot.
        if np.dot(axis, off) < 0.0:
            axis = -axis
        return angle * axis
    return (angle / (2.0 * np.sin(angle))) * off


def rpy_to_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Fixed-axis convention Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    rx = rodrigues_rotation(np.array([1.0, 0.0, 0.0]), roll)
    ry = rodrigues_rotation(np.array([0.0, 1.0, 0.0]), pitch)
    rz = rodrigues_rotation(np.array([0.0, 0.0, 1.0]), yaw)
    return rz @ ry @ rx


def sample_rotation_uniform(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation via a normalized 4-normal quaternion."""
    q = rng.standard_normal(4)
    return quat_to_matrix(q / np.linalg.norm(q))


def sample_rotations_uniform(rng: np.random.Generator, n: int) -> np.ndarray:
    """Batch of n Haar-uniform rotations, shape (n, 3, 3)."""
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, i, j, k = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    out = np.empty((n, 3, 3))
    out[:, 0, 0] = 1 - 2 * (j * j + k * k)
    out[:, 0, 1] = 2 * (i * j - k * w)
    out[:, 0, 2] = 2 * (i * k + j * w)
    out[:, 1, 0] = 2 * (i * j + k * w)
    out[:, 1, 1] = 1 - 2 * (i * i + k * k)
    out[:, 1, 2] = 2 * (j * k - i * w)
    out[:, 2, 0] = 2 * (i * k - j * w)
    out[:, 2, 1] = 2 * (j * k + i * w)
    out[:, 2, 2] = 1 - 2 * (i * i + j * j)
    return out
