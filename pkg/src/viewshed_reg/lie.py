"""Rigid and similarity transforms with SO(3)/SE(3) exponential coordinates.

Conventions
-----------
A :class:`Transform` maps points ``x -> scale * R @ x + t``. Tangent vectors
are ordered ``xi = (omega, v)`` with ``omega`` an axis-angle rotation vector
and ``v`` the translational part; an optional seventh entry is the log of
the scale. Composition ``a @ b`` applies ``b`` first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ValidationError

_SMALL_ANGLE = 1e-6
# (t - sin t)/t^3 and the J^-1 coefficient cancel badly well above 1e-6; use series there
_SERIES_ANGLE = 0.05


def hat(w):
    """Skew-symmetric matrix such that ``hat(w) @ x == cross(w, x)``."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def vee(S):
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def _rodrigues_coeffs(theta):
    # A = sin(t)/t, B = (1-cos t)/t^2, C = (t - sin t)/t^3
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    half = np.sin(0.5 * theta) / theta
    B = 2.0 * half * half
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        C = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2**3 / 362880.0
    else:
        C = (theta - np.sin(theta)) / theta**3
    return np.sin(theta) / theta, B, C


def so3_exp(w):
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    A, B, _ = _rodrigues_coeffs(theta)
    W = hat(w)
    return np.eye(3) + A * W + B * (W @ W)


def rotation_angle(R):
    """Geodesic angle of a rotation matrix in radians, in ``[0, pi]``."""
    R = np.asarray(R, dtype=float)
    sin_half2 = 0.5 * np.linalg.norm(vee(R - R.T))
    cos_ = 0.5 * (np.trace(R) - 1.0)
    return float(np.arctan2(sin_half2, cos_))


def so3_log(R):
    """Axis-angle vector of ``R``. Raises :class:`DomainError` at angle ``>= pi``."""
    R = np.asarray(R, dtype=float)
    theta = rotation_angle(R)
    if theta >= np.pi - 1e-12:
        raise DomainError(f"rotation angle {theta:.6f} is at or beyond pi; log is not unique")
    if theta < _SMALL_ANGLE:
        # first-order: R - R^T ~ 2 hat(w)
        return 0.5 * vee(R - R.T) * (1.0 + theta**2 / 6.0)
    return theta / (2.0 * np.sin(theta)) * vee(R - R.T)


def _left_jacobian(w):
    theta = float(np.linalg.norm(w))
    _, B, C = _rodrigues_coeffs(theta)
    W = hat(w)
    return np.eye(3) + B * W + C * (W @ W)


def _left_jacobian_inv(w):
    theta = float(np.linalg.norm(w))
    W = hat(w)
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        coef = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0 + t2**3 / 1209600.0
    else:
        coef = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta**2
    return np.eye(3) - 0.5 * W + coef * (W @ W)


@dataclass(frozen=True, eq=False)
class Transform:
    """Element of SE(3), or Sim(3) when ``scale != 1``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", float(self.scale))
        self.validate()

    def validate(self, tol=1e-9):
        R = self.rotation
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(self.translation))):
            raise ValidationError("transform has non-finite entries")
        if np.max(np.abs(R.T @ R - np.eye(3))) >= tol:
            raise ValidationError("rotation is not orthonormal")
        if np.linalg.det(R) <= 0:
            raise ValidationError("rotation has non-positive determinant")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValidationError(f"scale must be positive, got {self.scale}")

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, M, scale=1.0):
        """Build from a 3x4 or 4x4 ``[sR | t]``-free matrix ``[R | t]``."""
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3], scale)

    def matrix34(self):
        return np.hstack([self.rotation, self.translation[:, None]])

    def matrix44(self):
        M = np.eye(4)
        M[:3, :3] = self.scale * self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points):
        """Map points of shape ``(..., 3)``."""
        p = np.asarray(points, dtype=float)
        return self.scale * p @ self.rotation.T + self.translation

    def apply_directions(self, dirs):
        """Rotate direction vectors; scale and translation do not act on them."""
        return np.asarray(dirs, dtype=float) @ self.rotation.T

    def inverse(self):
        Rt = self.rotation.T
        inv_s = 1.0 / self.scale
        return Transform(Rt, -inv_s * (Rt @ self.translation), inv_s)

    def __matmul__(self, other):
        if not isinstance(other, Transform):
            return NotImplemented
        R = self.rotation @ other.rotation
        t = self.scale * (self.rotation @ other.translation) + self.translation
        return Transform(_reorthonormalize(R), t, self.scale * other.scale)

    def allclose(self, other, atol=1e-9):
        return (
            np.allclose(self.rotation, other.rotation, atol=atol)
            and np.allclose(self.translation, other.translation, atol=atol)
            and abs(self.scale - other.scale) <= atol
        )

    def __repr__(self):
        return (
            f"Transform(rotation={self.rotation.tolist()}, "
            f"translation={self.translation.tolist()}, scale={self.scale!r})"
        )


def _reorthonormalize(R):
    # Compositions accumulate rounding; snap back only when it matters.
    if np.max(np.abs(R.T @ R - np.eye(3))) < 1e-12:
        return R
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


def se3_exp(xi):
    """Exponential map. ``xi`` has 6 entries, or 7 with a trailing log-scale.

    The log-scale coordinate simply exponentiates into ``Transform.scale``;
    the rigid part uses the closed-form SE(3) exponential.
    """
    xi = np.asarray(xi, dtype=float).ravel()
    if xi.size not in (6, 7):
        raise ValueError(f"xi must have 6 or 7 entries, got {xi.size}")
    w, v = xi[:3], xi[3:6]
    scale = float(np.exp(xi[6])) if xi.size == 7 else 1.0
    return Transform(so3_exp(w), _left_jacobian(w) @ v, scale)


def se3_log(T, with_scale=False):
    w = so3_log(T.rotation)
    v = _left_jacobian_inv(w) @ T.translation
    if with_scale:
        return np.concatenate([w, v, [np.log(T.scale)]])
    return np.concatenate([w, v])


def axis_rotation(axis, angle):
    """Rotation matrix about a coordinate axis (0=x, 1=y, 2=z)."""
    w = np.zeros(3)
    w[axis] = angle
    return so3_exp(w)


def euler_xyz(angles):
    """Compose per-axis rotations in fixed X, then Y, then Z order: ``Rz @ Ry @ Rx``."""
    ax, ay, az = angles
    return axis_rotation(2, az) @ axis_rotation(1, ay) @ axis_rotation(0, ax)


def random_rotation(rng):
    """Uniform (Haar) random rotation via a normalised quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def look_rotation(forward, up_hint=(0.0, 0.0, 1.0)):
    """Camera-to-world rotation whose +z axis is ``forward`` (x right, y down).

    ``up_hint`` is projected orthogonally to ``forward``; if the projection
    degenerates (norm < 1e-6) world +y is used instead.
    """
    f = np.asarray(forward, dtype=float)
    f = f / np.linalg.norm(f)
    up = np.asarray(up_hint, dtype=float)
    up_perp = up - np.dot(up, f) * f
    if np.linalg.norm(up_perp) < 1e-6:
        up = np.array([0.0, 1.0, 0.0])
        up_perp = up - np.dot(up, f) * f
    up_perp /= np.linalg.norm(up_perp)
    y = -up_perp
    x = np.cross(y, f)
    return np.column_stack([x, y, f])
