"""Rotation representations and conversions.

Arrays are batched over leading axes: a 6D rotation is ``(..., 6)`` laid out as
``(a, b)``, the first two columns of a rotation matrix before orthonormalization,
an axis-angle vector is ``(..., 3)`` and a rotation matrix ``(..., 3, 3)``.
"""
from typing import Tuple

import numpy as np

from diffpose.arrays import FloatArray
from diffpose.errors import DegenerateInput, DimensionMismatch

DEGENERATE_EPS = 1e-8
# Below this angle Rodrigues' coefficients switch to their Taylor expansions.
SMALL_ANGLE = 1e-4
# Derivative coefficients lose precision earlier, so they switch sooner.
_SMALL_ANGLE_GRAD = 1e-2

REPRESENTATION_DIMS = {"6d": 6, "axis_angle": 3}


def _check_last(x: FloatArray, n: int, what: str) -> None:
    if x.shape[-1:] != (n,):
        raise DimensionMismatch(f"{what}: expected trailing dimension {n}, got shape {x.shape}")


def skew(v: FloatArray) -> FloatArray:
    """Cross-product matrix ``[v]x`` such that ``skew(v) @ w == cross(v, w)``."""
    z = np.zeros(v.shape[:-1])
    x, y, w = v[..., 0], v[..., 1], v[..., 2]
    return np.stack(
        [
            np.stack([z, -w, y], axis=-1),
            np.stack([w, z, -x], axis=-1),
            np.stack([-y, x, z], axis=-1),
        ],
        axis=-2,
    )


def _skew_inner(m: FloatArray) -> FloatArray:
    """Vector ``u`` with ``<m, skew(w)> == u . w`` for every ``w``."""
    return np.stack(
        [
            m[..., 2, 1] - m[..., 1, 2],
            m[..., 0, 2] - m[..., 2, 0],
            m[..., 1, 0] - m[..., 0, 1],
        ],
        axis=-1,
    )


def _gram_schmidt(r: FloatArray) -> Tuple[FloatArray, ...]:
    a, b = r[..., :3], r[..., 3:]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(na <= DEGENERATE_EPS):
        raise DegenerateInput(f"6D rotation has a first column with norm <= {DEGENERATE_EPS}")
    b1 = a / na
    u = b - np.sum(b1 * b, axis=-1, keepdims=True) * b1
    nu = np.linalg.norm(u, axis=-1, keepdims=True)
    if np.any(nu <= DEGENERATE_EPS):
        raise DegenerateInput(
            f"6D rotation has a second column (orthogonalized) with norm <= {DEGENERATE_EPS}"
        )
    b2 = u / nu
    b3 = np.cross(b1, b2)
    return b, na, b1, nu, b2, b3


def sixd_to_rotmat(r: FloatArray) -> FloatArray:
    """Gram-Schmidt map: normalize ``a``, orthogonalize ``b`` against it, complete with
    the cross product. Raises DegenerateInput when either column collapses."""
    r = np.asarray(r, dtype=np.float64)
    _check_last(r, 6, "sixd_to_rotmat")
    _, _, b1, _, b2, b3 = _gram_schmidt(r)
    return np.stack([b1, b2, b3], axis=-1)


def sixd_to_rotmat_vjp(r: FloatArray, d_rot: FloatArray) -> FloatArray:
    """Pull a gradient with respect to the rotation matrix back onto the 6D input."""
    r = np.asarray(r, dtype=np.float64)
    b, na, b1, nu, b2, _ = _gram_schmidt(r)
    d1, d2, d3 = d_rot[..., :, 0], d_rot[..., :, 1], d_rot[..., :, 2]

    # b3 = b1 x b2
    d1 = d1 + np.cross(b2, d3)
    d2 = d2 + np.cross(d3, b1)
    # b2 = u / |u|
    du = (d2 - np.sum(b2 * d2, axis=-1, keepdims=True) * b2) / nu
    # u = b - (b1 . b) b1
    b1_du = np.sum(b1 * du, axis=-1, keepdims=True)
    db = du - b1_du * b1
    d1 = d1 - b1_du * b - np.sum(b1 * b, axis=-1, keepdims=True) * du
    # b1 = a / |a|
    da = (d1 - np.sum(b1 * d1, axis=-1, keepdims=True) * b1) / na
    return np.concatenate([da, db], axis=-1)


def rotmat_to_sixd(m: FloatArray) -> FloatArray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-2:] != (3, 3):
        raise DimensionMismatch(f"rotmat_to_sixd: expected (..., 3, 3), got {m.shape}")
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def _rodrigues_coefficients(theta: FloatArray) -> Tuple[FloatArray, FloatArray]:
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(t)) / (t * t))
    return a, b


def axisangle_to_rotmat(v: FloatArray) -> FloatArray:
    """Rodrigues' formula ``I + sin(t)/t [v]x + (1 - cos t)/t^2 [v]x^2``."""
    v = np.asarray(v, dtype=np.float64)
    _check_last(v, 3, "axisangle_to_rotmat")
    theta = np.linalg.norm(v, axis=-1)
    a, b = _rodrigues_coefficients(theta)
    k = skew(v)
    return np.eye(3) + a[..., None, None] * k + b[..., None, None] * (k @ k)


def axisangle_to_rotmat_vjp(v: FloatArray, d_rot: FloatArray) -> FloatArray:
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1)
    a, b = _rodrigues_coefficients(theta)

    # c = (da/dt)/t and d = (db/dt)/t
    small = theta < _SMALL_ANGLE_GRAD
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    c = np.where(
        small,
        -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0,
        (t * np.cos(t) - np.sin(t)) / t**3,
    )
    d = np.where(
        small,
        -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0,
        (t * np.sin(t) - 2.0 * (1.0 - np.cos(t))) / t**4,
    )

    k = skew(v)
    kk = k @ k
    kt = np.swapaxes(k, -1, -2)
    inner_k = np.sum(d_rot * k, axis=(-2, -1))
    inner_kk = np.sum(d_rot * kk, axis=(-2, -1))
    return (
        (c * inner_k + d * inner_kk)[..., None] * v
        + a[..., None] * _skew_inner(d_rot)
        + b[..., None] * _skew_inner(d_rot @ kt + kt @ d_rot)
    )


def rotmat_to_axisangle(m: FloatArray) -> FloatArray:
    """Inverse of Rodrigues' formula, canonical with angle in ``[0, pi]``."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-2:] != (3, 3):
        raise DimensionMismatch(f"rotmat_to_axisangle: expected (..., 3, 3), got {m.shape}")
    w = _skew_inner(m) / 2.0  # sin(angle) * axis
    sin_angle = np.linalg.norm(w, axis=-1)
    cos_angle = (np.trace(m, axis1=-2, axis2=-1) - 1.0) / 2.0
    angle = np.arctan2(sin_angle, cos_angle)

    safe_sin = np.where(sin_angle > 1e-12, sin_angle, 1.0)
    generic = w * np.where(sin_angle > 1e-12, angle / safe_sin, 1.0)[..., None]

    # Close to pi the skew part vanishes; recover the axis from the symmetric part,
    # (R + R^T) / 2 - cos(angle) I = (1 - cos(angle)) a a^T.
    sym = (m + np.swapaxes(m, -1, -2)) / 2.0 - cos_angle[..., None, None] * np.eye(3)
    diag = np.diagonal(sym, axis1=-2, axis2=-1)
    col = np.argmax(diag, axis=-1)
    index = np.broadcast_to(col[..., None, None], sym.shape[:-1] + (1,))
    axis = np.take_along_axis(sym, index, axis=-1)[..., 0]
    norm = np.linalg.norm(axis, axis=-1, keepdims=True)
    axis = axis / np.where(norm > 0.0, norm, 1.0)
    sign = np.where(np.sum(axis * w, axis=-1) < 0.0, -1.0, 1.0)
    near_pi = angle * sign[..., None] * axis

    return np.where((cos_angle < -0.99)[..., None], near_pi, generic)


def canonical_axisangle(v: FloatArray) -> FloatArray:
    return rotmat_to_axisangle(axisangle_to_rotmat(v))


def geodesic_distance(m1: FloatArray, m2: FloatArray) -> FloatArray:
    """Angle of ``m1^T m2`` in radians, in ``[0, pi]``.

    Uses atan2 of the skew and trace parts, which stays accurate near 0 and pi
    where arccos of the trace does not.
    """
    rel = np.swapaxes(np.asarray(m1, dtype=np.float64), -1, -2) @ np.asarray(m2, dtype=np.float64)
    s = np.linalg.norm(_skew_inner(rel), axis=-1) / 2.0
    c = (np.trace(rel, axis1=-2, axis2=-1) - 1.0) / 2.0
    return np.arctan2(s, c)


def euler_to_rotmat(angles: FloatArray) -> FloatArray:
    """Intrinsic ``z @ y @ x`` composition of per-axis angles ``(..., 3)``."""
    angles = np.asarray(angles, dtype=np.float64)
    _check_last(angles, 3, "euler_to_rotmat")
    eye = np.eye(3)
    rx = axisangle_to_rotmat(angles[..., 0:1] * eye[0])
    ry = axisangle_to_rotmat(angles[..., 1:2] * eye[1])
    rz = axisangle_to_rotmat(angles[..., 2:3] * eye[2])
    return rz @ ry @ rx


def pose_to_rotmats(theta: FloatArray, representation: str = "6d") -> FloatArray:
    """Flat pose vectors ``(..., K * r)`` to per-joint rotation matrices ``(..., K, 3, 3)``."""
    width = representation_width(representation)
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape[-1] % width:
        raise DimensionMismatch(f"pose length {theta.shape[-1]} is not a multiple of {width}")
    per_joint = theta.reshape(theta.shape[:-1] + (-1, width))
    if representation == "6d":
        return sixd_to_rotmat(per_joint)
    return axisangle_to_rotmat(per_joint)


def pose_to_rotmats_vjp(theta: FloatArray, d_rot: FloatArray, representation: str = "6d") -> FloatArray:
    width = representation_width(representation)
    theta = np.asarray(theta, dtype=np.float64)
    per_joint = theta.reshape(theta.shape[:-1] + (-1, width))
    if representation == "6d":
        grad = sixd_to_rotmat_vjp(per_joint, d_rot)
    else:
        grad = axisangle_to_rotmat_vjp(per_joint, d_rot)
    return grad.reshape(theta.shape)


def rotmats_to_pose(rot: FloatArray, representation: str = "6d") -> FloatArray:
    width = representation_width(representation)
    if representation == "6d":
        per_joint = rotmat_to_sixd(rot)
    else:
        per_joint = rotmat_to_axisangle(rot)
    return per_joint.reshape(per_joint.shape[:-2] + (per_joint.shape[-2] * width,))


def representation_width(representation: str) -> int:
    try:
        return REPRESENTATION_DIMS[representation]
    except KeyError:
        raise DimensionMismatch(
            f"unknown pose representation {representation!r}; "
            f"expected one of {sorted(REPRESENTATION_DIMS)}"
        ) from None
