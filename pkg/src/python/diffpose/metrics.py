"""Pose and mesh error metrics.

Every metric takes point sets of shape ``(..., N, 3)`` and returns one value per
leading index (a plain float for a single pair). Units follow the inputs; the
evaluation pipeline feeds millimetres.
"""
from typing import Optional, Sequence, Union

import numpy as np

from diffpose.arrays import FloatArray
from diffpose.errors import DegenerateInput, DimensionMismatch, EmptyInput

Metric = Union[float, FloatArray]

ROOT = 0
_RANK_EPS = 1e-9


def _scalar(x: FloatArray) -> Metric:
    return float(x) if np.ndim(x) == 0 else x


def _check_pair(pred: FloatArray, gt: FloatArray, what: str) -> None:
    if pred.shape != gt.shape or pred.ndim < 2 or pred.shape[-1] != 3:
        raise DimensionMismatch(
            f"{what}: expected matching (..., N, 3) arrays, got {pred.shape} and {gt.shape}"
        )


def per_joint_error(pred: FloatArray, gt: FloatArray, root: Optional[int] = ROOT) -> FloatArray:
    """Euclidean distance per joint after subtracting each set's root joint."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_pair(pred, gt, "per_joint_error")
    if root is not None:
        pred = pred - pred[..., root : root + 1, :]
        gt = gt - gt[..., root : root + 1, :]
    out: FloatArray = np.linalg.norm(pred - gt, axis=-1)
    return out


def mpjpe(pred: FloatArray, gt: FloatArray) -> Metric:
    """Root-aligned mean per-joint position error."""
    return _scalar(per_joint_error(pred, gt).mean(axis=-1))


def procrustes_align(pred: FloatArray, gt: FloatArray) -> FloatArray:
    """Similarity transform (rotation, uniform scale, translation) of ``pred`` best fitting ``gt``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_pair(pred, gt, "procrustes_align")
    if pred.shape[-2] < 3:
        raise DimensionMismatch(f"procrustes_align needs at least 3 points, got {pred.shape[-2]}")
    mu_x = gt.mean(axis=-2, keepdims=True)
    mu_y = pred.mean(axis=-2, keepdims=True)
    x0 = gt - mu_x
    y0 = pred - mu_y

    norm_x = np.sqrt(np.sum(x0**2, axis=(-2, -1), keepdims=True))
    norm_y = np.sqrt(np.sum(y0**2, axis=(-2, -1), keepdims=True))
    spread = np.linalg.svd(x0, compute_uv=False)
    flat = spread[..., 1] <= _RANK_EPS * np.maximum(spread[..., 0], 1.0)
    if np.any(norm_y < _RANK_EPS) or np.any(flat):
        raise DegenerateInput("procrustes_align: point set is rank-deficient")
    x0 = x0 / norm_x
    y0 = y0 / norm_y

    h = np.swapaxes(x0, -1, -2) @ y0
    u, s, vt = np.linalg.svd(h)
    v = np.swapaxes(vt, -1, -2)
    r = v @ np.swapaxes(u, -1, -2)
    # no reflections
    sign = np.sign(np.linalg.det(r))
    v[..., :, -1] *= sign[..., None]
    s[..., -1] *= sign
    r = v @ np.swapaxes(u, -1, -2)

    trace = s.sum(axis=-1)[..., None, None]
    scale = trace * norm_x / norm_y
    translation = mu_x - scale * (mu_y @ r)
    out: FloatArray = scale * (pred @ r) + translation
    return out


def pa_mpjpe(pred: FloatArray, gt: FloatArray) -> Metric:
    """MPJPE after similarity Procrustes alignment of ``pred`` onto ``gt``, without root alignment."""
    aligned = procrustes_align(pred, gt)
    return _scalar(per_joint_error(aligned, gt, root=None).mean(axis=-1))


def pve(
    pred_vertices: FloatArray,
    gt_vertices: FloatArray,
    pred_root: Optional[FloatArray] = None,
    gt_root: Optional[FloatArray] = None,
) -> Metric:
    """Mean per-vertex Euclidean error, each mesh shifted by its root joint when given."""
    pred = np.asarray(pred_vertices, dtype=np.float64)
    gt = np.asarray(gt_vertices, dtype=np.float64)
    _check_pair(pred, gt, "pve")
    if pred_root is not None:
        pred = pred - np.asarray(pred_root)[..., None, :]
    if gt_root is not None:
        gt = gt - np.asarray(gt_root)[..., None, :]
    return _scalar(np.linalg.norm(pred - gt, axis=-1).mean(axis=-1))


def min_of_n(errors: Sequence[float]) -> float:
    """Best of ``n`` hypotheses."""
    values = np.asarray(errors, dtype=np.float64)
    if values.size == 0:
        raise EmptyInput("min_of_n needs at least one error value")
    return float(values.min())
