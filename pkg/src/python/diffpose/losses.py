"""Training objective terms and their analytic gradients.

Conventions: the pose and shape terms are mean squared errors over scalar
coordinates; the joint terms average the squared point distance over joints
(only visible joints for the 2D term). Batched inputs average per-sample losses.
"""
from typing import NamedTuple, Optional, Tuple

import numpy as np

from diffpose.arrays import FloatArray
from diffpose.bodymodel import BodyModel, joints3d, mesh_from_rotmats, mesh_from_rotmats_vjp, project
from diffpose.errors import DimensionMismatch, InvalidConfig
from diffpose.rotmath import pose_to_rotmats, pose_to_rotmats_vjp, rotmats_to_pose
from diffpose.synthdata import Sample


class LossWeights(NamedTuple):
    w_pose: float = 1.0
    w_j3d: float = 1.0
    w_j2d: float = 1.0
    w_beta: float = 0.1

    def validate(self) -> None:
        for field in self._fields:
            value = getattr(self, field)
            if not (np.isfinite(value) and value >= 0.0):
                raise InvalidConfig(f"train.weights.{field} must be a nonnegative number, got {value!r}")


def diffusion_loss(eps_true: FloatArray, eps_pred: FloatArray) -> float:
    eps_true = np.asarray(eps_true, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    if eps_true.shape != eps_pred.shape:
        raise DimensionMismatch(f"diffusion_loss: shapes {eps_true.shape} and {eps_pred.shape} differ")
    return float(np.mean((eps_pred - eps_true) ** 2))


def diffusion_loss_grad(eps_true: FloatArray, eps_pred: FloatArray) -> FloatArray:
    """``d diffusion_loss / d eps_pred``."""
    grad: FloatArray = 2.0 * (eps_pred - eps_true) / eps_pred.size
    return grad


class HmrTarget(NamedTuple):
    """Ground truth a batch of predictions is compared against.

    ``theta0`` is expressed in the representation being trained.
    """

    theta0: FloatArray
    beta: FloatArray
    joints3d: FloatArray
    keypoints2d: FloatArray
    visible: FloatArray


class HmrTerms(NamedTuple):
    pose: float
    j3d: float
    j2d: float
    beta: float
    total: float


class HmrGrads(NamedTuple):
    theta0: FloatArray
    beta: FloatArray
    cam: FloatArray


def target_from_samples(
    model: BodyModel,
    theta0_6d: FloatArray,
    beta: FloatArray,
    keypoints2d: FloatArray,
    occlusion_mask: FloatArray,
    representation: str = "6d",
) -> HmrTarget:
    rotmats = pose_to_rotmats(theta0_6d, "6d")
    vertices, _ = mesh_from_rotmats(model, rotmats, beta)
    return HmrTarget(
        theta0=rotmats_to_pose(rotmats, representation),
        beta=np.asarray(beta, dtype=np.float64),
        joints3d=joints3d(model, vertices),
        keypoints2d=np.asarray(keypoints2d, dtype=np.float64),
        visible=(np.asarray(occlusion_mask) > 0.5).astype(np.float64),
    )


def hmr_loss_and_grad(
    theta0_hat: FloatArray,
    beta_hat: FloatArray,
    cam_hat: FloatArray,
    target: HmrTarget,
    model: BodyModel,
    weights: LossWeights,
    representation: str = "6d",
    sample_weights: Optional[FloatArray] = None,
) -> Tuple[HmrTerms, HmrGrads]:
    """Batched ``L_hmr`` (inputs of shape ``(B, ...)``) and its gradients.

    ``sample_weights`` scale each sample's contribution before the batch mean.
    Reported terms are weighted batch means; ``total`` is their sum.
    """
    theta0_hat = np.atleast_2d(np.asarray(theta0_hat, dtype=np.float64))
    beta_hat = np.atleast_2d(np.asarray(beta_hat, dtype=np.float64))
    cam_hat = np.atleast_2d(np.asarray(cam_hat, dtype=np.float64))
    B = theta0_hat.shape[0]
    if target.theta0.shape != theta0_hat.shape:
        raise DimensionMismatch(f"theta0_hat {theta0_hat.shape} vs ground truth {target.theta0.shape}")
    if target.beta.shape != beta_hat.shape or cam_hat.shape != (B, 3):
        raise DimensionMismatch(
            f"beta_hat {beta_hat.shape} / cam_hat {cam_hat.shape} do not match the batch"
        )
    scale = np.ones(B) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    per = scale / B

    d_theta = np.zeros_like(theta0_hat)
    d_beta = np.zeros_like(beta_hat)
    d_cam = np.zeros_like(cam_hat)

    pose_diff = theta0_hat - target.theta0
    pose = weights.w_pose * np.mean(pose_diff**2, axis=1)
    d_theta += (weights.w_pose * 2.0 / theta0_hat.shape[1]) * per[:, None] * pose_diff

    beta_diff = beta_hat - target.beta
    shape = weights.w_beta * np.mean(beta_diff**2, axis=1)
    d_beta += (weights.w_beta * 2.0 / beta_hat.shape[1]) * per[:, None] * beta_diff

    j3d = np.zeros(B)
    j2d = np.zeros(B)
    if weights.w_j3d > 0.0 or weights.w_j2d > 0.0:
        rotmats = pose_to_rotmats(theta0_hat, representation)
        vertices, cache = mesh_from_rotmats(model, rotmats, beta_hat)
        joints = joints3d(model, vertices)
        K = joints.shape[1]

        joint_diff = joints - target.joints3d
        j3d = weights.w_j3d * np.sum(joint_diff**2, axis=(1, 2)) / K
        d_joints = (weights.w_j3d * 2.0 / K) * per[:, None, None] * joint_diff

        visible = target.visible
        n_visible = visible.sum(axis=1)
        safe = np.maximum(n_visible, 1.0)
        reproj = project(joints, cam_hat) - target.keypoints2d
        j2d = weights.w_j2d * np.sum(visible[..., None] * reproj**2, axis=(1, 2)) / safe
        d_2d = (weights.w_j2d * 2.0) * (per / safe)[:, None, None] * visible[..., None] * reproj
        d_joints[..., :2] += cam_hat[:, None, 0:1] * d_2d
        d_cam[:, 0] += np.sum(d_2d * joints[..., :2], axis=(1, 2))
        d_cam[:, 1:] += d_2d.sum(axis=1)

        d_vertices = np.einsum("kv,bkc->bvc", model.joint_regressor, d_joints)
        d_rot, d_beta_mesh = mesh_from_rotmats_vjp(model, cache, d_vertices)
        d_theta += pose_to_rotmats_vjp(theta0_hat, d_rot, representation)
        d_beta += d_beta_mesh

    terms = HmrTerms(
        pose=float(np.mean(scale * pose)),
        j3d=float(np.mean(scale * j3d)),
        j2d=float(np.mean(scale * j2d)),
        beta=float(np.mean(scale * shape)),
        total=float(np.mean(scale * (pose + j3d + j2d + shape))),
    )
    return terms, HmrGrads(d_theta, d_beta, d_cam)


def hmr_loss(
    theta0_hat: FloatArray,
    sample: Sample,
    beta_hat: FloatArray,
    cam_hat: FloatArray,
    model: BodyModel,
    weights: LossWeights,
    representation: str = "6d",
) -> float:
    """``L_hmr`` of one prediction against one stored sample."""
    target = target_from_samples(
        model,
        sample.theta0[None, :],
        sample.beta[None, :],
        sample.keypoints2d[None, ...],
        sample.occlusion_mask[None, :],
        representation,
    )
    terms, _ = hmr_loss_and_grad(theta0_hat, beta_hat, cam_hat, target, model, weights, representation)
    return terms.total
