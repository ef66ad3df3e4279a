"""Drawing pose hypotheses from a trained checkpoint, and what is written out about them."""
from pathlib import Path
from typing import List, NamedTuple, Sequence

import numpy as np

from diffpose.arrays import FloatArray
from diffpose.bodymodel import BodyModel, joints3d, mesh_from_rotmats, project
from diffpose.diffusion import hypothesis_rngs, sample_many
from diffpose.errors import DimensionMismatch, FormatError, InvalidConfig
from diffpose.nnet import Checkpoint, PoseNetwork
from diffpose.rotmath import geodesic_distance, pose_to_rotmats
from diffpose.schedule import linear_schedule
from diffpose.synthdata import Dataset, FieldSpec, write_container
from diffpose.trainer import body_model_ref

HYPOTHESES_KIND = "hypotheses"


class Hypotheses(NamedTuple):
    """``n`` sampled reconstructions of one dataset row."""

    index: int
    seed: int
    representation: str
    theta: FloatArray
    beta: FloatArray
    cam: FloatArray
    vertices: FloatArray
    joints3d: FloatArray
    joints2d: FloatArray


class Sampler:
    """A trained checkpoint bound to a body model, drawing hypotheses for dataset rows."""

    def __init__(self, ckpt: Checkpoint, model: BodyModel) -> None:
        if ckpt.body_model != body_model_ref(model):
            raise FormatError("body_model: checkpoint was trained with a different body model")
        self.ckpt = ckpt
        self.model = model
        self.network = PoseNetwork(ckpt.arch)
        self.schedule = linear_schedule(**ckpt.schedule)
        self.denoiser = self.network.bind(ckpt.params)

    def draw(self, dataset: Dataset, indices: Sequence[int], n: int, seed: int) -> List[Hypotheses]:
        if n < 1:
            raise InvalidConfig(f"n must be >= 1, got {n}")
        if dataset.z.shape[1] != self.network.arch.cond_dim:
            raise DimensionMismatch(
                f"dataset conditioning has {dataset.z.shape[1]} entries, "
                f"checkpoint expects {self.network.arch.cond_dim}"
            )
        indices = [int(i) for i in indices]
        z = np.repeat(dataset.z[indices], n, axis=0)
        rngs = [rng for i in indices for rng in hypothesis_rngs(seed, i, n)]
        thetas = sample_many(self.denoiser, z, self.schedule, rngs).reshape(len(indices), n, -1)
        betas, cams = self.network.regressor_forward(self.ckpt.params, dataset.z[indices])
        out = []
        for j, i in enumerate(indices):
            rotmats = pose_to_rotmats(thetas[j], self.ckpt.representation)
            vertices, _ = mesh_from_rotmats(self.model, rotmats, betas[j])
            joints = joints3d(self.model, vertices)
            out.append(
                Hypotheses(
                    index=i,
                    seed=seed,
                    representation=self.ckpt.representation,
                    theta=thetas[j],
                    beta=betas[j],
                    cam=cams[j],
                    vertices=vertices,
                    joints3d=joints,
                    joints2d=project(joints, cams[j]),
                )
            )
        return out


def occluded_spread(hyps: Hypotheses, occlusion_mask: FloatArray) -> float:
    """Largest pairwise geodesic distance (radians) between hypotheses at any hidden joint."""
    hidden = np.flatnonzero(np.asarray(occlusion_mask) < 0.5)
    if len(hidden) == 0 or hyps.theta.shape[0] < 2:
        return 0.0
    rot = pose_to_rotmats(hyps.theta, hyps.representation)[:, hidden]
    return float(geodesic_distance(rot[:, None], rot[None, :]).max())


def visible_reprojection_error(
    hyps: Hypotheses, keypoints2d: FloatArray, occlusion_mask: FloatArray
) -> float:
    """Mean 2D distance between hypotheses' projected joints and the observed visible keypoints."""
    visible = np.asarray(occlusion_mask) > 0.5
    if not visible.any():
        return 0.0
    return float(np.linalg.norm(hyps.joints2d[:, visible] - keypoints2d[visible], axis=-1).mean())


def save_hypotheses(hyps: Hypotheses, path: Path) -> Path:
    n, D = hyps.theta.shape
    K, V = hyps.joints3d.shape[1], hyps.vertices.shape[1]
    header = {
        "index": hyps.index,
        "seed": hyps.seed,
        "representation": hyps.representation,
        "beta": [float(b) for b in hyps.beta],
        "cam": [float(c) for c in hyps.cam],
        "dims": {"K": K, "V": V, "D": D},
    }
    fields = [
        FieldSpec("theta0_hat", (D,)),
        FieldSpec("joints3d", (K, 3)),
        FieldSpec("joints2d", (K, 2)),
        FieldSpec("vertices", (V, 3)),
    ]
    columns = {
        "theta0_hat": hyps.theta,
        "joints3d": hyps.joints3d,
        "joints2d": hyps.joints2d,
        "vertices": hyps.vertices,
    }
    index = {"hypothesis": list(range(n))}
    return write_container(path, HYPOTHESES_KIND, header, fields, columns, index)


def plot_rows(hyps: Hypotheses, occlusion_mask: FloatArray) -> List[str]:
    """CSV lines ``hypothesis,joint,x,y,z,u,v,visible`` for external plotting."""
    lines = ["hypothesis,joint,x,y,z,u,v,visible"]
    for h in range(hyps.theta.shape[0]):
        for k in range(hyps.joints3d.shape[1]):
            x, y, z = hyps.joints3d[h, k]
            u, v = hyps.joints2d[h, k]
            visible = int(occlusion_mask[k] > 0.5)
            lines.append(f"{h},{k},{x:.6f},{y:.6f},{z:.6f},{u:.6f},{v:.6f},{visible}")
    return lines
