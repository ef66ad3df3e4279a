"""A compact SMPL-like articulated body.

Forward kinematics convention: joint ``k`` rotates by ``R_k`` about its rest
location in its parent's frame. The global frame of joint ``k`` is
``A_k = A_parent R_k`` and the displacement of joint ``k`` from its rest
location is ``e_k = (A_parent - I)(J_k - J_parent) + e_parent`` with
``e_root = 0``. A vertex ``v`` moves to

    v + sum_k w_vk [(A_k - I)(v - J_k) + e_k]

which is standard linear blend skinning written relative to the rest pose so
the identity pose reproduces the template exactly.
"""
import hashlib
import json
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from packaging.version import Version

from diffpose.arrays import FloatArray, IntArray, decode_f32, encode_f32, make_rng, to_f32_grid
from diffpose.errors import DimensionMismatch, FormatError
from diffpose.rotmath import pose_to_rotmats, pose_to_rotmats_vjp
from diffpose.storage import write_text

BODY_MAGIC = "DIFFPOSE-BODY"
BODY_VERSION = Version("1")
FK_CONVENTION = (
    "A_k = A_parent R_k; e_k = (A_parent - I)(J_k - J_parent) + e_parent; lbs relative to rest"
)

N_JOINTS = 24
N_SHAPE = 10
DEFAULT_VERTICES = 200
# Revision of build_default_model. Bump it whenever the built arrays change so that
# cached copies from an older builder are rebuilt instead of reused.
BUILDER_VERSION = 1

JOINT_NAMES = (
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hand",
    "right_hand",
)
PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)

# Rest joint locations in meters, y up, subject facing +z.
REST_JOINTS = (
    (0.000, 0.000, 0.000),
    (0.060, -0.090, 0.000),
    (-0.060, -0.090, 0.000),
    (0.000, 0.110, -0.020),
    (0.100, -0.470, 0.000),
    (-0.100, -0.470, 0.000),
    (0.000, 0.250, -0.010),
    (0.090, -0.870, -0.030),
    (-0.090, -0.870, -0.030),
    (0.000, 0.310, 0.010),
    (0.110, -0.930, 0.090),
    (-0.110, -0.930, 0.090),
    (0.000, 0.520, -0.010),
    (0.080, 0.430, -0.010),
    (-0.080, 0.430, -0.010),
    (0.000, 0.600, 0.040),
    (0.180, 0.460, -0.010),
    (-0.180, 0.460, -0.010),
    (0.430, 0.440, -0.030),
    (-0.430, 0.440, -0.030),
    (0.680, 0.450, -0.010),
    (-0.680, 0.450, -0.010),
    (0.760, 0.440, -0.020),
    (-0.760, 0.440, -0.020),
)

ARM_ROOTS = (16, 17)
LEG_ROOTS = (1, 2)
RING_RADIUS = 0.02
LEAF_EXTENSION = 0.08

_ARRAY_ORDER = ("template", "skin_weights", "shape_dirs", "joint_regressor", "rest_joints")


class BodyModel(NamedTuple):
    parents: IntArray
    rest_joints: FloatArray
    template: FloatArray
    skin_weights: FloatArray
    shape_dirs: FloatArray
    joint_regressor: FloatArray
    seed: int = 0
    # 0 for models that did not come from build_default_model.
    builder: int = 0

    @property
    def n_joints(self) -> int:
        return int(self.parents.shape[0])

    @property
    def n_vertices(self) -> int:
        return int(self.template.shape[0])

    @property
    def n_shape(self) -> int:
        return int(self.shape_dirs.shape[2])

    def same_as(self, other: "BodyModel") -> bool:
        return self.seed == other.seed and all(
            np.array_equal(getattr(self, f), getattr(other, f)) for f in ("parents",) + _ARRAY_ORDER
        )


class MeshCache(NamedTuple):
    rotmats: FloatArray
    shaped: FloatArray
    joints: FloatArray
    frames: FloatArray
    offsets: FloatArray


def children(parents: IntArray) -> List[List[int]]:
    kids: List[List[int]] = [[] for _ in range(len(parents))]
    for k, p in enumerate(parents):
        if p >= 0:
            kids[p].append(k)
    return kids


def subtree(parents: IntArray, k: int) -> List[int]:
    kids = children(parents)
    out: List[int] = []
    stack = [k]
    while stack:
        j = stack.pop()
        out.append(j)
        stack.extend(kids[j])
    return sorted(out)


def leaves(parents: IntArray) -> List[int]:
    return [k for k, kids in enumerate(children(parents)) if not kids]


def check_invariants(model: BodyModel, tol: float = 1e-6) -> None:
    """Raise FormatError naming the first violated model invariant."""
    K, V = model.n_joints, model.n_vertices
    if model.parents[0] != -1:
        raise FormatError("parents: joint 0 must be the root (parent -1)")
    for k in range(1, K):
        if not 0 <= model.parents[k] < k:
            raise FormatError(f"parents: joint {k} has parent {model.parents[k]}, must be in [0, {k})")
    expected = {
        "rest_joints": (K, 3),
        "template": (V, 3),
        "skin_weights": (V, K),
        "joint_regressor": (K, V),
    }
    for field, shape in expected.items():
        if getattr(model, field).shape != shape:
            raise FormatError(f"{field}: expected shape {shape}, got {getattr(model, field).shape}")
    if model.shape_dirs.ndim != 3 or model.shape_dirs.shape[:2] != (V, 3):
        raise FormatError(f"shape_dirs: expected shape ({V}, 3, S), got {model.shape_dirs.shape}")
    for field in _ARRAY_ORDER:
        if not np.all(np.isfinite(getattr(model, field))):
            raise FormatError(f"{field}: contains non-finite values")
    if np.any(model.skin_weights < 0) or np.max(np.abs(model.skin_weights.sum(axis=1) - 1.0)) > tol:
        raise FormatError("skin_weights: rows must be nonnegative and sum to 1")
    if np.max(np.abs(model.joint_regressor.sum(axis=1) - 1.0)) > tol:
        raise FormatError("joint_regressor: rows must sum to 1")
    if np.max(np.abs(model.joint_regressor @ model.template - model.rest_joints)) > tol:
        raise FormatError("rest_joints: must equal joint_regressor @ template")


def _perpendicular_basis(direction: FloatArray) -> Tuple[FloatArray, FloatArray]:
    d = direction / np.linalg.norm(direction)
    helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(d, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(d, e1)


def build_default_model(seed: int = 0, n_vertices: int = DEFAULT_VERTICES) -> BodyModel:
    """Deterministically build the 24-joint body.

    Every joint gets a ring of four vertices around it, skinned to that joint and
    averaged by the joint regressor, so regressed joints follow forward kinematics.
    The remaining vertices scatter along bones (and past the leaf joints) with
    Gaussian radial offsets and blend between the two joints of their bone.
    """
    K = N_JOINTS
    if n_vertices < 5 * K:
        raise DimensionMismatch(f"n_vertices must be at least {5 * K}, got {n_vertices}")
    rng = make_rng(seed, 0xB0D1)
    parents = np.array(PARENTS, dtype=np.int64)
    joints = np.array(REST_JOINTS, dtype=np.float64)
    kids = children(parents)

    def bone_direction(k: int) -> FloatArray:
        if parents[k] < 0:
            return np.array([0.0, 1.0, 0.0])
        return joints[k] - joints[parents[k]]

    verts: List[FloatArray] = []
    weights = np.zeros((n_vertices, K))
    regressor = np.zeros((K, n_vertices))
    bone_of: List[Tuple[int, FloatArray]] = []

    for k in range(K):
        e1, e2 = _perpendicular_basis(bone_direction(k))
        for offset in (e1, -e1, e2, -e2):
            i = len(verts)
            verts.append(joints[k] + RING_RADIUS * offset)
            weights[i, k] = 1.0
            regressor[k, i] = 0.25
            bone_of.append((k, offset))

    # (parent joint, child joint, is leaf extension)
    segments = [(int(parents[k]), k, False) for k in range(1, K)]
    segments += [(k, k, True) for k in range(K) if not kids[k]]
    for j in range(n_vertices - 4 * K):
        p, k, extension = segments[j % len(segments)]
        u = rng.uniform(0.0, 1.0)
        radial = abs(rng.normal(0.05, 0.015))
        angle = rng.uniform(0.0, 2.0 * np.pi)
        i = len(verts)
        if extension:
            direction = bone_direction(k)
            direction = direction / np.linalg.norm(direction)
            e1, e2 = _perpendicular_basis(direction)
            axial = joints[k] + u * LEAF_EXTENSION * direction
            weights[i, k] = 1.0
        else:
            e1, e2 = _perpendicular_basis(joints[k] - joints[p])
            axial = joints[p] + u * (joints[k] - joints[p])
            blend = 0.5 * u * u
            weights[i, p] = 1.0 - blend
            weights[i, k] = blend
        offset = np.cos(angle) * e1 + np.sin(angle) * e2
        verts.append(axial + 0.6 * radial * offset)
        bone_of.append((k if extension else p, offset))

    template = to_f32_grid(np.stack(verts))
    weights = to_f32_grid(weights / weights.sum(axis=1, keepdims=True))
    regressor = to_f32_grid(regressor)

    shape_dirs = np.zeros((n_vertices, 3, N_SHAPE))
    root = joints[0]
    owner = np.array([b for b, _ in bone_of])
    shape_dirs[:, :, 0] = 0.03 * (template - root)
    shape_dirs[:, :, 1] = 0.01 * np.stack([offset for _, offset in bone_of])
    # limb length: arms on one coefficient, legs on the next
    for channel, roots in ((2, ARM_ROOTS), (3, LEG_ROOTS)):
        for r in roots:
            near = np.isin(owner, subtree(parents, r))
            shape_dirs[near, :, channel] = 0.04 * (template[near] - joints[r])
    for s in range(4, N_SHAPE):
        field = rng.normal(0.0, 0.01, size=(3, 3))
        shape_dirs[:, :, s] = (template - root) @ field.T
    shape_dirs = to_f32_grid(shape_dirs)

    rest_joints = to_f32_grid(regressor @ template)
    model = BodyModel(
        parents=parents,
        rest_joints=rest_joints,
        template=template,
        skin_weights=weights,
        shape_dirs=shape_dirs,
        joint_regressor=regressor,
        seed=int(seed),
        builder=BUILDER_VERSION,
    )
    check_invariants(model)
    return model


def shaped_template(model: BodyModel, beta: FloatArray) -> FloatArray:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape[-1] != model.n_shape:
        raise DimensionMismatch(f"beta must have {model.n_shape} entries, got shape {beta.shape}")
    out: FloatArray = model.template + np.einsum("vcs,...s->...vc", model.shape_dirs, beta)
    return out


def mesh_from_rotmats(
    model: BodyModel, rotmats: FloatArray, beta: FloatArray
) -> Tuple[FloatArray, MeshCache]:
    """Vertices ``(..., V, 3)`` for per-joint rotations ``(..., K, 3, 3)``."""
    K = model.n_joints
    if rotmats.shape[-3:] != (K, 3, 3):
        raise DimensionMismatch(f"expected rotations (..., {K}, 3, 3), got {rotmats.shape}")
    batch = rotmats.shape[:-3]
    shaped = np.broadcast_to(shaped_template(model, beta), batch + model.template.shape)
    joints = np.einsum("kv,...vc->...kc", model.joint_regressor, shaped)

    eye = np.eye(3)
    frames = np.empty(batch + (K, 3, 3))
    offsets = np.empty(batch + (K, 3))
    frames[..., 0, :, :] = rotmats[..., 0, :, :]
    offsets[..., 0, :] = 0.0
    for k in range(1, K):
        p = model.parents[k]
        frames[..., k, :, :] = frames[..., p, :, :] @ rotmats[..., k, :, :]
        bone = joints[..., k, :] - joints[..., p, :]
        moved = np.einsum("...ij,...j->...i", frames[..., p, :, :] - eye, bone)
        offsets[..., k, :] = moved + offsets[..., p, :]

    delta = frames - eye
    blended = np.einsum("vk,...kij->...vij", model.skin_weights, delta)
    anchor = offsets - np.einsum("...kij,...kj->...ki", delta, joints)
    vertices = (
        shaped
        + np.einsum("...vij,...vj->...vi", blended, shaped)
        + np.einsum("vk,...ki->...vi", model.skin_weights, anchor)
    )
    return vertices, MeshCache(rotmats, shaped, joints, frames, offsets)


def mesh_from_rotmats_vjp(
    model: BodyModel, cache: MeshCache, d_vertices: FloatArray
) -> Tuple[FloatArray, FloatArray]:
    """Pull ``dL/dvertices`` back to ``(dL/drotmats, dL/dbeta)``."""
    eye = np.eye(3)
    W = model.skin_weights
    delta = cache.frames - eye
    blended = np.einsum("vk,...kij->...vij", W, delta)

    d_shaped = d_vertices + np.einsum("...vij,...vi->...vj", blended, d_vertices)
    d_blended = np.einsum("...vi,...vj->...vij", d_vertices, cache.shaped)
    d_frames = np.einsum("vk,...vij->...kij", W, d_blended)
    d_anchor = np.einsum("vk,...vi->...ki", W, d_vertices)
    d_offsets = d_anchor.copy()
    d_frames -= np.einsum("...ki,...kj->...kij", d_anchor, cache.joints)
    d_joints = -np.einsum("...kij,...ki->...kj", delta, d_anchor)

    d_rot = np.empty_like(cache.rotmats)
    for k in range(model.n_joints - 1, 0, -1):
        p = model.parents[k]
        bone = cache.joints[..., k, :] - cache.joints[..., p, :]
        parent_delta = cache.frames[..., p, :, :] - eye
        # offsets_k = (A_p - I) bone + offsets_p
        d_frames[..., p, :, :] += np.einsum("...i,...j->...ij", d_offsets[..., k, :], bone)
        d_bone = np.einsum("...ij,...i->...j", parent_delta, d_offsets[..., k, :])
        d_offsets[..., p, :] += d_offsets[..., k, :]
        d_joints[..., k, :] += d_bone
        d_joints[..., p, :] -= d_bone
        # frames_k = A_p R_k
        rot_t = np.swapaxes(cache.rotmats[..., k, :, :], -1, -2)
        d_frames[..., p, :, :] += d_frames[..., k, :, :] @ rot_t
        d_rot[..., k, :, :] = np.swapaxes(cache.frames[..., p, :, :], -1, -2) @ d_frames[..., k, :, :]
    d_rot[..., 0, :, :] = d_frames[..., 0, :, :]

    d_shaped = d_shaped + np.einsum("kv,...kc->...vc", model.joint_regressor, d_joints)
    d_beta = np.einsum("vcs,...vc->...s", model.shape_dirs, d_shaped)
    return d_rot, d_beta


def mesh(
    model: BodyModel, theta: FloatArray, beta: FloatArray, representation: str = "6d"
) -> FloatArray:
    """Mesh vertices for flat pose vectors; raises DegenerateInput for collapsed 6D columns."""
    theta = np.asarray(theta, dtype=np.float64)
    rotmats = pose_to_rotmats(theta, representation)
    if rotmats.shape[-3] != model.n_joints:
        raise DimensionMismatch(f"pose has {rotmats.shape[-3]} joints, model has {model.n_joints}")
    vertices, _ = mesh_from_rotmats(model, rotmats, beta)
    return vertices


def mesh_vjp(
    model: BodyModel,
    theta: FloatArray,
    beta: FloatArray,
    d_vertices: FloatArray,
    representation: str = "6d",
) -> Tuple[FloatArray, FloatArray]:
    rotmats = pose_to_rotmats(theta, representation)
    _, cache = mesh_from_rotmats(model, rotmats, beta)
    d_rot, d_beta = mesh_from_rotmats_vjp(model, cache, d_vertices)
    return pose_to_rotmats_vjp(theta, d_rot, representation), d_beta


def joints3d(model: BodyModel, vertices: FloatArray) -> FloatArray:
    if vertices.shape[-2:] != (model.n_vertices, 3):
        raise DimensionMismatch(f"expected vertices (..., {model.n_vertices}, 3), got {vertices.shape}")
    out: FloatArray = np.einsum("kv,...vc->...kc", model.joint_regressor, vertices)
    return out


def project(j3d: FloatArray, cam: FloatArray) -> FloatArray:
    """Weak perspective: ``(x, y, z) -> s (x, y) + (tx, ty)``."""
    j3d = np.asarray(j3d, dtype=np.float64)
    cam = np.asarray(cam, dtype=np.float64)
    out: FloatArray = cam[..., None, 0:1] * j3d[..., :2] + cam[..., None, 1:3]
    return out


def identity_pose(model: BodyModel, representation: str = "6d") -> FloatArray:
    if representation == "6d":
        return np.tile([1.0, 0.0, 0.0, 0.0, 1.0, 0.0], model.n_joints)
    return np.zeros(3 * model.n_joints)


def content_digest(model: BodyModel) -> str:
    """sha256 over the float32 little-endian bytes of the mesh arrays."""
    digest = hashlib.sha256()
    for a in (model.template, model.skin_weights, model.shape_dirs, model.joint_regressor):
        digest.update(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return digest.hexdigest()


def model_to_json(model: BodyModel) -> Dict[str, object]:
    return {
        "magic": f"{BODY_MAGIC}/{BODY_VERSION}",
        "fk_convention": FK_CONVENTION,
        "seed": model.seed,
        "builder": model.builder,
        "sha256": content_digest(model),
        "dims": {"K": model.n_joints, "V": model.n_vertices, "S": model.n_shape},
        "parents": [int(p) for p in model.parents],
        "arrays": [
            {
                "name": name,
                "shape": list(getattr(model, name).shape),
                "data": encode_f32(getattr(model, name)),
            }
            for name in _ARRAY_ORDER
        ],
    }


def save_model(model: BodyModel, path: Path) -> Path:
    return write_text(Path(path), json.dumps(model_to_json(model), sort_keys=True) + "\n")


def load_model(path: Path, expected_joints: Optional[int] = None) -> BodyModel:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: not valid JSON ({e})") from e
    try:
        magic, _, version = str(doc["magic"]).partition("/")
        if magic != BODY_MAGIC or Version(version).major != BODY_VERSION.major:
            raise FormatError(f"magic: expected {BODY_MAGIC}/{BODY_VERSION}, got {doc['magic']!r}")
        dims = doc["dims"]
        if expected_joints is not None and dims["K"] != expected_joints:
            raise FormatError(f"dims.K: file has {dims['K']} joints, expected {expected_joints}")
        if [a["name"] for a in doc["arrays"]] != list(_ARRAY_ORDER):
            raise FormatError(f"arrays: expected order {list(_ARRAY_ORDER)}")
        template, skin_weights, shape_dirs, joint_regressor, rest_joints = (
            decode_f32(a["data"], a["shape"], a["name"]) for a in doc["arrays"]
        )
        model = BodyModel(
            parents=np.array(doc["parents"], dtype=np.int64),
            rest_joints=rest_joints,
            template=template,
            skin_weights=skin_weights,
            shape_dirs=shape_dirs,
            joint_regressor=joint_regressor,
            seed=int(doc["seed"]),
            builder=int(doc.get("builder", 0)),
        )
        if "sha256" in doc and doc["sha256"] != content_digest(model):
            raise FormatError(f"sha256: stored arrays do not match the recorded {doc['sha256']!r}")
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"{path}: missing or malformed field {e}") from e
    if model.n_joints != dims["K"] or model.n_vertices != dims["V"]:
        raise FormatError("dims: declared K/V do not match the stored arrays")
    check_invariants(model)
    return model
