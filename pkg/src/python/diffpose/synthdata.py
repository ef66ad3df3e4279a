"""Synthetic observations of the body model with manufactured ambiguity.

Each sample pairs a ground-truth pose with noisy weak-perspective keypoints
and a visibility mask. A fraction of samples is emitted as *ambiguous pairs*:
two poses that differ only in rotations no visible keypoint can reveal and
that therefore share one conditioning vector.
"""
import json
from pathlib import Path
from typing import Any, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from packaging.version import Version

from diffpose.arrays import FloatArray, IntArray, decode_f32, encode_f32, make_rng, to_f32_grid
from diffpose.bodymodel import BodyModel, joints3d, mesh, project, subtree
from diffpose.errors import DimensionMismatch, FormatError, InvalidConfig
from diffpose.rotmath import euler_to_rotmat, rotmat_to_sixd
from diffpose.storage import new_file

CONTAINER_MAGIC = "DIFFPOSE-DS"
CONTAINER_VERSION = Version("1")
DATASET_KIND = "dataset"

MAX_ABS_BETA = 5.0
CAMERA_SCALE_RANGE = (0.8, 1.2)
CAMERA_SHIFT_RANGE = (-0.1, 0.1)

# Distal chains hidden together when building an ambiguous pair. Hiding the
# whole subtree of a joint also frees its parent's rotation when the parent has
# no other child.
OCCLUDABLE_CHAINS = (18, 19, 4, 5, 20, 21, 7, 8, 15)

Range = Tuple[float, float]
PosePrior = Tuple[Tuple[Range, Range, Range], ...]


def _sym(x: float, y: float, z: float) -> Tuple[Range, Range, Range]:
    return ((-x, x), (-y, y), (-z, z))


# Uniform XYZ Euler ranges (radians) per joint, rough human joint limits.
DEFAULT_POSE_PRIOR: PosePrior = (
    _sym(0.3, 0.8, 0.2),  # pelvis
    ((-1.2, 0.4), (-0.3, 0.3), (-0.4, 0.4)),
    ((-1.2, 0.4), (-0.3, 0.3), (-0.4, 0.4)),
    ((-0.2, 0.4), (-0.2, 0.2), (-0.2, 0.2)),
    ((0.0, 1.6), (0.0, 0.0), (0.0, 0.0)),  # knees
    ((0.0, 1.6), (0.0, 0.0), (0.0, 0.0)),
    _sym(0.15, 0.15, 0.15),
    _sym(0.4, 0.2, 0.2),
    _sym(0.4, 0.2, 0.2),
    _sym(0.15, 0.15, 0.15),
    _sym(0.2, 0.0, 0.0),
    _sym(0.2, 0.0, 0.0),
    _sym(0.4, 0.5, 0.3),  # neck
    _sym(0.2, 0.2, 0.2),
    _sym(0.2, 0.2, 0.2),
    _sym(0.4, 0.4, 0.3),
    ((-1.0, 1.0), (-1.0, 1.0), (-1.2, 0.6)),  # shoulders
    ((-1.0, 1.0), (-1.0, 1.0), (-0.6, 1.2)),
    ((0.0, 0.0), (-2.0, 0.0), (0.0, 0.0)),  # elbows
    ((0.0, 0.0), (0.0, 2.0), (0.0, 0.0)),
    _sym(0.5, 0.5, 0.5),
    _sym(0.5, 0.5, 0.5),
    _sym(0.2, 0.2, 0.2),
    _sym(0.2, 0.2, 0.2),
)


class DatasetConfig(NamedTuple):
    n_samples: int = 5000
    occlusion_rate: float = 0.15
    keypoint_noise_std: float = 0.005
    ambiguous_fraction: float = 0.3
    shape_std: float = 1.0
    seed: int = 0
    pose_prior: Optional[PosePrior] = None

    @property
    def prior(self) -> PosePrior:
        return DEFAULT_POSE_PRIOR if self.pose_prior is None else self.pose_prior

    def validate(self, n_joints: Optional[int] = None) -> None:
        if not isinstance(self.n_samples, int) or self.n_samples < 1:
            raise InvalidConfig(f"dataset.n_samples must be a positive integer, got {self.n_samples!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise InvalidConfig(f"dataset.seed must be a nonnegative integer, got {self.seed!r}")
        for field in ("occlusion_rate", "ambiguous_fraction"):
            value = getattr(self, field)
            if not 0.0 <= value <= 1.0:
                raise InvalidConfig(f"dataset.{field} must be in [0, 1], got {value!r}")
        for field in ("keypoint_noise_std", "shape_std"):
            value = getattr(self, field)
            if not (np.isfinite(value) and value >= 0.0):
                raise InvalidConfig(f"dataset.{field} must be a nonnegative number, got {value!r}")
        prior = np.asarray(self.prior, dtype=np.float64)
        if prior.ndim != 3 or prior.shape[1:] != (3, 2):
            raise InvalidConfig(
                f"dataset.pose_prior must be K x 3 x [low, high], got shape {prior.shape}"
            )
        if n_joints is not None and prior.shape[0] != n_joints:
            raise InvalidConfig(
                f"dataset.pose_prior has {prior.shape[0]} joints, the body model has {n_joints}"
            )
        if np.any(prior[..., 0] > prior[..., 1]) or not np.all(np.isfinite(prior)):
            raise InvalidConfig("dataset.pose_prior ranges must be finite with low <= high")

    def to_json(self) -> Dict[str, Any]:
        doc = self._asdict()
        if self.pose_prior is not None:
            doc["pose_prior"] = np.asarray(self.pose_prior).tolist()
        return doc

    @classmethod
    def from_json(cls, doc: Dict[str, Any]) -> "DatasetConfig":
        unknown = set(doc) - set(cls._fields)
        if unknown:
            raise InvalidConfig(f"dataset.{sorted(unknown)[0]}: unknown key")
        prior = doc.get("pose_prior")
        if prior is not None:
            doc = dict(doc, pose_prior=tuple(tuple(tuple(r) for r in joint) for joint in prior))
        return cls(**doc)


class Sample(NamedTuple):
    theta0: FloatArray
    beta: FloatArray
    cam: FloatArray
    keypoints2d: FloatArray
    occlusion_mask: FloatArray
    z: FloatArray
    pair_id: int = -1


class Dataset(NamedTuple):
    """Column-stacked samples; row ``i`` of every array belongs to sample ``i``."""

    config: DatasetConfig
    theta0: FloatArray
    beta: FloatArray
    cam: FloatArray
    keypoints2d: FloatArray
    occlusion_mask: FloatArray
    z: FloatArray
    pair_id: IntArray

    def __len__(self) -> int:
        return int(self.theta0.shape[0])

    @property
    def n_joints(self) -> int:
        return int(self.occlusion_mask.shape[1])

    def sample(self, i: int) -> Sample:
        if not 0 <= i < len(self):
            raise IndexError(f"sample index {i} out of range for {len(self)} samples")
        return Sample(
            theta0=self.theta0[i],
            beta=self.beta[i],
            cam=self.cam[i],
            keypoints2d=self.keypoints2d[i],
            occlusion_mask=self.occlusion_mask[i],
            z=self.z[i],
            pair_id=int(self.pair_id[i]),
        )

    def subset(self, name: str) -> IntArray:
        """Row indices of ``all``, ``occluded`` (any hidden joint) or ``ambiguous`` (paired) samples."""
        if name == "all":
            return np.arange(len(self))
        if name == "occluded":
            return np.flatnonzero(np.any(self.occlusion_mask < 0.5, axis=1))
        if name == "ambiguous":
            return np.flatnonzero(self.pair_id >= 0)
        raise InvalidConfig(f"unknown subset {name!r}, expected all, occluded or ambiguous")

    def same_as(self, other: "Dataset") -> bool:
        return self.config == other.config and all(
            np.array_equal(getattr(self, f), getattr(other, f)) for f in DATASET_FIELDS + ("pair_id",)
        )


DATASET_FIELDS = ("theta0", "beta", "cam", "keypoints2d", "occlusion_mask", "z")


def encode(keypoints2d: FloatArray, occlusion_mask: FloatArray) -> FloatArray:
    """Deterministic conditioning vector: visible keypoints (hidden ones zeroed) then the mask."""
    keypoints2d = np.asarray(keypoints2d, dtype=np.float64)
    occlusion_mask = np.asarray(occlusion_mask, dtype=np.float64)
    if keypoints2d.shape[-1] != 2 or keypoints2d.shape[:-1] != occlusion_mask.shape:
        raise DimensionMismatch(
            f"keypoints2d {keypoints2d.shape} and occlusion_mask {occlusion_mask.shape} disagree on K"
        )
    visible = np.where(occlusion_mask[..., None] > 0.5, keypoints2d, 0.0)
    flat = visible.reshape(visible.shape[:-2] + (-1,))
    return np.concatenate([flat, (occlusion_mask > 0.5).astype(np.float64)], axis=-1)


def cond_dim(n_joints: int) -> int:
    return 3 * n_joints


def free_joints(parents: IntArray, occlusion_mask: FloatArray) -> List[int]:
    """Joints whose rotation moves no visible joint: every strict descendant is hidden.

    Leaves always qualify since joint positions never depend on their own rotation.
    """
    hidden = occlusion_mask < 0.5
    return [k for k in range(len(parents)) if all(hidden[j] for j in subtree(parents, k) if j != k)]


def _draw_rotmats(
    prior: FloatArray, rng: np.random.Generator, joints: Optional[Sequence[int]] = None
) -> FloatArray:
    picked = np.arange(prior.shape[0]) if joints is None else np.asarray(joints)
    angles = rng.uniform(prior[picked, :, 0], prior[picked, :, 1])
    return euler_to_rotmat(angles)


def _observe(
    model: BodyModel,
    theta0: FloatArray,
    beta: FloatArray,
    cam: FloatArray,
    noise_std: float,
    rng: np.random.Generator,
) -> FloatArray:
    clean = project(joints3d(model, mesh(model, theta0, beta)), cam)
    return to_f32_grid(clean + noise_std * rng.standard_normal(clean.shape))


def _records(cfg: DatasetConfig, model: BodyModel) -> Iterator[Sample]:
    prior = np.asarray(cfg.prior, dtype=np.float64)
    K = model.n_joints
    pair_rate = cfg.ambiguous_fraction / (2.0 - cfg.ambiguous_fraction)
    # A paired sample hides a whole chain and proportionally fewer other joints so
    # every joint stays hidden with probability occlusion_rate; chains larger than
    # that budget are never forced.
    chains = [
        c
        for c in OCCLUDABLE_CHAINS
        if c < K and len(subtree(model.parents, c)) <= K * cfg.occlusion_rate
    ]
    emitted = 0
    slot = 0
    while emitted < cfg.n_samples:
        rng = make_rng(cfg.seed, 0xDA7A, slot)
        paired = bool(chains) and emitted + 2 <= cfg.n_samples and rng.uniform() < pair_rate
        rotmats = _draw_rotmats(prior, rng)
        theta0 = to_f32_grid(rotmat_to_sixd(rotmats).reshape(-1))
        raw_beta = cfg.shape_std * rng.standard_normal(model.n_shape)
        beta = to_f32_grid(np.clip(raw_beta, -MAX_ABS_BETA, MAX_ABS_BETA))
        cam = to_f32_grid([rng.uniform(*CAMERA_SCALE_RANGE), *rng.uniform(*CAMERA_SHIFT_RANGE, size=2)])
        forced = np.zeros(K, dtype=bool)
        hidden_rate = cfg.occlusion_rate
        if paired:
            forced[subtree(model.parents, int(rng.choice(chains)))] = True
            m = int(forced.sum())
            hidden_rate = (K * cfg.occlusion_rate - m) / (K - m)
        mask = ((rng.uniform(size=K) >= hidden_rate) & ~forced).astype(np.float64)
        keypoints = _observe(model, theta0, beta, cam, cfg.keypoint_noise_std, rng)
        z = encode(keypoints, mask)
        pair_id = slot if paired else -1
        yield Sample(theta0, beta, cam, keypoints, mask, z, pair_id)
        emitted += 1

        if paired:
            free = free_joints(model.parents, mask)
            partner = rotmats.copy()
            partner[free] = _draw_rotmats(prior, rng, free)
            theta1 = to_f32_grid(rotmat_to_sixd(partner).reshape(-1))
            own = _observe(model, theta1, beta, cam, cfg.keypoint_noise_std, rng)
            keypoints1 = np.where(mask[:, None] > 0.5, keypoints, own)
            yield Sample(theta1, beta, cam, keypoints1, mask, encode(keypoints1, mask), pair_id)
            emitted += 1
        slot += 1


def generate(cfg: DatasetConfig, model: BodyModel) -> Dataset:
    cfg.validate(model.n_joints)
    samples = list(_records(cfg, model))
    return Dataset(
        config=cfg,
        theta0=np.stack([s.theta0 for s in samples]),
        beta=np.stack([s.beta for s in samples]),
        cam=np.stack([s.cam for s in samples]),
        keypoints2d=np.stack([s.keypoints2d for s in samples]),
        occlusion_mask=np.stack([s.occlusion_mask for s in samples]),
        z=np.stack([s.z for s in samples]),
        pair_id=np.array([s.pair_id for s in samples], dtype=np.int64),
    )


class FieldSpec(NamedTuple):
    name: str
    shape: Tuple[int, ...]


def write_container(
    path: Path,
    kind: str,
    header: Dict[str, Any],
    fields: Sequence[FieldSpec],
    columns: Dict[str, FloatArray],
    tags: Optional[Dict[str, Sequence[int]]] = None,
) -> Path:
    """Write a JSON-lines container: a header line, then one line per record.

    Array fields are little-endian float32, base64-encoded. ``tags`` are small
    integer per-record annotations stored inline.
    """
    tags = tags or {}
    count = len(next(iter(columns.values()))) if columns else 0
    for spec in fields:
        if columns[spec.name].shape != (count,) + spec.shape:
            raise DimensionMismatch(
                f"{spec.name}: expected shape {(count,) + spec.shape}, got {columns[spec.name].shape}"
            )
    head = dict(
        header,
        magic=f"{CONTAINER_MAGIC}/{CONTAINER_VERSION}",
        kind=kind,
        count=count,
        fields=[{"name": s.name, "shape": list(s.shape)} for s in fields],
        tags=sorted(tags),
    )
    with new_file(Path(path)) as fo:
        fo.write((json.dumps(head, sort_keys=True) + "\n").encode("utf-8"))
        for i in range(count):
            record: Dict[str, Any] = {"index": i}
            record.update({name: int(values[i]) for name, values in tags.items()})
            record["data"] = {s.name: encode_f32(columns[s.name][i]) for s in fields}
            fo.write((json.dumps(record, sort_keys=True) + "\n").encode("utf-8"))
    return Path(path)


def read_container(
    path: Path, kind: str
) -> Tuple[Dict[str, Any], Dict[str, FloatArray], Dict[str, IntArray]]:
    """Inverse of :func:`write_container`; raises FormatError on any structural problem."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: not valid JSON lines ({e})") from e
    if not lines:
        raise FormatError(f"{path}: empty file")
    try:
        head = json.loads(lines[0])
        magic, _, version = str(head["magic"]).partition("/")
        if magic != CONTAINER_MAGIC or Version(version).major != CONTAINER_VERSION.major:
            raise FormatError(
                f"magic: expected {CONTAINER_MAGIC}/{CONTAINER_VERSION}, got {head['magic']!r}"
            )
        if head["kind"] != kind:
            raise FormatError(f"kind: expected {kind!r}, got {head['kind']!r}")
        count = int(head["count"])
        if len(lines) - 1 != count:
            raise FormatError(f"count: header declares {count} records, file holds {len(lines) - 1}")
        fields = [FieldSpec(f["name"], tuple(f["shape"])) for f in head["fields"]]
        columns = {s.name: np.empty((count,) + s.shape) for s in fields}
        tags: Dict[str, IntArray] = {name: np.empty(count, dtype=np.int64) for name in head["tags"]}
        for i, line in enumerate(lines[1:]):
            record = json.loads(line)
            if record["index"] != i:
                raise FormatError(f"index: record {i} is labelled {record['index']}")
            for s in fields:
                columns[s.name][i] = decode_f32(record["data"][s.name], s.shape, f"record {i}: {s.name}")
            for name in tags:
                tags[name][i] = int(record[name])
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON lines ({e})") from e
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, FormatError):
            raise FormatError(f"{path}: {e}") from e
        raise FormatError(f"{path}: missing or malformed field {e}") from e
    return head, columns, tags


def _fields(n_joints: int, n_shape: int) -> List[FieldSpec]:
    K = n_joints
    return [
        FieldSpec("theta0", (6 * K,)),
        FieldSpec("beta", (n_shape,)),
        FieldSpec("cam", (3,)),
        FieldSpec("keypoints2d", (K, 2)),
        FieldSpec("occlusion_mask", (K,)),
        FieldSpec("z", (cond_dim(K),)),
    ]


def save(dataset: Dataset, path: Path) -> Path:
    K = dataset.n_joints
    header = {
        "config": dataset.config.to_json(),
        "dims": {"K": K, "D": 6 * K, "C": cond_dim(K), "S": int(dataset.beta.shape[1])},
    }
    return write_container(
        path,
        DATASET_KIND,
        header,
        _fields(K, int(dataset.beta.shape[1])),
        {f: getattr(dataset, f) for f in DATASET_FIELDS},
        {"pair_id": [int(p) for p in dataset.pair_id]},
    )


def validate(dataset: Dataset) -> None:
    """Check the per-sample invariants of a dataset, raising FormatError naming the field."""
    for f in DATASET_FIELDS:
        if not np.all(np.isfinite(getattr(dataset, f))):
            raise FormatError(f"{f}: contains non-finite values")
    mask = dataset.occlusion_mask
    if np.any((mask != 0.0) & (mask != 1.0)):
        raise FormatError("occlusion_mask: entries must be 0 or 1")
    if np.any(np.abs(dataset.beta) > MAX_ABS_BETA):
        raise FormatError(f"beta: entries must lie within +-{MAX_ABS_BETA}")
    bad = np.flatnonzero(np.any(encode(dataset.keypoints2d, mask) != dataset.z, axis=1))
    if len(bad):
        raise FormatError(f"z: record {bad[0]} is not the encoding of its keypoints and mask")


def load(path: Path, expected_joints: Optional[int] = None) -> Dataset:
    head, columns, tags = read_container(path, DATASET_KIND)
    try:
        dims = head["dims"]
        K = int(dims["K"])
        config = DatasetConfig.from_json(dict(head["config"]))
    except (KeyError, TypeError, InvalidConfig) as e:
        raise FormatError(f"{path}: malformed header ({e})") from e
    if expected_joints is not None and K != expected_joints:
        raise FormatError(f"dims.K: dataset has {K} joints, the body model has {expected_joints}")
    declared = [FieldSpec(n, tuple(s)) for n, s in ((f["name"], f["shape"]) for f in head["fields"])]
    if declared != _fields(K, int(dims["S"])):
        raise FormatError(f"fields: layout does not match dims K={K}, S={dims['S']}")
    if "pair_id" not in tags:
        raise FormatError("pair_id: missing per-record tag")
    dataset = Dataset(
        config=config,
        theta0=columns["theta0"],
        beta=columns["beta"],
        cam=columns["cam"],
        keypoints2d=columns["keypoints2d"],
        occlusion_mask=columns["occlusion_mask"],
        z=columns["z"],
        pair_id=tags["pair_id"],
    )
    validate(dataset)
    return dataset


class AmbiguityStats(NamedTuple):
    samples: int
    occluded_samples: int
    occluded_fraction: float
    ambiguous_pairs: int
    pairs_sharing_z: int


def ambiguity_stats(dataset: Dataset) -> AmbiguityStats:
    hidden = dataset.occlusion_mask < 0.5
    pair_ids = np.unique(dataset.pair_id[dataset.pair_id >= 0])
    shared = 0
    for pid in pair_ids:
        rows = np.flatnonzero(dataset.pair_id == pid)
        if len(rows) == 2 and np.array_equal(dataset.z[rows[0]], dataset.z[rows[1]]):
            shared += 1
    return AmbiguityStats(
        samples=len(dataset),
        occluded_samples=int(np.any(hidden, axis=1).sum()),
        occluded_fraction=float(hidden.mean()),
        ambiguous_pairs=len(pair_ids),
        pairs_sharing_z=shared,
    )
