"""A small differentiable-network toolkit with hand-derived gradients.

All learnable scalars of the pose network live in one flat float64 array. A
:class:`Manifest` maps layer names such as ``denoiser.block0.weight`` to their
offset and shape inside it, so gradients, optimizer moments and checkpoints
share the same layout.
"""
import json
import math
from pathlib import Path
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from packaging.version import Version

from diffpose.arrays import FloatArray, f32_bytes, f64_bytes, from_bytes, make_rng, to_f32_grid
from diffpose.errors import DimensionMismatch, FormatError
from diffpose.schedule import Timestep
from diffpose.storage import write_bytes, write_text

N_SHAPE = 10
CAM_DIM = 3
DEFAULT_TIME_DIM = 64
DEFAULT_WIDTH = 192
DEFAULT_BLOCKS = 3
DEFAULT_REGRESSOR_WIDTH = 128
MAX_PERIOD = 10_000.0

CHECKPOINT_FORMAT = "diffpose-checkpoint"
CHECKPOINT_VERSION = Version("1.0")
MANIFEST_FILE = "manifest.json"
PARAMS_FILE = "params.f32"
OPTIMIZER_FILE = "optimizer.f64"

LayerList = List[Tuple[str, Tuple[int, ...]]]


class LayerSlot(NamedTuple):
    offset: int
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


class Manifest:
    def __init__(self, layers: Sequence[Tuple[str, Tuple[int, ...]]]) -> None:
        self.slots: Dict[str, LayerSlot] = {}
        offset = 0
        for name, shape in layers:
            if name in self.slots:
                raise DimensionMismatch(f"duplicate layer name {name!r}")
            slot = LayerSlot(offset, tuple(int(n) for n in shape))
            self.slots[name] = slot
            offset += slot.size
        self.size = offset

    @property
    def names(self) -> List[str]:
        return list(self.slots)

    def view(self, flat: FloatArray, name: str) -> FloatArray:
        """A reshaped view into ``flat``; writes go through to the flat array."""
        slot = self.slots[name]
        return flat[slot.offset : slot.offset + slot.size].reshape(slot.shape)

    def locate(self, index: int) -> str:
        for name, slot in self.slots.items():
            if slot.offset <= index < slot.offset + slot.size:
                return f"{name}[{index - slot.offset}]"
        raise IndexError(index)

    def smallest(self) -> str:
        return min(self.slots, key=lambda n: (self.slots[n].size, self.slots[n].offset))

    def check(self, flat: FloatArray, what: str = "params") -> None:
        if flat.shape != (self.size,):
            raise DimensionMismatch(f"{what}: expected flat length {self.size}, got shape {flat.shape}")

    def to_json(self) -> Dict[str, Dict[str, Any]]:
        return {n: {"offset": s.offset, "shape": list(s.shape)} for n, s in self.slots.items()}

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Manifest) and self.slots == other.slots


def silu(x: FloatArray) -> FloatArray:
    return x * 0.5 * (1.0 + np.tanh(0.5 * x))


def silu_grad(x: FloatArray) -> FloatArray:
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return sig * (1.0 + x * (1.0 - sig))


def time_embedding(t: Timestep, dim: int = DEFAULT_TIME_DIM) -> FloatArray:
    """Sinusoidal features of ``t``: sines then cosines over geometrically spaced
    frequencies from 1 down to ``1 / MAX_PERIOD``."""
    ts = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(MAX_PERIOD) * np.arange(half) / max(half - 1, 1))
    angles = ts[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((ts.shape[0], 1))], axis=1)
    return emb


def _linear(params: FloatArray, manifest: Manifest, name: str, x: FloatArray) -> FloatArray:
    w = manifest.view(params, f"{name}.weight")
    b = manifest.view(params, f"{name}.bias")
    out: FloatArray = x @ w.T + b
    return out


def _linear_backward(
    params: FloatArray,
    manifest: Manifest,
    name: str,
    x: FloatArray,
    d_out: FloatArray,
    grads: FloatArray,
) -> FloatArray:
    manifest.view(grads, f"{name}.weight")[...] += d_out.T @ x
    manifest.view(grads, f"{name}.bias")[...] += d_out.sum(axis=0)
    d_x: FloatArray = d_out @ manifest.view(params, f"{name}.weight")
    return d_x


def _linear_layers(name: str, n_in: int, n_out: int) -> LayerList:
    return [(f"{name}.weight", (n_out, n_in)), (f"{name}.bias", (n_out,))]


class NetworkArch(NamedTuple):
    pose_dim: int
    cond_dim: int
    time_dim: int = DEFAULT_TIME_DIM
    width: int = DEFAULT_WIDTH
    blocks: int = DEFAULT_BLOCKS
    regressor_width: int = DEFAULT_REGRESSOR_WIDTH
    n_shape: int = N_SHAPE

    def validate(self) -> None:
        for field in self._fields:
            value = getattr(self, field)
            minimum = 0 if field == "blocks" else 1
            if not isinstance(value, int) or value < minimum:
                raise DimensionMismatch(f"arch.{field} must be an integer >= {minimum}, got {value!r}")


class DenoiserCache(NamedTuple):
    inputs: FloatArray
    hidden: List[FloatArray]
    pose_dim: int


class Denoiser:
    """Residual MLP ``f(x_t, t, z)`` predicting the injected noise.

    ``concat(x_t, emb(t), z) -> input -> blocks x (h + W silu(h) + b) -> head(silu(h))``
    """

    def __init__(self, arch: NetworkArch, prefix: str = "denoiser") -> None:
        self.arch = arch
        self.prefix = prefix

    @property
    def head(self) -> str:
        return f"{self.prefix}.head"

    def layers(self) -> LayerList:
        a = self.arch
        layers = _linear_layers(f"{self.prefix}.input", a.pose_dim + a.time_dim + a.cond_dim, a.width)
        for k in range(a.blocks):
            layers += _linear_layers(f"{self.prefix}.block{k}", a.width, a.width)
        layers += _linear_layers(self.head, a.width, a.pose_dim)
        return layers

    def forward(
        self,
        params: FloatArray,
        manifest: Manifest,
        x_t: FloatArray,
        t: Timestep,
        z: FloatArray,
    ) -> Tuple[FloatArray, DenoiserCache]:
        a = self.arch
        x_t = np.atleast_2d(x_t)
        z = np.atleast_2d(z)
        if x_t.shape[1] != a.pose_dim or z.shape[1] != a.cond_dim or x_t.shape[0] != z.shape[0]:
            raise DimensionMismatch(
                f"denoiser expects x_t (B, {a.pose_dim}) and z (B, {a.cond_dim}), "
                f"got {x_t.shape} and {z.shape}"
            )
        ts = np.broadcast_to(np.asarray(t), (x_t.shape[0],))
        inputs = np.concatenate([x_t, time_embedding(ts, a.time_dim), z], axis=1)
        h = _linear(params, manifest, f"{self.prefix}.input", inputs)
        hidden = [h]
        for k in range(a.blocks):
            h = h + _linear(params, manifest, f"{self.prefix}.block{k}", silu(h))
            hidden.append(h)
        out = _linear(params, manifest, self.head, silu(h))
        return out, DenoiserCache(inputs, hidden, a.pose_dim)

    def backward(
        self,
        params: FloatArray,
        manifest: Manifest,
        cache: DenoiserCache,
        d_out: FloatArray,
        grads: FloatArray,
    ) -> FloatArray:
        """Accumulate parameter gradients into ``grads``; return the gradient w.r.t. ``x_t``."""
        h = cache.hidden[-1]
        d_act = _linear_backward(params, manifest, self.head, silu(h), d_out, grads)
        dh = d_act * silu_grad(h)
        for k in reversed(range(self.arch.blocks)):
            h = cache.hidden[k]
            d_act = _linear_backward(params, manifest, f"{self.prefix}.block{k}", silu(h), dh, grads)
            dh = dh + d_act * silu_grad(h)
        d_in = _linear_backward(params, manifest, f"{self.prefix}.input", cache.inputs, dh, grads)
        return d_in[:, : cache.pose_dim]


class RegressorCache(NamedTuple):
    z: FloatArray
    pre: List[FloatArray]


class Regressor:
    """Two-hidden-layer MLP ``z -> (beta, cam)`` with ``cam = (s, tx, ty)``."""

    n_hidden = 2

    def __init__(self, arch: NetworkArch, prefix: str = "regressor") -> None:
        self.arch = arch
        self.prefix = prefix

    @property
    def head(self) -> str:
        return f"{self.prefix}.head"

    def layers(self) -> LayerList:
        a = self.arch
        layers: LayerList = []
        n_in = a.cond_dim
        for k in range(self.n_hidden):
            layers += _linear_layers(f"{self.prefix}.hidden{k}", n_in, a.regressor_width)
            n_in = a.regressor_width
        layers += _linear_layers(self.head, n_in, a.n_shape + CAM_DIM)
        return layers

    def forward(
        self, params: FloatArray, manifest: Manifest, z: FloatArray
    ) -> Tuple[FloatArray, FloatArray, RegressorCache]:
        z = np.atleast_2d(z)
        if z.shape[1] != self.arch.cond_dim:
            raise DimensionMismatch(f"regressor expects z (B, {self.arch.cond_dim}), got {z.shape}")
        pre: List[FloatArray] = []
        act = z
        for k in range(self.n_hidden):
            p = _linear(params, manifest, f"{self.prefix}.hidden{k}", act)
            pre.append(p)
            act = silu(p)
        out = _linear(params, manifest, self.head, act)
        n = self.arch.n_shape
        return out[:, :n], out[:, n:], RegressorCache(z, pre)

    def backward(
        self,
        params: FloatArray,
        manifest: Manifest,
        cache: RegressorCache,
        d_beta: FloatArray,
        d_cam: FloatArray,
        grads: FloatArray,
    ) -> None:
        d_out = np.concatenate([d_beta, d_cam], axis=1)
        d_act = _linear_backward(params, manifest, self.head, silu(cache.pre[-1]), d_out, grads)
        for k in reversed(range(self.n_hidden)):
            dp = d_act * silu_grad(cache.pre[k])
            x = cache.z if k == 0 else silu(cache.pre[k - 1])
            d_act = _linear_backward(params, manifest, f"{self.prefix}.hidden{k}", x, dp, grads)


class BoundDenoiser:
    """A denoiser closed over fixed parameters, usable as a sampler model."""

    def __init__(self, network: "PoseNetwork", params: FloatArray) -> None:
        self.network = network
        self.params = params
        self.pose_dim = network.arch.pose_dim
        self.cond_dim = network.arch.cond_dim

    def __call__(self, x_t: FloatArray, t: Timestep, z: FloatArray) -> FloatArray:
        return self.network.denoiser_forward(self.params, x_t, t, z)


class PoseNetwork:
    """The denoiser and the shape/camera regressor sharing one parameter manifest."""

    def __init__(self, arch: NetworkArch) -> None:
        arch.validate()
        self.arch = arch
        self.denoiser = Denoiser(arch)
        self.regressor = Regressor(arch)
        self.manifest = Manifest(self.denoiser.layers() + self.regressor.layers())

    @property
    def n_params(self) -> int:
        return self.manifest.size

    def denoiser_param_count(self) -> int:
        return sum(self.manifest.slots[n].size for n, _ in self.denoiser.layers())

    def init_params(self, seed: int, zero_head: bool = True) -> FloatArray:
        """Fan-in scaled uniform weights, zero biases, and (by default) a zero
        denoiser head so the initial noise estimate is identically zero."""
        rng = make_rng(seed, 0x1A17)
        params = np.zeros(self.manifest.size)
        for name, slot in self.manifest.slots.items():
            if not name.endswith(".weight"):
                continue
            if zero_head and name == f"{self.denoiser.head}.weight":
                continue
            bound = 1.0 / math.sqrt(slot.shape[1])
            self.manifest.view(params, name)[...] = rng.uniform(-bound, bound, size=slot.shape)
        return to_f32_grid(params)

    def denoiser_forward(
        self, params: FloatArray, x_t: FloatArray, t: Timestep, z: FloatArray
    ) -> FloatArray:
        self.manifest.check(params)
        out, _ = self.denoiser.forward(params, self.manifest, x_t, t, z)
        return out[0] if np.ndim(x_t) == 1 else out

    def denoiser_backward(
        self,
        params: FloatArray,
        cache: DenoiserCache,
        d_out: FloatArray,
        grads: Optional[FloatArray] = None,
    ) -> Tuple[FloatArray, FloatArray]:
        """Gradients of a scalar loss given its gradient ``d_out`` w.r.t. the
        denoiser output. Returns ``(grads, d_x_t)``."""
        if grads is None:
            grads = np.zeros(self.manifest.size)
        self.manifest.check(grads, "grads")
        if d_out.shape != (cache.inputs.shape[0], self.arch.pose_dim):
            raise DimensionMismatch(f"upstream gradient has shape {d_out.shape}")
        d_x = self.denoiser.backward(params, self.manifest, cache, d_out, grads)
        return grads, d_x

    def regressor_forward(self, params: FloatArray, z: FloatArray) -> Tuple[FloatArray, FloatArray]:
        self.manifest.check(params)
        beta, cam, _ = self.regressor.forward(params, self.manifest, z)
        if np.ndim(z) == 1:
            return beta[0], cam[0]
        return beta, cam

    def bind(self, params: FloatArray) -> BoundDenoiser:
        self.manifest.check(params)
        return BoundDenoiser(self, params)


class GradcheckReport(NamedTuple):
    max_rel_error: float
    worst: str
    n_checked: int
    failures: List[Tuple[str, float]]


LossAndGrad = Callable[[FloatArray], Tuple[float, FloatArray]]


def relative_error(analytic: FloatArray, numeric: FloatArray, floor: float = 1e-7) -> FloatArray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def gradcheck(
    loss_and_grad: LossAndGrad,
    params: FloatArray,
    manifest: Manifest,
    fd_step: float = 1e-4,
    n_random: int = 200,
    seed: int = 0,
    tol: float = 1e-3,
) -> GradcheckReport:
    """Compare analytic gradients with central finite differences.

    Checks a random subsample of ``n_random`` parameters plus every parameter of
    the smallest layer in the manifest.
    """
    if fd_step <= 0:
        raise ValueError(f"fd_step must be positive, got {fd_step}")
    manifest.check(params)
    _, analytic = loss_and_grad(params)

    rng = make_rng(seed, 0x6C)
    picked = rng.choice(manifest.size, size=min(n_random, manifest.size), replace=False)
    small = manifest.slots[manifest.smallest()]
    indices = np.union1d(picked, np.arange(small.offset, small.offset + small.size))

    shifted = params.copy()
    numeric = np.empty(len(indices))
    for j, i in enumerate(indices):
        shifted[i] = params[i] + fd_step
        plus, _ = loss_and_grad(shifted)
        shifted[i] = params[i] - fd_step
        minus, _ = loss_and_grad(shifted)
        shifted[i] = params[i]
        numeric[j] = (plus - minus) / (2.0 * fd_step)

    errors = relative_error(analytic[indices], numeric)
    worst = int(np.argmax(errors)) if len(errors) else 0
    failures = [
        (manifest.locate(int(indices[j])), float(errors[j])) for j in np.flatnonzero(errors > tol)
    ]
    return GradcheckReport(
        max_rel_error=float(errors[worst]) if len(errors) else 0.0,
        worst=manifest.locate(int(indices[worst])) if len(errors) else "",
        n_checked=len(indices),
        failures=failures,
    )


class Checkpoint(NamedTuple):
    arch: NetworkArch
    representation: str
    params: FloatArray
    schedule: Dict[str, Any]
    step: int
    seed_history: List[Dict[str, int]]
    train_config: Dict[str, Any]
    body_model: Dict[str, Any]
    moments: Optional[Tuple[FloatArray, FloatArray]] = None

    def same_as(self, other: "Checkpoint") -> bool:
        """Bitwise equality, including optimizer moments."""
        plain = (
            "arch", "representation", "schedule", "step", "seed_history", "train_config", "body_model"
        )
        if any(getattr(self, f) != getattr(other, f) for f in plain):
            return False
        if not np.array_equal(self.params, other.params):
            return False
        if (self.moments is None) != (other.moments is None):
            return False
        if self.moments is not None and other.moments is not None:
            return all(np.array_equal(a, b) for a, b in zip(self.moments, other.moments))
        return True


def save_checkpoint(ckpt: Checkpoint, path: Path) -> Path:
    """Write ``manifest.json``, ``params.f32`` and optionally ``optimizer.f64`` into ``path``."""
    path = Path(path)
    network = PoseNetwork(ckpt.arch)
    network.manifest.check(ckpt.params)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": str(CHECKPOINT_VERSION),
        "arch": ckpt.arch._asdict(),
        "representation": ckpt.representation,
        "param_count": network.n_params,
        "layers": network.manifest.to_json(),
        "schedule": ckpt.schedule,
        "step": ckpt.step,
        "seed_history": ckpt.seed_history,
        "train_config": ckpt.train_config,
        "body_model": ckpt.body_model,
        "optimizer": ckpt.moments is not None,
    }
    path.mkdir(parents=True, exist_ok=True)
    write_bytes(path / PARAMS_FILE, f32_bytes(ckpt.params))
    if ckpt.moments is not None:
        write_bytes(path / OPTIMIZER_FILE, f64_bytes(np.concatenate(ckpt.moments)))
    write_text(path / MANIFEST_FILE, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_FILE).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"{path / MANIFEST_FILE}: not valid JSON ({e})") from e
    if not isinstance(manifest, dict) or manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a diffpose checkpoint")
    try:
        version = Version(str(manifest["version"]))
        if version.major != CHECKPOINT_VERSION.major:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        arch = NetworkArch(**manifest["arch"])
        network = PoseNetwork(arch)
        if manifest["param_count"] != network.n_params:
            raise FormatError(
                f"param_count: manifest declares {manifest['param_count']}, "
                f"architecture implies {network.n_params}"
            )
        if manifest["layers"] != network.manifest.to_json():
            raise FormatError("layers: layer offsets do not match the architecture")
        params = from_bytes((path / PARAMS_FILE).read_bytes(), "<f4", network.n_params, PARAMS_FILE)
        moments = None
        if manifest["optimizer"]:
            blob = (path / OPTIMIZER_FILE).read_bytes()
            raw = from_bytes(blob, "<f8", 2 * network.n_params, OPTIMIZER_FILE)
            moments = (raw[: network.n_params], raw[network.n_params :])
        return Checkpoint(
            arch=arch,
            representation=str(manifest["representation"]),
            params=params,
            schedule=dict(manifest["schedule"]),
            step=int(manifest["step"]),
            seed_history=list(manifest["seed_history"]),
            train_config=dict(manifest["train_config"]),
            body_model=dict(manifest["body_model"]),
            moments=moments,
        )
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path / MANIFEST_FILE}: missing or malformed field {e}") from e
