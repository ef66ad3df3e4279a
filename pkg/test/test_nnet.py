import json
import pathlib
from test.helpers import numeric_grad
from typing import Tuple

import numpy as np
import pytest

from diffpose.arrays import FloatArray, IntArray, make_rng
from diffpose.errors import DimensionMismatch, FormatError
from diffpose.nnet import (
    MANIFEST_FILE,
    OPTIMIZER_FILE,
    PARAMS_FILE,
    Checkpoint,
    LossAndGrad,
    Manifest,
    NetworkArch,
    PoseNetwork,
    _linear_backward,
    gradcheck,
    load_checkpoint,
    save_checkpoint,
    time_embedding,
)

SMALL = NetworkArch(pose_dim=6, cond_dim=4, time_dim=4, width=5, blocks=2, regressor_width=3, n_shape=2)


def _inputs(arch: NetworkArch, batch: int = 3) -> Tuple[FloatArray, IntArray, FloatArray]:
    rng = make_rng(42)
    return (
        rng.standard_normal((batch, arch.pose_dim)),
        rng.integers(1, 50, size=batch),
        rng.standard_normal((batch, arch.cond_dim)),
    )


def test_default_parameter_counts() -> None:
    network = PoseNetwork(NetworkArch(pose_dim=144, cond_dim=72))
    assert network.denoiser_param_count() == 192_912
    assert network.n_params == 192_912 + 27_533
    assert network.manifest.smallest() == "regressor.head.bias"


def test_manifest_rejects_duplicates() -> None:
    with pytest.raises(DimensionMismatch):
        Manifest([("a", (2,)), ("a", (3,))])


def test_time_embedding() -> None:
    emb = time_embedding(np.array([1, 7, 100]), 8)
    assert emb.shape == (3, 8)
    assert np.all(np.abs(emb) <= 1.0)
    np.testing.assert_array_equal(emb, time_embedding(np.array([1, 7, 100]), 8))
    np.testing.assert_allclose(emb[:, 0], np.sin([1, 7, 100]))


def test_zero_params_give_zero_output() -> None:
    network = PoseNetwork(SMALL)
    x, t, z = _inputs(SMALL)
    params = np.zeros(network.n_params)
    np.testing.assert_array_equal(network.denoiser_forward(params, x, t, z), 0.0)
    beta, cam = network.regressor_forward(params, z)
    np.testing.assert_array_equal(beta, 0.0)
    np.testing.assert_array_equal(cam, 0.0)


def test_zero_head_initialisation() -> None:
    network = PoseNetwork(SMALL)
    params = network.init_params(0)
    x, t, z = _inputs(SMALL)
    np.testing.assert_array_equal(network.denoiser_forward(params, x, t, z), 0.0)
    np.testing.assert_array_equal(params, network.init_params(0))
    # values sit on the float32 grid
    np.testing.assert_array_equal(params, params.astype(np.float32).astype(np.float64))


def test_forward_is_deterministic_and_checks_shapes() -> None:
    network = PoseNetwork(SMALL)
    params = network.init_params(1, zero_head=False)
    x, t, z = _inputs(SMALL)
    first = network.denoiser_forward(params, x, t, z)
    np.testing.assert_array_equal(first, network.denoiser_forward(params, x, t, z))
    single = network.denoiser_forward(params, x[0], t[0], z[0])
    np.testing.assert_allclose(single, first[0], rtol=1e-12)
    with pytest.raises(DimensionMismatch):
        network.denoiser_forward(params, x[:, :5], t, z)
    with pytest.raises(DimensionMismatch):
        network.regressor_forward(params, z[:, :3])
    with pytest.raises(DimensionMismatch):
        network.denoiser_forward(params[:-1], x, t, z)


def test_single_linear_layer_gradient() -> None:
    manifest = Manifest([("layer.weight", (2, 2)), ("layer.bias", (2,))])
    params = np.array([1.0, 2.0, 3.0, 4.0, 0.0, 0.0])
    x = np.array([[1.0, -1.0]])
    w = manifest.view(params, "layer.weight")
    y = x @ w.T
    # loss = 0.5 |y|^2 so dL/dW = y x^T
    grads = np.zeros(6)
    _linear_backward(params, manifest, "layer", x, y, grads)
    np.testing.assert_allclose(manifest.view(grads, "layer.weight"), y.T @ x)
    np.testing.assert_allclose(manifest.view(grads, "layer.weight"), [[-1.0, 1.0], [-1.0, 1.0]])


def test_zero_upstream_gives_zero_gradients() -> None:
    network = PoseNetwork(SMALL)
    params = network.init_params(2, zero_head=False)
    x, t, z = _inputs(SMALL)
    _, cache = network.denoiser.forward(params, network.manifest, x, t, z)
    grads, d_x = network.denoiser_backward(params, cache, np.zeros_like(x))
    np.testing.assert_array_equal(grads, 0.0)
    np.testing.assert_array_equal(d_x, 0.0)


def test_denoiser_backward_matches_finite_differences() -> None:
    network = PoseNetwork(SMALL)
    params = network.init_params(3, zero_head=False)
    x, t, z = _inputs(SMALL)
    upstream = make_rng(4).standard_normal((x.shape[0], SMALL.pose_dim))

    def loss(p: FloatArray) -> float:
        return float(np.sum(network.denoiser_forward(p, x, t, z) * upstream))

    _, cache = network.denoiser.forward(params, network.manifest, x, t, z)
    grads, d_x = network.denoiser_backward(params, cache, upstream)
    n_denoiser = network.denoiser_param_count()
    numeric = numeric_grad(loss, params)
    np.testing.assert_allclose(grads[:n_denoiser], numeric[:n_denoiser], rtol=1e-5, atol=1e-8)

    def loss_x(xx: FloatArray) -> float:
        return float(np.sum(network.denoiser_forward(params, xx, t, z) * upstream))

    numeric_x = numeric_grad(loss_x, x)
    np.testing.assert_allclose(d_x, numeric_x, rtol=1e-4, atol=1e-8)


def test_regressor_backward_matches_finite_differences() -> None:
    network = PoseNetwork(SMALL)
    params = network.init_params(5, zero_head=False)
    _, _, z = _inputs(SMALL)
    rng = make_rng(6)
    up_beta = rng.standard_normal((z.shape[0], SMALL.n_shape))
    up_cam = rng.standard_normal((z.shape[0], 3))

    def loss(p: FloatArray) -> float:
        beta, cam = network.regressor_forward(p, z)
        return float(np.sum(beta * up_beta) + np.sum(cam * up_cam))

    _, _, cache = network.regressor.forward(params, network.manifest, z)
    grads = np.zeros(network.n_params)
    network.regressor.backward(params, network.manifest, cache, up_beta, up_cam, grads)
    np.testing.assert_allclose(grads, numeric_grad(loss, params), rtol=1e-5, atol=1e-8)


def _quadratic(network: PoseNetwork, x: FloatArray, t: IntArray, z: FloatArray) -> LossAndGrad:
    def loss_and_grad(p: FloatArray) -> Tuple[float, FloatArray]:
        out, cache = network.denoiser.forward(p, network.manifest, x, t, z)
        grads, _ = network.denoiser_backward(p, cache, out)
        return 0.5 * float(np.sum(out**2)), grads

    return loss_and_grad


def test_gradcheck_passes_and_flags_corruption() -> None:
    network = PoseNetwork(SMALL)
    params = network.init_params(7, zero_head=False)
    x, t, z = _inputs(SMALL)
    loss_and_grad = _quadratic(network, x, t, z)

    report = gradcheck(loss_and_grad, params, network.manifest, n_random=50)
    assert report.max_rel_error < 1e-3
    assert not report.failures
    # the random subsample plus every entry of the smallest layer
    assert report.n_checked >= 50
    assert network.manifest.smallest() == "regressor.hidden0.bias"

    finer = gradcheck(loss_and_grad, params, network.manifest, fd_step=5e-5, n_random=50)
    assert finer.max_rel_error <= 10 * max(report.max_rel_error, 1e-9)

    head = network.manifest.slots["denoiser.head.bias"]

    def corrupted(p: FloatArray) -> Tuple[float, FloatArray]:
        loss, grads = loss_and_grad(p)
        grads = grads.copy()
        grads[head.offset] *= 2.0
        return loss, grads

    bad = gradcheck(corrupted, params, network.manifest, n_random=network.n_params)
    assert [name for name, _ in bad.failures] == ["denoiser.head.bias[0]"]


def _checkpoint(network: PoseNetwork, with_moments: bool) -> Checkpoint:
    params = network.init_params(8, zero_head=False)
    n = network.n_params
    moments = (np.linspace(-1, 1, n), np.linspace(0, 2, n)) if with_moments else None
    return Checkpoint(
        arch=network.arch,
        representation="6d",
        params=params,
        schedule={"T": 10, "beta_start": 0.01, "beta_end": 0.2},
        step=3,
        seed_history=[{"seed": 0, "from_step": 0}],
        train_config={"steps": 3},
        body_model={"seed": 0, "n_joints": 1, "n_vertices": 5, "sha256": "x"},
        moments=moments,
    )


@pytest.mark.parametrize("with_moments", [True, False])
def test_checkpoint_round_trip(tmp_path: pathlib.Path, with_moments: bool) -> None:
    network = PoseNetwork(SMALL)
    ckpt = _checkpoint(network, with_moments)
    save_checkpoint(ckpt, tmp_path / "ckpt")
    loaded = load_checkpoint(tmp_path / "ckpt")
    assert loaded.same_as(ckpt)
    assert (tmp_path / "ckpt" / OPTIMIZER_FILE).exists() == with_moments


def test_checkpoint_format_errors(tmp_path: pathlib.Path) -> None:
    network = PoseNetwork(SMALL)
    path = save_checkpoint(_checkpoint(network, True), tmp_path / "ckpt")
    manifest_path = path / MANIFEST_FILE
    original = manifest_path.read_text()

    (path / PARAMS_FILE).write_bytes((path / PARAMS_FILE).read_bytes()[:-4])
    with pytest.raises(FormatError, match=PARAMS_FILE):
        load_checkpoint(path)
    save_checkpoint(_checkpoint(network, True), path)

    doc = json.loads(original)
    doc["version"] = "2.0"
    manifest_path.write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(path)

    doc = json.loads(original)
    doc["param_count"] += 1
    manifest_path.write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="param_count"):
        load_checkpoint(path)

    manifest_path.write_text("{not json")
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_with_non_utf8_manifest(tmp_path: pathlib.Path) -> None:
    path = save_checkpoint(_checkpoint(PoseNetwork(SMALL), False), tmp_path / "ckpt")
    (path / MANIFEST_FILE).write_bytes(b"\xff\xfe\x00garbage")
    with pytest.raises(FormatError, match="not valid JSON"):
        load_checkpoint(path)
