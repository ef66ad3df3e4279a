from test.helpers import numeric_grad, random_sixd

import numpy as np
import pytest

from diffpose.arrays import make_rng
from diffpose.errors import DegenerateInput, DimensionMismatch
from diffpose.rotmath import (
    axisangle_to_rotmat,
    axisangle_to_rotmat_vjp,
    canonical_axisangle,
    euler_to_rotmat,
    geodesic_distance,
    pose_to_rotmats,
    representation_width,
    rotmat_to_axisangle,
    rotmat_to_sixd,
    rotmats_to_pose,
    sixd_to_rotmat,
    sixd_to_rotmat_vjp,
)

RZ90 = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


@pytest.mark.parametrize("r6", [(1, 0, 0, 0, 1, 0), (2, 0, 0, 0, 3, 0), (5, 0, 0, 7, 0.5, 0)])
def test_sixd_identity_cases(r6: tuple) -> None:
    np.testing.assert_allclose(sixd_to_rotmat(np.array(r6, dtype=np.float64)), np.eye(3), atol=1e-12)


def test_random_sixd_draws_are_rotations() -> None:
    rot = sixd_to_rotmat(random_sixd(make_rng(0), 10_000))
    gram = np.swapaxes(rot, -1, -2) @ rot - np.eye(3)
    assert np.abs(gram).max() < 1e-6
    assert np.abs(np.linalg.det(rot) - 1.0).max() < 1e-6
    np.testing.assert_allclose(sixd_to_rotmat(rotmat_to_sixd(rot)), rot, atol=1e-6)


def test_sixd_of_known_rotations() -> None:
    np.testing.assert_array_equal(rotmat_to_sixd(np.eye(3)), [1, 0, 0, 0, 1, 0])
    np.testing.assert_array_equal(rotmat_to_sixd(RZ90), [0, 1, 0, -1, 0, 0])


@pytest.mark.parametrize(
    "r6",
    [(0, 0, 0, 0, 1, 0), (1, 0, 0, 2, 0, 0), (1e-9, 0, 0, 0, 1, 0)],
    ids=["zero-first-column", "parallel-columns", "tiny-first-column"],
)
def test_degenerate_sixd(r6: tuple) -> None:
    with pytest.raises(DegenerateInput):
        sixd_to_rotmat(np.array(r6, dtype=np.float64))


def test_shape_errors() -> None:
    with pytest.raises(DimensionMismatch):
        sixd_to_rotmat(np.zeros(5))
    with pytest.raises(DimensionMismatch):
        axisangle_to_rotmat(np.zeros(4))
    with pytest.raises(DimensionMismatch):
        rotmat_to_sixd(np.zeros((3, 2)))
    with pytest.raises(DimensionMismatch):
        representation_width("quaternion")


def test_rodrigues() -> None:
    np.testing.assert_array_equal(axisangle_to_rotmat(np.zeros(3)), np.eye(3))
    np.testing.assert_allclose(axisangle_to_rotmat(np.array([0.0, 0.0, np.pi / 2])), RZ90, atol=1e-12)


def test_rodrigues_periodicity() -> None:
    rng = make_rng(3)
    for v in rng.standard_normal((50, 3)):
        wrapped = v * (1.0 + 2.0 * np.pi / np.linalg.norm(v))
        np.testing.assert_allclose(axisangle_to_rotmat(wrapped), axisangle_to_rotmat(v), atol=1e-9)


def test_rodrigues_small_angles_are_smooth() -> None:
    v = np.array([1e-5, -2e-5, 3e-6])
    rot = axisangle_to_rotmat(v)
    # first order: I + [v]x
    np.testing.assert_allclose(rot[0, 1], -v[2], atol=1e-12)
    np.testing.assert_allclose(rot[2, 1], v[0], atol=1e-12)


def test_axisangle_round_trip_is_canonical() -> None:
    rng = make_rng(4)
    rot = sixd_to_rotmat(random_sixd(rng, 500))
    v = rotmat_to_axisangle(rot)
    assert np.linalg.norm(v, axis=-1).max() <= np.pi + 1e-12
    np.testing.assert_allclose(axisangle_to_rotmat(v), rot, atol=1e-9)


@pytest.mark.parametrize("angle", [np.pi, np.pi - 1e-7, np.pi - 1e-3])
def test_axisangle_near_pi(angle: float) -> None:
    axis = np.array([1.0, 2.0, -2.0]) / 3.0
    rot = axisangle_to_rotmat(angle * axis)
    recovered = rotmat_to_axisangle(rot)
    np.testing.assert_allclose(axisangle_to_rotmat(recovered), rot, atol=1e-6)
    np.testing.assert_allclose(np.linalg.norm(recovered), angle, atol=1e-6)


def test_canonical_axisangle_wraps_long_vectors() -> None:
    v = np.array([0.0, 0.0, 1.5 * np.pi])
    np.testing.assert_allclose(canonical_axisangle(v), [0.0, 0.0, -0.5 * np.pi], atol=1e-12)


def test_geodesic_distance() -> None:
    rng = make_rng(5)
    rot = sixd_to_rotmat(random_sixd(rng, 1000, 3))
    a, b, c = rot[:, 0], rot[:, 1], rot[:, 2]
    np.testing.assert_allclose(geodesic_distance(a, a), 0.0, atol=1e-7)
    np.testing.assert_allclose(geodesic_distance(np.eye(3), RZ90), np.pi / 2, atol=1e-12)
    assert np.all(geodesic_distance(a, c) <= geodesic_distance(a, b) + geodesic_distance(b, c) + 1e-9)
    np.testing.assert_allclose(geodesic_distance(a, b), geodesic_distance(b, a), atol=1e-12)


def test_sixd_vjp_matches_finite_differences() -> None:
    rng = make_rng(6)
    r = random_sixd(rng, 3)
    upstream = rng.standard_normal((3, 3, 3))
    analytic = sixd_to_rotmat_vjp(r, upstream)
    numeric = numeric_grad(lambda x: float(np.sum(sixd_to_rotmat(x) * upstream)), r)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("scale", [1e-6, 1e-3, 0.5, 3.0])
def test_axisangle_vjp_matches_finite_differences(scale: float) -> None:
    rng = make_rng(7)
    v = scale * rng.standard_normal((4, 3)) / np.sqrt(3.0)
    upstream = rng.standard_normal((4, 3, 3))
    analytic = axisangle_to_rotmat_vjp(v, upstream)
    numeric = numeric_grad(lambda x: float(np.sum(axisangle_to_rotmat(x) * upstream)), v, step=1e-7)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-6)


def test_euler_composition_order() -> None:
    angles = np.array([0.3, -0.2, 0.7])
    eye = np.eye(3)
    rx, ry, rz = (axisangle_to_rotmat(a * e) for a, e in zip(angles, eye))
    np.testing.assert_allclose(euler_to_rotmat(angles), rz @ ry @ rx, atol=1e-12)


@pytest.mark.parametrize("representation", ["6d", "axis_angle"])
def test_pose_round_trip(representation: str) -> None:
    rot = sixd_to_rotmat(random_sixd(make_rng(8), 2, 24))
    theta = rotmats_to_pose(rot, representation)
    assert theta.shape == (2, 24 * representation_width(representation))
    np.testing.assert_allclose(pose_to_rotmats(theta, representation), rot, atol=1e-9)
