import pathlib

import numpy as np
import pytest

from diffpose.bodymodel import BodyModel, build_default_model
from diffpose.errors import FormatError, InvalidConfig
from diffpose.nnet import Checkpoint
from diffpose.rotmath import axisangle_to_rotmat, rotmat_to_sixd
from diffpose.sampling import (
    HYPOTHESES_KIND,
    Hypotheses,
    Sampler,
    occluded_spread,
    plot_rows,
    save_hypotheses,
    visible_reprojection_error,
)
from diffpose.synthdata import Dataset, read_container


def test_sampler_shapes_and_checks(
    trained: Checkpoint, small_dataset: Dataset, body_model: BodyModel
) -> None:
    sampler = Sampler(trained, body_model)
    hyps = sampler.draw(small_dataset, [3, 7], 5, seed=0)
    assert [h.index for h in hyps] == [3, 7]
    assert hyps[0].theta.shape == (5, 144)
    assert hyps[0].vertices.shape == (5, 200, 3)
    assert hyps[0].joints2d.shape == (5, 24, 2)
    again = sampler.draw(small_dataset, [7], 5, seed=0)[0]
    np.testing.assert_allclose(again.theta, hyps[1].theta, rtol=1e-10, atol=1e-12)
    with pytest.raises(InvalidConfig):
        sampler.draw(small_dataset, [0], 0, seed=0)
    with pytest.raises(FormatError, match="body_model"):
        Sampler(trained, build_default_model(seed=1))


def _two_hypotheses(angle: float) -> Hypotheses:
    theta = np.tile(rotmat_to_sixd(np.eye(3)), (2, 24))
    theta[1, 5 * 6 : 6 * 6] = rotmat_to_sixd(axisangle_to_rotmat(np.array([0.0, 0.0, angle])))
    joints2d = np.zeros((2, 24, 2))
    return Hypotheses(
        index=0,
        seed=0,
        representation="6d",
        theta=theta,
        beta=np.zeros(10),
        cam=np.array([1.0, 0.0, 0.0]),
        vertices=np.zeros((2, 200, 3)),
        joints3d=np.zeros((2, 24, 3)),
        joints2d=joints2d,
    )


def test_occluded_spread() -> None:
    hyps = _two_hypotheses(0.5)
    mask = np.ones(24)
    assert occluded_spread(hyps, mask) == 0.0
    mask[5] = 0.0
    assert occluded_spread(hyps, mask) == pytest.approx(0.5)
    single = hyps._replace(theta=hyps.theta[:1])
    assert occluded_spread(single, mask) == 0.0


def test_visible_reprojection_error() -> None:
    hyps = _two_hypotheses(0.0)
    keypoints = np.zeros((24, 2))
    mask = np.ones(24)
    mask[:4] = 0.0
    joints2d = np.zeros((2, 24, 2))
    joints2d[:, 4:] = [3.0, 4.0]
    joints2d[:, :4] = 100.0
    moved = hyps._replace(joints2d=joints2d)
    assert visible_reprojection_error(moved, keypoints, mask) == pytest.approx(5.0)
    assert visible_reprojection_error(hyps, keypoints, np.zeros(24)) == 0.0


def test_plot_rows_and_saved_hypotheses(
    tmp_path: pathlib.Path, trained: Checkpoint, small_dataset: Dataset, body_model: BodyModel
) -> None:
    hyps = Sampler(trained, body_model).draw(small_dataset, [2], 3, seed=4)[0]
    mask = small_dataset.occlusion_mask[2]
    rows = plot_rows(hyps, mask)
    assert rows[0] == "hypothesis,joint,x,y,z,u,v,visible"
    assert len(rows) == 1 + 3 * 24
    assert rows[1 + 5].split(",")[-1] == str(int(mask[5] > 0.5))

    path = save_hypotheses(hyps, tmp_path / "hyps.dpds")
    header, columns, tags = read_container(path, HYPOTHESES_KIND)
    assert header["index"] == 2 and header["seed"] == 4
    np.testing.assert_allclose(columns["joints3d"], hyps.joints3d, rtol=1e-6, atol=1e-6)
    np.testing.assert_array_equal(tags["hypothesis"], [0, 1, 2])
    first = path.read_bytes()
    save_hypotheses(hyps, path)
    assert path.read_bytes() == first


@pytest.mark.slow
def test_hypotheses_spread_over_hidden_joints(
    desk_run: Checkpoint, validation_set: Dataset, body_model: BodyModel
) -> None:
    sampler = Sampler(desk_run, body_model)
    ambiguous = validation_set.subset("ambiguous")
    assert len(ambiguous) > 0
    i = int(ambiguous[0])
    hyps = sampler.draw(validation_set, [i], 25, seed=0)[0]
    mask = validation_set.occlusion_mask[i]
    assert occluded_spread(hyps, mask) > 0.1

    keypoints, masks = validation_set.keypoints2d, validation_set.occlusion_mask
    baseline = [
        visible_reprojection_error(h, keypoints[h.index], masks[h.index])
        for h in sampler.draw(validation_set, list(range(50)), 1, seed=0)
    ]
    assert visible_reprojection_error(hyps, validation_set.keypoints2d[i], mask) < np.mean(baseline)
