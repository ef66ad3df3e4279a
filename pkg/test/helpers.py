from typing import Callable

import numpy as np

from diffpose.arrays import FloatArray
from diffpose.bodymodel import BodyModel


def chain_model() -> BodyModel:
    """Three joints on the x axis, one vertex sitting on each joint."""
    joints = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    return BodyModel(
        parents=np.array([-1, 0, 1], dtype=np.int64),
        rest_joints=joints.copy(),
        template=joints.copy(),
        skin_weights=np.eye(3),
        shape_dirs=np.zeros((3, 3, 2)),
        joint_regressor=np.eye(3),
    )


def random_sixd(rng: np.random.Generator, *shape: int) -> FloatArray:
    out: FloatArray = rng.standard_normal(shape + (6,))
    return out


def numeric_grad(f: Callable[[FloatArray], float], x: FloatArray, step: float = 1e-6) -> FloatArray:
    """Central finite differences of a scalar function over every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        plus = f(x)
        flat[i] = keep - step
        minus = f(x)
        flat[i] = keep
        out[i] = (plus - minus) / (2.0 * step)
    return grad
