import os
import pathlib
from typing import Any, Tuple

import pytest

from diffpose.bodymodel import BodyModel, build_default_model
from diffpose.nnet import Checkpoint
from diffpose.synthdata import Dataset, DatasetConfig, generate
from diffpose.trainer import LossHistory, TrainConfig, train


@pytest.fixture(autouse=True)
def user_data_dir(tmp_path: pathlib.Path, monkeypatch: pytest.MonkeyPatch) -> pathlib.Path:
    """Keep cached body models out of the real per-user data directory."""
    import appdirs

    cache = tmp_path / "user-data"

    def fake_user_data_dir(*args: Any, **kwargs: Any) -> str:
        return str(cache)

    monkeypatch.setattr(appdirs, "user_data_dir", fake_user_data_dir)
    return cache


@pytest.fixture(scope="session")
def run_slow() -> bool:
    return os.environ.get("DIFFPOSE_RUN_SLOW") is not None


@pytest.fixture(scope="session")
def body_model() -> BodyModel:
    return build_default_model(seed=0)


@pytest.fixture(scope="session")
def small_dataset(body_model: BodyModel) -> Dataset:
    return generate(DatasetConfig(n_samples=40, seed=1), body_model)


@pytest.fixture(scope="session")
def tiny_train_config() -> TrainConfig:
    """A network small enough to train for a handful of steps in a unit test."""
    return TrainConfig(
        T=10,
        beta_start=0.01,
        beta_end=0.5,
        batch_size=8,
        steps=6,
        learning_rate=1e-2,
        eval_every=1,
        width=16,
        blocks=1,
        time_dim=8,
        regressor_width=8,
    )


@pytest.fixture(scope="session")
def trained(tiny_train_config: TrainConfig, small_dataset: Dataset, body_model: BodyModel) -> Checkpoint:
    return train(tiny_train_config, small_dataset, body_model)


# Desk-scale training runs. These take tens of minutes each.


@pytest.fixture(scope="session")
def desk_training(run_slow: bool, body_model: BodyModel) -> Tuple[Checkpoint, LossHistory]:
    if not run_slow:
        raise pytest.skip("DIFFPOSE_RUN_SLOW not set")
    history = LossHistory()
    dataset = generate(DatasetConfig(), body_model)
    return train(TrainConfig(), dataset, body_model, progress=history), history


@pytest.fixture(scope="session")
def desk_run(desk_training: Tuple[Checkpoint, LossHistory]) -> Checkpoint:
    return desk_training[0]


@pytest.fixture(scope="session")
def validation_set(body_model: BodyModel) -> Dataset:
    return generate(DatasetConfig(n_samples=500, seed=1), body_model)
