"""The JSON run-configuration file shared by every command.

Sections ``dataset``, ``train``, ``model`` and ``eval`` mirror the matching
configuration records; every key is optional and unknown keys are rejected.
"""
import json
from pathlib import Path
from typing import Any, Dict, NamedTuple, Optional, Type, TypeVar

from diffpose.api import ModelConfig
from diffpose.errors import InvalidConfig
from diffpose.evaluation import EvalConfig
from diffpose.synthdata import DatasetConfig
from diffpose.trainer import TrainConfig

R = TypeVar("R", ModelConfig, TrainConfig, EvalConfig)


class RunConfig(NamedTuple):
    dataset: DatasetConfig = DatasetConfig()
    train: TrainConfig = TrainConfig()
    model: ModelConfig = ModelConfig()
    eval: EvalConfig = EvalConfig()

    def validate(self) -> None:
        self.dataset.validate()
        self.train.validate()
        self.model.validate()
        self.eval.validate()


def _section(cls: Type[R], name: str, doc: Dict[str, Any]) -> R:
    if not isinstance(doc, dict):
        raise InvalidConfig(f"{name}: expected an object, got {type(doc).__name__}")
    unknown = sorted(set(doc) - set(cls._fields))
    if unknown:
        raise InvalidConfig(f"{name}.{unknown[0]}: unknown key")
    values = dict(doc)
    for key in ("n_list", "subsets"):
        if key in values and isinstance(values[key], list):
            values[key] = tuple(values[key])
    return cls(**values)


def parse_run_config(doc: Any) -> RunConfig:
    if not isinstance(doc, dict):
        raise InvalidConfig(f"config: expected a JSON object, got {type(doc).__name__}")
    unknown = sorted(set(doc) - set(RunConfig._fields))
    if unknown:
        raise InvalidConfig(f"{unknown[0]}: unknown section")
    dataset = doc.get("dataset", {})
    if not isinstance(dataset, dict):
        raise InvalidConfig(f"dataset: expected an object, got {type(dataset).__name__}")
    cfg = RunConfig(
        dataset=DatasetConfig.from_json(dataset),
        train=_section(TrainConfig, "train", doc.get("train", {})),
        model=_section(ModelConfig, "model", doc.get("model", {})),
        eval=_section(EvalConfig, "eval", doc.get("eval", {})),
    )
    try:
        cfg.validate()
    except TypeError as e:
        raise InvalidConfig(f"config: value of the wrong type ({e})") from e
    return cfg


def load_run_config(path: Optional[Path]) -> RunConfig:
    """Parse and validate ``path``; ``None`` yields the defaults."""
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise InvalidConfig(f"{path}: not valid JSON ({e})") from e
    return parse_run_config(doc)
