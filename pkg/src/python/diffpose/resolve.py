import pathlib
from pathlib import Path
from typing import Iterator, Optional

import appdirs


def site_path() -> pathlib.Path:
    return pathlib.Path(appdirs.user_data_dir("diffpose"))


def body_model_filename(seed: int, n_vertices: int) -> str:
    return f"body-model-s{seed}-v{n_vertices}.json"


def body_model_candidates(seed: int, n_vertices: int, path: Optional[Path] = None) -> Iterator[Path]:
    """Where a body-model asset is looked up, in order.

    An explicitly configured asset wins; otherwise the seed-addressed file in the
    per-user data directory.
    """
    if path is not None:
        yield Path(path)
        return
    yield site_path() / body_model_filename(seed, n_vertices)
