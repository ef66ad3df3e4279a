import sys
from pathlib import Path
from typing import NamedTuple, Optional

from diffpose.bodymodel import (
    BUILDER_VERSION,
    DEFAULT_VERTICES,
    BodyModel,
    build_default_model,
    load_model,
    save_model,
)
from diffpose.errors import FormatError, InvalidConfig
from diffpose.resolve import body_model_candidates
from diffpose.storage import lock_with_feedback


class ModelConfig(NamedTuple):
    asset: Optional[str] = None
    seed: int = 0
    n_vertices: int = DEFAULT_VERTICES

    def validate(self) -> None:
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise InvalidConfig(f"model.seed must be a nonnegative integer, got {self.seed!r}")
        n = self.n_vertices
        if isinstance(n, bool) or not isinstance(n, int) or n < 120:
            raise InvalidConfig(f"model.n_vertices must be an integer >= 120, got {self.n_vertices!r}")


def ensure_body_model(
    *,
    path: Optional[Path] = None,
    seed: int = 0,
    n_vertices: int = DEFAULT_VERTICES,
    no_write: bool = False,
) -> BodyModel:
    """Ensures that a body-model asset is available and returns it.

    Parameters
    ----------
    path:
        An explicit asset file. It must exist and is never rebuilt.
    seed:
        Seed of the default model to build when no asset is configured.
    n_vertices:
        Vertex count of the default model.
    no_write:
        Build the default model in memory without touching the cache directory.

    Without ``path`` the default model is read from the per-user data directory,
    building it there (under a file lock, so concurrent callers build it once)
    unless a readable copy made by the current builder revision is already there.
    """
    if path is not None:
        return load_model(next(body_model_candidates(seed, n_vertices, path)))
    if no_write:
        return build_default_model(seed, n_vertices)

    for target in body_model_candidates(seed, n_vertices):
        target.parent.mkdir(parents=True, exist_ok=True)
        with lock_with_feedback(f"{target}.build.lock", f"build lock on {target.name}"):
            if target.exists():
                try:
                    cached = load_model(target)
                except (FormatError, OSError) as e:
                    print(f"Rebuilding unreadable body model at {target}: {e}", file=sys.stderr)
                else:
                    expected = (BUILDER_VERSION, seed, n_vertices)
                    if (cached.builder, cached.seed, cached.n_vertices) == expected:
                        return cached
                    print(
                        f"Rebuilding stale body model at {target}: built by builder "
                        f"{cached.builder} with seed {cached.seed}, expected builder "
                        f"{BUILDER_VERSION} with seed {seed}",
                        file=sys.stderr,
                    )
            model = build_default_model(seed, n_vertices)
            save_model(model, target)
            return model
    raise FileNotFoundError("no location available for the body model")  # pragma: no cover


def body_model_for(cfg: ModelConfig, no_write: bool = False) -> BodyModel:
    cfg.validate()
    return ensure_body_model(
        path=Path(cfg.asset) if cfg.asset else None,
        seed=cfg.seed,
        n_vertices=cfg.n_vertices,
        no_write=no_write,
    )
