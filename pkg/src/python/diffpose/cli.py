import sys
from pathlib import Path
from typing import Any, List, NoReturn, Optional, Sequence, Tuple

import click

from diffpose import synthdata
from diffpose.api import body_model_for, ensure_body_model
from diffpose.bodymodel import BodyModel
from diffpose.config import RunConfig, load_run_config
from diffpose.errors import (
    DegenerateInput,
    DiffposeError,
    DimensionMismatch,
    EmptyInput,
    FormatError,
    InvalidConfig,
    InvalidSchedule,
    NonFiniteLoss,
    OutOfRange,
)
from diffpose.evaluation import evaluate
from diffpose.nnet import Checkpoint, PoseNetwork, load_checkpoint
from diffpose.sampling import (
    Sampler,
    occluded_spread,
    plot_rows,
    save_hypotheses,
    visible_reprojection_error,
)
from diffpose.schedule import linear_schedule, schedule_table
from diffpose.storage import write_text
from diffpose.trainer import (
    L_DIFF_DROP_TARGET,
    LossHistory,
    LossReport,
    check_objective_gradients,
    train,
)

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

_EXIT_CODES: Tuple[Tuple[Tuple[type, ...], int], ...] = (
    ((InvalidConfig, InvalidSchedule), EXIT_USAGE),
    ((FormatError, OSError), EXIT_IO),
    ((NonFiniteLoss, DegenerateInput, DimensionMismatch, OutOfRange, EmptyInput), EXIT_NUMERICAL),
)


def _fail(code: int, message: str) -> NoReturn:
    click.echo(f"ERROR:{code}:{' '.join(str(message).split())}", err=True)
    sys.exit(code)


def exit_code_for(error: BaseException) -> int:
    for kinds, code in _EXIT_CODES:
        if isinstance(error, kinds):
            return code
    return 1


class DiffposeGroup(click.Group):
    """Turns every failure into one ``ERROR:<code>:<message>`` line on stderr."""

    def main(self, *args: Any, **kwargs: Any) -> Any:
        kwargs["standalone_mode"] = False
        try:
            rv = super().main(*args, **kwargs)
        except click.exceptions.Exit as e:
            sys.exit(e.exit_code)
        except click.ClickException as e:
            _fail(e.exit_code, e.format_message())
        except click.Abort:
            _fail(1, "aborted")
        except (DiffposeError, OSError) as e:
            _fail(exit_code_for(e), str(e))
        sys.exit(rv if isinstance(rv, int) else 0)


def _override(record: Any, **flags: Any) -> Any:
    """Apply command-line flags that were actually given; they win over the config file."""
    return record._replace(**{k: v for k, v in flags.items() if v is not None})


def _model(cfg: RunConfig, ckpt: Optional[Checkpoint] = None) -> BodyModel:
    if ckpt is not None and not cfg.model.asset:
        info = ckpt.body_model
        return ensure_body_model(seed=int(info["seed"]), n_vertices=int(info["n_vertices"]))
    return body_model_for(cfg.model)


def _int_list(text: str) -> Tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as e:
        raise InvalidConfig(f"--n-list: expected comma-separated integers, got {text!r}") from e
    return values


config_option = click.option(
    "--config",
    "config_path",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="JSON run configuration (flags override its values)",
)
quiet_option = click.option("--quiet", is_flag=True, help="no progress bars")


@click.group(
    cls=DiffposeGroup,
    help="Conditional diffusion over body poses: data, training, sampling, evaluation.",
)
@click.version_option(package_name="diffpose")
def cli() -> None:
    pass


@cli.command("gen-data", help="Generate a synthetic dataset.")
@config_option
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--n-samples", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--occlusion-rate", type=float, default=None)
def gen_data(
    config_path: Optional[Path],
    out: Path,
    n_samples: Optional[int],
    seed: Optional[int],
    occlusion_rate: Optional[float],
) -> None:
    cfg = load_run_config(config_path)
    data_cfg = _override(cfg.dataset, n_samples=n_samples, seed=seed, occlusion_rate=occlusion_rate)
    data_cfg.validate()
    model = body_model_for(cfg.model)
    dataset = synthdata.generate(data_cfg, model)
    synthdata.save(dataset, out)
    stats = synthdata.ambiguity_stats(dataset)
    click.echo(f"samples {stats.samples}")
    click.echo(f"ambiguous_pairs {stats.ambiguous_pairs} (sharing z: {stats.pairs_sharing_z})")
    click.echo(f"occluded_samples {stats.occluded_samples}")
    click.echo(f"occluded_joint_fraction {stats.occluded_fraction:.4f}")


@cli.command("train", help="Train the denoiser and regressor; write a checkpoint directory.")
@config_option
@click.option("--data", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--steps", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--learning-rate", type=float, default=None)
@click.option("--representation", type=click.Choice(["6d", "axis_angle"]), default=None)
@click.option("--eval-every", type=int, default=None, help="print a loss line every N steps")
@click.option("--checkpoint-every", type=int, default=None)
@click.option("--resume", type=click.Path(file_okay=False, path_type=Path), default=None)
def train_cmd(
    config_path: Optional[Path],
    data: Path,
    out: Path,
    steps: Optional[int],
    seed: Optional[int],
    batch_size: Optional[int],
    learning_rate: Optional[float],
    representation: Optional[str],
    eval_every: Optional[int],
    checkpoint_every: Optional[int],
    resume: Optional[Path],
) -> None:
    cfg = load_run_config(config_path)
    train_cfg = _override(
        cfg.train,
        steps=steps,
        seed=seed,
        batch_size=batch_size,
        learning_rate=learning_rate,
        representation=representation,
        eval_every=eval_every,
        checkpoint_every=checkpoint_every,
        checkpoint=str(out),
    )
    train_cfg.validate()
    resumed = load_checkpoint(resume) if resume is not None else None
    model = _model(cfg, resumed)
    dataset = synthdata.load(data, expected_joints=model.n_joints)

    history = LossHistory()

    def progress(report: LossReport) -> None:
        history(report)
        if report.step % train_cfg.eval_every == 0:
            click.echo(report.line())

    ckpt = train(train_cfg, dataset, model, resume=resumed, progress=progress)
    if history.reports:
        first, last = history.smoothed()
        drop = history.relative_drop()
        click.echo(
            f"smoothed L_diff {first:.6f} -> {last:.6f} ({100.0 * drop:.1f}% lower, "
            f"target {100.0 * L_DIFF_DROP_TARGET:.0f}%)"
        )
    click.echo(f"checkpoint {out} at step {ckpt.step}", err=True)


@cli.command("sample", help="Draw n pose hypotheses for one dataset sample.")
@config_option
@click.option("--checkpoint", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--data", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--index", type=int, required=True)
@click.option("--n", "n_hypotheses", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option(
    "--plot",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="plot-data CSV (defaults to OUT with a .plot.csv suffix)",
)
def sample_cmd(
    config_path: Optional[Path],
    checkpoint: Path,
    data: Path,
    index: int,
    n_hypotheses: int,
    seed: int,
    out: Path,
    plot: Optional[Path],
) -> None:
    cfg = load_run_config(config_path)
    if n_hypotheses < 1:
        raise InvalidConfig(f"--n must be >= 1, got {n_hypotheses}")
    if seed < 0:
        raise InvalidConfig(f"--seed must be >= 0, got {seed}")
    ckpt = load_checkpoint(checkpoint)
    model = _model(cfg, ckpt)
    dataset = synthdata.load(data, expected_joints=model.n_joints)
    if not 0 <= index < len(dataset):
        raise InvalidConfig(f"--index {index} out of range for {len(dataset)} samples")
    hyps = Sampler(ckpt, model).draw(dataset, [index], n_hypotheses, seed)[0]
    sample = dataset.sample(index)
    save_hypotheses(hyps, out)
    plot = plot if plot is not None else out.with_name(out.name + ".plot.csv")
    write_text(plot, "\n".join(plot_rows(hyps, sample.occlusion_mask)) + "\n")
    click.echo(f"hypotheses {n_hypotheses}")
    click.echo(f"occluded_joints {int((sample.occlusion_mask < 0.5).sum())}")
    click.echo(f"occluded_spread_rad {occluded_spread(hyps, sample.occlusion_mask):.6f}")
    reprojection = visible_reprojection_error(hyps, sample.keypoints2d, sample.occlusion_mask)
    click.echo(f"visible_reprojection_error {reprojection:.6f}")


@cli.command("eval", help="Min-of-n MPJPE / PA-MPJPE / PVE table as CSV.")
@config_option
@quiet_option
@click.option("--checkpoint", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--data", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option(
    "--n-list", type=str, default=None, help='comma-separated hypothesis counts, e.g. "1,5,10,25"'
)
@click.option("--seed", type=int, default=None)
@click.option("--limit", type=int, default=None, help="evaluate only the first N samples")
@click.option("--workers", type=int, default=None)
@click.option("--subset", "subsets", multiple=True, type=click.Choice(["all", "occluded", "ambiguous"]))
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None)
def eval_cmd(
    config_path: Optional[Path],
    quiet: bool,
    checkpoint: Path,
    data: Path,
    n_list: Optional[str],
    seed: Optional[int],
    limit: Optional[int],
    workers: Optional[int],
    subsets: Sequence[str],
    out: Optional[Path],
) -> None:
    cfg = load_run_config(config_path)
    eval_cfg = _override(
        cfg.eval,
        n_list=_int_list(n_list) if n_list is not None else None,
        seed=seed,
        limit=limit,
        workers=workers,
        subsets=tuple(subsets) or None,
        quiet=quiet or None,
    )
    eval_cfg.validate()
    ckpt = load_checkpoint(checkpoint)
    model = _model(cfg, ckpt)
    dataset = synthdata.load(data, expected_joints=model.n_joints)
    table = evaluate(ckpt, dataset, model, eval_cfg)
    if out is not None:
        write_text(out, table.to_csv())
    click.echo(table.to_csv(), nl=False)


@cli.command(
    "gradcheck", help="Compare analytic and finite-difference gradients of the training objective."
)
@click.option("--width", type=int, default=None)
@click.option("--blocks", type=int, default=None)
@click.option("--time-dim", type=int, default=None)
@click.option("--regressor-width", type=int, default=None)
@click.option("--representation", type=click.Choice(["6d", "axis_angle"]), default=None)
@click.option("--batch", type=int, default=4, show_default=True)
@click.option("--n-random", type=int, default=200, show_default=True)
@click.option("--fd-step", type=float, default=1e-4, show_default=True)
@click.option("--tol", type=float, default=1e-3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@config_option
def gradcheck_cmd(
    width: Optional[int],
    blocks: Optional[int],
    time_dim: Optional[int],
    regressor_width: Optional[int],
    representation: Optional[str],
    batch: int,
    n_random: int,
    fd_step: float,
    tol: float,
    seed: int,
    config_path: Optional[Path],
) -> None:
    cfg = load_run_config(config_path)
    train_cfg = _override(
        cfg.train,
        width=width,
        blocks=blocks,
        time_dim=time_dim,
        regressor_width=regressor_width,
        representation=representation,
    )
    train_cfg.validate()
    if batch < 1 or n_random < 0 or fd_step <= 0 or seed < 0:
        raise InvalidConfig("--batch must be >= 1, --n-random >= 0, --fd-step > 0 and --seed >= 0")
    model = ensure_body_model(seed=cfg.model.seed, n_vertices=cfg.model.n_vertices, no_write=True)
    dataset = synthdata.generate(synthdata.DatasetConfig(n_samples=batch, seed=seed), model)
    network = PoseNetwork(train_cfg.arch(model.n_joints))
    report = check_objective_gradients(
        network,
        model,
        dataset,
        train_cfg.schedule(),
        train_cfg.representation,
        seed=seed,
        n_random=n_random,
        fd_step=fd_step,
        tol=tol,
    )
    click.echo(f"denoiser params {network.denoiser_param_count()}")
    click.echo(f"total params {network.n_params}")
    click.echo(f"checked {report.n_checked}")
    click.echo(f"max rel err {report.max_rel_error:.3e} ({report.worst})")
    if report.failures:
        _fail(EXIT_NUMERICAL, f"{len(report.failures)} gradient entries exceed tolerance {tol}")


@cli.command("schedule-dump", help="Print the noise schedule table as CSV.")
@config_option
@click.option("--T", "T", type=int, default=None)
@click.option("--beta-start", type=float, default=None)
@click.option("--beta-end", type=float, default=None)
def schedule_dump(
    config_path: Optional[Path],
    T: Optional[int],
    beta_start: Optional[float],
    beta_end: Optional[float],
) -> None:
    cfg = load_run_config(config_path)
    train_cfg = _override(cfg.train, T=T, beta_start=beta_start, beta_end=beta_end)
    rows: List[str] = ["t,beta,alpha,alpha_bar,posterior_variance,snr"]
    for r in schedule_table(linear_schedule(train_cfg.T, train_cfg.beta_start, train_cfg.beta_end)):
        values = (r.beta, r.alpha, r.alpha_bar, r.posterior_variance, r.snr)
        rows.append(",".join([str(r.t)] + [f"{v:.10g}" for v in values]))
    click.echo("\n".join(rows))


def main() -> None:
    cli.main(prog_name="diffpose")


if __name__ == "__main__":
    main()
