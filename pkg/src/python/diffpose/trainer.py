"""Training of the pose network.

One training step draws, per example, a timestep ``t`` and noise ``eps``, noises
the ground-truth pose in closed form, asks the denoiser for ``eps_hat``, deduces
``theta_hat_0`` from it and supervises both the noise estimate (``L_diff``) and
the body reconstructed from ``theta_hat_0`` and the regressed shape and camera
(``L_hmr``). All randomness of step ``k`` comes from ``make_rng(seed, STEP_STREAM, k)``,
which is what makes resumed runs continue bit-for-bit.
"""
from pathlib import Path
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from diffpose.arrays import FloatArray, IntArray, make_rng, to_f32_grid
from diffpose.bodymodel import BodyModel, content_digest
from diffpose.diffusion import forward_sample, predict_x0, predict_x0_coefficient
from diffpose.errors import DimensionMismatch, FormatError, InvalidConfig, NonFiniteLoss
from diffpose.losses import (
    HmrTarget,
    LossWeights,
    diffusion_loss,
    diffusion_loss_grad,
    hmr_loss_and_grad,
    target_from_samples,
)
from diffpose.nnet import (
    DEFAULT_BLOCKS,
    DEFAULT_REGRESSOR_WIDTH,
    DEFAULT_TIME_DIM,
    DEFAULT_WIDTH,
    Checkpoint,
    GradcheckReport,
    NetworkArch,
    PoseNetwork,
    gradcheck,
    save_checkpoint,
)
from diffpose.rotmath import REPRESENTATION_DIMS
from diffpose.schedule import DESK_BETA_END, DESK_BETA_START, DESK_T, NoiseSchedule, linear_schedule
from diffpose.synthdata import Dataset, cond_dim

STEP_STREAM = 0x7EA1
GRADCHECK_STREAM = 0x9C
SMOOTHING_WINDOW = 100
# A default desk-scale run must end with its smoothed L_diff at least this much
# below where it started.
L_DIFF_DROP_TARGET = 0.5

ProgressCallback = Callable[["LossReport"], None]


class AdamConfig(NamedTuple):
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class OptimizerState(NamedTuple):
    m: FloatArray
    v: FloatArray
    step: int

    @classmethod
    def zeros(cls, n: int) -> "OptimizerState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_update(
    params: FloatArray,
    grads: FloatArray,
    state: OptimizerState,
    learning_rate: float,
    adam: AdamConfig = AdamConfig(),
) -> Tuple[FloatArray, OptimizerState]:
    """One bias-corrected Adam step; the result is rounded onto the float32 grid."""
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise DimensionMismatch(
            f"adam_update: params {params.shape}, grads {grads.shape}, moments {state.m.shape}"
        )
    step = state.step + 1
    m = adam.beta1 * state.m + (1.0 - adam.beta1) * grads
    v = adam.beta2 * state.v + (1.0 - adam.beta2) * grads**2
    m_hat = m / (1.0 - adam.beta1**step)
    v_hat = v / (1.0 - adam.beta2**step)
    updated = to_f32_grid(params - learning_rate * m_hat / (np.sqrt(v_hat) + adam.eps))
    return updated, OptimizerState(m, v, step)


class TrainConfig(NamedTuple):
    """Settings of one training run.

    The schedule defaults to the desk-scale one (``T = 100``, betas from 1e-3 to
    0.2), not the 1000-step 1e-4..0.02 schedule that ``linear_schedule`` falls
    back to; see ``DESK_T`` in :mod:`diffpose.schedule`. ``schedule-dump`` and
    ``train`` both start from these values.
    """

    T: int = DESK_T
    beta_start: float = DESK_BETA_START
    beta_end: float = DESK_BETA_END
    batch_size: int = 64
    steps: int = 20000
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    w_pose: float = 1.0
    w_j3d: float = 1.0
    w_j2d: float = 1.0
    w_beta: float = 0.1
    seed: int = 0
    eval_every: int = 500
    checkpoint_every: int = 0
    checkpoint: Optional[str] = None
    representation: str = "6d"
    alpha_bar_weighting: bool = False
    width: int = DEFAULT_WIDTH
    blocks: int = DEFAULT_BLOCKS
    time_dim: int = DEFAULT_TIME_DIM
    regressor_width: int = DEFAULT_REGRESSOR_WIDTH

    @property
    def adam(self) -> AdamConfig:
        return AdamConfig(self.adam_beta1, self.adam_beta2, self.adam_eps)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_pose, self.w_j3d, self.w_j2d, self.w_beta)

    def schedule(self) -> NoiseSchedule:
        return linear_schedule(self.T, self.beta_start, self.beta_end)

    def arch(self, n_joints: int) -> NetworkArch:
        return NetworkArch(
            pose_dim=REPRESENTATION_DIMS[self.representation] * n_joints,
            cond_dim=cond_dim(n_joints),
            time_dim=self.time_dim,
            width=self.width,
            blocks=self.blocks,
            regressor_width=self.regressor_width,
        )

    def validate(self) -> None:
        counts = {
            "batch_size": 1,
            "steps": 0,
            "seed": 0,
            "eval_every": 1,
            "checkpoint_every": 0,
            "width": 1,
            "blocks": 0,
            "time_dim": 2,
            "regressor_width": 1,
        }
        for field, minimum in counts.items():
            value = getattr(self, field)
            if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
                raise InvalidConfig(f"train.{field} must be an integer >= {minimum}, got {value!r}")
        if not (np.isfinite(self.learning_rate) and self.learning_rate >= 0.0):
            raise InvalidConfig(
                f"train.learning_rate must be a nonnegative number, got {self.learning_rate!r}"
            )
        for field in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, field) < 1.0:
                raise InvalidConfig(f"train.{field} must be in [0, 1), got {getattr(self, field)!r}")
        if not self.adam_eps > 0.0:
            raise InvalidConfig(f"train.adam_eps must be positive, got {self.adam_eps!r}")
        if self.representation not in REPRESENTATION_DIMS:
            raise InvalidConfig(
                f"train.representation must be one of {sorted(REPRESENTATION_DIMS)}, "
                f"got {self.representation!r}"
            )
        self.weights.validate()
        self.schedule()

    def to_json(self) -> Dict[str, Any]:
        """Settings recorded in checkpoints; the output location is not part of a run's identity."""
        doc = self._asdict()
        del doc["checkpoint"]
        return doc


class LossReport(NamedTuple):
    step: int
    l_diff: float
    l_pose: float
    l_j3d: float
    l_j2d: float
    l_beta: float
    l_hmr: float
    l_all: float

    def line(self) -> str:
        return (
            f"step {self.step} L_diff {self.l_diff:.6f} L_hmr {self.l_hmr:.6f} L_all {self.l_all:.6f}"
        )


class Batch(NamedTuple):
    x0: FloatArray
    z: FloatArray
    target: HmrTarget


class TrainingData:
    """Dataset rows in the trained representation, with ground-truth joints precomputed."""

    def __init__(self, dataset: Dataset, model: BodyModel, representation: str) -> None:
        if dataset.n_joints != model.n_joints:
            raise DimensionMismatch(
                f"dataset has {dataset.n_joints} joints, body model has {model.n_joints}"
            )
        self.target = target_from_samples(
            model,
            dataset.theta0,
            dataset.beta,
            dataset.keypoints2d,
            dataset.occlusion_mask,
            representation,
        )
        self.z = dataset.z

    def __len__(self) -> int:
        return int(self.z.shape[0])

    def rows(self, idx: IntArray) -> Batch:
        target = HmrTarget(*(a[idx] for a in self.target))
        return Batch(target.theta0, self.z[idx], target)

    def batch(self, rng: np.random.Generator, size: int) -> Batch:
        return self.rows(rng.integers(0, len(self), size=size))


class Objective:
    """``L_all = L_diff + L_hmr`` and its gradient for fixed timesteps and noise.

    With ``alpha_bar_weighting`` each example's ``L_hmr`` is scaled by its
    ``alpha_bar_t``, damping the x0 estimates taken from the noisiest steps.
    """

    def __init__(
        self,
        network: PoseNetwork,
        model: BodyModel,
        schedule: NoiseSchedule,
        representation: str = "6d",
        weights: LossWeights = LossWeights(),
        alpha_bar_weighting: bool = False,
    ) -> None:
        self.network = network
        self.model = model
        self.schedule = schedule
        self.representation = representation
        self.weights = weights
        self.alpha_bar_weighting = alpha_bar_weighting

    def loss_and_grad(
        self, params: FloatArray, batch: Batch, t: IntArray, eps: FloatArray, step: int = 0
    ) -> Tuple[LossReport, FloatArray]:
        net, manifest, s = self.network, self.network.manifest, self.schedule
        manifest.check(params)
        x_t = forward_sample(batch.x0, t, eps, s)
        eps_hat, cache = net.denoiser.forward(params, manifest, x_t, t, batch.z)
        l_diff = diffusion_loss(eps, eps_hat)
        theta0_hat = predict_x0(x_t, t, eps_hat, s)
        beta_hat, cam_hat, regressor_cache = net.regressor.forward(params, manifest, batch.z)
        sample_weights = s.alpha_bars[t - 1] if self.alpha_bar_weighting else None
        terms, hmr_grads = hmr_loss_and_grad(
            theta0_hat,
            beta_hat,
            cam_hat,
            batch.target,
            self.model,
            self.weights,
            self.representation,
            sample_weights,
        )
        report = LossReport(
            step=step,
            l_diff=l_diff,
            l_pose=terms.pose,
            l_j3d=terms.j3d,
            l_j2d=terms.j2d,
            l_beta=terms.beta,
            l_hmr=terms.total,
            l_all=l_diff + terms.total,
        )

        d_eps_hat = diffusion_loss_grad(eps, eps_hat)
        d_eps_hat += predict_x0_coefficient(t, s)[:, None] * hmr_grads.theta0
        grads = np.zeros(manifest.size)
        net.denoiser.backward(params, manifest, cache, d_eps_hat, grads)
        net.regressor.backward(params, manifest, regressor_cache, hmr_grads.beta, hmr_grads.cam, grads)
        return report, grads


def draw_noise(
    rng: np.random.Generator, schedule: NoiseSchedule, batch: int, dim: int
) -> Tuple[IntArray, FloatArray]:
    """Per-example timesteps (uniform over ``1..T``) and injected noise."""
    t = rng.integers(1, schedule.T + 1, size=batch)
    return t, rng.standard_normal((batch, dim))


def train_step(
    params: FloatArray,
    state: OptimizerState,
    batch: Batch,
    objective: Objective,
    rng: np.random.Generator,
    learning_rate: float,
    adam: AdamConfig = AdamConfig(),
) -> Tuple[FloatArray, OptimizerState, LossReport]:
    if batch.x0.shape[1] != objective.network.arch.pose_dim:
        raise DimensionMismatch(
            f"batch poses have {batch.x0.shape[1]} entries, "
            f"network expects {objective.network.arch.pose_dim}"
        )
    step = state.step + 1
    t, eps = draw_noise(rng, objective.schedule, batch.x0.shape[0], batch.x0.shape[1])
    report, grads = objective.loss_and_grad(params, batch, t, eps, step)
    if not (np.isfinite(report.l_all) and np.all(np.isfinite(grads))):
        raise NonFiniteLoss(
            f"non-finite loss at step {step}: L_diff={report.l_diff} L_hmr={report.l_hmr} "
            f"(pose={report.l_pose} j3d={report.l_j3d} j2d={report.l_j2d} beta={report.l_beta})",
            step,
        )
    params, state = adam_update(params, grads, state, learning_rate, adam)
    return params, state, report


def body_model_ref(model: BodyModel) -> Dict[str, Any]:
    return {
        "seed": model.seed,
        "n_joints": model.n_joints,
        "n_vertices": model.n_vertices,
        "sha256": content_digest(model),
    }


def _check_resume(cfg: TrainConfig, ckpt: Checkpoint, arch: NetworkArch, model: BodyModel) -> None:
    if ckpt.moments is None:
        raise FormatError("optimizer: checkpoint has no optimizer state to resume from")
    if ckpt.arch != arch:
        raise InvalidConfig(f"train: architecture {arch} differs from the checkpoint's {ckpt.arch}")
    if ckpt.representation != cfg.representation:
        raise InvalidConfig(
            f"train.representation: {cfg.representation!r} differs from "
            f"the checkpoint's {ckpt.representation!r}"
        )
    if ckpt.schedule != schedule_json(cfg.schedule()):
        raise InvalidConfig("train.T/beta_start/beta_end: schedule differs from the checkpoint's")
    if ckpt.body_model != body_model_ref(model):
        raise FormatError("body_model: checkpoint was trained with a different body model")
    if ckpt.step > cfg.steps:
        raise InvalidConfig(f"train.steps: {cfg.steps} is below the checkpoint's step {ckpt.step}")


def schedule_json(s: NoiseSchedule) -> Dict[str, Any]:
    return {"T": s.T, "beta_start": s.beta_start, "beta_end": s.beta_end}


def train(
    cfg: TrainConfig,
    dataset: Dataset,
    model: BodyModel,
    *,
    resume: Optional[Checkpoint] = None,
    progress: Optional[ProgressCallback] = None,
) -> Checkpoint:
    """Run ``cfg.steps`` optimizer steps in total and return the final checkpoint.

    The checkpoint is also written to ``cfg.checkpoint`` when set, and every
    ``cfg.checkpoint_every`` steps along the way.
    """
    cfg.validate()
    arch = cfg.arch(model.n_joints)
    network = PoseNetwork(arch)
    if dataset.z.shape[1] != arch.cond_dim:
        raise DimensionMismatch(
            f"dataset conditioning has {dataset.z.shape[1]} entries, expected {arch.cond_dim}"
        )
    schedule = cfg.schedule()
    objective = Objective(
        network, model, schedule, cfg.representation, cfg.weights, cfg.alpha_bar_weighting
    )
    data = TrainingData(dataset, model, cfg.representation)

    if resume is not None:
        _check_resume(cfg, resume, arch, model)
        assert resume.moments is not None
        params = resume.params
        state = OptimizerState(resume.moments[0], resume.moments[1], resume.step)
        seed_history = list(resume.seed_history)
        if seed_history[-1]["seed"] != cfg.seed:
            seed_history.append({"seed": cfg.seed, "from_step": resume.step})
    else:
        params = network.init_params(cfg.seed)
        state = OptimizerState.zeros(network.n_params)
        seed_history = [{"seed": cfg.seed, "from_step": 0}]

    def snapshot() -> Checkpoint:
        return Checkpoint(
            arch=arch,
            representation=cfg.representation,
            params=params,
            schedule=schedule_json(schedule),
            step=state.step,
            seed_history=seed_history,
            train_config=cfg.to_json(),
            body_model=body_model_ref(model),
            moments=(state.m, state.v),
        )

    while state.step < cfg.steps:
        rng = make_rng(cfg.seed, STEP_STREAM, state.step + 1)
        batch = data.batch(rng, cfg.batch_size)
        params, state, report = train_step(
            params, state, batch, objective, rng, cfg.learning_rate, cfg.adam
        )
        if progress is not None:
            progress(report)
        if cfg.checkpoint and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(snapshot(), Path(cfg.checkpoint))

    ckpt = snapshot()
    if cfg.checkpoint:
        save_checkpoint(ckpt, Path(cfg.checkpoint))
    return ckpt


class LossHistory:
    """Collects step reports and smooths ``L_diff`` over a trailing window."""

    def __init__(self, window: int = SMOOTHING_WINDOW) -> None:
        self.window = window
        self.reports: List[LossReport] = []

    def __call__(self, report: LossReport) -> None:
        self.reports.append(report)

    def smoothed(self, field: str = "l_diff") -> Tuple[float, float]:
        """Mean over the first and over the last ``window`` steps."""
        if not self.reports:
            return float("nan"), float("nan")
        values = np.array([getattr(r, field) for r in self.reports])
        return float(values[: self.window].mean()), float(values[-self.window :].mean())

    def relative_drop(self, field: str = "l_diff") -> float:
        """Fraction by which the smoothed loss fell, e.g. 0.5 for a halving."""
        first, last = self.smoothed(field)
        return 1.0 - last / first if first > 0 else 0.0


def check_objective_gradients(
    network: PoseNetwork,
    model: BodyModel,
    dataset: Dataset,
    schedule: NoiseSchedule,
    representation: str = "6d",
    seed: int = 0,
    n_random: int = 200,
    fd_step: float = 1e-4,
    tol: float = 1e-3,
) -> GradcheckReport:
    """Finite-difference check of :class:`Objective` on a randomly initialised network."""
    objective = Objective(network, model, schedule, representation)
    data = TrainingData(dataset, model, representation)
    batch = data.rows(np.arange(len(data)))
    rng = make_rng(seed, GRADCHECK_STREAM)
    t, eps = draw_noise(rng, schedule, len(data), network.arch.pose_dim)
    params = network.init_params(seed, zero_head=False)

    def loss_and_grad(p: FloatArray) -> Tuple[float, FloatArray]:
        report, grads = objective.loss_and_grad(p, batch, t, eps)
        return report.l_all, grads

    return gradcheck(
        loss_and_grad, params, network.manifest, fd_step=fd_step, n_random=n_random, seed=seed, tol=tol
    )
