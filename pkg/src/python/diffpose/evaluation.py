"""Min-of-n evaluation of a checkpoint over a dataset."""
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import List, NamedTuple, Tuple

import numpy as np
from tqdm import tqdm

from diffpose.arrays import FloatArray
from diffpose.bodymodel import BodyModel, joints3d, mesh_from_rotmats
from diffpose.errors import InvalidConfig
from diffpose.metrics import min_of_n, mpjpe, pa_mpjpe, pve
from diffpose.nnet import Checkpoint
from diffpose.rotmath import pose_to_rotmats
from diffpose.sampling import Hypotheses, Sampler
from diffpose.synthdata import Dataset

MM_PER_M = 1000.0
# Rows sampled together; fixed so results do not depend on the worker count
EVAL_CHUNK = 16


class EvalConfig(NamedTuple):
    n_list: Tuple[int, ...] = (1, 5, 10, 25)
    seed: int = 0
    subsets: Tuple[str, ...] = ("all", "occluded")
    limit: int = 0
    workers: int = 1
    quiet: bool = False

    def validate(self) -> None:
        bad = (isinstance(n, bool) or not isinstance(n, int) or n < 1 for n in self.n_list)
        if not self.n_list or any(bad):
            raise InvalidConfig(f"eval.n_list must hold integers >= 1, got {list(self.n_list)!r}")
        for field, minimum in (("seed", 0), ("limit", 0), ("workers", 1)):
            value = getattr(self, field)
            if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
                raise InvalidConfig(f"eval.{field} must be an integer >= {minimum}, got {value!r}")
        unknown = set(self.subsets) - {"all", "occluded", "ambiguous"}
        if unknown:
            raise InvalidConfig(f"eval.subsets: unknown subset {sorted(unknown)[0]!r}")


class MetricRow(NamedTuple):
    n: int
    mpjpe_mm: float
    pa_mpjpe_mm: float
    pve_mm: float
    subset: str


class MetricsTable(NamedTuple):
    rows: List[MetricRow]

    def to_csv(self) -> str:
        lines = ["n,MPJPE_mm,PA-MPJPE_mm,PVE_mm,subset"]
        for r in self.rows:
            lines.append(f"{r.n},{r.mpjpe_mm:.6f},{r.pa_mpjpe_mm:.6f},{r.pve_mm:.6f},{r.subset}")
        return "\n".join(lines) + "\n"

    def column(self, subset: str, field: str = "mpjpe_mm") -> List[float]:
        return [getattr(r, field) for r in self.rows if r.subset == subset]


def _hypothesis_errors(
    hyps: Hypotheses, gt_joints: FloatArray, gt_vertices: FloatArray
) -> Tuple[FloatArray, FloatArray, FloatArray]:
    pred_j = hyps.joints3d * MM_PER_M
    gt_j = np.broadcast_to(gt_joints * MM_PER_M, pred_j.shape)
    errors = np.asarray(mpjpe(pred_j, gt_j)), np.asarray(pa_mpjpe(pred_j, gt_j))
    per_vertex = pve(
        hyps.vertices * MM_PER_M,
        np.broadcast_to(gt_vertices * MM_PER_M, hyps.vertices.shape),
        pred_j[:, 0],
        gt_j[:, 0],
    )
    return errors[0], errors[1], np.asarray(per_vertex)


def evaluate(
    ckpt: Checkpoint, dataset: Dataset, model: BodyModel, cfg: EvalConfig = EvalConfig()
) -> MetricsTable:
    """Min-of-n MPJPE, PA-MPJPE and PVE (millimetres) for every ``n`` in ``cfg.n_list``.

    Hypothesis ``h`` of row ``i`` always uses ``make_rng(seed, i, h)`` and rows are
    sampled in fixed chunks, so the table does not depend on ``cfg.workers``.
    """
    cfg.validate()
    sampler = Sampler(ckpt, model)
    count = len(dataset) if cfg.limit == 0 else min(cfg.limit, len(dataset))
    n_max = max(cfg.n_list)
    gt_rot = pose_to_rotmats(dataset.theta0[:count], "6d")
    gt_vertices, _ = mesh_from_rotmats(model, gt_rot, dataset.beta[:count])
    gt_joints = joints3d(model, gt_vertices)

    chunks = [list(range(i, min(i + EVAL_CHUNK, count))) for i in range(0, count, EVAL_CHUNK)]

    def run(chunk: List[int]) -> FloatArray:
        errors = np.empty((len(chunk), 3, n_max))
        for j, hyps in enumerate(sampler.draw(dataset, chunk, n_max, cfg.seed)):
            errors[j] = _hypothesis_errors(hyps, gt_joints[hyps.index], gt_vertices[hyps.index])
        return errors

    results: List[FloatArray] = []
    with tqdm(total=count, desc="evaluate", unit="sample", disable=cfg.quiet, file=sys.stderr) as bar:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            for errors in pool.map(run, chunks):
                results.append(errors)
                bar.update(errors.shape[0])
    per_sample = np.concatenate(results) if results else np.empty((0, 3, n_max))

    rows = []
    for subset in cfg.subsets:
        members = dataset.subset(subset)
        members = members[members < count]
        if len(members) == 0:
            continue
        for n in cfg.n_list:
            best = [[min_of_n(per_sample[i, m, :n]) for i in members] for m in range(3)]
            means = [float(np.mean(column)) for column in best]
            rows.append(MetricRow(n, means[0], means[1], means[2], subset))
    return MetricsTable(rows)
