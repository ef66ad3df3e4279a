import json
import pathlib
from typing import Dict, List

import pytest
from click.testing import CliRunner, Result

from diffpose.cli import cli, exit_code_for
from diffpose.errors import DegenerateInput, FormatError, InvalidConfig, NonFiniteLoss
from diffpose.nnet import MANIFEST_FILE, PARAMS_FILE
from diffpose.schedule import DEFAULT_T, DESK_T
from diffpose.trainer import TrainConfig

SMALL_RUN = {
    "train": {
        "T": 10,
        "beta_start": 0.01,
        "beta_end": 0.5,
        "batch_size": 8,
        "width": 16,
        "blocks": 1,
        "time_dim": 8,
        "regressor_width": 8,
    },
}


def invoke(args: List[str]) -> Result:
    return CliRunner().invoke(cli, args, catch_exceptions=False)


def _config(tmp_path: pathlib.Path, doc: Dict[str, object]) -> str:
    path = tmp_path / "run.json"
    path.write_text(json.dumps(doc))
    return str(path)


def test_schedule_dump() -> None:
    result = invoke(["schedule-dump", "--T", "2", "--beta-start", "0.1", "--beta-end", "0.2"])
    assert result.exit_code == 0
    lines = result.output.strip().splitlines()
    assert lines[0] == "t,beta,alpha,alpha_bar,posterior_variance,snr"
    assert lines[1].split(",")[:4] == ["1", "0.1", "0.9", "0.9"]
    assert lines[2].split(",")[3] == "0.72"


def test_schedule_dump_defaults_to_the_desk_schedule() -> None:
    result = invoke(["schedule-dump"])
    assert result.exit_code == 0
    rows = [line.split(",") for line in result.output.strip().splitlines()[1:]]
    assert len(rows) == DESK_T < DEFAULT_T
    assert rows[0][:2] == ["1", "0.001"]
    assert rows[-1][:2] == [str(DESK_T), "0.2"]
    betas = TrainConfig().schedule().betas
    assert [float(r[1]) for r in rows] == pytest.approx(list(betas), rel=1e-9)


def test_schedule_dump_rejects_decreasing_betas() -> None:
    result = invoke(["schedule-dump", "--T", "2", "--beta-start", "0.3", "--beta-end", "0.2"])
    assert result.exit_code == 2
    assert "ERROR:2:" in result.output


def test_gen_data_rejects_invalid_config(tmp_path: pathlib.Path) -> None:
    config = _config(tmp_path, {"dataset": {"occlusion_rate": 2.0}})
    result = invoke(["gen-data", "--config", config, "--out", str(tmp_path / "data.dpds")])
    assert result.exit_code == 2
    assert "dataset.occlusion_rate" in result.output
    assert not (tmp_path / "data.dpds").exists()


def test_train_with_missing_data(tmp_path: pathlib.Path) -> None:
    out = tmp_path / "ckpt"
    result = invoke(f"train --data {tmp_path / 'nowhere.dpds'} --out {out} --steps 1".split())
    assert result.exit_code == 3
    assert "ERROR:3:" in result.output
    assert not out.exists()


def test_usage_errors_exit_with_two(tmp_path: pathlib.Path) -> None:
    result = invoke(["train", "--out", str(tmp_path / "ckpt")])
    assert result.exit_code == 2
    assert "ERROR:2:" in result.output


@pytest.mark.parametrize(
    "error, code",
    [
        (InvalidConfig("x"), 2),
        (FormatError("x"), 3),
        (FileNotFoundError("x"), 3),
        (NonFiniteLoss("x", 1), 4),
        (DegenerateInput("x"), 4),
        (RuntimeError("x"), 1),
    ],
)
def test_exit_codes(error: BaseException, code: int) -> None:
    assert exit_code_for(error) == code


def _pipeline(root: pathlib.Path, config: str) -> Dict[str, bytes]:
    root.mkdir()
    data, ckpt = root / "data.dpds", root / "ckpt"
    hyps, table = root / "hyps.dpds", root / "table.csv"
    common = f"--config {config}"
    steps = [
        f"gen-data {common} --out {data} --n-samples 30 --seed 3",
        f"train {common} --data {data} --out {ckpt} --steps 4",
        f"sample {common} --checkpoint {ckpt} --data {data} --index 2 --n 3 --seed 1 --out {hyps}",
        f"eval {common} --checkpoint {ckpt} --data {data} --n-list 1,2 --limit 10 --quiet --out {table}",
    ]
    for args in steps:
        result = invoke(args.split())
        assert result.exit_code == 0, result.output
    files = [data, ckpt / MANIFEST_FILE, ckpt / PARAMS_FILE, hyps, root / "hyps.dpds.plot.csv", table]
    return {f.relative_to(root).as_posix(): f.read_bytes() for f in files}


def test_pipeline_is_reproducible(tmp_path: pathlib.Path) -> None:
    config = _config(tmp_path, SMALL_RUN)
    first = _pipeline(tmp_path / "first", config)
    second = _pipeline(tmp_path / "second", config)
    assert first == second
    table = first["table.csv"].decode().splitlines()
    assert table[0] == "n,MPJPE_mm,PA-MPJPE_mm,PVE_mm,subset"
    assert [row.split(",")[0] for row in table[1:3]] == ["1", "2"]
    manifest = json.loads(first[f"ckpt/{MANIFEST_FILE}"])
    assert manifest["step"] == 4


def test_sample_index_out_of_range(tmp_path: pathlib.Path) -> None:
    config = _config(tmp_path, SMALL_RUN)
    data, ckpt = tmp_path / "data.dpds", tmp_path / "ckpt"
    assert invoke(f"gen-data --out {data} --n-samples 5".split()).exit_code == 0
    assert invoke(f"train --config {config} --data {data} --out {ckpt} --steps 1".split()).exit_code == 0
    result = invoke(f"sample --checkpoint {ckpt} --data {data} --index 5 --out {tmp_path / 'h'}".split())
    assert result.exit_code == 2
    assert "--index 5" in result.output


def test_train_reports_losses(tmp_path: pathlib.Path) -> None:
    config = _config(tmp_path, SMALL_RUN)
    data = tmp_path / "data.dpds"
    assert invoke(f"gen-data --out {data} --n-samples 10".split()).exit_code == 0
    ckpt = tmp_path / "ckpt"
    args = f"train --config {config} --data {data} --out {ckpt} --steps 4 --eval-every 2"
    result = invoke(args.split())
    assert result.exit_code == 0
    loss_lines = [line for line in result.output.splitlines() if line.startswith("step ")]
    assert [line.split()[1] for line in loss_lines] == ["2", "4"]
    assert "smoothed L_diff" in result.output


def test_gradcheck_command() -> None:
    args = "gradcheck --width 8 --blocks 1 --time-dim 4 --regressor-width 4 --n-random 30"
    result = invoke(args.split())
    assert result.exit_code == 0, result.output
    assert "max rel err" in result.output
    assert "checked" in result.output


def test_non_utf8_inputs_are_reported(tmp_path: pathlib.Path) -> None:
    data = tmp_path / "data.dpds"
    data.write_bytes(b"\xff\xfe\x00garbage")
    result = invoke(f"train --data {data} --out {tmp_path / 'ckpt'} --steps 1".split())
    assert result.exit_code == 3
    assert "ERROR:3:" in result.output
    config = tmp_path / "run.json"
    config.write_bytes(b"\xff\xfe\x00garbage")
    result = invoke(f"gen-data --config {config} --out {tmp_path / 'd.dpds'}".split())
    assert result.exit_code == 2
    assert "ERROR:2:" in result.output
