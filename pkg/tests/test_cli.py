import json
import re
import subprocess
import sys

import numpy as np
import pytest

from swinvfi import data as D
from swinvfi import evaluation as E
from swinvfi import network as N
from swinvfi import optics
from swinvfi.cli import SIDECAR, main

TINY_RUN = {
    "model": {"dim": 8, "heads": [1, 2, 2]},
    "train": {"batch_size": 2, "crop": 16, "epochs": 1, "lr": 1e-3},
    "data": {"clips": 2, "height": 8, "width": 8, "frames": 7},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny dataset and a one-epoch checkpoint, both produced through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "run.json"
    config.write_text(json.dumps(TINY_RUN))
    assert main(["gen-data", "--config", str(config), "--out", str(root / "data"), "--seed", "4"]) == 0
    assert main(["train", "--config", str(config), "--data", str(root / "data"), "--out", str(root / "run"),
                 "--seed", "4"]) == 0
    return root


def flops_numbers(text):
    return {m.group(1).strip(): int(m.group(2)) for m in re.finditer(r"^(.*?)\s+(\d+)$", text, re.M)}


def test_dump_config_prints_the_defaults(capsys):
    assert main(["dump-config"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["seed"] == 1 and cfg["model"]["dim"] == 32 and cfg["train"]["lr"] == 2e-4
    assert main(["dump-config", "--stages", "3", "--epochs", "7"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["model"]["stages"] == 3 and cfg["train"]["epochs"] == 7


def test_gen_data_is_reproducible(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["gen-data", "--seed", "7", "--clips", "1", "--out", str(tmp_path / name)]) == 0
    printed = capsys.readouterr().out.split()
    assert printed == [str(tmp_path / "a" / D.MANIFEST), str(tmp_path / "b" / D.MANIFEST)]
    assert D.dataset_checksum(tmp_path / "a") == D.dataset_checksum(tmp_path / "b")
    assert len(D.Dataset(tmp_path / "a").clip_ids()) == 2
    sidecar = json.loads((tmp_path / "a" / SIDECAR).read_text())
    assert sidecar["command"] == "gen-data" and sidecar["seed"] == 7 and sidecar["data"]["clips"] == 1


def test_flops_report_is_additive_in_stages(capsys):
    tables = []
    for stages in (1, 2, 3):
        assert main(["flops", "--stages", str(stages)]) == 0
        tables.append(flops_numbers(capsys.readouterr().out))
    flops = [t["total flops"] for t in tables]
    params = [t["params total"] for t in tables]
    assert flops[2] - flops[1] == flops[1] - flops[0] > 0
    assert params[2] - params[1] == params[1] - params[0] == tables[0]["params per stage"]
    assert tables[0]["params shared"] + tables[0]["params per stage"] == params[0]


def test_bad_config_is_exit_code_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"lr": -1}}))
    assert main(["dump-config", "--config", str(bad)]) == 2
    bad.write_text(json.dumps({"trainer": {}}))
    assert main(["dump-config", "--config", str(bad)]) == 2
    bad.write_text("{not json")
    assert main(["dump-config", "--config", str(bad)]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["train", "--epochs", "many"])
    assert exc.value.code == 2


def test_missing_files_are_exit_code_3(tmp_path):
    assert main(["eval", "--data", str(tmp_path / "nowhere"), "--baseline", "copy", "--out", str(tmp_path)]) == 3
    assert main(["dump-config", "--config", str(tmp_path / "missing.json")]) == 3
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"junk")
    assert main(["interp", "--checkpoint", str(junk), "--out", str(tmp_path)] + ["x.png"] * 6) == 3


def test_train_writes_checkpoints_logs_and_sidecar(workspace):
    run = workspace / "run"
    for name in ("best.ckpt", "last.ckpt", "loss.csv", "epochs.csv", SIDECAR):
        assert (run / name).exists(), name
    cfg, _, meta, _ = N.load_checkpoint(run / "best.ckpt")
    assert cfg.dim == 8 and meta["train"]["seed"] == 4


def test_eval_baseline_and_checkpoint(workspace, capsys):
    data, out = workspace / "data", workspace / "eval"
    assert main(["eval", "--data", str(data), "--baseline", "average", "--out", str(out), "--split", "train"]) == 0
    assert main(["eval", "--data", str(data), "--checkpoint", str(workspace / "run" / "best.ckpt"),
                 "--out", str(out), "--split", "train", "--panels"]) == 0
    printed = capsys.readouterr().out.split()
    assert printed == [str(out / "metrics_average.csv"), str(out / "metrics.csv")]
    text = (out / "metrics.csv").read_text()
    assert "aggregate" in text and text.splitlines()[-1] == E.AOLP_FOOTER
    assert list((out / "panels").glob("*.png"))
    sidecar = json.loads((out / SIDECAR).read_text())
    assert sidecar["command"] == "eval" and sidecar["model"]["dim"] == 8


def test_eval_without_checkpoint_or_baseline_is_a_config_error(workspace):
    assert main(["eval", "--data", str(workspace / "data"), "--out", str(workspace / "noeval")]) == 2


def test_interp_writes_the_frame_and_the_visualization(workspace, capsys):
    ds = D.Dataset(workspace / "data")
    clip = ds.clip_ids()[0]
    frames = [str(workspace / "data" / clip / f"{t:04d}_mosaic.png") for t in (0, 1, 2, 4, 5, 6)]
    out = workspace / "interp"
    assert main(["interp", "--checkpoint", str(workspace / "run" / "best.ckpt"), "--out", str(out)] + frames) == 0
    assert capsys.readouterr().out.split() == [str(out / "interp.png"), str(out / "interp_aolp_dolp.png")]
    frame = optics.read_png16(out / "interp.png")
    assert frame.shape == (16, 16) and np.all((frame >= 0) & (frame <= 1))
    assert main(["interp", "--checkpoint", str(workspace / "run" / "best.ckpt"), "--out", str(out)]
                + frames[:5]) == 2


def test_module_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "swinvfi", "flops", "--height", "16", "--width", "16"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and "params total" in proc.stdout
