import csv
import json

import pytest
import yaml

from lasr.cli import EXIT_DIVERGED, EXIT_INPUT, build_parser, main

SMALL = {"working_size": 16, "init_subdivisions": 1, "rigid_epochs": 1, "refine_epochs": 1, "bones": [0, 2],
         "steps_per_epoch": 2, "batch": 2, "remesh_grid": 24}


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene") / "d"
    assert main(["synth", "--out", str(d), "--frames", "3", "--size", "32", "--seed", "1"]) == 0
    return d


def test_synth_byte_identical(data, tmp_path):
    again = tmp_path / "again"
    assert main(["synth", "--out", str(again), "--frames", "3", "--size", "32", "--seed", "1"]) == 0
    a, b = _files(data), _files(again)
    assert a.keys() == b.keys() and a == b
    assert any(k.startswith("gt/") for k in a)


def test_synth_defaults_and_usage_errors(capsys):
    args = build_parser().parse_args(["synth", "--out", "x"])
    assert args.frames == 15 and args.scene == "rigid"
    with pytest.raises(SystemExit) as e:
        main(["synth"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["synth", "--out", "x", "--bogus", "1"])
    assert e.value.code == 2
    assert "--out" in capsys.readouterr().err


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["synth", "--out", str(blocker / "sub"), "--frames", "2", "--size", "16"]) == EXIT_INPUT


@pytest.mark.parametrize("cmd,flags", [
    ("synth", ["--scene", "--out", "--frames", "--seed", "--size"]),
    ("reconstruct", ["--data", "--config", "--out", "--stage", "--seed", "--working-size", "--steps-per-epoch",
                     "--max-steps", "--resume"]),
    ("eval", ["--pred", "--gt", "--keypoints", "--out", "--samples", "--seed"]),
])
def test_help_lists_every_flag(cmd, flags, capsys):
    with pytest.raises(SystemExit) as e:
        main([cmd, "--help"])
    assert e.value.code == 0
    text = capsys.readouterr().out
    for f in flags:
        assert f in text


def test_reconstruct_eval_and_resume(data, tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump(SMALL))
    out = tmp_path / "run"
    capsys.readouterr()
    assert main(["reconstruct", "--data", str(data), "--config", str(cfg), "--out", str(out), "--seed", "4"]) == 0
    summary = json.loads(capsys.readouterr().out)
    report = json.loads((out / "report.json").read_text())
    assert summary["unknowns"] == report["unknowns_model"] and summary["bones"] == 2
    assert {"silhouette", "flow", "texture"} <= set(summary["final_losses"])
    assert json.loads((out / "config.json").read_text())["seed"] == 4  # flag beats file beats default
    assert (out / "rest.obj").exists() and len(list((out / "frames").glob("*.obj"))) == 3
    assert (out / "losses.csv").exists() and list(out.glob("stage_*.npz"))

    # interrupted run + resume reproduces the uninterrupted checkpoint
    part = tmp_path / "part"
    assert main(["reconstruct", "--data", str(data), "--config", str(cfg), "--out", str(part), "--seed", "4",
                 "--max-steps", "3"]) == 0
    assert main(["reconstruct", "--data", str(data), "--out", str(part), "--resume",
                 str(part / "interrupted.npz")]) == 0
    for name in ("stage_0_S0.npz", "stage_1_S1.npz"):
        assert (part / name).read_bytes() == (out / name).read_bytes()
    assert (part / "frames" / "00000.obj").read_bytes() == (out / "frames" / "00000.obj").read_bytes()

    # self-evaluation of ground truth, and the CSV contract
    gt = data / "gt"
    csv_path = tmp_path / "m.csv"
    assert main(["eval", "--pred", str(gt), "--gt", str(gt), "--out", str(csv_path), "--samples", "2000"]) == 0
    rows = list(csv.DictReader(csv_path.open()))
    assert list(rows[0]) == ["frame", "chamfer"] and rows[-1]["frame"] == "mean"
    assert float(rows[-1]["chamfer"]) < 0.05


def test_eval_with_keypoints(data, tmp_path):
    gt = data / "gt"
    kp = next(gt.glob("keypoints*"))
    csv_path = tmp_path / "m.csv"
    assert main(["eval", "--pred", str(gt), "--gt", str(gt), "--keypoints", str(kp), "--out", str(csv_path),
                 "--samples", "1000"]) == 0
    rows = list(csv.DictReader(csv_path.open()))
    assert list(rows[0]) == ["frame", "chamfer", "pck"]
    assert float(rows[-1]["pck"]) == 1.0


def test_eval_missing_frame(data, tmp_path, capsys):
    gt = data / "gt"
    pred = tmp_path / "pred" / "frames"
    pred.mkdir(parents=True)
    for p in sorted((gt / "frames").glob("*.obj")):
        (pred / p.name).write_bytes(p.read_bytes())
    (pred / "00099.obj").write_bytes(p.read_bytes())
    capsys.readouterr()
    assert main(["eval", "--pred", str(pred.parent), "--gt", str(gt)]) == EXIT_INPUT
    assert "00099.obj" in capsys.readouterr().err


def test_malformed_inputs(data, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("unknown_key: 1\n")
    assert main(["reconstruct", "--data", str(data), "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_INPUT
    assert main(["reconstruct", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == EXIT_INPUT


def test_divergence_exit_code(data, tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump(dict(SMALL, lr=1e200, root_lr=1e200, bones=[0])))
    capsys.readouterr()
    assert main(["reconstruct", "--data", str(data), "--config", str(cfg), "--out", str(tmp_path / "o")]) \
        == EXIT_DIVERGED
    assert "diverged" in capsys.readouterr().err
