import json

import pytest

from incdet.cli import (
    EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, ExperimentConfig, apply_overrides, format_table, load_experiment,
    main,
)
from incdet.data import VOC_CLASSES, load_voc_annotations
from incdet.errors import ConfigurationError

TINY = ["dataset.train_images=24", "dataset.test_images=12", "train.iterations=2"]


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_synth_byte_identical(tmp_path, capsys):
    args = ["gen-synth", "--seed", "7", "--images", "40", "--classes", "6"]
    assert main(["--output-root", str(tmp_path / "a"), *args]) == 0
    out = capsys.readouterr().out
    assert main(["--output-root", str(tmp_path / "b"), *args]) == 0
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert a == b and len(a) > 80
    ds = load_voc_annotations(tmp_path / "a" / "synth", "train", load_images=False)
    recount = ds.instance_counts()
    for k, name in enumerate(ds.class_names):
        assert f"{name}\t{recount[k]}" in out
    assert "# config" in out and "seed 7" in out


def test_gen_synth_io_errors(tmp_path, monkeypatch):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen-synth", "--images", "20", "--out", str(blocker / "sub")]) == EXIT_IO
    monkeypatch.setenv("INCDET_OUTPUT_ROOT", str(tmp_path / "env"))
    assert main(["gen-synth", "--images", "20", "--out", "made/here"]) == 0
    assert (tmp_path / "env" / "made" / "here" / "classes.txt").exists()


def test_make_protocol(tmp_path, capsys):
    assert main(["--output-root", str(tmp_path), "make-protocol", "--steps", "15,5", "--out", "s.json"]) == 0
    d = json.loads((tmp_path / "s.json").read_text())
    assert d["steps"][1] == sorted(VOC_CLASSES)[-5:]
    assert main(["--output-root", str(tmp_path), "make-protocol", "--steps", "10,2,2,2,2,2", "--out", "s6.json"]) == 0
    assert len(json.loads((tmp_path / "s6.json").read_text())["step_sizes"]) == 6
    capsys.readouterr()
    assert main(["make-protocol", "--steps", "15,6"]) == EXIT_CONFIG
    assert "exceed" in capsys.readouterr().err


def test_config_round_trip_and_strictness(tmp_path):
    cfg = load_experiment(None, ["detector.family=centernet_style", "distill.preset=sid-centernet",
                                 "train.lr=0.05", "scenario.step_sizes=[4,1,1]"])
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg and again.to_dict() == cfg.to_dict()
    assert cfg.train.lr == 0.05 and cfg.scenario.step_sizes == (4, 1, 1)
    with pytest.raises(ConfigurationError, match="bogus"):
        load_experiment(None, ["train.bogus=1"])
    with pytest.raises(ConfigurationError):
        load_experiment(None, ["nosection=1"])
    with pytest.raises(ConfigurationError):
        apply_overrides({}, ["novalue"])
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 3, "extra": {}}))
    assert main(["train", "--config", str(p)]) == EXIT_CONFIG


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "exp.json"
    cfg.write_text(json.dumps({"output_dir": "run", "seed": 1, "detector": {"family": "fcos_style"}}))
    common = ["--output-root", str(root)]
    codes = [
        main([*common, "train-base", "--config", str(cfg), *sum((["--set", s] for s in TINY), [])]),
        main([*common, "train", "--step", "1", "--distill", "none", "--config", str(cfg),
              *sum((["--set", s] for s in TINY), []), "--set", "output_dir=ft", "--source", str(root / "run" / "step0.ckpt")]),
        main([*common, "train-incremental", "--distill", "sid-fcos", "--config", str(cfg),
              *sum((["--set", s] for s in TINY), [])]),
    ]
    return root, cfg, codes


def test_train_paths(pipeline):
    root, _, codes = pipeline
    assert codes == [0, 0, 0]
    sid = json.loads((root / "run" / "step1.report.json").read_text())
    ft = json.loads((root / "ft" / "step1.report.json").read_text())
    base = json.loads((root / "run" / "step0.report.json").read_text())
    assert base["f1i"] is None and sid["f1i"] is not None
    assert sid["provenance"]["method"] == "sid-fcos" and ft["provenance"]["method"] == "none"
    log = [json.loads(line) for line in (root / "run" / "step1.losses.jsonl").read_text().splitlines()]
    assert len(log) == 2 and all("config_hash" in r and r["seed"] == 1 for r in log)
    from incdet.model import load_checkpoint
    meta = load_checkpoint(root / "run" / "step1.ckpt").metadata
    assert "restore_applied_after_iteration" in meta["events"]
    assert "restore_applied_after_iteration" not in load_checkpoint(root / "ft" / "step1.ckpt").metadata["events"]


def test_train_missing_source(tmp_path):
    code = main(["--output-root", str(tmp_path), "train", "--step", "1", *sum((["--set", s] for s in TINY), [])])
    assert code == EXIT_IO


def test_evaluate_reports(pipeline, capsys):
    root, cfg, _ = pipeline
    common = ["--output-root", str(root), "evaluate", "--config", str(cfg), "--set", TINY[0], "--set", TINY[1]]
    assert main([*common, "--checkpoint", str(root / "run" / "step0.ckpt"), "--step", "0", "--out", "e0.json"]) == 0
    assert json.loads((root / "e0.json").read_text())["f1i"] is None
    for name in ("e1.json", "e1b.json"):
        assert main([*common, "--checkpoint", str(root / "run" / "step1.ckpt"), "--step", "1", "--out", name]) == 0
    r = json.loads((root / "e1.json").read_text())
    assert all(r[k] is not None for k in ("p_old", "p_new", "f1i", "overall_map"))
    assert (root / "e1.json").read_bytes() == (root / "e1b.json").read_bytes()
    assert main([*common, "--checkpoint", str(root / "run" / "step1.ckpt"), "--step", "0"]) == EXIT_CONFIG


def test_report_table(pipeline, capsys):
    root, _, _ = pipeline
    capsys.readouterr()
    files = [str(root / "ft" / "step1.report.json"), str(root / "run" / "step1.report.json")]
    assert main(["--output-root", str(root), "report", *files, "--out", "tab"]) == 0
    out = capsys.readouterr().out
    lines = out.splitlines()
    assert lines[0].split() == ["method", "step", "1"]
    assert lines[2].startswith("none") and lines[3].startswith("sid-fcos")
    assert " / " in lines[3]
    rows = json.loads((root / "tab.json").read_text())
    assert [r["method"] for r in rows] == ["none", "sid-fcos"]
    assert all({"overall_map", "f1i", "config_hash", "seed", "step"} <= set(r) for r in rows)
    assert (root / "tab.txt").read_text() == out


def test_report_single_and_malformed(tmp_path, capsys):
    rep = {"per_class_ap": {"0": 0.5}, "overall_map": 0.5, "p_old": None, "p_new": 0.5, "f1i": None,
           "iou_thresholds": [0.5], "provenance": {"method": "base", "step": 0}}
    (tmp_path / "r.json").write_text(json.dumps(rep))
    text = format_table([{"method": "base", "step": 0, "overall_map": 0.5, "f1i": None}])
    assert text.splitlines()[2] == "base    50.0 / -"
    assert main(["--output-root", str(tmp_path), "report", str(tmp_path / "r.json")]) == 0
    assert len([line for line in capsys.readouterr().out.splitlines() if line.startswith("base")]) == 1
    del rep["overall_map"]
    (tmp_path / "bad.json").write_text(json.dumps(rep))
    assert main(["report", str(tmp_path / "bad.json")]) == EXIT_IO
    err = capsys.readouterr().err
    assert "bad.json" in err and "overall_map" in err


def test_numeric_exit_code(monkeypatch):
    from incdet import cli
    from incdet.errors import NumericError

    def boom(args):
        raise NumericError("non-finite model_loss at iteration 0")

    monkeypatch.setattr(cli, "cmd_train", boom)
    assert cli.main(["train"]) == EXIT_NUMERIC
