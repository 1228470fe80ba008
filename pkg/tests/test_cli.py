import json

import numpy as np
import pytest
import yaml

from stylealign import io
from stylealign.cli import main
from stylealign.config import OUTPUT_ROOT_ENV, parse_config
from stylealign.errors import ConfigurationError
from stylealign.pipeline import PipelineError, run_pipeline
from stylealign.synthdata import TARGET_STYLE, SceneSpec, generate_dataset

TINY_RUN = {
    "seed": 1,
    "name": "tiny",
    "data": {"synthetic": {"train": 8, "val": 4, "target": 4}},
    "diffusion": {"base_epochs": 1, "control_epochs": 1, "channels": [8, 16], "time_dim": 32, "heads": 2,
                  "hint_channels": 8},
    "task_model": {"epochs": 1, "hourglass_channels": 16},
    "alignment": {"m": 2, "n": 2, "ddim_steps": 2},
}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    cfg = parse_config({**TINY_RUN, "output_root": str(root)})
    return cfg, run_pipeline(cfg)


class TestPipeline:
    def test_outputs(self, tiny_run):
        _, run_dir = tiny_run
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert manifest["seed"] == 1
        assert all(v["status"] == "done" for v in manifest["stages"].values())
        for rel in ("checkpoints/diffusion_control.pt", "checkpoints/task.pt", "calibration.json",
                    "reports/evaluation.json", "reports/comparison.csv", "reports/comparison.png",
                    "reports/report.md", "reports/measurement.json"):
            assert (run_dir / rel).exists(), rel
        assert len(list((run_dir / "align").glob("*.json"))) == 4

    def test_rerun_is_deterministic(self, tiny_run, tmp_path):
        cfg, run_dir = tiny_run
        other = run_pipeline(parse_config({**TINY_RUN, "output_root": str(tmp_path)}))
        a = json.loads((run_dir / "reports" / "evaluation.json").read_text())
        b = json.loads((other / "reports" / "evaluation.json").read_text())
        assert a == b

    def test_resume_skips(self, tiny_run):
        cfg, run_dir = tiny_run
        stamp = (run_dir / "checkpoints" / "task.pt").stat().st_mtime_ns
        run_pipeline(cfg, resume=True)
        assert (run_dir / "checkpoints" / "task.pt").stat().st_mtime_ns == stamp

    def test_existing_run_needs_resume(self, tiny_run):
        cfg, _ = tiny_run
        with pytest.raises(ConfigurationError):
            run_pipeline(cfg)

    def test_missing_dataset_fails_first(self, tmp_path):
        cfg = parse_config({"seed": 0, "output_root": str(tmp_path / "out"),
                            "data": {"source_train": str(tmp_path / "nope"), "source_val": str(tmp_path),
                                     "target_eval": str(tmp_path)}})
        with pytest.raises(ConfigurationError):
            run_pipeline(cfg)
        assert not (tmp_path / "out").exists()

    def test_stage_tagged_error(self, tmp_path):
        data = tmp_path / "data"
        # target-only images where source training data is expected
        io.save_samples(generate_dataset(SceneSpec(), TARGET_STYLE, 2, 0), data)
        cfg = parse_config({**TINY_RUN, "output_root": str(tmp_path / "out"), "data": {
            "source_train": str(data), "source_val": str(data), "target_eval": str(data)}})
        with pytest.raises(PipelineError) as err:
            run_pipeline(cfg)
        assert err.value.stage == "data"


class TestCommands:
    def test_subcommand_chain(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
        assert main(["synth-data", "--count", "6", "--seed", "0", "--out", "src"]) == 0
        assert main(["synth-data", "--count", "2", "--seed", "0", "--style", "target", "--start", "6",
                     "--out", "tgt"]) == 0
        assert main(["train-diffusion", "--data", str(tmp_path / "src"), "--epochs", "1", "--seed", "0",
                     "--out", "base.pt"]) == 0
        assert main(["train-diffusion", "--data", str(tmp_path / "src"), "--stage", "control", "--epochs", "1",
                     "--base-ckpt", str(tmp_path / "base.pt"), "--seed", "0", "--out", "ctl.pt"]) == 0
        assert main(["train-task", "--data", str(tmp_path / "src"), "--epochs", "1", "--seed", "0",
                     "--out", "task.pt"]) == 0
        assert main(["calibrate", "--task-ckpt", str(tmp_path / "task.pt"), "--data", str(tmp_path / "src"),
                     "--out", "cal.json"]) == 0
        assert main(["align", "--target", str(tmp_path / "tgt"), "--diffusion-ckpt", str(tmp_path / "ctl.pt"),
                     "--task-ckpt", str(tmp_path / "task.pt"), "--m", "2", "--n", "1", "--steps", "2",
                     "--seed", "0", "--out", "aligned", "--dump-intermediates"]) == 0
        records = sorted((tmp_path / "aligned").glob("*.json"))
        assert len(records) == 2
        rec = json.loads(records[0].read_text())
        assert {"u_model", "u_pre", "selected_condition", "fallback_used", "final_prediction"} <= set(rec)
        assert (tmp_path / "aligned" / "intermediates").is_dir()
        assert main(["evaluate", "--task-ckpt", str(tmp_path / "task.pt"), "--data", str(tmp_path / "tgt"),
                     "--aligned", str(tmp_path / "aligned"), "--out", "eval"]) == 0
        assert (tmp_path / "eval" / "comparison.csv").exists()
        out = capsys.readouterr().out
        assert "source_only" in out and "aligned" in out

    def test_measure_cimt(self, tmp_path, capsys):
        mask = np.zeros((20, 10))
        mask[5:15] = 1
        io.write_image(tmp_path / "m.png", mask)
        assert main(["measure", "cimt", "--mask", str(tmp_path / "m.png"), "--spacing", "0.15"]) == 0
        assert json.loads(capsys.readouterr().out)["cimt_mm"] == pytest.approx(1.5)

    def test_measure_curvature(self, tmp_path, capsys):
        series = [[[float(x), 0.0]] for x in range(12)]
        (tmp_path / "s.json").write_text(json.dumps(series))
        assert main(["measure", "curvature", "--series", str(tmp_path / "s.json")]) == 0
        assert json.loads(capsys.readouterr().out)["curvature_deg"] == pytest.approx(0.0, abs=1e-9)

    def test_run_and_report(self, tmp_path, capsys):
        cfg = {**TINY_RUN, "output_root": str(tmp_path)}
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump(cfg))
        assert main(["run", "--config", str(path), "--stop-after", "task"]) == 0
        manifest = json.loads((tmp_path / "tiny" / "manifest.json").read_text())
        assert "calibrate" not in manifest["stages"]
        assert main(["report", "--run", str(tmp_path / "tiny")]) == 0
        assert "config digest" in capsys.readouterr().out

    def test_bad_config_exit_code(self, tmp_path, capsys):
        path = tmp_path / "c.yaml"
        path.write_text("seed: 0\nalignment:\n  t_modle: 3\n")
        assert main(["run", "--config", str(path)]) != 0
        assert "[run]" in capsys.readouterr().err

    def test_stage_failure_exit_code(self, tmp_path, capsys):
        assert main(["calibrate", "--task-ckpt", str(tmp_path / "missing.pt"), "--data", str(tmp_path)]) != 0
        assert "[calibrate]" in capsys.readouterr().err
