import pytest

from stylealign.config import OUTPUT_ROOT_ENV, load_config, parse_config
from stylealign.errors import ConfigurationError


class TestConfig:
    def test_minimal(self):
        cfg = parse_config({"seed": 3})
        assert cfg.task == "detection" and cfg.data.synthetic.train == 200
        assert cfg.alignment.m == 8 and cfg.alignment.n == 4

    def test_seed_required(self):
        with pytest.raises(ConfigurationError):
            parse_config({})

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError):
            parse_config({"seed": 0, "alignment": {"t_modle": 0.1}})

    def test_bad_threshold(self):
        with pytest.raises(ConfigurationError):
            parse_config({"seed": 0, "alignment": {"t_pre": 0}})

    def test_data_exclusive(self, tmp_path):
        with pytest.raises(ConfigurationError):
            parse_config({"seed": 0, "data": {"synthetic": {}, "source_train": str(tmp_path)}})
        with pytest.raises(ConfigurationError):
            parse_config({"seed": 0, "data": {"source_train": str(tmp_path)}})

    def test_missing_path(self, tmp_path):
        cfg = parse_config({"seed": 0, "data": {"source_train": str(tmp_path), "source_val": str(tmp_path),
                                                 "target_eval": str(tmp_path / "missing")}})
        with pytest.raises(ConfigurationError):
            cfg.check_paths()

    def test_digest_stable_and_sensitive(self):
        a = parse_config({"seed": 1})
        assert a.digest() == parse_config({"seed": 1}).digest()
        assert a.digest() != parse_config({"seed": 2}).digest()

    def test_env_override(self, monkeypatch, tmp_path):
        cfg = parse_config({"seed": 0, "output_root": "runs"})
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
        assert cfg.resolved_output_root() == tmp_path

    def test_hypers(self):
        cfg = parse_config({"seed": 0, "diffusion": {"base_epochs": 7, "control_epochs": 3}})
        assert cfg.diffusion.hyper("base").epochs == 7
        assert cfg.diffusion.hyper("control").epochs == 3
        assert cfg.alignment_config(0.02).t_pre == 5.0
        seg = parse_config({"seed": 0, "task": "segmentation"})
        assert seg.producer_config().kind == "noise_perturb"
        assert seg.alignment_config(0.1).t_pre == 0.3

    def test_yaml_file(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("seed: 5\ntask: segmentation\nalignment:\n  m: 3\n")
        cfg = load_config(p)
        assert cfg.seed == 5 and cfg.producer_config().m == 3
