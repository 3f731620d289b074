"""Run configuration: file loading, overrides, validation, hashing, stamps."""
import json

import numpy as np
import pytest

from placerec import __version__
from placerec.config import (KeyframeSettings, RetrievalSettings, RunConfig,
                             load_config)
from placerec.errors import ConfigError


def write_toml(tmp_path, text):
    p = tmp_path / "run.toml"
    p.write_text(text)
    return p


class TestDefaults:
    def test_sections_present(self):
        cfg = RunConfig()
        assert cfg.seed == 0
        assert cfg.model.descriptor_dim == 256
        assert cfg.stage2.mining.tau_pos == 2.0
        assert cfg.retrieval.spacing == 3.0
        assert cfg.retrieval.match_radius == 3.0
        assert cfg.keyframes.min_translation == 0.3
        cfg.validate()

    def test_paths(self):
        cfg = RunConfig(data_root="/data", world_dir="w", out_dir="o")
        assert str(cfg.world_path) == "/data/w"
        assert str(cfg.out_path) == "/data/o"
        assert str(cfg.resolve("/abs/x")) == "/abs/x"


class TestLoading:
    def test_toml_sections_and_top_keys(self, tmp_path):
        p = write_toml(tmp_path, """
seed = 7
data_root = "/tmp/x"

[model]
descriptor_dim = 64
channels = [8, 12, 16, 24, 32]

[stage1]
epochs = 3

[mining]
tau_pos = 1.5

[retrieval]
ks = [1, 5]
""")
        cfg = load_config(p)
        assert cfg.seed == 7
        assert cfg.data_root == "/tmp/x"
        assert cfg.model.descriptor_dim == 64
        assert cfg.model.channels == (8, 12, 16, 24, 32)
        assert cfg.stage1.epochs == 3
        assert cfg.stage2.mining.tau_pos == 1.5
        assert cfg.retrieval.ks == (1, 5)

    def test_json_config(self, tmp_path):
        p = tmp_path / "run.json"
        p.write_text(json.dumps({"seed": 3, "model": {"vlad_clusters": 16}}))
        cfg = load_config(p)
        assert cfg.seed == 3 and cfg.model.vlad_clusters == 16

    def test_unknown_section_key_rejected(self, tmp_path):
        p = write_toml(tmp_path, "[model]\nnot_a_knob = 1\n")
        with pytest.raises(ConfigError, match="model.not_a_knob"):
            load_config(p)

    def test_unknown_top_key_rejected(self, tmp_path):
        p = write_toml(tmp_path, "glorp = 1\n")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_mining_lives_in_its_own_section(self, tmp_path):
        p = write_toml(tmp_path, "[stage2]\nmining = 1\n")
        with pytest.raises(ConfigError, match="mining"):
            load_config(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "absent.toml")

    def test_unsupported_extension(self, tmp_path):
        p = tmp_path / "run.yaml"
        p.write_text("a: 1")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_type_mismatch_rejected(self, tmp_path):
        p = write_toml(tmp_path, "[model]\nuse_colour = 3\n")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_int_promotes_to_float(self, tmp_path):
        p = write_toml(tmp_path, "[stage1]\nlr = 1\n")
        cfg = load_config(p)
        assert cfg.stage1.lr == 1.0 and isinstance(cfg.stage1.lr, float)


class TestOverrides:
    def test_dotted_set_values(self, tmp_path):
        p = write_toml(tmp_path, "[stage1]\nepochs = 2\n")
        cfg = load_config(p, overrides=["stage1.epochs=9",
                                        "model.use_colour=false",
                                        "stage2.lr=5e-4",
                                        "seed=11",
                                        "data_root=/somewhere"])
        assert cfg.stage1.epochs == 9
        assert cfg.model.use_colour is False
        assert cfg.stage2.lr == 5e-4
        assert cfg.seed == 11
        assert cfg.data_root == "/somewhere"   # bare-string fallback

    def test_tuple_override(self):
        cfg = load_config(None, overrides=["retrieval.ks=[1, 2, 3]"])
        assert cfg.retrieval.ks == (1, 2, 3)

    def test_override_beats_file(self, tmp_path):
        p = write_toml(tmp_path, "seed = 1\n")
        assert load_config(p, overrides=["seed=2"]).seed == 2

    def test_env_data_root_between_file_and_override(self, tmp_path,
                                                     monkeypatch):
        p = write_toml(tmp_path, 'data_root = "/from-file"\n')
        monkeypatch.setenv("PLACEREC_DATA_ROOT", "/from-env")
        assert load_config(p).data_root == "/from-env"
        assert load_config(p, overrides=["data_root=/cli"]).data_root == "/cli"

    def test_malformed_override(self):
        with pytest.raises(ConfigError):
            load_config(None, overrides=["no_equals_sign"])
        with pytest.raises(ConfigError):
            load_config(None, overrides=["bogus.key=1"])


class TestValidationAndStamp:
    def test_contradictory_stages_rejected(self):
        # default stage2.freeze_encoder=true would freeze random weights;
        # load_config validates eagerly
        with pytest.raises(ConfigError):
            load_config(None, overrides=["model.two_stage=false"])
        ok = load_config(None, overrides=["model.two_stage=false",
                                          "stage2.freeze_encoder=false"])
        ok.validate()

    def test_bad_retrieval_values(self):
        with pytest.raises(ConfigError):
            load_config(None, overrides=["retrieval.ks=[0, 1]"]).validate()
        with pytest.raises(ConfigError):
            load_config(None, overrides=["retrieval.spacing=-1"]).validate()

    def test_hash_stable_and_sensitive(self):
        a = RunConfig()
        b = RunConfig()
        assert a.sha256() == b.sha256()
        c = load_config(None, overrides=["seed=5"])
        assert a.sha256() != c.sha256()

    def test_run_id_and_stamp(self, tmp_path):
        cfg = load_config(None, overrides=["seed=4"])
        rid = cfg.run_id()
        assert rid.startswith(__version__ + "+")
        assert len(rid.split("+")[1]) == 12
        cfg.write_stamp(tmp_path)
        stamp = json.loads((tmp_path / "stamp.json").read_text())
        assert stamp == {"version": __version__, "run_id": rid,
                         "config_sha256": cfg.sha256(), "seed": 4}

    def test_section_dataclasses_have_sane_defaults(self):
        assert RetrievalSettings().ks == (1, 2, 3, 4, 5)
        assert KeyframeSettings().min_rotation_deg == 15.0
