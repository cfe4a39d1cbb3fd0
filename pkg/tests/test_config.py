"""Tests for YAML configuration loading."""

import pytest

from osc_agent.config import DEFAULT_CONFIG, Config, deep_merge, get_config_paths, load_config, reload_config
from osc_agent.errors import ConfigError


@pytest.fixture(autouse=True)
def isolated_home(tmp_path, monkeypatch):
    home = tmp_path / "home"
    home.mkdir()
    monkeypatch.setenv("HOME", str(home))
    monkeypatch.delenv("XDG_CONFIG_HOME", raising=False)
    monkeypatch.chdir(tmp_path)
    return home


class TestDeepMerge:
    def test_nested_override(self):
        merged = deep_merge({"a": {"x": 1, "y": 2}, "b": 3}, {"a": {"y": 5}})
        assert merged == {"a": {"x": 1, "y": 5}, "b": 3}

    def test_base_is_untouched(self):
        base = {"a": {"x": 1}}
        deep_merge(base, {"a": {"x": 2}})
        assert base == {"a": {"x": 1}}

    def test_scalar_replaces_mapping(self):
        assert deep_merge({"a": {"x": 1}}, {"a": None}) == {"a": None}


class TestLoadConfig:
    def test_defaults(self):
        config = load_config()
        assert config["run"] == DEFAULT_CONFIG["run"]
        assert config["retrieval"]["k_reference"] == 5

    def test_current_directory_file(self, tmp_path):
        (tmp_path / "osc-agent.yaml").write_text("run:\n  iterations: 4\n")
        assert load_config()["run"]["iterations"] == 4

    def test_explicit_file(self, tmp_path):
        path = tmp_path / "custom.yaml"
        path.write_text("policy:\n  gamma: 5.0\n")
        config = load_config(path)
        assert config["policy"]["gamma"] == 5.0
        assert config["policy"]["delta"] == 3.0
        assert config["_base_dir"] == str(tmp_path.resolve())

    def test_explicit_missing(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.yaml")

    def test_explicit_not_a_mapping(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_explicit_bad_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("run: [unclosed\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_search_order(self, tmp_path, monkeypatch):
        monkeypatch.setenv("XDG_CONFIG_HOME", str(tmp_path / "xdg"))
        paths = get_config_paths()
        assert paths[0] == tmp_path / "osc-agent.yaml"
        assert paths[1] == tmp_path / "xdg" / "osc-agent" / "config.yaml"


class TestConfig:
    def test_relative_paths_follow_config_file(self, tmp_path):
        folder = tmp_path / "project"
        folder.mkdir()
        path = folder / "osc.yaml"
        path.write_text("paths:\n  reference: data/ref.csv\n  models_dir: /opt/models\n")
        config = Config(path)
        assert config.path("reference") == folder.resolve() / "data" / "ref.csv"
        assert str(config.path("models_dir")) == "/opt/models"

    def test_unset_path(self, tmp_path):
        path = tmp_path / "osc.yaml"
        path.write_text("paths:\n  reference: null\n")
        with pytest.raises(ConfigError):
            Config(path).path("reference")

    def test_loop_settings(self, tmp_path):
        path = tmp_path / "osc.yaml"
        path.write_text(
            "run:\n  iterations: 7\n  seed: 11\n  budget: 20\n  use_feedback: false\n"
            "retrieval:\n  k_reference: 4\n  k_candidate: 2\n"
            "policy:\n  homo_window: [-5.8, -5.1]\n  risk_adjusted: true\n"
            "backend:\n  max_attempts: 5\n  retry_wait: 0\n"
        )
        loop = Config(path).loop
        assert loop.iterations == 7
        assert loop.seed == 11
        assert loop.budget == 20
        assert not loop.use_feedback
        assert loop.risk_adjusted
        assert (loop.retrieval.k_reference, loop.retrieval.k_candidate, loop.retrieval.seed) == (4, 2, 11)
        assert (loop.policy.homo_min, loop.policy.homo_max) == (-5.8, -5.1)
        assert loop.retry.max_attempts == 5
        assert loop.retry.wait == 0.0

    def test_bad_window(self, tmp_path):
        path = tmp_path / "osc.yaml"
        path.write_text("policy:\n  lumo_window: [-3.0]\n")
        with pytest.raises(ConfigError):
            Config(path).policy

    def test_empty_window(self, tmp_path):
        path = tmp_path / "osc.yaml"
        path.write_text("policy:\n  homo_window: [-5.0, -6.0]\n")
        with pytest.raises(ConfigError):
            Config(path).policy

    def test_section_must_be_mapping(self, tmp_path):
        path = tmp_path / "osc.yaml"
        path.write_text("decoding: fast\n")
        with pytest.raises(ConfigError):
            Config(path).decoding

    def test_predictor_settings(self, tmp_path):
        path = tmp_path / "osc.yaml"
        path.write_text("predictor:\n  hidden: 16\n  bits: 64\n  descriptors: [heavy_atoms]\n")
        config = Config(path)
        assert config.train.hidden == 16
        assert config.train.alpha == 0.2
        assert config.feature_spec.width == 64
        assert config.feature_spec.descriptors == ("heavy_atoms",)

    def test_sinkhorn_defaults(self):
        sk = Config().sinkhorn
        assert (sk.epsilon, sk.max_iterations, sk.marginal_tolerance) == (0.005, 2000, 1e-6)

    def test_backend_options_resolve_script(self, tmp_path):
        path = tmp_path / "osc.yaml"
        path.write_text("backend:\n  kind: scripted\n  script: logs/run.jsonl\n")
        config = Config(path)
        assert config.backend_kind == "scripted"
        assert config.backend_options()["script"] == tmp_path.resolve() / "logs" / "run.jsonl"

    def test_backend_options_keep_inline_script(self, tmp_path):
        path = tmp_path / "osc.yaml"
        path.write_text("backend:\n  kind: scripted\n  script: ['SMILES: CCO']\n")
        assert Config(path).backend_options()["script"] == ["SMILES: CCO"]

    def test_reload(self, tmp_path):
        path = tmp_path / "osc.yaml"
        path.write_text("run:\n  iterations: 2\n")
        assert reload_config(path).iterations == 2
