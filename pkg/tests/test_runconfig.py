import pytest

from pairwise_mlm.exceptions import (ConfigKeyError, ConfigValidationError,
                                     PairwiseMlmTypeError)
from pairwise_mlm.runconfig import (build_run_config, load_run_config,
                                    merge_layers)


### FIXTURES ###
@pytest.fixture
def yaml_config_file():
    return "tests/mocked_data/run_config.yaml"


@pytest.fixture
def json_config_file():
    return "tests/mocked_data/run_config.json"


@pytest.fixture
def toml_config_file():
    return "tests/mocked_data/run_config.toml"


### TESTS ###
def test_file_formats_agree(yaml_config_file, json_config_file, toml_config_file):
    hashes = {load_run_config(path, env={}).config_hash for path in (yaml_config_file, json_config_file, toml_config_file)}

    assert len(hashes) == 1, "the same run config must hash the same whatever its file format"


def test_file_values_over_presets(yaml_config_file):
    run = load_run_config(yaml_config_file, env={})

    assert run.seed == 7
    assert run.model.hidden_dim == 16, "model_preset tiny supplies the shape"
    assert run.model.lambda_ == 0.5
    assert run.train.total_steps == 40
    assert run.train.peak_lr == 3e-4, "train_preset desk supplies the learning rate"
    assert run.masking.mask_prob == 0.2
    assert run.finetune.epochs == 2


def test_run_seed_reaches_sections(yaml_config_file):
    run = load_run_config(yaml_config_file, env={})

    assert run.masking.seed == run.train.seed == run.finetune.seed == 7


def test_precedence(yaml_config_file):
    env = {"train": {"total_steps": "60", "batch_size": "8"}, "run": {"seed": "3"}}
    flags = {"train": {"total_steps": 80}, "masking": {"mask_prob": None}}
    run = load_run_config(yaml_config_file, flags=flags, env=env)

    assert run.train.total_steps == 80, "flags beat the environment"
    assert run.train.batch_size == 8, "the environment beats the file"
    assert run.train.warmup_steps == 4, "the file beats the preset"
    assert run.masking.mask_prob == 0.2, "unset flags change nothing"
    assert run.seed == 3


def test_environment_variables(monkeypatch, yaml_config_file):
    monkeypatch.setenv("PMLM__TRAIN__TOTAL_STEPS", "55")
    monkeypatch.setenv("PMLM__MODEL__LAMBDA", "0")
    run = load_run_config(yaml_config_file)

    assert run.train.total_steps == 55
    assert run.model.lambda_ == 0.0


def test_unknown_environment_key(monkeypatch):
    monkeypatch.setenv("PMLM__TRAIN__TOTAL_STEP", "55")

    with pytest.raises(ConfigKeyError) as err:
        load_run_config()
    assert "total_steps" in str(err.value)


def test_unknown_top_level_key(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("seed: 1\noptimiser:\n  lr: 0.1\n")

    with pytest.raises(ConfigKeyError) as err:
        load_run_config(path, env={})
    assert err.value.key == "optimiser"
    assert "train" in err.value.valid_keys


def test_section_must_be_a_mapping(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("train: 5\n")

    with pytest.raises(PairwiseMlmTypeError):
        load_run_config(path, env={})


def test_invalid_values():
    with pytest.raises(ConfigValidationError):
        load_run_config(flags={"masking": {"mask_prob": 1.5}}, env={})
    with pytest.raises(ConfigValidationError):
        load_run_config(flags={"train": {"warmup_steps": 100, "total_steps": 50}}, env={})
    with pytest.raises(ConfigValidationError):
        build_run_config(merge_layers({"model_preset": "huge"}))


def test_merge_layers():
    merged = merge_layers({"seed": 1, "train": {"batch_size": 4}}, None, {"seed": None, "train": {"seed": 9}})

    assert merged["seed"] == 1
    assert merged["train"] == {"batch_size": 4, "seed": 9}
    assert merged["model"] == {}


def test_defaults_without_any_layer():
    run = load_run_config(env={})

    assert run.model_preset == "desk"
    assert run.model.hidden_dim == 64
    assert run.to_document()["model"]["lambda"] == 1.0
