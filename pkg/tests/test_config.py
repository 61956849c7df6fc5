"""
Configuration tests - yaml loading, path options and run settings
"""

import os

import pytest
import yaml

from plmmkit.config import DEFAULT_CONFIG_PATH, PathOptions, RunConfig, load_config


def test_project_config_loads():
    """Test 1: The bundled config.yaml has every section the CLI reads"""
    config = load_config()
    for section in ("matrix_store", "path", "cv", "runtime", "logging"):
        assert section in config, section
    assert os.path.isabs(config["logging"]["log_dir"])
    PathOptions.from_config(config)


def test_relative_directories_resolve_against_config(tmp_path):
    """Test 2: log_dir and results_dir are made absolute relative to the config file"""
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"logging": {"log_dir": "logs"}, "output": {"results_dir": "out"}}))
    config = load_config(str(path))
    assert config["logging"]["log_dir"] == str(tmp_path / "logs")
    assert config["output"]["results_dir"] == str(tmp_path / "out")
    assert os.path.exists(DEFAULT_CONFIG_PATH)


def test_path_option_defaults():
    """Test 3: Penalty names are case-insensitive and gamma defaults per penalty"""
    assert PathOptions(penalty="mcp").gamma == 3.0
    assert PathOptions(penalty="Scad").gamma == 3.7
    assert PathOptions().gamma is None
    assert PathOptions().effective_gamma == 0.0
    assert PathOptions().resolve_min_ratio(100, 10) == 0.001
    assert PathOptions().resolve_min_ratio(10, 100) == 0.05
    assert PathOptions(lambda_min_ratio=0.2).resolve_min_ratio(10, 100) == 0.2


def test_path_option_validation():
    """Test 4: Invalid gamma, penalty and lambda sequences are rejected"""
    for kwargs in ({"penalty": "ridge"}, {"penalty": "MCP", "gamma": 0.5}, {"penalty": "SCAD", "gamma": 2.0},
                   {"lambdas": []}, {"lambdas": [0.5, -0.1]}, {"lambdas": [0.2, 0.2]}, {"nlambda": 0}):
        with pytest.raises(ValueError):
            PathOptions(**kwargs)


def test_from_config_overrides():
    """Test 5: Keyword overrides win over the yaml section; None leaves it alone"""
    config = {"path": {"penalty": "lasso", "nlambda": 30, "tol": 1e-6}}
    opts = PathOptions.from_config(config, penalty="SCAD", nlambda=None)
    assert opts.penalty == "SCAD"
    assert opts.nlambda == 30
    assert opts.tol == 1e-6


def test_run_config(tmp_path):
    """Test 6: Run settings validate folds, budget and create the output directory"""
    out = tmp_path / "new" / "dir"
    run = RunConfig(subcommand="fit", output_dir=str(out), threads=2)
    assert out.is_dir()
    assert run.threads == 2
    assert run.prediction_type == "blup"
    with pytest.raises(ValueError):
        RunConfig(subcommand="cv", nfolds=1)
    with pytest.raises(ValueError):
        RunConfig(subcommand="fit", memory_budget_mb=0)
    with pytest.raises(ValueError):
        RunConfig(subcommand="train")
