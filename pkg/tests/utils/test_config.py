"""
Configuration Helper Tests for the JointSR Project
File loading, overrides, coercion, environment merging, the flat echo and package layering.
"""

import ast
import os
from typing import Optional, Tuple

import pytest
import yaml

from utils.config import (
    OUTPUT_ROOT_ENV, coerce_value, dump_flat, flatten, load_config_file, merge_sources, parse_overrides,
)
from utils.exceptions import ConfigError

UTILS_DIR = os.path.join(os.path.dirname(__file__), "..", "..", "utils")
DOMAIN_PACKAGES = {"engine", "evaluation", "flows", "models", "synth", "run_config", "run_jointsr"}


def imported_roots(path: str) -> set:
    with open(path, encoding="utf-8") as f:
        tree = ast.parse(f.read(), filename=path)
    roots = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.Import):
            roots.update(alias.name.split(".")[0] for alias in node.names)
        elif isinstance(node, ast.ImportFrom) and node.module and node.level == 0:
            roots.add(node.module.split(".")[0])
    return roots


@pytest.fixture
def clean_env(monkeypatch, tmp_path):
    """No output-root variable and no .env file in reach."""
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
    monkeypatch.chdir(tmp_path)


class TestLayering:

    @pytest.mark.critical
    @pytest.mark.parametrize("module", sorted(f for f in os.listdir(UTILS_DIR) if f.endswith(".py")))
    def test_utils_is_a_leaf_package(self, module):
        assert not imported_roots(os.path.join(UTILS_DIR, module)) & DOMAIN_PACKAGES


class TestLoading:

    @pytest.mark.unit
    def test_flatten_nested_and_dotted(self):
        assert flatten({"train": {"steps": 3}, "run.seed": 1}) == {"train.steps": 3, "run.seed": 1}

    @pytest.mark.negative
    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config_file(str(tmp_path / "absent.yaml"))

    @pytest.mark.negative
    @pytest.mark.parametrize("content", ["train: [unclosed", "- a\n- b\n"])
    def test_invalid_file_raises(self, tmp_path, content):
        path = tmp_path / "bad.yaml"
        path.write_text(content, encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config_file(str(path))

    @pytest.mark.edge_case
    def test_empty_file_is_empty_mapping(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("", encoding="utf-8")
        assert load_config_file(str(path)) == {}

    @pytest.mark.critical
    def test_merge_precedence(self, tmp_path, monkeypatch, clean_env):
        path = tmp_path / "run.yaml"
        path.write_text("train:\n  steps: 10\nrun:\n  output_dir: from_file\n", encoding="utf-8")
        monkeypatch.setenv(OUTPUT_ROOT_ENV, "from_env")
        flat = merge_sources(str(path), overrides={"train.steps": 20})
        assert flat == {"train.steps": 20, "run.output_dir": "from_env"}
        assert merge_sources(str(path), use_env=False)["run.output_dir"] == "from_file"

    @pytest.mark.unit
    def test_dump_flat_is_sorted_plain_yaml(self, tmp_path):
        path = dump_flat({"b.x": (1, 2), "a.y": "z"}, str(tmp_path / "echo"))
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f)
        assert list(data) == ["a.y", "b.x"]
        assert data["b.x"] == [1, 2]


class TestOverrides:

    @pytest.mark.unit
    def test_values_are_yaml_scalars(self):
        overrides = parse_overrides(["train.steps=5", "data.text_len=[2, 3]", "run.output_dir=a=b",
                                     "data.on_the_fly=false"])
        assert overrides == {"train.steps": 5, "data.text_len": [2, 3], "run.output_dir": "a=b",
                             "data.on_the_fly": False}

    @pytest.mark.negative
    def test_override_without_equals_raises(self):
        with pytest.raises(ConfigError):
            parse_overrides(["train.steps"])


class TestCoerceValue:

    @pytest.mark.unit
    @pytest.mark.parametrize("value, annotation, expected", [
        ("7", int, 7),
        (3.0, int, 3),
        ("off", bool, False),
        ("2", float, 2.0),
        ("[16, 64]", Tuple[int, int], (16, 64)),
        ("none", Optional[int], None),
        ("5", Optional[int], 5),
    ])
    def test_conversions(self, value, annotation, expected):
        assert coerce_value(value, annotation, "key") == expected

    @pytest.mark.negative
    @pytest.mark.parametrize("value, annotation", [(1.5, int), ("maybe", bool), (32, Tuple[int, int])])
    def test_bad_values_raise(self, value, annotation):
        with pytest.raises(ConfigError, match="key"):
            coerce_value(value, annotation, "key")
