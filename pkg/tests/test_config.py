#!/usr/bin/env python3
"""設定ファイル読み込みのテスト"""

import os
import sys
import tempfile
from pathlib import Path
from unittest.mock import patch

# プロジェクトルートをパスに追加
sys.path.insert(0, str(Path(__file__).parent.parent.resolve()))

import pytest
import yaml

from config import BASE_DIR
from config import DATA_ROOT_ENV
from config import ConfigError
from config import RunConfig
from config import load_config
from config import parse_config


class TestParseConfig:
    """辞書からの設定構築"""

    def test_defaults(self):
        """空の設定は既定値になる"""
        config = parse_config({})
        assert config.train.epochs == 200
        assert config.train.milestones == [60, 120, 160, 180]
        assert config.train.gamma == 0.5
        assert config.prior.learning_rate == 3e-4
        assert config.losses.lambda_c == 1500.0
        assert config.data.points_per_object == 3000
        assert config.evaluate.diversity_clusters == 20

    def test_relative_paths_resolved(self):
        """相対パスはプロジェクトルート基準"""
        config = parse_config(None)
        assert Path(config.logging.file).is_absolute()
        assert Path(config.database.path) == BASE_DIR / "runs.db"
        assert config.data.dataset_path == BASE_DIR / "data" / "corpus.dvqd"

    def test_nested_override(self):
        """ネストした値の上書き"""
        config = parse_config({"data": {"oracle": {"steps": 5}}, "losses": {"beta": 1}})
        assert config.data.oracle.steps == 5
        assert config.losses.beta == 1.0
        assert isinstance(config.losses.beta, float)

    def test_unknown_key(self):
        """未知のキーはエラー"""
        with pytest.raises(ConfigError, match="train.epoch"):
            parse_config({"train": {"epoch": 3}})

    def test_wrong_type(self):
        """型の不一致はエラー"""
        with pytest.raises(ConfigError, match="train.epochs"):
            parse_config({"train": {"epochs": "many"}})
        with pytest.raises(ConfigError, match="milestones"):
            parse_config({"train": {"milestones": 60}})
        with pytest.raises(ConfigError):
            parse_config({"decoder": {"use_correction": 1}})

    def test_section_must_be_mapping(self):
        """セクションは辞書でなければならない"""
        with pytest.raises(ConfigError, match="mapping"):
            parse_config({"train": [1, 2]})

    @pytest.mark.parametrize(
        "raw",
        [
            {"model": {"num_parts": 7}},
            {"hand": {"num_vertices": 100}},
            {"sample": {"mask_ratio": 1.0}},
            {"sample": {"temperature": 0.0}},
            {"losses": {"lambda_m": 5.0}},
        ],
    )
    def test_validation(self, raw):
        """値の範囲チェック"""
        with pytest.raises(ConfigError):
            parse_config(raw)

    def test_data_root_from_environment(self):
        """環境変数によるデータディレクトリの上書き"""
        with tempfile.TemporaryDirectory() as temp_dir:
            with patch.dict(os.environ, {DATA_ROOT_ENV: temp_dir}):
                config = parse_config({})
            assert config.data.root == temp_dir

    def test_as_dict_round_trip(self):
        """辞書化した設定から同じ設定を再構築"""
        config = parse_config({"train": {"epochs": 7}})
        rebuilt = parse_config(config.as_dict())
        assert rebuilt == config
        assert isinstance(rebuilt, RunConfig)


class TestLoadConfig:
    """YAMLファイルからの読み込み"""

    def setup_method(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.temp_path = Path(self.temp_dir.name)

    def teardown_method(self):
        self.temp_dir.cleanup()

    def test_repository_config(self):
        """同梱のconfig.yamlは既定値と一致"""
        assert load_config() == parse_config({})

    def test_load_file(self):
        """YAMLファイルの読み込み"""
        path = self.temp_path / "config.yaml"
        path.write_text(yaml.safe_dump({"train": {"epochs": 3}}))
        assert load_config(path).train.epochs == 3

    def test_missing_file(self):
        """存在しないファイル"""
        with pytest.raises(FileNotFoundError, match="not found"):
            load_config(self.temp_path / "missing.yaml")

    def test_invalid_yaml(self):
        """不正なYAML"""
        path = self.temp_path / "config.yaml"
        path.write_text("train: [unclosed\n")
        with pytest.raises(ValueError, match="Invalid YAML"):
            load_config(path)
