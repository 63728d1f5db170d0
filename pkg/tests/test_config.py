#!/usr/bin/env python
# -*- coding: utf-8 -*-

import pytest
from pydantic import ValidationError

from app.core.config_manager import config_manager
from app.core.exceptions import (
    CheckpointError,
    ConfigurationError,
    DataError,
    DivergenceError,
    NumericError,
    ShapeError,
    VLMGANError,
)
from app.schemas.report import LossReport, MetricReport, parse_log_line
from app.schemas.train_config import TrainConfig
from tests.conftest import TINY


def test_defaults_follow_desk_geometry():
    config = TrainConfig()
    assert config.stage_sizes == (16, 32, 64)
    assert config.image_size == 64
    assert config.num_regions == 16
    assert config.gamma1 == 4.0 and config.gamma2 == 5.0 and config.gamma3 == 5.0
    assert config.margin == 0.2 and config.tau0 == 0.07
    assert config.lambda1 == 5.0 and config.lambda2 == 5.0


def test_parse_text_handles_comments_and_lists():
    raw = config_manager.parse_text("""
        # comment
        embed_dim = 32   # trailing
        betas_gan = 0.5, 0.999

        use_vvm_supervision = false
    """)
    assert raw == {"embed_dim": "32", "betas_gan": ["0.5", "0.999"], "use_vvm_supervision": "false"}
    config = config_manager.build(raw, msb_heads=4)
    assert config.embed_dim == 32
    assert config.betas_gan == (0.5, 0.999)
    assert config.use_vvm_supervision is False


@pytest.mark.parametrize("text", ["embed_dim 32", "= 3", "seed = 1\nseed = 2"])
def test_parse_text_rejects_malformed(text):
    with pytest.raises(ConfigurationError):
        config_manager.parse_text(text)


@pytest.mark.parametrize("raw", [
    {"no_such_key": 1},
    {"margin": -1},
    {"base_size": 12},
    {"embed_dim": 30, "msb_heads": 4},
    {"batch_size_vlm": 1},
    {"betas_vlm": [0.5, 1.0]},
])
def test_build_rejects_invalid_values(raw):
    with pytest.raises(ConfigurationError):
        config_manager.build(raw)


def test_build_skips_none_overrides():
    assert config_manager.build({"seed": "7"}, seed=None).seed == 7
    assert config_manager.build({"seed": "7"}, seed=3).seed == 3


def test_dump_and_load_round_trip(tmp_path):
    config = config_manager.build(dict(TINY), seed=11, use_local_level=False)
    path = config_manager.dump(config, tmp_path / "config.txt")
    assert config_manager.load(path) == config
    with pytest.raises(ConfigurationError):
        config_manager.load(tmp_path / "missing.txt")


def test_exception_categories_and_exit_codes():
    codes = {}
    for cls in (ConfigurationError, DataError, ShapeError, NumericError, CheckpointError, DivergenceError):
        assert issubclass(cls, VLMGANError)
        codes[cls.category] = cls.exit_code
    assert len(set(codes.values())) == 6
    assert 0 not in codes.values()
    assert issubclass(DataError, ValueError) and issubclass(CheckpointError, RuntimeError)


def test_loss_report_flattening_and_log_line():
    report = LossReport(L_VG=0.5, L_VL=0.25, L_VGEN=0.0, L_VVM=0.75, L_G_adv=[1.0, 2.0], L_D=[3.0, 4.0], L_total=6.75)
    flat = report.as_dict()
    assert list(flat) == ["L_VG", "L_VL", "L_VGEN", "L_VVM", "L_G0", "L_G1", "L_D0", "L_D1", "L_total"]
    line = report.to_log_line(12)
    assert line.startswith("iter=12 ")
    parsed = parse_log_line(line)
    assert parsed["iter"] == 12
    assert parsed["L_G1"] == pytest.approx(2.0) and parsed["L_total"] == pytest.approx(6.75)


@pytest.mark.parametrize("kwargs", [{"L_VLM": float("nan")}, {"L_D": [1.0, float("inf")]}])
def test_loss_report_rejects_non_finite(kwargs):
    with pytest.raises(ValidationError):
        LossReport(**kwargs)


def test_metric_report_fields():
    assert set(MetricReport.model_fields) == {
        "vlms_mean", "vlms_std", "is_mean", "is_std", "fid", "r_precision_mean", "r_precision_std", "n_samples",
    }
