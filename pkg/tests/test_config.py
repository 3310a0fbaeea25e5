import dataclasses

import pytest

from trifill.config import (ACB_DEPTHS, BIASED_PENALTY_DIVISOR, ConfigError,
                            FUSION_VARIANTS, LossWeights, ModelConfig,
                            TrainConfig, config_from_mapping,
                            config_to_mapping, parse_config_text)


def test_defaults_validate():
    ModelConfig().validate()
    TrainConfig().validate()


@pytest.mark.parametrize("changes", [
    {"image_size": 30},
    {"acb_depth": 3},
    {"dilations": ()},
    {"dilations": (0, 1)},
    {"decoder_stages": 2},
    {"heads": 3},
    {"patch_size": 7},
    {"fusion": "bilinear"},
    {"fusion": "add", "biased_prior": True},
    {"k_classes": 1},
    {"precision": "float16"},
    {"biased_prior": True, "use_seg_branch": False},
])
def test_model_config_rejects(changes):
    with pytest.raises(ConfigError):
        dataclasses.replace(ModelConfig(), **changes).validate()


@pytest.mark.parametrize("changes", [
    {"steps": 0},
    {"batch_size": 0},
    {"lr_g": 0.0},
    {"beta1": 1.0},
    {"mask_mode": "square"},
    {"checkpoint_every": 0},
])
def test_train_config_rejects(changes):
    with pytest.raises(ConfigError):
        dataclasses.replace(TrainConfig(), **changes).validate()


def test_negative_loss_weight_rejected():
    with pytest.raises(ConfigError, match=">= 0"):
        LossWeights(tv=-0.1).validate()


def test_biased_scaling_divides_aux_weights():
    w = LossWeights(edge=3.0, seg=1.5).scaled_for_biased()
    assert w.edge == 3.0 / BIASED_PENALTY_DIVISOR
    assert w.seg == 1.5 / BIASED_PENALTY_DIVISOR
    assert w.hole == LossWeights().hole  # untouched


def test_parse_config_text():
    parsed = parse_config_text(
        "# comment\nseed = 7\n\nmask_mode= hard  # trailing\n")
    assert parsed == {"seed": "7", "mask_mode": "hard"}


def test_parse_rejects_bad_line():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("a = 1\nnot a pair\n")


def test_from_mapping_coerces_and_routes_loss_keys():
    cfg = config_from_mapping(ModelConfig, {
        "acb_depth": "4",
        "biased_prior": "true",
        "dilations": "1,2,3",
        "loss.tv": "0.5",
    })
    assert cfg.acb_depth == 4
    assert cfg.biased_prior is True
    assert cfg.dilations == (1, 2, 3)
    assert cfg.loss_weights.tv == 0.5
    assert cfg.loss_weights.hole == LossWeights().hole


@pytest.mark.parametrize("mapping", [
    {"flux": "1"},
    {"loss_weights": "1"},
    {"loss.flux": "1"},
    {"acb_depth": "two"},
])
def test_from_mapping_rejects(mapping):
    with pytest.raises(ConfigError):
        config_from_mapping(ModelConfig, mapping)


@pytest.mark.parametrize("cfg", [
    ModelConfig(),
    ModelConfig(acb_depth=8, fusion="spade", biased_prior=True,
                precision="float32", dilations=(1, 3),
                loss_weights=LossWeights(tv=0.125, edge=0.3)),
    TrainConfig(),
    TrainConfig(seed=123, lr_g=3e-5, mask_mode="hard", out_dir="runs/x"),
])
def test_mapping_round_trip(cfg):
    mapping = config_to_mapping(cfg)
    assert all(isinstance(v, str) for v in mapping.values())
    assert config_from_mapping(type(cfg), mapping) == cfg


def test_constants_cover_cli_grid():
    assert set(ACB_DEPTHS) == {2, 4, 6, 8}
    assert len(FUSION_VARIANTS) == 6


def test_stage_channels_halve():
    cfg = ModelConfig(base_channels=12)
    assert cfg.stage_channels == (48, 24, 12)
