import pytest

from umt.errors import ConfigError
from umt.pipeline.config import (
    PRESETS,
    RunConfig,
    apply_overrides,
    build_config,
    desk_tiny_stage2,
    from_dict,
    load_config_file,
)


def test_defaults_validate():
    cfg = RunConfig().validate()
    assert cfg.stage == 1 and cfg.loss.enabled == ("uta",)
    assert cfg.mask.video == 0.8 and cfg.mask.image == 0.5 and cfg.mask.text == 0.5
    assert cfg.optim.min_lr == 1e-6 and cfg.optim.clip_grad == 0.0


def test_dotted_and_nested_overrides():
    cfg = apply_overrides(RunConfig(), {"mask.video": 0.6, "optim": {"lr": 2e-3, "warmup_steps": 5}, "seed": 3})
    assert (cfg.mask.video, cfg.optim.lr, cfg.optim.warmup_steps, cfg.seed) == (0.6, 2e-3, 5, 3)


def test_string_values_coerced():
    cfg = apply_overrides(RunConfig(), {"optim.lr": "0.002", "optim.total_steps": "40",
                                        "data.interleave_images": "false", "loss.enabled": "uta"})
    assert cfg.optim.lr == 0.002 and cfg.optim.total_steps == 40
    assert cfg.data.interleave_images is False and cfg.loss.enabled == ("uta",)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), {"nonsense.key": 1})
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), {"optim.learning_rate": 1})
    with pytest.raises(ConfigError):
        build_config("no-such-preset")


@pytest.mark.parametrize("overrides", [
    {"optim.warmup_steps": 600},
    {"optim.lr": 0.0},
    {"loss.enabled": ("vtc",)},
    {"stage": 3},
    {"mask.type": "checker"},
    {"data.sampling": "every"},
])
def test_invalid_configs(overrides):
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), overrides).validate()


def test_yaml_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("mask.video: 0.7\noptim:\n  lr: 0.0005\nseed: 9\n")
    cfg = build_config("desk-tiny", overrides=load_config_file(path))
    assert (cfg.mask.video, cfg.optim.lr, cfg.seed) == (0.7, 5e-4, 9)
    path.write_text("- a\n- b\n")
    with pytest.raises(ConfigError):
        load_config_file(path)


def test_json_roundtrip():
    cfg = desk_tiny_stage2(seed=4)
    assert from_dict(cfg.to_dict()) == cfg


def test_full_size_presets():
    s1 = build_config("paper-b16-stage1")
    assert (s1.optim.lr, s1.optim.beta1, s1.optim.beta2, s1.optim.weight_decay) == (1.2e-3, 0.9, 0.95, 0.05)
    assert s1.optim.batch_size == 2048 and s1.student.k_align == 6 and s1.mask.video == 0.8
    # epochs -> steps at batch 2048 over the approximate 660k-video corpus
    assert s1.optim.warmup_steps == round(40 * 660_000 / 2048)
    assert s1.optim.total_steps == round(200 * 660_000 / 2048)
    s2 = build_config("paper-stage2-5m")
    assert s2.stage == 2 and set(s2.loss.enabled) == {"uta", "vtc", "vtm", "mlm"}
    assert (s2.text.depth, s2.decoder.depth) == (9, 3)
    assert s2.student_config().head_dims == (768,) * 5 + (512,)
    assert set(PRESETS) == {"paper-b16-stage1", "paper-stage2-5m", "desk-tiny"}


def test_stage_must_match_preset():
    with pytest.raises(ConfigError):
        build_config("paper-b16-stage1", stage=2)
    assert build_config("desk-tiny", stage=2).stage == 2
