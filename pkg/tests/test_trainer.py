import json

import numpy as np
import pytest
import torch

from phaseforge.audio import Waveform
from phaseforge.augment import AugmentConfig, mix_at_snr
from phaseforge.data import ManifestRecord, synth_noise, synth_speech
from phaseforge.errors import ConfigurationError, TrainingError
from phaseforge.model import DemucsConfig
from phaseforge.objectives import InjectionSpec
from phaseforge.phonetic import ProviderSpec
from phaseforge.trainer import (
    CHECKPOINT_FORMAT, DataConfig, TrainConfig, Trainer, apply_env_overrides, gradient_check,
    load_config, load_for_inference, read_checkpoint,
)

SMALL = DemucsConfig(hidden=4, depth=2, upscale=2, stride=2, kernel=8)
TOY = ProviderSpec(kind="toy", num_layers=4, dim=8, differentiable=True)


def pairs(count=3, seconds=0.3, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        clean = Waveform(synth_speech(seconds, rng))
        noise = Waveform(synth_noise(seconds, rng))
        out.append(mix_at_snr(clean, noise, 5.0, f"utt{i}"))
    return out


def config(tmp_path, setting="base", epochs=4, augment=True, **kw):
    return TrainConfig(
        batch_size=2, lr=1e-3, epochs=epochs, seed=7, out_dir=str(tmp_path), model=SMALL,
        injection=InjectionSpec(setting=setting, layer=1, **kw),
        provider=None if setting == "base" else TOY,
        data=DataConfig(segment_s=0.2, stride_s=0.1, augment=augment,
                        augmentation=AugmentConfig(max_shift_s=0.02)))


def params(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


def test_fixed_seed_gives_identical_trajectories(tmp_path):
    data = pairs()
    a = Trainer(config(tmp_path / "a"), train_pairs=data).train()
    b = Trainer(config(tmp_path / "b"), train_pairs=data).train()
    assert a.train_losses == b.train_losses
    assert len(a.train_losses) > 4


def test_resume_continues_bit_identically(tmp_path):
    data = pairs()
    full = Trainer(config(tmp_path / "full"), train_pairs=data)
    full.train()
    first = Trainer(config(tmp_path / "split"), train_pairs=data)
    first.train(stop_after_epoch=2)
    assert read_checkpoint(first.last_path)["epoch"] == 2
    second = Trainer(config(tmp_path / "split"), train_pairs=data)
    assert second.epoch == 2
    second.train()
    final_a, final_b = params(full.model), params(second.model)
    assert all(torch.equal(final_a[k], final_b[k]) for k in final_a)
    log = [json.loads(line) for line in second.metrics_path.read_text().splitlines()]
    assert [r["epoch"] for r in log if r["kind"] == "valid"] == [1, 2, 3, 4]


def test_outputs_and_checkpoint_format(tmp_path):
    trainer = Trainer(config(tmp_path, epochs=2), train_pairs=pairs())
    result = trainer.train()
    assert result.best_checkpoint.exists() and result.last_checkpoint.exists()
    payload = read_checkpoint(result.last_checkpoint)
    assert payload["format"] == CHECKPOINT_FORMAT
    assert {"config", "model", "optimizer", "epoch", "rng"} <= set(payload)
    records = [json.loads(line) for line in result.metrics_path.read_text().splitlines()]
    train = [r for r in records if r["kind"] == "train"]
    assert {"step", "setting", "l1", "sc", "mag", "phonetic", "total"} <= set(train[0])
    valid = [r for r in records if r["kind"] == "valid"]
    assert len(valid) == 2 and valid[0]["best"] is True
    assert read_checkpoint(result.best_checkpoint)["best"] == min(r["valid_total"] for r in valid)


def test_checkpoint_reloads_for_inference(tmp_path):
    trainer = Trainer(config(tmp_path, setting="conditioning", epochs=1), train_pairs=pairs())
    trainer.train()
    model, objective, cfg = load_for_inference(trainer.last_path)
    x = torch.randn(1, 3000)
    with torch.no_grad():
        trainer.model.eval()
        assert torch.equal(objective.enhance(x, model), trainer.objective.enhance(x, trainer.model))
    assert cfg.injection.setting == "conditioning"


def test_read_checkpoint_rejects_other_files(tmp_path):
    torch.save({"weights": 1}, tmp_path / "other.pt")
    with pytest.raises(ValueError, match=CHECKPOINT_FORMAT):
        read_checkpoint(tmp_path / "other.pt")


def test_nan_loss_aborts_with_snapshot(tmp_path):
    trainer = Trainer(config(tmp_path, epochs=1, augment=False), train_pairs=pairs())
    with torch.no_grad():
        trainer.model.decoder[-1][-1].bias.fill_(float("nan"))
    with pytest.raises(TrainingError, match="non-finite"):
        trainer.train()
    snapshot = json.loads((tmp_path / "nan_batch.json").read_text())
    assert snapshot["batch_ids"] and all(i.startswith("utt") for i in snapshot["batch_ids"])


@pytest.mark.parametrize("setting", ["regularization", "supervision", "conditioning"])
def test_provider_parameters_never_change(tmp_path, setting):
    trainer = Trainer(config(tmp_path, setting=setting, epochs=1), train_pairs=pairs())
    before = {k: v.numpy().tobytes() for k, v in trainer.provider.state_dict().items()}
    trainer.train()
    after = {k: v.numpy().tobytes() for k, v in trainer.provider.state_dict().items()}
    assert before == after
    assert all(id(p) not in {id(q) for q in trainer.trainable_parameters()}
               for p in trainer.provider.parameters())


def test_zero_lambda_regularization_updates_like_base(tmp_path):
    base = Trainer(config(tmp_path / "base", epochs=1), train_pairs=pairs())
    reg = Trainer(config(tmp_path / "reg", setting="regularization", epochs=1, lam=0.0),
                  train_pairs=pairs())
    base.train()
    reg.train()
    a, b = params(base.model), params(reg.model)
    assert max(float((a[k] - b[k]).abs().max()) for k in a) <= 1e-7


def test_conditioning_with_causal_model_is_rejected_up_front(tmp_path):
    cfg = config(tmp_path / "run", setting="conditioning")
    cfg.model = DemucsConfig(hidden=4, depth=2, causal=True)
    with pytest.raises(ConfigurationError, match="non-causal"):
        Trainer(cfg, train_pairs=pairs())
    assert not (tmp_path / "run").exists()


def test_validation_has_no_side_effects(tmp_path):
    trainer = Trainer(config(tmp_path, epochs=1), train_pairs=pairs())
    before = params(trainer.model)
    first = trainer.validate()
    assert first == trainer.validate()
    after = params(trainer.model)
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_training_from_manifest(tmp_path, synth_manifest):
    cfg = config(tmp_path, epochs=1)
    cfg.data.manifest = str(synth_manifest)
    trainer = Trainer(cfg)
    assert {p.id.split("@")[0] for p in trainer.train_set} == {"syn0000", "syn0001", "syn0002"}
    assert [p.id for p in trainer.valid_set] == ["syn0003"]
    trainer.train()
    with pytest.raises(ConfigurationError, match="manifest"):
        Trainer(config(tmp_path / "none"))


def test_valentini_speakers_go_to_validation():
    assert ManifestRecord("p286_001", "c.wav", noisy_path="n.wav").resolved_split == "valid"
    assert ManifestRecord("p232_001", "c.wav", noisy_path="n.wav").resolved_split == "train"


# -- configuration ---------------------------------------------------------------------

def test_config_invariants():
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=0)
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.lr, cfg.beta1, cfg.beta2, cfg.epochs) == (16, 3e-4, 0.9, 0.999, 300)


def test_config_round_trip_and_unknown_keys():
    cfg = TrainConfig(provider=TOY, injection=InjectionSpec("supervision", layer=2))
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigurationError, match="unknown"):
        TrainConfig.from_dict({"learning_rate": 1.0})


def test_env_overrides_nested_keys(tmp_path):
    path = tmp_path / "train.toml"
    path.write_text('lr = 0.001\n[model]\nhidden = 8\n[data]\nmanifest = "m.jsonl"\n')
    env = {"PHASEFORGE_MODEL__HIDDEN": "64", "PHASEFORGE_SEED": "5",
           "PHASEFORGE_DATA__AUGMENTATION__MAX_SHIFT_S": "0.25", "OTHER": "x"}
    cfg = load_config(path, environ=env, overrides={"epochs": 3})
    assert cfg.model.hidden == 64 and cfg.seed == 5 and cfg.lr == 0.001 and cfg.epochs == 3
    assert cfg.data.augmentation.max_shift_s == 0.25 and cfg.data.manifest == "m.jsonl"
    assert apply_env_overrides({}, {"PHASEFORGE_OUT_DIR": "runs/x"}) == {"out_dir": "runs/x"}


def test_missing_provider_is_a_configuration_error(tmp_path):
    cfg = config(tmp_path, setting="supervision")
    cfg.provider = None
    with pytest.raises(ConfigurationError, match="provider"):
        Trainer(cfg, train_pairs=pairs())


def test_provider_from_registry(tmp_path):
    registry = tmp_path / "providers.json"
    registry.write_text(json.dumps({"toy": {"kind": "toy", "num_layers": 4, "dim": 8,
                                            "differentiable": True}}))
    cfg = config(tmp_path / "run", setting="supervision", epochs=1)
    cfg.provider, cfg.provider_registry, cfg.provider_name = None, str(registry), "toy"
    assert Trainer(cfg, train_pairs=pairs()).provider.num_layers == 4


# -- gradient check -----------------------------------------------------------------------

def test_gradient_check_reports_frozen_provider_and_logits():
    report = gradient_check("conditioning", num_params_probed=20)
    assert len(report.probes) >= 20
    assert report.max_rel_error < 1e-3
    assert report.provider_grads and all(v == 0.0 for v in report.provider_grads.values())
    logits = [p for p in report.probes if p.name.endswith("logits")]
    assert logits and all(abs(p.analytic) > 0 for p in logits)
    assert json.dumps(report.to_dict())


def test_learning_rate_anneals_linearly_to_final_fraction(tmp_path):
    cfg = config(tmp_path, epochs=3, augment=False)
    assert Trainer(cfg, train_pairs=pairs()).learning_rate(5) == cfg.lr
    cfg.final_lr_fraction = 0.1
    trainer = Trainer(cfg, train_pairs=pairs())
    last = trainer.total_steps - 1
    assert trainer.learning_rate(0) == cfg.lr
    assert trainer.learning_rate(last) == pytest.approx(0.1 * cfg.lr, rel=1e-12)
    mid = trainer.learning_rate(last / 2)
    assert mid == pytest.approx(0.55 * cfg.lr, rel=1e-12)
    trainer.train()
    assert trainer.optimizer.param_groups[0]["lr"] == pytest.approx(0.1 * cfg.lr, rel=1e-12)
    with pytest.raises(ConfigurationError):
        TrainConfig(final_lr_fraction=0.0)
