"""Desk-scale experiments: the single-utterance overfit run and the layer-selection sweep."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import DEFAULT_SAMPLE_RATE, Waveform
from .augment import mix_at_snr
from .data import generate_dataset, load_manifest, load_pair, synth_noise, synth_speech
from .evaluation import NATIVE_METRICS, enhance_waveform, evaluate, si_snr
from .model import DemucsConfig
from .objectives import InjectionSpec
from .phonetic import ProviderSpec, report_layer_weights
from .report import ResultRow, report, save_db
from .trainer import DataConfig, TrainConfig, Trainer, checkpoint_hash, load_for_inference

# Small enough for a CPU minute, large enough to overfit one clip in 200 steps.
TINY_MODEL = DemucsConfig(hidden=16, upscale=4, stride=4, kernel=8, depth=4)
TOY_PROVIDER = ProviderSpec(kind="toy", num_layers=5, dim=8, differentiable=True)


@dataclass
class SmokeResult:
    setting: str
    first_loss: float
    final_loss: float
    si_snr_in: float
    si_snr_out: float
    seconds: float
    checkpoint: Path
    losses: list = field(default_factory=list)

    @property
    def loss_drop(self) -> float:
        return 1.0 - self.final_loss / self.first_loss

    @property
    def si_snr_gain(self) -> float:
        return self.si_snr_out - self.si_snr_in


def smoke_utterance(duration: float = 0.5, snr_db: float = 5.0, seed: int = 0,
                    sample_rate: int = DEFAULT_SAMPLE_RATE):
    rng = np.random.default_rng(seed)
    clean = Waveform(synth_speech(duration, rng, sample_rate), sample_rate)
    noise = Waveform(synth_noise(duration, rng, sample_rate), sample_rate)
    return mix_at_snr(clean, noise, snr_db, "smoke")


def smoke_config(setting: str, out_dir, seed: int = 0, steps: int = 200, lr: float = 5e-3,
                 duration: float = 0.5, model: DemucsConfig = TINY_MODEL) -> TrainConfig:
    return TrainConfig(
        batch_size=1, lr=lr, epochs=steps, max_steps=steps, final_lr_fraction=0.1, seed=seed,
        out_dir=str(out_dir),
        model=model, injection=InjectionSpec(setting=setting, layer=2),
        provider=None if setting == "base" else TOY_PROVIDER,
        data=DataConfig(segment_s=duration, stride_s=duration, augment=False))


def overfit_smoke(setting: str, out_dir, seed: int = 0, steps: int = 200, lr: float = 5e-3,
                  duration: float = 0.5, snr_db: float = 5.0,
                  model: DemucsConfig = TINY_MODEL) -> SmokeResult:
    """Train the tiny model on one synthetic utterance and measure how well it fits."""
    pair = smoke_utterance(duration, snr_db, seed)
    cfg = smoke_config(setting, out_dir, seed, steps, lr, duration, model)
    start = time.perf_counter()
    trainer = Trainer(cfg, resume=False, train_pairs=[pair], valid_pairs=[pair])
    result = trainer.train()
    seconds = time.perf_counter() - start
    model, objective, _ = load_for_inference(trainer.last_path, trainer.provider)
    estimate = enhance_waveform(model, objective, pair.noisy)
    clean = pair.clean.samples.astype(np.float64)
    return SmokeResult(setting, result.train_losses[0], result.train_losses[-1],
                       si_snr(clean, pair.noisy.samples), si_snr(clean, estimate), seconds,
                       trainer.last_path, result.train_losses)


# ---------------------------------------------------------------------------
# Layer-selection sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepRun:
    label: str
    setting: str
    selection: str
    layer: int = 0


def sweep_runs(num_layers: int) -> list[SweepRun]:
    top = num_layers - 1
    runs = [SweepRun("Baseline", "base", "fixed")]
    runs += [SweepRun(str(i), "conditioning", "fixed", i) for i in range(num_layers)]
    runs += [SweepRun(f"Avg(0-{top})", "conditioning", "mean"),
             SweepRun(f"Lrn-W-Avg(0-{top})", "conditioning", "learned")]
    return runs


def layer_analysis(out_dir, seed: int = 0, steps: int = 30, num_utterances: int = 6,
                   duration: float = 1.0, provider: ProviderSpec = TOY_PROVIDER,
                   model: DemucsConfig = TINY_MODEL, lr: float = 3e-3, batch_size: int = 4,
                   manifest=None, metrics=NATIVE_METRICS) -> dict:
    """Train one conditioning model per layer selection and render the layer-sweep table.

    Without ``manifest`` a desk-scale synthetic set is generated under
    ``out_dir/data``. Returns the written paths, the result rows and the
    learned layer weights.
    """
    out_dir = Path(out_dir)
    if manifest is None:
        manifest = generate_dataset(out_dir / "data", num_utterances=num_utterances,
                                    duration=duration, seed=seed)
    records = load_manifest(manifest)
    train_pairs = [load_pair(r) for r in records if r.resolved_split == "train"]
    valid_pairs = [load_pair(r) for r in records if r.resolved_split == "valid"]
    rows, weights = [], {}
    config_label = f"H={model.hidden},U={model.upscale},S={model.stride}"
    for run in sweep_runs(provider.num_layers):
        run_dir = out_dir / "runs" / run.label
        cfg = TrainConfig(
            batch_size=batch_size, lr=lr, epochs=steps, max_steps=steps, seed=seed,
            out_dir=str(run_dir), model=model,
            injection=InjectionSpec(setting=run.setting, selection=run.selection, layer=run.layer),
            provider=None if run.setting == "base" else provider,
            data=DataConfig(manifest=str(manifest), segment_s=duration, stride_s=duration,
                            augment=False))
        trainer = Trainer(cfg, resume=False, train_pairs=train_pairs, valid_pairs=valid_pairs)
        trainer.train()
        ckpt = trainer.best_path
        result = evaluate(ckpt, manifest, metrics, split="valid", provider=trainer.provider)
        digest = checkpoint_hash(ckpt)
        setting = "Base" if run.setting == "base" else "Cond"
        phonetic = "-" if run.setting == "base" else provider.kind
        for metric, value in result.summary.items():
            rows.append(ResultRow(config_label, setting, phonetic, False, metric, value,
                                  layer=run.label, seed=seed, checkpoint_sha256=digest))
        if run.selection == "learned":
            _, objective, _ = load_for_inference(ckpt, trainer.provider)
            weights = report_layer_weights(objective.selection, out_dir)
    save_db(out_dir / "results.csv", rows)
    written = report(rows, out_dir, layer_weights=weights)
    (out_dir / "layer_weights.json").write_text(json.dumps({str(k): v for k, v in weights.items()}))
    return {"paths": written, "rows": rows, "weights": weights}

