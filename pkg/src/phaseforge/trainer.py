"""Training loop, configuration, checkpoints and the gradient-check harness."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .audio import DEFAULT_SAMPLE_RATE
from .augment import AugmentConfig, NoisyCleanPair, augment_batch, segment_dataset
from .data import load_manifest, load_pair
from .errors import ConfigurationError, TrainingError
from .model import Demucs, DemucsConfig
from .objectives import Objective, InjectionSpec, check_compatible
from .phonetic import PhoneticProvider, ProviderSpec, build_provider, load_registry

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "phase-forge-ckpt-v1"
ENV_PREFIX = "PHASEFORGE_"


@dataclass
class DataConfig:
    manifest: str = ""
    segment_s: float = 4.5
    stride_s: float = 0.5
    sample_rate: int = DEFAULT_SAMPLE_RATE
    augment: bool = True
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 300
    max_steps: int | None = None
    final_lr_fraction: float = 1.0
    seed: int = 0
    out_dir: str = "runs/default"
    model: DemucsConfig = field(default_factory=DemucsConfig)
    injection: InjectionSpec = field(default_factory=InjectionSpec)
    provider: ProviderSpec | None = None
    provider_registry: str | None = None
    provider_name: str | None = None
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError("learning rate must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if not 0 < self.final_lr_fraction <= 1:
            raise ConfigurationError("final_lr_fraction must be in (0, 1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return _build(cls, data)


def _build(cls, data):
    """Instantiate nested dataclasses from plain dicts, rejecting unknown keys."""
    if data is None or dataclasses.is_dataclass(data):
        return data
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    hints = _nested_types()
    for key, value in data.items():
        sub = hints.get((cls.__name__, key))
        kwargs[key] = _build(sub, value) if sub and isinstance(value, dict) else value
    return cls(**kwargs)


def _nested_types():
    return {
        ("TrainConfig", "model"): DemucsConfig,
        ("TrainConfig", "injection"): InjectionSpec,
        ("TrainConfig", "provider"): ProviderSpec,
        ("TrainConfig", "data"): DataConfig,
        ("DataConfig", "augmentation"): AugmentConfig,
    }


def _parse_env_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_env_overrides(data: dict, environ=None, prefix: str = ENV_PREFIX) -> dict:
    """Override config keys from ``PHASEFORGE_<KEY>`` variables.

    Nested keys are joined with a double underscore, e.g.
    ``PHASEFORGE_MODEL__HIDDEN=64`` or ``PHASEFORGE_LR=1e-3``. Values are
    parsed as JSON when possible.
    """
    environ = os.environ if environ is None else environ
    data = json.loads(json.dumps(data))
    for name, raw in sorted(environ.items()):
        if not name.startswith(prefix):
            continue
        path = name[len(prefix):].lower().split("__")
        node = data
        for key in path[:-1]:
            node = node.setdefault(key, {})
            if node is None:
                raise ConfigurationError(f"{name}: cannot override inside a null section")
        node[path[-1]] = _parse_env_value(raw)
    return data


def load_config(path=None, environ=None, overrides: dict | None = None) -> TrainConfig:
    """Read a TOML or JSON training config, then apply env and explicit overrides."""
    data = {}
    if path is not None:
        path = Path(path)
        text = path.read_text()
        if path.suffix == ".toml":
            import tomli

            data = tomli.loads(text)
        else:
            data = json.loads(text)
    data = apply_env_overrides(data, environ)
    for key, value in (overrides or {}).items():
        data[key] = value
    return TrainConfig.from_dict(data)


def resolve_provider(cfg: TrainConfig) -> PhoneticProvider | None:
    if cfg.injection.setting == "base":
        return None
    if cfg.provider is not None:
        return build_provider(cfg.provider)
    if cfg.provider_registry and cfg.provider_name:
        registry = load_registry(cfg.provider_registry)
        if cfg.provider_name not in registry:
            raise ConfigurationError(
                f"provider {cfg.provider_name!r} not in registry {cfg.provider_registry}")
        return build_provider(registry[cfg.provider_name], cfg.provider_name)
    raise ConfigurationError(
        f"setting {cfg.injection.setting!r} needs a provider (inline or via registry)")


def prepare_model_config(cfg: TrainConfig, provider: PhoneticProvider | None) -> DemucsConfig:
    """The model config with the conditioning width filled in from the provider."""
    model_cfg = cfg.model
    if cfg.injection.setting == "conditioning":
        if model_cfg.causal:
            raise ConfigurationError("conditioning requires non-causal setup")
        if model_cfg.cond_dim == 0 and provider is not None:
            model_cfg = dataclasses.replace(model_cfg, cond_dim=provider.feature_dim)
    return model_cfg


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, cfg: TrainConfig, model: Demucs, objective: Objective,
                    optimizer=None, epoch: int = 0, step: int = 0,
                    best: float = math.inf, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": json.dumps(cfg.to_dict()),
        "model_config": json.dumps(model.cfg.to_dict()),
        "model": model.state_dict(),
        "objective": objective.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "step": step,
        "best": best,
        "rng": {"torch": torch.get_rng_state(), "numpy_seed": cfg.seed},
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> dict:
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    return payload


def checkpoint_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_for_inference(path, provider: PhoneticProvider | None = None):
    """Rebuild (model, objective, config) from a checkpoint for enhancement."""
    payload = read_checkpoint(path)
    cfg = TrainConfig.from_dict(json.loads(payload["config"]))
    if provider is None:
        provider = resolve_provider(cfg)
    model = Demucs(DemucsConfig.from_dict(json.loads(payload["model_config"])))
    model.load_state_dict(payload["model"])
    objective = Objective(cfg.injection, model.cfg, provider)
    objective.load_state_dict(payload["objective"])
    model.eval()
    return model, objective, cfg


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    metrics_path: Path
    train_losses: list = field(default_factory=list)
    valid_losses: list = field(default_factory=list)


def _stack(pairs: list[NoisyCleanPair], attr: str) -> torch.Tensor:
    return torch.from_numpy(np.stack([getattr(p, attr).samples for p in pairs]).astype(np.float32))


class Trainer:
    """Adam training with per-epoch validation, best/last checkpoints and resume.

    Batch order and augmentation draws are derived from ``(seed, epoch)``,
    so resuming from a checkpoint continues exactly as an uninterrupted run.
    """

    def __init__(self, cfg: TrainConfig, resume: bool = True,
                 provider: PhoneticProvider | None = None,
                 train_pairs: list[NoisyCleanPair] | None = None,
                 valid_pairs: list[NoisyCleanPair] | None = None):
        if cfg.injection.setting == "conditioning" and cfg.model.causal:
            raise ConfigurationError("conditioning requires non-causal setup")
        self.cfg = cfg
        self.provider = provider if provider is not None else resolve_provider(cfg)
        model_cfg = prepare_model_config(cfg, self.provider)
        check_compatible(cfg.injection, model_cfg, self.provider)
        torch.manual_seed(cfg.seed)
        self.model = Demucs(model_cfg)
        self.objective = Objective(cfg.injection, model_cfg, self.provider)
        self.optimizer = torch.optim.Adam(self.trainable_parameters(), lr=cfg.lr,
                                          betas=(cfg.beta1, cfg.beta2))
        self.out_dir = Path(cfg.out_dir)
        self.epoch = 0
        self.step = 0
        self.best = math.inf
        if train_pairs is None:
            train_pairs, valid_pairs = self._load_data()
        self.train_set = segment_dataset(train_pairs, cfg.data.segment_s, cfg.data.stride_s)
        self.valid_set = valid_pairs or train_pairs
        if not self.train_set:
            raise ConfigurationError("training set is empty")
        if resume and self.last_path.exists():
            self._restore(read_checkpoint(self.last_path))

    @property
    def last_path(self) -> Path:
        return self.out_dir / "checkpoint.pt"

    @property
    def best_path(self) -> Path:
        return self.out_dir / "best.pt"

    @property
    def metrics_path(self) -> Path:
        return self.out_dir / "metrics.jsonl"

    def trainable_parameters(self):
        return [p for p in list(self.model.parameters()) + list(self.objective.parameters())
                if p.requires_grad]

    def _load_data(self):
        if not self.cfg.data.manifest:
            raise ConfigurationError("data.manifest is not set")
        records = load_manifest(self.cfg.data.manifest)
        sr = self.cfg.data.sample_rate
        train = [load_pair(r, sr) for r in records if r.resolved_split == "train"]
        valid = [load_pair(r, sr) for r in records if r.resolved_split == "valid"]
        return train, valid

    def _restore(self, payload: dict):
        self.model.load_state_dict(payload["model"])
        self.objective.load_state_dict(payload["objective"])
        if payload["optimizer"] is not None:
            self.optimizer.load_state_dict(payload["optimizer"])
        self.epoch = payload["epoch"]
        self.step = payload["step"]
        self.best = payload["best"]
        torch.set_rng_state(payload["rng"]["torch"])
        logger.info("resumed from %s at epoch %d", self.last_path, self.epoch)

    def _log(self, record: dict):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.metrics_path, "a") as fh:
            fh.write(json.dumps(record) + "\n")

    def _batches(self, epoch: int):
        order = np.random.default_rng([self.cfg.seed, epoch]).permutation(len(self.train_set))
        aug_rng = np.random.default_rng([self.cfg.seed, epoch, 1])
        bs = self.cfg.batch_size
        for start in range(0, len(order), bs):
            batch = [self.train_set[i] for i in order[start:start + bs]]
            if self.cfg.data.augment:
                batch = augment_batch(batch, self.cfg.data.augmentation, aug_rng)
            yield batch

    def train_step(self, batch: list[NoisyCleanPair]):
        self.model.train()
        x, y = _stack(batch, "noisy"), _stack(batch, "clean")
        self.optimizer.zero_grad()
        loss = self.objective(x, y, self.model)
        if not torch.isfinite(loss.total):
            self._abort(batch, loss)
        loss.total.backward()
        for group in self.optimizer.param_groups:
            group["lr"] = self.learning_rate(self.step)
        self.optimizer.step()
        self.step += 1
        return loss

    @property
    def total_steps(self) -> int:
        per_epoch = math.ceil(len(self.train_set) / self.cfg.batch_size)
        total = self.cfg.epochs * per_epoch
        return total if self.cfg.max_steps is None else min(total, self.cfg.max_steps)

    def learning_rate(self, step: int) -> float:
        """Linear anneal from ``lr`` to ``lr * final_lr_fraction`` over the run (constant by default)."""
        if self.cfg.final_lr_fraction == 1.0:
            return self.cfg.lr
        progress = step / max(self.total_steps - 1, 1)
        return self.cfg.lr * (1.0 - (1.0 - self.cfg.final_lr_fraction) * min(progress, 1.0))

    def _abort(self, batch, loss):
        snapshot = {"step": self.step, "epoch": self.epoch, "batch_ids": [p.id for p in batch],
                    "loss": loss.as_record()}
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "nan_batch.json").write_text(json.dumps(snapshot, indent=2))
        raise TrainingError(f"non-finite loss at step {self.step} on batch "
                            f"{snapshot['batch_ids']}; snapshot in {self.out_dir / 'nan_batch.json'}")

    def validate(self) -> float:
        self.model.eval()
        totals = []
        with torch.no_grad():
            for pair in self.valid_set:
                x = torch.from_numpy(pair.noisy.samples.astype(np.float32))[None]
                y = torch.from_numpy(pair.clean.samples.astype(np.float32))[None]
                totals.append(float(self.objective(x, y, self.model).total))
        return float(np.mean(totals))

    def train(self, stop_after_epoch: int | None = None) -> TrainResult:
        result = TrainResult(self.best_path, self.last_path, self.metrics_path)
        while self.epoch < self.cfg.epochs:
            if self.cfg.max_steps is not None and self.step >= self.cfg.max_steps:
                break
            epoch_losses = []
            for batch in self._batches(self.epoch):
                if self.cfg.max_steps is not None and self.step >= self.cfg.max_steps:
                    break
                loss = self.train_step(batch)
                record = {"kind": "train", "step": self.step, "epoch": self.epoch + 1,
                          **loss.as_record()}
                self._log(record)
                epoch_losses.append(record["total"])
                result.train_losses.append(record["total"])
            self.epoch += 1
            valid = self.validate()
            result.valid_losses.append(valid)
            improved = valid < self.best
            if improved:
                self.best = valid
            self._log({"kind": "valid", "epoch": self.epoch, "step": self.step,
                       "train_total": float(np.mean(epoch_losses)) if epoch_losses else None,
                       "valid_total": valid, "best": improved})
            save_checkpoint(self.last_path, self.cfg, self.model, self.objective,
                            self.optimizer, self.epoch, self.step, self.best)
            if improved:
                save_checkpoint(self.best_path, self.cfg, self.model, self.objective,
                                None, self.epoch, self.step, self.best)
            if stop_after_epoch is not None and self.epoch >= stop_after_epoch:
                break
        return result


def train(cfg: TrainConfig, resume: bool = True) -> TrainResult:
    return Trainer(cfg, resume=resume).train()


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

@dataclass
class Probe:
    name: str
    index: int
    analytic: float
    numeric: float
    step: float = 0.0

    @property
    def rel_error(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric), 1e-8)
        return abs(self.analytic - self.numeric) / scale


@dataclass
class GradCheckReport:
    setting: str
    probes: list
    provider_grads: dict

    @property
    def max_rel_error(self) -> float:
        return max(p.rel_error for p in self.probes)

    def to_dict(self) -> dict:
        return {"setting": self.setting, "max_rel_error": self.max_rel_error,
                "probes": [dict(dataclasses.asdict(p), rel_error=p.rel_error) for p in self.probes],
                "provider_grads": self.provider_grads}


def tiny_setup(setting: str = "base", seed: int = 0, length: int = 512, selection: str = "learned",
               layer: int = 2, lam: float = 0.5, dtype=torch.float64):
    """The small float64 configuration used by gradient checks and tests.

    H=4, depth=2 enhancer; toy provider with 4 hidden layers of 8 dims.
    The probe signals are redrawn until the estimate's spectrum clears the
    magnitude floor. Returns ``(model, objective, provider, x, y)``.
    """
    from .phonetic import ToyProvider, ToyProviderConfig

    provider = ToyProvider(ToyProviderConfig(num_layers=4, dim=8, seed=seed))
    cond_dim = provider.feature_dim if setting == "conditioning" else 0
    model_cfg = DemucsConfig(hidden=4, depth=2, upscale=2, stride=2, kernel=8, cond_dim=cond_dim)
    spec = InjectionSpec(setting=setting, lam=lam, selection=selection, layer=layer)
    torch.manual_seed(seed)
    model = Demucs(model_cfg).to(dtype)
    objective = Objective(spec, model_cfg, provider if setting != "base" else None).to(dtype)
    if objective.selection is not None and objective.selection.logits is not None:
        with torch.no_grad():
            objective.selection.logits.copy_(torch.randn(provider.num_layers, dtype=dtype) * 0.5)
    gen = torch.Generator().manual_seed(seed + 1)
    for _ in range(20):
        y = 0.1 * torch.randn(2, length, generator=gen, dtype=dtype)
        x = y + 0.05 * torch.randn(2, length, generator=gen, dtype=dtype)
        if _clear_of_floor(model, objective, x):
            break
    return model, objective, provider, x, y


def _clear_of_floor(model, objective, x, margin: float = 10.0) -> bool:
    """True when every STFT bin of the estimate is well above the magnitude floor.

    The floor clamp is a kink of the loss; finite differences across it are
    meaningless, so gradient checks are run away from it.
    """
    from .audio import stft_tensor
    from .objectives import RESOLUTIONS

    with torch.no_grad():
        y_hat = objective.enhance(x, model)
        return all(float(stft_tensor(y_hat, cfg).abs().min()) > margin * cfg.eps
                   for cfg in RESOLUTIONS)


class _ReluPatterns:
    """Records which ReLU units are active, to detect finite differences across kinks."""

    def __init__(self, modules):
        self.masks = []
        self.handles = [m.register_forward_hook(self._hook) for m in modules
                        if isinstance(m, torch.nn.ReLU)]

    def _hook(self, module, inputs, output):
        self.masks.append(inputs[0] > 0)

    def capture(self, fn):
        self.masks = []
        value = fn()
        return value, self.masks

    def close(self):
        for handle in self.handles:
            handle.remove()


def _same_pattern(a, b) -> bool:
    return len(a) == len(b) and all(torch.equal(u, v) for u, v in zip(a, b))


def gradient_check(setting: str = "base", num_params_probed: int = 20, h: float = 1e-4,
                   seed: int = 0, setup=None, resolvable: float = 1e-5,
                   max_shrinks: int = 12) -> GradCheckReport:
    """Compare autograd gradients with central finite differences.

    ``h`` applies to parameters normalized by the RMS of their tensor, so the
    step is ``h * rms(tensor)``; the central difference is refined by one
    Richardson extrapolation. If a ReLU unit changes state inside the
    stencil, the difference spans a kink and the step is quartered until no
    unit flips.

    Learned selection logits are always probed. The other probes are random
    entries (tensor drawn uniformly, then an entry) whose analytic gradient is
    at least ``resolvable`` times the largest one; smaller gradients sit below
    the round-off of the difference quotient. Provider parameters are
    reported separately: their analytic gradient must be exactly zero.
    """
    model, objective, provider, x, y = setup or tiny_setup(setting, seed)
    named = [(f"model.{n}", p) for n, p in model.named_parameters()]
    named += [(f"objective.{n}", p) for n, p in objective.named_parameters()]
    named = [(n, p) for n, p in named if p.requires_grad]

    def total():
        return float(objective(x, y, model).total)

    for _, p in named:
        p.grad = None
    if provider is not None:
        for p in provider.parameters():
            p.grad = None
    objective(x, y, model).total.backward()

    grads = {n: (p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1)
             for n, p in named}
    largest = max(float(g.abs().max()) for g in grads.values())
    rng = np.random.default_rng(seed)
    picks = [(n, p, int(rng.integers(p.numel()))) for n, p in named if n.endswith("logits")]
    candidates = [(n, p, torch.nonzero(grads[n].abs() >= resolvable * largest).reshape(-1))
                  for n, p in named]
    candidates = [c for c in candidates if c[2].numel()]
    while len(picks) < num_params_probed:
        n, p, ok = candidates[int(rng.integers(len(candidates)))]
        picks.append((n, p, int(ok[int(rng.integers(ok.numel()))])))

    patterns = _ReluPatterns(model.modules())
    probes = []
    try:
        with torch.no_grad():
            _, base_pattern = patterns.capture(total)
            for name, param, idx in picks:
                flat = param.view(-1)
                orig = float(flat[idx])
                scale = float(param.detach().pow(2).mean().sqrt())
                step = h * (scale if scale > 0 else 1.0)
                for _ in range(max_shrinks + 1):
                    values, smooth = {}, True
                    for delta in (step, -step, step / 2, -step / 2):
                        flat[idx] = orig + delta
                        values[delta], pattern = patterns.capture(total)
                        smooth = smooth and _same_pattern(pattern, base_pattern)
                    flat[idx] = orig
                    if smooth:
                        break
                    step /= 4
                coarse = (values[step] - values[-step]) / (2 * step)
                fine = (values[step / 2] - values[-step / 2]) / step
                probes.append(Probe(name, idx, float(grads[name][idx]),
                                    (4 * fine - coarse) / 3, step))
    finally:
        patterns.close()

    provider_grads = {}
    if provider is not None:
        for n, p in provider.named_parameters():
            provider_grads[n] = 0.0 if p.grad is None else float(p.grad.abs().max())
    return GradCheckReport(setting, probes, provider_grads)
