"""Training objectives: the waveform + multi-resolution STFT loss and the
three ways of adding phonetic information (regularization, supervision,
conditioning).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import StftConfig, interpolate_time, magnitude, stft_tensor
from .errors import ConfigurationError
from .model import Demucs, DemucsConfig
from .phonetic import LayerSelection, PhoneticProvider

RESOLUTIONS = (
    StftConfig(n_fft=512, hop=50, win_length=240),
    StftConfig(n_fft=1024, hop=120, win_length=600),
    StftConfig(n_fft=2048, hop=240, win_length=1200),
)

SETTINGS = ("base", "regularization", "supervision", "conditioning")


@dataclass
class InjectionSpec:
    setting: str = "base"
    lam: float = 0.1
    tap_layer: int | None = None  # encoder tap for regularization; None = last layer
    selection: str = "fixed"
    layer: int = 6
    distance: str = "l1"
    bridge_seed: int = 0

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ConfigurationError(f"unknown setting {self.setting!r}, expected one of {SETTINGS}")
        if self.lam < 0:
            raise ConfigurationError("lambda must be nonnegative")
        if self.distance != "l1":
            raise ConfigurationError(f"unsupported distance {self.distance!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    """Per-term losses. ``total`` keeps the autograd graph; the rest may too."""

    l1: torch.Tensor
    sc: list = field(default_factory=list)
    mag: list = field(default_factory=list)
    phonetic: torch.Tensor | float = 0.0
    lam: float = 0.0
    num_samples: int = 1
    setting: str = "base"
    total: torch.Tensor | None = None

    def recombine(self):
        stft_terms = sum(self.sc) + sum(self.mag)
        return self.l1 + stft_terms / self.num_samples + self.lam * self.phonetic

    def as_record(self) -> dict:
        f = lambda v: float(v.detach()) if isinstance(v, torch.Tensor) else float(v)  # noqa: E731
        return {"setting": self.setting, "l1": f(self.l1), "sc": [f(v) for v in self.sc],
                "mag": [f(v) for v in self.mag], "phonetic": f(self.phonetic),
                "total": f(self.total)}


def _batch(x: torch.Tensor) -> torch.Tensor:
    return x[None] if x.dim() == 1 else x


def spectral_convergence(y, y_hat, cfg: StftConfig) -> torch.Tensor:
    """Frobenius norm of the magnitude error over that of the reference (batch mean)."""
    y, y_hat = _batch(torch.as_tensor(y)), _batch(torch.as_tensor(y_hat))
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    if bool((y.detach().abs().amax(dim=-1) == 0).any()):
        raise ValueError("reference has zero spectral energy (division by zero); "
                         "skip silent segments before computing spectral convergence")
    ref = magnitude(stft_tensor(y, cfg), cfg.eps)
    est = magnitude(stft_tensor(y_hat, cfg), cfg.eps)
    num = torch.linalg.vector_norm(ref - est, dim=(-2, -1))
    den = torch.linalg.vector_norm(ref, dim=(-2, -1))
    return (num / den).mean()


def log_magnitude_loss(y, y_hat, cfg: StftConfig) -> torch.Tensor:
    """L1 distance of log magnitudes divided by the sample count (batch mean)."""
    y, y_hat = _batch(torch.as_tensor(y)), _batch(torch.as_tensor(y_hat))
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    ref = torch.log(magnitude(stft_tensor(y, cfg), cfg.eps))
    est = torch.log(magnitude(stft_tensor(y_hat, cfg), cfg.eps))
    return ((ref - est).abs().sum(dim=(-2, -1)) / y.shape[-1]).mean()


def base_loss(y, y_hat, resolutions=RESOLUTIONS) -> LossBreakdown:
    y, y_hat = _batch(torch.as_tensor(y)), _batch(torch.as_tensor(y_hat))
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    T = y.shape[-1]
    out = LossBreakdown(l1=(y - y_hat).abs().sum(dim=-1).mean() / T, num_samples=T)
    for cfg in resolutions:
        out.sc.append(spectral_convergence(y, y_hat, cfg))
        out.mag.append(log_magnitude_loss(y, y_hat, cfg))
    out.total = out.recombine()
    return out


# ---------------------------------------------------------------------------
# Phonetic settings
# ---------------------------------------------------------------------------

def make_bridge(channels: int, dim: int, seed: int = 0) -> torch.Tensor:
    """Fixed (channels, dim) projection with orthonormal columns (or rows if channels < dim)."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((max(channels, dim), min(channels, dim))))
    q = q * np.sign(np.diag(r))
    return torch.from_numpy(q if channels >= dim else q.T.copy())


def regularization_term(tap: torch.Tensor, target: torch.Tensor, bridge: torch.Tensor) -> torch.Tensor:
    """L1 between the projected, time-aligned encoder tap (B, C, F) and target features (B, T', d)."""
    projected = tap.transpose(1, 2) @ bridge.to(tap.dtype)
    aligned = interpolate_time(projected, target.shape[-2])
    return F.l1_loss(aligned, target)


def _features(provider, wav, selection, grad: bool):
    if grad:
        return selection(provider(wav))
    with torch.no_grad():
        layers = provider(wav)
    return selection(layers)


def _with_phonetic(loss: LossBreakdown, term, lam: float, setting: str) -> LossBreakdown:
    loss.phonetic = term
    loss.lam = lam
    loss.setting = setting
    loss.total = loss.recombine()
    return loss


def base_objective(x, y, model: Demucs) -> LossBreakdown:
    y_hat, _ = model(x)
    return base_loss(y, y_hat)


def regularization_objective(x, y, model: Demucs, provider: PhoneticProvider, spec: InjectionSpec,
                             selection: LayerSelection, bridge: torch.Tensor) -> LossBreakdown:
    tap_index = model.cfg.depth if spec.tap_layer is None else spec.tap_layer
    if not 0 <= tap_index <= model.cfg.depth:
        raise ConfigurationError(f"tap layer {tap_index} outside 0..{model.cfg.depth}")
    y_hat, taps = model(x)
    target = _features(provider, _batch(y), selection, grad=False)
    term = regularization_term(taps[tap_index], target, bridge)
    return _with_phonetic(base_loss(y, y_hat), term, spec.lam, "regularization")


def supervision_objective(x, y, model: Demucs, provider: PhoneticProvider, spec: InjectionSpec,
                          selection: LayerSelection) -> LossBreakdown:
    if not provider.differentiable:
        raise ConfigurationError(
            f"supervision back-propagates through the provider, but "
            f"{getattr(provider, 'name', type(provider).__name__)} is not differentiable")
    y_hat, _ = model(x)
    est = _features(provider, y_hat, selection, grad=True)
    ref = _features(provider, _batch(y), selection, grad=False)
    return _with_phonetic(base_loss(y, y_hat), F.l1_loss(est, ref), spec.lam, "supervision")


def conditioning_features(x, provider: PhoneticProvider, selection: LayerSelection):
    return _features(provider, _batch(x), selection, grad=False)


def conditioning_objective(x, y, model: Demucs, provider: PhoneticProvider, spec: InjectionSpec,
                           selection: LayerSelection) -> LossBreakdown:
    if model.cfg.causal:
        raise ConfigurationError("conditioning requires non-causal setup")
    y_hat, _ = model(x, cond=conditioning_features(x, provider, selection))
    loss = base_loss(y, y_hat)
    loss.setting = "conditioning"
    return loss


def check_compatible(spec: InjectionSpec, model_cfg: DemucsConfig,
                     provider: PhoneticProvider | None):
    """Reject incompatible setting/model/provider combinations up front."""
    if spec.setting == "base":
        return
    if provider is None:
        raise ConfigurationError(f"setting {spec.setting!r} needs a phonetic provider")
    if spec.selection == "fixed" and not 0 <= spec.layer < provider.num_layers:
        raise ConfigurationError(
            f"layer {spec.layer} out of range for a provider with {provider.num_layers} layers")
    if spec.setting == "conditioning":
        if model_cfg.causal:
            raise ConfigurationError("conditioning requires non-causal setup")
        if model_cfg.cond_dim != provider.feature_dim:
            raise ConfigurationError(
                f"model cond_dim {model_cfg.cond_dim} != provider dim {provider.feature_dim}")
    if spec.setting == "supervision" and not provider.differentiable:
        raise ConfigurationError("supervision needs a differentiable provider")
    if spec.setting == "regularization":
        tap = model_cfg.depth if spec.tap_layer is None else spec.tap_layer
        if not 0 <= tap <= model_cfg.depth:
            raise ConfigurationError(f"tap layer {tap} outside 0..{model_cfg.depth}")


class Objective(nn.Module):
    """Holds the state an injection setting needs (selection logits, bridge)."""

    def __init__(self, spec: InjectionSpec, model_cfg: DemucsConfig,
                 provider: PhoneticProvider | None = None):
        super().__init__()
        check_compatible(spec, model_cfg, provider)
        self.spec = spec
        # kept out of the module tree so its tensors never enter state_dict or the optimizer
        self.__dict__["provider"] = provider
        self.selection = None
        if spec.setting != "base":
            self.selection = LayerSelection(provider.num_layers, spec.selection, spec.layer)
        if spec.setting == "regularization":
            tap = model_cfg.depth if spec.tap_layer is None else spec.tap_layer
            channels = 1 if tap == 0 else model_cfg.channels()[tap - 1]
            self.register_buffer("bridge", make_bridge(channels, provider.feature_dim, spec.bridge_seed))
        else:
            self.bridge = None

    def forward(self, x, y, model: Demucs) -> LossBreakdown:
        setting = self.spec.setting
        if setting == "base":
            return base_objective(x, y, model)
        if setting == "regularization":
            return regularization_objective(x, y, model, self.provider, self.spec,
                                            self.selection, self.bridge)
        if setting == "supervision":
            return supervision_objective(x, y, model, self.provider, self.spec, self.selection)
        return conditioning_objective(x, y, model, self.provider, self.spec, self.selection)

    def enhance(self, x, model: Demucs) -> torch.Tensor:
        """Inference path: conditioning models see features of the noisy input."""
        if self.spec.setting == "conditioning":
            y_hat, _ = model(x, cond=conditioning_features(x, self.provider, self.selection))
        else:
            y_hat, _ = model(x)
        return y_hat
