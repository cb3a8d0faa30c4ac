"""Waveform U-Net enhancer with an optional phonetic conditioning input.

The network upsamples the input with a sinc filter, runs a strided
convolutional encoder, an LSTM over the bottleneck frames, and a mirrored
transposed-convolution decoder with additive skip connections, then
downsamples back to the input rate.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import RESAMPLE_ZEROS, interpolate_time, resample_tensor, valid_length
from .errors import ConfigurationError


@dataclass
class DemucsConfig:
    hidden: int = 48
    upscale: int = 4
    stride: int = 4
    kernel: int = 8
    depth: int = 5
    causal: bool = False
    lstm_layers: int = 2
    max_hidden_factor: int = 8
    normalize: bool = True
    floor: float = 1e-3
    cond_dim: int = 0
    resample_zeros: int = RESAMPLE_ZEROS
    rescale: float = 0.1

    def __post_init__(self):
        if not self.kernel >= self.stride >= 1:
            raise ConfigurationError(
                f"need kernel >= stride >= 1, got kernel={self.kernel}, stride={self.stride}")
        if self.depth < 1 or self.hidden < 1 or self.upscale < 1 or self.lstm_layers < 1:
            raise ConfigurationError(f"depth, hidden, upscale and lstm_layers must be >= 1: {self}")
        if self.cond_dim < 0:
            raise ConfigurationError("cond_dim must be >= 0")
        if self.cond_dim and self.causal:
            raise ConfigurationError("conditioning requires non-causal setup")

    def channels(self) -> list[int]:
        """Output channels of each encoder layer."""
        cap = self.max_hidden_factor * self.hidden
        return [min(self.hidden * 2 ** i, cap) for i in range(self.depth)]

    @property
    def bottleneck_channels(self) -> int:
        return self.channels()[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DemucsConfig":
        return cls(**data)


def _pad_split(cfg: DemucsConfig) -> tuple[int, int]:
    total = cfg.kernel - cfg.stride
    if cfg.causal:
        return total, 0
    return total // 2, total - total // 2


class Demucs(nn.Module):
    """Encoder / LSTM / decoder U-Net over raw audio.

    ``forward`` takes noisy audio (B, T) and returns the estimate (B, T)
    together with the encoder taps: ``taps[0]`` is the (normalized,
    upsampled) network input and ``taps[i]`` the output of encoder layer i.
    """

    def __init__(self, cfg: DemucsConfig):
        super().__init__()
        self.cfg = cfg
        K, S = cfg.kernel, cfg.stride
        self.encoder = nn.ModuleList()
        self.decoder = nn.ModuleList()
        chin = 1
        for index, ch in enumerate(cfg.channels()):
            self.encoder.append(nn.Sequential(
                nn.Conv1d(chin, ch, K, S), nn.ReLU(),
                nn.Conv1d(ch, 2 * ch, 1), nn.GLU(dim=1)))
            decode = [nn.Conv1d(ch, 2 * ch, 1), nn.GLU(dim=1), nn.ConvTranspose1d(ch, chin, K, S)]
            if index > 0:
                decode.append(nn.ReLU())
            self.decoder.insert(0, nn.Sequential(*decode))
            chin = ch
        width = cfg.bottleneck_channels
        self.lstm = nn.LSTM(width, width, num_layers=cfg.lstm_layers,
                            bidirectional=not cfg.causal)
        self.lstm_out = nn.Linear(2 * width, width) if not cfg.causal else None
        self.cond_proj = nn.Linear(width + cfg.cond_dim, width) if cfg.cond_dim else None
        if cfg.rescale:
            _rescale(self, cfg.rescale)
        if self.cond_proj is not None:
            self._init_cond_proj()

    # -- conditioning -----------------------------------------------------

    def _init_cond_proj(self):
        # pass-through for the bottleneck, small random weights for features
        width = self.cfg.bottleneck_channels
        with torch.no_grad():
            bound = 1.0 / math.sqrt(width + self.cfg.cond_dim)
            self.cond_proj.weight.uniform_(-bound, bound)
            self.cond_proj.weight[:, :width] = torch.eye(width)
            self.cond_proj.bias.zero_()

    def init_identity_conditioning(self):
        """Make the projection ignore the features (bottleneck passes through)."""
        if self.cond_proj is None:
            raise ConfigurationError("model was built without a conditioning input")
        width = self.cfg.bottleneck_channels
        with torch.no_grad():
            self.cond_proj.weight.zero_()
            self.cond_proj.weight[:, :width] = torch.eye(width)
            self.cond_proj.bias.zero_()

    # -- geometry ----------------------------------------------------------

    def valid_length(self, length: int) -> int:
        return valid_length(length, self.cfg)

    @property
    def normalizes(self) -> bool:
        # a whole-signal std would leak future samples into the causal model
        return self.cfg.normalize and not self.cfg.causal

    # -- forward -----------------------------------------------------------

    def forward(self, x: torch.Tensor, cond: torch.Tensor | None = None):
        cfg = self.cfg
        if x.dim() == 1:
            x = x[None]
        if x.dim() == 3:
            x = x[:, 0]
        if cond is not None:
            if cfg.causal:
                raise ConfigurationError("conditioning requires non-causal setup")
            if self.cond_proj is None:
                raise ConfigurationError("model was built without a conditioning input")
            if cond.dim() == 2:
                cond = cond[None]
            if cond.shape[-1] != cfg.cond_dim:
                raise ConfigurationError(
                    f"conditioning features have dim {cond.shape[-1]}, model expects {cfg.cond_dim}")

        length = x.shape[-1]
        std = None
        if self.normalizes:
            std = x.std(dim=-1, keepdim=True, correction=0)
            x = x / (cfg.floor + std)
        x = F.pad(x, (0, self.valid_length(length) - length))
        x = resample_tensor(x, up=cfg.upscale, zeros=cfg.resample_zeros)
        x = x[:, None, :]

        left, right = _pad_split(cfg)
        crop = 0 if cfg.causal else left
        taps = [x]
        skips = []
        for layer in self.encoder:
            x = layer(F.pad(x, (left, right)))
            taps.append(x)
            skips.append(x)

        frames = x.shape[-1]
        h = x.permute(2, 0, 1)  # (frames, batch, channels)
        if cond is not None:
            feats = interpolate_time(cond, frames).to(h.dtype)
            if feats.shape[-2] != frames:
                raise RuntimeError("conditioning features are not aligned to the bottleneck")
            h = self.cond_proj(torch.cat([h, feats.transpose(0, 1)], dim=-1))
        h, _ = self.lstm(h)
        if self.lstm_out is not None:
            h = self.lstm_out(h)
        x = h.permute(1, 2, 0)

        for layer in self.decoder:
            x = x + skips.pop(-1)
            x = layer(x)
            target = x.shape[-1] - (cfg.kernel - cfg.stride)
            x = x[..., crop:crop + target]

        x = resample_tensor(x[:, 0], down=cfg.upscale, zeros=cfg.resample_zeros)
        x = x[:, :length]
        if std is not None:
            x = x * std
        return x, taps


def _rescale(module: nn.Module, reference: float):
    for sub in module.modules():
        if isinstance(sub, (nn.Conv1d, nn.ConvTranspose1d)):
            std = sub.weight.std().detach()
            scale = (std / reference) ** 0.5
            sub.weight.data /= scale
            if sub.bias is not None:
                sub.bias.data /= scale


def tap_shapes(cfg: DemucsConfig, length: int) -> list[tuple[int, int]]:
    """(channels, frames) of every encoder tap for an input of ``length``."""
    frames = valid_length(length, cfg) * cfg.upscale
    shapes = [(1, frames)]
    for ch in cfg.channels():
        frames //= cfg.stride
        shapes.append((ch, frames))
    return shapes


def lookahead(cfg: DemucsConfig) -> int:
    """Future input samples a causal model's output may depend on.

    Each encoder stage sees ``stride - 1`` samples past its frame at its own
    rate, which compounds to ``stride**depth - 1`` upsampled samples; the
    up- and down-sampling filters add their half-widths on top.
    """
    net = cfg.stride ** cfg.depth - 1
    if cfg.upscale == 1:
        return net
    down = cfg.resample_zeros * cfg.upscale
    return (down + net) // cfg.upscale + cfg.resample_zeros


def parameter_count(cfg: DemucsConfig) -> int:
    K = cfg.kernel
    total = 0
    chin = 1
    for ch in cfg.channels():
        total += chin * ch * K + ch         # strided conv
        total += ch * 2 * ch + 2 * ch       # 1x1 conv before GLU (encoder)
        total += ch * 2 * ch + 2 * ch       # 1x1 conv before GLU (decoder)
        total += ch * chin * K + chin       # transposed conv
        chin = ch
    width = cfg.bottleneck_channels
    dirs = 1 if cfg.causal else 2
    for layer in range(cfg.lstm_layers):
        inp = width if layer == 0 else width * dirs
        total += dirs * 4 * width * (inp + width + 2)
    if not cfg.causal:
        total += 2 * width * width + width
    if cfg.cond_dim:
        total += (width + cfg.cond_dim) * width + width
    return total


def causality_probe(model: Demucs, t: int, lookahead_budget: int, length: int | None = None,
                    perturbation: float = 1.0, seed: int = 0, tol: float = 1e-6) -> bool:
    """True iff perturbing inputs after ``t + lookahead_budget`` leaves outputs up to ``t`` unchanged.

    Runs a float64 copy of ``model`` on a random probe signal.
    """
    probe = copy.deepcopy(model).double().eval()
    length = length or max(4 * (t + lookahead_budget + 1), 2048)
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(1, length, generator=gen, dtype=torch.float64)
    x2 = x.clone()
    start = t + lookahead_budget + 1
    if start < length:
        x2[:, start:] += perturbation * torch.randn(1, length - start, generator=gen,
                                                    dtype=torch.float64)
    with torch.no_grad():
        y1, _ = probe(x)
        y2, _ = probe(x2)
    return bool((y1[:, :t + 1] - y2[:, :t + 1]).abs().max() < tol)
