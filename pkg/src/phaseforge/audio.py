"""Signal types and transforms shared by every other module.

Everything here is a pure function. Tensor-valued helpers (``stft_tensor``,
``resample_tensor``, ``interpolate_time``) are differentiable and accept any
leading batch dimensions; the ``Waveform`` wrappers are the numpy-facing API.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.io import wavfile

from .errors import ConfigurationError

DEFAULT_SAMPLE_RATE = 16000
LOG_EPS = 1e-7


@dataclass
class Waveform:
    """Mono audio signal."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 1:
            raise ValueError(f"Waveform must be 1-D, got shape {samples.shape}")
        if samples.size < 1:
            raise ValueError("Waveform must hold at least one sample")
        if not np.all(np.isfinite(samples)):
            raise ValueError("Waveform contains NaN or Inf")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"invalid sample rate {self.sample_rate}")
        if not np.issubdtype(samples.dtype, np.floating):
            samples = samples.astype(np.float64)
        self.samples = samples
        self.sample_rate = int(self.sample_rate)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    n_fft: int
    hop: int
    win_length: int
    window: str = "hann"
    eps: float = LOG_EPS

    def __post_init__(self):
        if min(self.n_fft, self.hop, self.win_length) <= 0:
            raise ConfigurationError(f"STFT sizes must be positive: {self}")
        if self.win_length > self.n_fft:
            raise ConfigurationError(
                f"win_length ({self.win_length}) exceeds n_fft ({self.n_fft})")
        if self.hop > self.win_length:
            raise ConfigurationError(
                f"hop ({self.hop}) exceeds win_length ({self.win_length})")
        if self.window not in _WINDOWS:
            raise ConfigurationError(
                f"unknown window {self.window!r}, expected one of {sorted(_WINDOWS)}")
        if not self.eps > 0:
            raise ConfigurationError("eps must be positive")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def num_frames(self, length: int) -> int:
        """Frame count for a signal of ``length`` samples (centered padding)."""
        pad = self.n_fft // 2
        return (length + 2 * pad - self.n_fft) // self.hop + 1


@dataclass
class ComplexSpectrogram:
    values: np.ndarray  # (bins, frames), complex
    config: StftConfig = field(repr=False)

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)


_WINDOWS = {
    "hann": lambda n, dtype: torch.hann_window(n, periodic=True, dtype=dtype),
    "hamming": lambda n, dtype: torch.hamming_window(n, periodic=True, dtype=dtype),
    "rect": lambda n, dtype: torch.ones(n, dtype=dtype),
}


def window_tensor(cfg: StftConfig, dtype=torch.float32, device=None) -> torch.Tensor:
    """Analysis window of length ``n_fft``, the ``win_length`` taper centered."""
    win = _WINDOWS[cfg.window](cfg.win_length, dtype)
    left = (cfg.n_fft - cfg.win_length) // 2
    win = F.pad(win, (left, cfg.n_fft - cfg.win_length - left))
    return win.to(device) if device is not None else win


def reflect_indices(length: int, pad: int) -> np.ndarray:
    """Source indices for reflection padding by ``pad`` on both sides.

    Reflection is repeated (mirror without edge repetition) when ``pad``
    exceeds the signal, so short inputs are still valid.
    """
    idx = np.arange(-pad, length + pad)
    if length == 1:
        return np.zeros_like(idx)
    period = 2 * (length - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= length, period - idx, idx)


def stft_tensor(x: torch.Tensor, cfg: StftConfig) -> torch.Tensor:
    """Complex STFT of ``x`` (..., T) -> (..., bins, frames)."""
    length = x.shape[-1]
    idx = torch.from_numpy(reflect_indices(length, cfg.n_fft // 2)).to(x.device)
    padded = x.index_select(-1, idx)
    frames = padded.unfold(-1, cfg.n_fft, cfg.hop)
    frames = frames * window_tensor(cfg, x.dtype, x.device)
    return torch.fft.rfft(frames, dim=-1).transpose(-1, -2)


def magnitude(spec: torch.Tensor, eps: float = LOG_EPS) -> torch.Tensor:
    """|spec| floored at ``eps``; the floor keeps the sqrt differentiable."""
    power = spec.real ** 2 + spec.imag ** 2
    return torch.sqrt(torch.clamp(power, min=eps ** 2))


def stft(wave: Waveform, cfg: StftConfig) -> ComplexSpectrogram:
    x = torch.from_numpy(np.asarray(wave.samples, dtype=np.float64))
    return ComplexSpectrogram(stft_tensor(x, cfg).numpy(), cfg)


# ---------------------------------------------------------------------------
# Sinc resampling
# ---------------------------------------------------------------------------

RESAMPLE_ZEROS = 32


def _hann_taper(t: torch.Tensor, half_width: float) -> torch.Tensor:
    w = 0.5 * (1 + torch.cos(math.pi * t / half_width))
    return torch.where(t.abs() < half_width, w, torch.zeros_like(w))


def _upsample_kernels(factor: int, zeros: int, dtype) -> torch.Tensor:
    # phase k interpolates at n + k/factor from inputs n-zeros+1 .. n+zeros
    offsets = torch.arange(-zeros + 1, zeros + 1, dtype=torch.float64)
    phases = torch.arange(factor, dtype=torch.float64) / factor
    t = phases[:, None] - offsets[None, :]
    kernels = torch.sinc(t) * _hann_taper(t, zeros + 1)
    kernels = kernels / kernels.sum(dim=1, keepdim=True)
    return kernels[:, None, :].to(dtype)


def _downsample_kernel(factor: int, zeros: int, dtype) -> torch.Tensor:
    j = torch.arange(-zeros * factor, zeros * factor + 1, dtype=torch.float64)
    t = j / factor
    kernel = torch.sinc(t) * _hann_taper(t, zeros + 1)
    kernel = kernel / kernel.sum()
    return kernel[None, None, :].to(dtype)


def resample_lookahead(factor: int, zeros: int = RESAMPLE_ZEROS, up: bool = True) -> int:
    """Future input samples one output sample of ``resample_tensor`` reads."""
    if factor == 1:
        return 0
    return zeros if up else zeros * factor


def resample_tensor(x: torch.Tensor, up: int = 1, down: int = 1,
                    zeros: int = RESAMPLE_ZEROS) -> torch.Tensor:
    """Band-limited resampling of ``x`` (..., T) by ``up`` or ``1/down``.

    Upsampling returns ``T * up`` samples; original samples are kept exactly
    at multiples of ``up``. Downsampling low-passes at the new Nyquist rate
    and returns ``round(T / down)`` samples, at least one. Boundaries are
    zero-padded.
    """
    if up < 1 or down < 1 or (up > 1 and down > 1):
        raise ConfigurationError(f"unsupported resampling {up}/{down}")
    if up == 1 and down == 1:
        return x
    shape = x.shape
    flat = x.reshape(-1, 1, shape[-1])
    length = shape[-1]
    if up > 1:
        kernels = _upsample_kernels(up, zeros, x.dtype).to(x.device)
        out = F.conv1d(F.pad(flat, (zeros - 1, zeros)), kernels)
        out = out.transpose(1, 2).reshape(flat.shape[0], length * up)
    else:
        kernel = _downsample_kernel(down, zeros, x.dtype).to(x.device)
        half = zeros * down
        out = F.conv1d(F.pad(flat, (half, half)), kernel, stride=down)[:, 0]
        out = out[:, :max(1, int(math.floor(length / down + 0.5)))]
    return out.reshape(*shape[:-1], out.shape[-1])


def sinc_resample(wave: Waveform, factor) -> Waveform:
    """Resample by ``factor`` (an integer U or 1/U).

    The sample rate scales along with the samples.
    """
    factor = Fraction(factor).limit_denominator(1 << 16)
    if factor <= 0:
        raise ConfigurationError(f"resampling factor must be positive, got {factor}")
    if factor.numerator != 1 and factor.denominator != 1:
        raise ConfigurationError(f"factor must be U or 1/U for integer U, got {factor}")
    if factor == 1:
        return Waveform(wave.samples.copy(), wave.sample_rate)
    x = torch.from_numpy(np.asarray(wave.samples, dtype=np.float64))
    y = resample_tensor(x, up=factor.numerator, down=factor.denominator)
    rate = max(1, int(round(wave.sample_rate * factor)))
    return Waveform(y.numpy(), rate)


def resample_rate(samples: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    """Arbitrary-ratio resampling for file ingest (polyphase, scipy)."""
    if src_rate == dst_rate:
        return samples
    from scipy.signal import resample_poly

    g = math.gcd(src_rate, dst_rate)
    return resample_poly(samples, dst_rate // g, src_rate // g)


# ---------------------------------------------------------------------------
# Temporal interpolation
# ---------------------------------------------------------------------------

def interpolate_time(features, target_len: int):
    """Linearly resample a (..., T1, d) feature sequence to ``target_len`` rows.

    Source endpoints map to target endpoints. Numpy in, numpy out; tensors
    stay differentiable.
    """
    as_numpy = not isinstance(features, torch.Tensor)
    feats = torch.as_tensor(np.asarray(features)) if as_numpy else features
    if feats.ndim < 2 or feats.shape[-2] < 1 or feats.shape[-1] < 1:
        raise ValueError(f"expected a non-empty (..., T, d) array, got {tuple(feats.shape)}")
    if target_len < 1:
        raise ValueError("target_len must be >= 1")
    src_len = feats.shape[-2]
    if src_len == target_len:
        out = feats
    elif src_len == 1:
        out = feats.expand(*feats.shape[:-2], target_len, feats.shape[-1])
    elif target_len == 1:
        out = feats[..., :1, :]
    else:
        lead = feats.shape[:-2]
        flat = feats.reshape(-1, src_len, feats.shape[-1]).transpose(1, 2)
        out = F.interpolate(flat, size=target_len, mode="linear", align_corners=True)
        out = out.transpose(1, 2).reshape(*lead, target_len, feats.shape[-1])
    return out.numpy().copy() if as_numpy else out


# ---------------------------------------------------------------------------
# Padding arithmetic for the U-Net
# ---------------------------------------------------------------------------

def valid_length(length: int, geometry) -> int:
    """Smallest length >= ``length`` the enhancer processes without remainder.

    After upsampling by ``geometry.upscale`` every encoder stage divides the
    length by ``geometry.stride`` exactly, so the requirement is that
    ``length * upscale`` be a multiple of ``stride ** depth``.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    total = geometry.stride ** geometry.depth
    step = total // math.gcd(total, geometry.upscale)
    return -(-length // step) * step


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def read_wav(path, sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Read a mono 16-bit or float WAV, resampling to ``sample_rate``."""
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float32) / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float32) - 128.0) / 128.0
    else:
        data = data.astype(np.float32)
    if data.ndim > 1:
        data = data.mean(axis=1)
    if rate != sample_rate:
        data = resample_rate(data, rate, sample_rate).astype(np.float32)
    return Waveform(data, sample_rate)


def write_wav(path, wave: Waveform, subtype: str = "float") -> Path:
    """Write ``wave`` as 32-bit float (default) or 16-bit PCM (``"pcm16"``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if subtype == "pcm16":
        data = np.clip(np.round(wave.samples * 32767.0), -32768, 32767).astype(np.int16)
    elif subtype == "float":
        data = wave.samples.astype(np.float32)
    else:
        raise ValueError(f"unknown WAV subtype {subtype!r}")
    wavfile.write(str(path), wave.sample_rate, data)
    return path
