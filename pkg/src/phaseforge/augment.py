"""Noisy/clean pair construction and the stochastic training augmentations.

All random operations take an explicit ``numpy.random.Generator`` so the
pipeline is reproducible from a seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .audio import Waveform

INF_SNR = math.inf


@dataclass
class NoisyCleanPair:
    noisy: Waveform
    clean: Waveform
    id: str = ""
    # exact additive noise when known; otherwise recovered as noisy - clean
    noise_samples: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(self.noisy) != len(self.clean):
            raise ValueError(
                f"pair {self.id!r}: noisy has {len(self.noisy)} samples, clean {len(self.clean)}")
        if self.noisy.sample_rate != self.clean.sample_rate:
            raise ValueError(f"pair {self.id!r}: sample rates differ")

    @property
    def noise(self) -> np.ndarray:
        if self.noise_samples is not None:
            return self.noise_samples
        return self.noisy.samples - self.clean.samples

    @property
    def sample_rate(self) -> int:
        return self.clean.sample_rate

    def __len__(self):
        return len(self.clean)


@dataclass
class AugmentConfig:
    max_shift_s: float = 0.5
    bandstop_fraction: float = 0.2
    bandstop_prob: float = 0.5
    shuffle_noises: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.bandstop_fraction < 1:
            raise ValueError("bandstop_fraction must lie in [0, 1)")
        if self.max_shift_s < 0:
            raise ValueError("max_shift_s must be >= 0")
        if not 0 <= self.bandstop_prob <= 1:
            raise ValueError("bandstop_prob must lie in [0, 1]")


def energy(x: np.ndarray) -> float:
    return float(np.sum(np.square(x, dtype=np.float64)))


def noise_gain(clean_energy: float, noise_energy: float, snr_db: float) -> float:
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    return math.sqrt(clean_energy / (noise_energy * 10.0 ** (snr_db / 10.0)))


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float, id: str = "") -> NoisyCleanPair:
    """Scale ``noise`` so the mixture has the requested SNR and add it.

    ``snr_db=math.inf`` means no noise at all.
    """
    if len(clean) != len(noise):
        raise ValueError(f"length mismatch: clean {len(clean)}, noise {len(noise)}")
    if clean.sample_rate != noise.sample_rate:
        raise ValueError("clean and noise sample rates differ")
    e_clean = energy(clean.samples)
    if e_clean == 0:
        raise ValueError("clean signal has zero energy; SNR is undefined")
    e_noise = energy(noise.samples)
    if math.isinf(snr_db) and snr_db > 0:
        gain = 0.0
    elif e_noise == 0:
        raise ValueError("noise has zero energy; cannot reach a finite SNR")
    else:
        gain = noise_gain(e_clean, e_noise, snr_db)
    scaled = gain * noise.samples
    return NoisyCleanPair(Waveform(clean.samples + scaled, clean.sample_rate),
                          Waveform(clean.samples.copy(), clean.sample_rate), id, scaled)


def measured_snr(pair: NoisyCleanPair) -> float:
    return 10.0 * math.log10(energy(pair.clean.samples) / energy(pair.noise))


def fit_noise(noise: np.ndarray, length: int) -> np.ndarray:
    """Tile or crop ``noise`` to ``length`` samples."""
    if len(noise) < length:
        noise = np.tile(noise, -(-length // len(noise)))
    return noise[:length]


# ---------------------------------------------------------------------------
# Shift
# ---------------------------------------------------------------------------

def random_shift(pair: NoisyCleanPair, cfg: AugmentConfig,
                 rng: np.random.Generator) -> NoisyCleanPair:
    """Crop both signals at a common random offset in [0, max_shift].

    The output is ``max_shift`` samples shorter than the input, so every
    offset yields a full-length window.
    """
    shift = int(round(cfg.max_shift_s * pair.sample_rate))
    if shift == 0:
        return pair
    if len(pair) <= shift:
        raise ValueError(
            f"segment of {len(pair)} samples is not longer than the shift range {shift}")
    offset = int(rng.integers(0, shift + 1))
    keep = len(pair) - shift
    sr = pair.sample_rate
    return NoisyCleanPair(
        Waveform(pair.noisy.samples[offset:offset + keep], sr),
        Waveform(pair.clean.samples[offset:offset + keep], sr),
        pair.id, pair.noise[offset:offset + keep])


# ---------------------------------------------------------------------------
# Noise shuffling
# ---------------------------------------------------------------------------

def shuffle_noises(batch: list[NoisyCleanPair], rng: np.random.Generator,
                   permutation=None) -> list[NoisyCleanPair]:
    """Re-mix each clean signal with the noise of another batch item.

    ``permutation[i]`` names the item whose noise goes to item ``i``; drawn
    from ``rng`` when omitted.
    """
    if not batch:
        raise ValueError("empty batch")
    length = len(batch[0])
    if any(len(p) != length for p in batch):
        raise ValueError("all pairs in a batch must have equal length")
    if permutation is None:
        permutation = rng.permutation(len(batch))
    permutation = np.asarray(permutation)
    if sorted(permutation.tolist()) != list(range(len(batch))):
        raise ValueError(f"not a permutation: {permutation}")
    noises = [p.noise for p in batch]
    out = []
    for pair, src in zip(batch, permutation):
        sr = pair.sample_rate
        noisy = pair.clean.samples + noises[src]
        out.append(NoisyCleanPair(Waveform(noisy, sr), pair.clean, pair.id, noises[src]))
    return out


# ---------------------------------------------------------------------------
# Mel band-stop
# ---------------------------------------------------------------------------

BANDSTOP_NPERSEG = 512


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def sample_mel_band(fraction: float, sample_rate: int,
                    rng: np.random.Generator) -> tuple[float, float]:
    """Draw a contiguous band covering ``fraction`` of the mel axis (Hz edges)."""
    top = float(hz_to_mel(sample_rate / 2))
    width = fraction * top
    start = float(rng.uniform(0.0, top - width))
    return float(mel_to_hz(start)), float(mel_to_hz(start + width))


def band_stop(samples: np.ndarray, low_hz: float, high_hz: float, sample_rate: int,
              nperseg: int = BANDSTOP_NPERSEG) -> np.ndarray:
    """Zero STFT bins in [low_hz, high_hz] and resynthesize (50% overlap Hann)."""
    n = len(samples)
    _, _, spec = signal.stft(samples, fs=sample_rate, window="hann", nperseg=nperseg,
                             noverlap=nperseg // 2, boundary="zeros", padded=True)
    freqs = np.fft.rfftfreq(nperseg, d=1.0 / sample_rate)
    if high_hz > low_hz:
        spec[(freqs >= low_hz) & (freqs <= high_hz), :] = 0.0
    _, out = signal.istft(spec, fs=sample_rate, window="hann", nperseg=nperseg,
                          noverlap=nperseg // 2, boundary=True)
    out = out[:n]
    if len(out) < n:
        out = np.pad(out, (0, n - len(out)))
    return out.astype(samples.dtype, copy=False)


def band_stop_mel(wave: Waveform, cfg: AugmentConfig, rng: np.random.Generator) -> Waveform:
    low, high = sample_mel_band(cfg.bandstop_fraction, wave.sample_rate, rng)
    return Waveform(band_stop(wave.samples, low, high, wave.sample_rate), wave.sample_rate)


def band_stop_pair(pair: NoisyCleanPair, cfg: AugmentConfig,
                   rng: np.random.Generator) -> NoisyCleanPair:
    """Apply one sampled band-stop to both signals (keeps noisy = clean + noise)."""
    sr = pair.sample_rate
    low, high = sample_mel_band(cfg.bandstop_fraction, sr, rng)
    return NoisyCleanPair(Waveform(band_stop(pair.noisy.samples, low, high, sr), sr),
                          Waveform(band_stop(pair.clean.samples, low, high, sr), sr),
                          pair.id)


def augment_batch(batch: list[NoisyCleanPair], cfg: AugmentConfig,
                  rng: np.random.Generator) -> list[NoisyCleanPair]:
    """Training-time augmentation: shift, in-batch noise shuffle, band-stop."""
    batch = [random_shift(p, cfg, rng) for p in batch]
    if cfg.shuffle_noises and len(batch) > 1:
        batch = shuffle_noises(batch, rng)
    out = []
    for pair in batch:
        if cfg.bandstop_fraction > 0 and rng.random() < cfg.bandstop_prob:
            pair = band_stop_pair(pair, cfg, rng)
        out.append(pair)
    return out


# ---------------------------------------------------------------------------
# Segmentation
# ---------------------------------------------------------------------------

def segment_starts(length: int, seg: int, stride: int) -> list[int]:
    if length <= seg:
        return [0]
    count = (length - seg) // stride + 1
    if (length - seg) % stride:
        count += 1
    return [i * stride for i in range(count)]


def _window(samples: np.ndarray, start: int, seg: int) -> np.ndarray:
    chunk = samples[start:start + seg]
    if len(chunk) < seg:
        chunk = np.pad(chunk, (0, seg - len(chunk)))
    return chunk


def segment_dataset(pairs: list[NoisyCleanPair], seg_s: float = 4.5,
                    stride_s: float = 0.5) -> list[NoisyCleanPair]:
    """Cut each pair into ``seg_s`` windows every ``stride_s`` seconds.

    A trailing partial window and utterances shorter than one window are
    zero-padded to full length.
    """
    if seg_s <= 0 or stride_s <= 0:
        raise ValueError("seg_s and stride_s must be positive")
    out = []
    for pair in pairs:
        sr = pair.sample_rate
        seg = int(round(seg_s * sr))
        stride = int(round(stride_s * sr))
        for k, start in enumerate(segment_starts(len(pair), seg, stride)):
            out.append(NoisyCleanPair(
                Waveform(_window(pair.noisy.samples, start, seg), sr),
                Waveform(_window(pair.clean.samples, start, seg), sr),
                f"{pair.id}@{k}", _window(pair.noise, start, seg)))
    return out
