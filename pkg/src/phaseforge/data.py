"""Dataset manifests, pair loading, and a synthetic speech/noise generator.

Manifests are JSON-lines files with one record per utterance, either paired::

    {"id": "p232_001", "clean_path": "...", "noisy_path": "..."}

or mixed on the fly::

    {"id": "u0", "clean_path": "...", "noise_path": "...", "snr_db": 5.0}

An optional ``split`` field ("train" / "valid" / "test") assigns the record;
without it, Valentini speakers p286 and p287 go to validation.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import signal

from .audio import DEFAULT_SAMPLE_RATE, Waveform, read_wav, write_wav
from .augment import NoisyCleanPair, fit_noise, mix_at_snr

VALID_SPEAKERS = ("p286", "p287")


@dataclass
class ManifestRecord:
    id: str
    clean_path: str
    noisy_path: str | None = None
    noise_path: str | None = None
    snr_db: float | None = None
    split: str | None = None

    def __post_init__(self):
        if self.noisy_path is None and (self.noise_path is None or self.snr_db is None):
            raise ValueError(
                f"record {self.id!r} needs noisy_path, or noise_path together with snr_db")

    @property
    def resolved_split(self) -> str:
        if self.split:
            return self.split
        speaker = self.id.split("_")[0]
        return "valid" if speaker in VALID_SPEAKERS else "train"

    def to_json(self) -> str:
        return json.dumps({k: v for k, v in asdict(self).items() if v is not None})


def load_manifest(path) -> list[ManifestRecord]:
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
        for key in ("clean_path", "noisy_path", "noise_path"):
            if entry.get(key) and not Path(entry[key]).is_absolute():
                entry[key] = str(path.parent / entry[key])
        records.append(ManifestRecord(**entry))
    return records


def write_manifest(path, records: list[ManifestRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(r.to_json() + "\n" for r in records))
    return path


@lru_cache(maxsize=256)
def _cached_wav(path: str, sample_rate: int) -> Waveform:
    return read_wav(path, sample_rate)


def load_pair(record: ManifestRecord, sample_rate: int = DEFAULT_SAMPLE_RATE) -> NoisyCleanPair:
    clean = _cached_wav(record.clean_path, sample_rate)
    if record.noisy_path is not None:
        noisy = _cached_wav(record.noisy_path, sample_rate)
        n = min(len(clean), len(noisy))
        return NoisyCleanPair(Waveform(noisy.samples[:n], sample_rate),
                              Waveform(clean.samples[:n], sample_rate), record.id)
    noise = _cached_wav(record.noise_path, sample_rate)
    noise = Waveform(fit_noise(noise.samples, len(clean)), sample_rate)
    return mix_at_snr(clean, noise, record.snr_db, record.id)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def _resonate(x: np.ndarray, freq: float, bandwidth: float, sr: int) -> np.ndarray:
    r = math.exp(-math.pi * bandwidth / sr)
    theta = 2 * math.pi * freq / sr
    a = [1.0, -2 * r * math.cos(theta), r * r]
    return signal.lfilter([1.0 - r], a, x)


def synth_speech(duration: float, rng: np.random.Generator,
                 sample_rate: int = DEFAULT_SAMPLE_RATE, floor_db: float = -35.0) -> np.ndarray:
    """Speech-like signal from a source-filter model.

    A sequence of syllables, each either voiced (band-limited pulse train
    with a drifting pitch) or unvoiced (white noise), shaped by three
    formant resonators and a smooth envelope, over a faint background floor.
    """
    n = int(round(duration * sample_rate))
    out = np.zeros(n)
    base_f0 = rng.uniform(90, 220)
    pos = int(rng.uniform(0.0, 0.08) * sample_rate)
    while pos < n:
        length = int(rng.uniform(0.12, 0.3) * sample_rate)
        seg_n = min(length, n - pos)
        t = np.arange(seg_n) / sample_rate
        if rng.random() < 0.75:
            f0 = base_f0 * (1 + 0.08 * np.sin(2 * np.pi * rng.uniform(2, 5) * t + rng.uniform(0, 6.3)))
            phase = 2 * np.pi * np.cumsum(f0) / sample_rate
            top = int(3800 // base_f0)
            src = sum(np.sin(k * phase) / k for k in range(1, top + 1))
        else:
            src = rng.standard_normal(seg_n) * 0.6
        formants = (rng.uniform(300, 900), rng.uniform(900, 2300), rng.uniform(2300, 3400))
        seg = sum(_resonate(src, f, rng.uniform(80, 200), sample_rate) * g
                  for f, g in zip(formants, (1.0, 0.6, 0.3)))
        env = np.sin(np.pi * np.arange(seg_n) / max(length, 1)) ** 2
        out[pos:pos + seg_n] += seg * env * rng.uniform(0.5, 1.0)
        pos += int(length * rng.uniform(0.8, 1.2)) + int(rng.uniform(0.0, 0.06) * sample_rate)
    rms = np.sqrt(np.mean(out ** 2)) or 1.0
    out = out / rms
    out += 10 ** (floor_db / 20) * rng.standard_normal(n)
    return 0.05 * out / np.sqrt(np.mean(out ** 2))


def synth_noise(duration: float, rng: np.random.Generator,
                sample_rate: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """Colored noise with a random spectral tilt and slow amplitude modulation."""
    n = int(round(duration * sample_rate))
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate)
    tilt = rng.uniform(0.0, 1.2)
    spec = spec / np.maximum(freqs, 50.0) ** (tilt / 2)
    noise = np.fft.irfft(spec, n)
    t = np.arange(n) / sample_rate
    noise *= 1 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.2, 2.0) * t + rng.uniform(0, 6.3))
    return noise / np.sqrt(np.mean(noise ** 2))


def generate_dataset(out_dir, num_utterances: int = 8, duration: float = 2.0,
                     snr_range=(0.0, 10.0), valid_fraction: float = 0.25, seed: int = 0,
                     sample_rate: int = DEFAULT_SAMPLE_RATE, paired: bool = True) -> Path:
    """Write synthetic clean/noise(/noisy) WAVs and ``manifest.jsonl`` to ``out_dir``.

    ``paired=True`` stores pre-mixed noisy files; otherwise records carry the
    noise path and SNR for on-the-fly mixing.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    num_valid = int(round(num_utterances * valid_fraction))
    records = []
    for i in range(num_utterances):
        uid = f"syn{i:04d}"
        clean = Waveform(synth_speech(duration, rng, sample_rate), sample_rate)
        noise = Waveform(synth_noise(duration, rng, sample_rate), sample_rate)
        snr = float(rng.uniform(*snr_range))
        split = "valid" if i >= num_utterances - num_valid else "train"
        clean_rel = f"clean/{uid}.wav"
        write_wav(out_dir / clean_rel, clean)
        if paired:
            pair = mix_at_snr(clean, noise, snr, uid)
            noisy_rel = f"noisy/{uid}.wav"
            write_wav(out_dir / noisy_rel, pair.noisy)
            records.append(ManifestRecord(uid, clean_rel, noisy_path=noisy_rel, split=split))
        else:
            noise_rel = f"noise/{uid}.wav"
            write_wav(out_dir / noise_rel, noise)
            records.append(ManifestRecord(uid, clean_rel, noise_path=noise_rel,
                                          snr_db=round(snr, 3), split=split))
    return write_manifest(out_dir / "manifest.jsonl", records)
