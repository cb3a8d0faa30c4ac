"""Inference over WAV folders and objective evaluation (SI-SNR, LSD, external adapters)."""

from __future__ import annotations

import json
import logging
import math
import subprocess
import tempfile
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile

from .audio import DEFAULT_SAMPLE_RATE, StftConfig, Waveform, read_wav, resample_rate, stft, write_wav
from .data import load_manifest, load_pair

logger = logging.getLogger(__name__)

SI_SNR_CAP = 60.0
LSD_STFT = StftConfig(n_fft=1024, hop=256, win_length=1024)
LSD_EPS = 1e-12  # power floor before the log

# Documented value ranges; values outside are flagged, not clipped.
METRIC_RANGES = {
    "SI-SNR": (-SI_SNR_CAP, SI_SNR_CAP),
    "LSD": (0.0, math.inf),
    "PESQ": (-0.5, 4.5),
    "CSIG": (1.0, 5.0),
    "CBAK": (1.0, 5.0),
    "COVL": (1.0, 5.0),
    "VISQOL": (1.0, 5.0),
    "STOI": (0.0, 1.0),
}
NATIVE_METRICS = ("SI-SNR", "LSD")


@dataclass
class MetricRecord:
    utterance_id: str
    metric_name: str
    value: float
    out_of_range: bool = False

    def __post_init__(self):
        low, high = METRIC_RANGES.get(self.metric_name, (-math.inf, math.inf))
        self.out_of_range = not (low <= self.value <= high)


def _pair_arrays(reference, estimate):
    ref = np.asarray(getattr(reference, "samples", reference), dtype=np.float64)
    est = np.asarray(getattr(estimate, "samples", estimate), dtype=np.float64)
    if ref.shape != est.shape:
        raise ValueError(f"length mismatch: {ref.shape} vs {est.shape}")
    return ref, est


def si_snr(reference, estimate) -> float:
    """Scale-invariant SNR in dB, clamped to +-60 dB.

    Both signals are made zero-mean; the estimate is projected on the
    reference, and the residual counts as noise. A perfect estimate (zero
    residual) returns the +60 dB cap and an estimate with no component along
    the reference returns -60 dB.
    """
    ref, est = _pair_arrays(reference, estimate)
    ref = ref - ref.mean()
    est = est - est.mean()
    ref_energy = float(ref @ ref)
    if ref_energy == 0.0:
        raise ValueError("si_snr: reference is zero (after mean removal)")
    target = (est @ ref) / ref_energy * ref
    noise = est - target
    t, n = float(target @ target), float(noise @ noise)
    if t == 0.0:
        return -SI_SNR_CAP
    if n <= t * 1e-18:
        return SI_SNR_CAP
    return float(np.clip(10 * np.log10(t / n), -SI_SNR_CAP, SI_SNR_CAP))


def log_power_db(samples: np.ndarray, cfg: StftConfig = LSD_STFT) -> np.ndarray:
    spec = stft(Waveform(samples), cfg).values
    return 10 * np.log10(np.abs(spec) ** 2 + LSD_EPS)


def log_spectral_distance(reference, estimate, cfg: StftConfig = LSD_STFT) -> float:
    """Mean over frames of the per-frame RMS log-power difference, in dB.

    Uses a centered Hann STFT (n_fft 1024, hop 256) and a 1e-12 power floor.
    """
    ref, est = _pair_arrays(reference, estimate)
    diff = log_power_db(ref, cfg) - log_power_db(est, cfg)  # (bins, frames)
    return float(np.mean(np.sqrt(np.mean(diff ** 2, axis=0))))


NATIVE = {"SI-SNR": si_snr, "LSD": log_spectral_distance}


# ---------------------------------------------------------------------------
# External metric adapters
# ---------------------------------------------------------------------------

@dataclass
class MetricAdapter:
    """An executable that receives ``<reference.wav> <estimate.wav>`` and prints one float."""

    name: str
    command: list[str]
    timeout: float = 600.0

    def __call__(self, reference: Path, estimate: Path) -> float:
        proc = subprocess.run([*self.command, str(reference), str(estimate)],
                              capture_output=True, text=True, timeout=self.timeout)
        if proc.returncode != 0:
            raise RuntimeError(f"metric adapter {self.name} failed ({proc.returncode}): "
                               f"{proc.stderr.strip()[:500]}")
        try:
            return float(proc.stdout.strip().split()[-1])
        except (ValueError, IndexError) as exc:
            raise RuntimeError(f"metric adapter {self.name} printed {proc.stdout!r}, "
                               f"expected one float") from exc


def load_adapters(path) -> dict[str, MetricAdapter]:
    """JSON mapping ``{"PESQ": ["python", "pesq_tool.py"], ...}``."""
    data = json.loads(Path(path).read_text())
    return {name: MetricAdapter(name, list(cmd) if isinstance(cmd, list) else [cmd])
            for name, cmd in data.items()}


# ---------------------------------------------------------------------------
# Enhancement
# ---------------------------------------------------------------------------

@dataclass
class EnhanceReport:
    written: list = field(default_factory=list)
    errors: dict = field(default_factory=dict)


def enhance_waveform(model, objective, wave: Waveform) -> np.ndarray:
    x = torch.from_numpy(wave.samples.astype(np.float32))[None]
    with torch.no_grad():
        y_hat = objective.enhance(x, model)
    return y_hat[0].double().numpy()


def enhance(checkpoint, in_dir, out_dir, provider=None,
            sample_rate: int = DEFAULT_SAMPLE_RATE) -> EnhanceReport:
    """Enhance every ``*.wav`` in ``in_dir`` into ``out_dir`` under the same file name.

    Inputs at other rates are resampled for the model and back afterwards, so
    each output matches its input in length and rate. Unreadable files are
    recorded in ``report.errors`` and skipped.
    """
    from .trainer import load_for_inference

    model, objective, _ = load_for_inference(checkpoint, provider)
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = EnhanceReport()
    for path in sorted(in_dir.glob("*.wav")):
        try:
            rate, raw = wavfile.read(str(path))
            length = raw.shape[0]
            wave = read_wav(path, sample_rate)
        except Exception as exc:  # noqa: BLE001 - per-file failure, batch continues
            logger.warning("skipping %s: %s", path.name, exc)
            report.errors[path.name] = str(exc)
            continue
        out = enhance_waveform(model, objective, wave)
        if rate != sample_rate:
            out = resample_rate(out, sample_rate, rate)
            out = np.pad(out, (0, max(0, length - out.shape[0])))[:length]
        report.written.append(write_wav(out_dir / path.name, Waveform(out, rate)))
    return report


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvaluationResult:
    records: list
    summary: dict

    def to_dict(self) -> dict:
        return {"summary": self.summary, "records": [asdict(r) for r in self.records]}


def _score(utt_id, ref: np.ndarray, est: np.ndarray, metrics, adapters, sample_rate):
    out = []
    external = [m for m in metrics if m not in NATIVE]
    for name in metrics:
        if name in NATIVE:
            out.append(MetricRecord(utt_id, name, NATIVE[name](ref, est)))
    if not any(m in adapters for m in external):
        return out
    with tempfile.TemporaryDirectory() as tmp:
        ref_path = write_wav(Path(tmp) / "ref.wav", Waveform(ref, sample_rate))
        est_path = write_wav(Path(tmp) / "est.wav", Waveform(est, sample_rate))
        for name in external:
            if name in adapters:
                out.append(MetricRecord(utt_id, name, adapters[name](ref_path, est_path)))
    return out


def summarize(records: list[MetricRecord]) -> dict:
    by_metric: dict[str, list[float]] = {}
    for r in records:
        by_metric.setdefault(r.metric_name, []).append(r.value)
    return {name: float(np.mean(values)) for name, values in sorted(by_metric.items())}


def _check_metrics(metrics, adapters) -> list[str]:
    usable = []
    for name in metrics:
        if name in NATIVE or name in adapters:
            usable.append(name)
        else:
            warnings.warn(f"metric {name} has no registered adapter; skipped", stacklevel=3)
    return usable


def evaluate_pairs(pairs, metrics=NATIVE_METRICS, adapters=None,
                   sample_rate: int = DEFAULT_SAMPLE_RATE) -> EvaluationResult:
    """Score ``(id, reference, estimate)`` triples; records come out sorted by id."""
    adapters = adapters or {}
    metrics = _check_metrics(metrics, adapters)
    records = []
    for utt_id, ref, est in sorted(pairs, key=lambda p: p[0]):
        records.extend(_score(utt_id, ref, est, metrics, adapters, sample_rate))
    return EvaluationResult(records, summarize(records))


def evaluate_dirs(reference_dir, estimate_dir, metrics=NATIVE_METRICS, adapters=None,
                  sample_rate: int = DEFAULT_SAMPLE_RATE) -> EvaluationResult:
    """Score estimates against references matched by file name."""
    reference_dir, estimate_dir = Path(reference_dir), Path(estimate_dir)
    pairs = []
    for est_path in sorted(estimate_dir.glob("*.wav")):
        ref_path = reference_dir / est_path.name
        if not ref_path.exists():
            raise ValueError(f"no reference for {est_path.name} in {reference_dir}")
        ref = read_wav(ref_path, sample_rate).samples
        est = read_wav(est_path, sample_rate).samples
        n = min(len(ref), len(est))
        pairs.append((est_path.stem, ref[:n], est[:n]))
    return evaluate_pairs(pairs, metrics, adapters, sample_rate)


def evaluate(checkpoint, manifest, metrics=NATIVE_METRICS, adapters=None, split: str | None = None,
             provider=None, out_dir=None, sample_rate: int = DEFAULT_SAMPLE_RATE) -> EvaluationResult:
    """Enhance every manifest utterance with ``checkpoint`` and score it against its clean reference.

    ``split`` restricts to one manifest split. With ``out_dir``, the
    enhanced audio and ``metrics.json`` are written there.
    """
    from .trainer import checkpoint_hash, load_for_inference

    model, objective, _ = load_for_inference(checkpoint, provider)
    records = load_manifest(manifest)
    if split is not None:
        records = [r for r in records if r.resolved_split == split]
    pairs = []
    for record in records:
        if not record.clean_path:
            raise ValueError(f"utterance {record.id} has no clean reference")
        pair = load_pair(record, sample_rate)
        est = enhance_waveform(model, objective, pair.noisy)
        if out_dir is not None:
            write_wav(Path(out_dir) / "enhanced" / f"{record.id}.wav", Waveform(est, sample_rate))
        pairs.append((record.id, pair.clean.samples.astype(np.float64), est))
    result = evaluate_pairs(pairs, metrics, adapters, sample_rate)
    if out_dir is not None:
        payload = dict(result.to_dict(), checkpoint=str(checkpoint),
                       checkpoint_sha256=checkpoint_hash(checkpoint), manifest=str(manifest))
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "metrics.json").write_text(json.dumps(payload, indent=2))
    return result
