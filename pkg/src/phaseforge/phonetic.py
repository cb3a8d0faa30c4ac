"""Frozen phonetic feature providers and hidden-layer selection.

A provider maps audio (B, T) to per-layer features (B, L+1, T', d). The toy
provider is a small deterministic stand-in for a pretrained speech encoder;
real encoders plug in through ``ExternalProvider`` and the registry.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import DEFAULT_SAMPLE_RATE, Waveform
from .augment import hz_to_mel, mel_to_hz
from .errors import ConfigurationError, ProviderError


class PhoneticProvider(nn.Module):
    """Base class. Subclasses set the attributes below and implement ``forward``."""

    num_layers: int
    feature_dim: int
    frame_rate: float
    sample_rate: int
    differentiable: bool = True
    trainable = False

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode: bool = True):
        # providers stay in inference mode whatever the surrounding model does
        return super().train(False)

    def num_frames(self, length: int) -> int:
        raise NotImplementedError

    def forward(self, wav: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


@dataclass
class LayeredFeatures:
    layers: np.ndarray  # (L+1, T', d)
    frame_rate: float

    @property
    def num_layers(self) -> int:
        return self.layers.shape[0]


def extract(provider: PhoneticProvider, wave: Waveform) -> LayeredFeatures:
    if wave.sample_rate != provider.sample_rate:
        raise ValueError(
            f"provider expects {provider.sample_rate} Hz audio, got {wave.sample_rate} Hz")
    x = torch.as_tensor(np.asarray(wave.samples), dtype=torch.float64)[None]
    with torch.no_grad():
        feats = provider(x)[0]
    return LayeredFeatures(feats.numpy(), provider.frame_rate)


# ---------------------------------------------------------------------------
# Toy provider
# ---------------------------------------------------------------------------

def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters (n_mels, n_fft // 2 + 1) spaced evenly in mel."""
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    bank = np.zeros((n_mels, len(freqs)))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rise = (freqs - lo) / (mid - lo)
        fall = (hi - freqs) / (hi - mid)
        bank[m] = np.maximum(0.0, np.minimum(rise, fall))
    return bank


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


@dataclass
class ToyProviderConfig:
    num_layers: int = 12  # hidden layers L; features expose L + 1
    dim: int = 16
    sample_rate: int = DEFAULT_SAMPLE_RATE
    frame_rate: float = 50.0
    win_s: float = 0.025
    n_fft: int = 512
    gain: float = 1.5
    seed: int = 0


class ToyProvider(PhoneticProvider):
    """Log-mel frames followed by fixed orthogonal mixing and ``tanh`` per layer.

    Layer 0 is ``log(1 + mel power)`` on a 20 ms hop (zero for silence);
    layer j is ``tanh(gain * layer_{j-1} @ Q_j)``. Frame j covers samples
    ``[j * hop, j * hop + win)`` with zero padding at the end, giving
    ``max(1, T // hop)`` frames.
    """

    def __init__(self, cfg: ToyProviderConfig | None = None):
        super().__init__()
        cfg = cfg or ToyProviderConfig()
        self.cfg = cfg
        self.num_layers = cfg.num_layers + 1
        self.feature_dim = cfg.dim
        self.frame_rate = cfg.frame_rate
        self.sample_rate = cfg.sample_rate
        self.hop = int(round(cfg.sample_rate / cfg.frame_rate))
        self.win = int(round(cfg.win_s * cfg.sample_rate))
        if self.win > cfg.n_fft:
            raise ConfigurationError("toy provider window exceeds n_fft")
        rng = np.random.default_rng(cfg.seed)
        self.mel = nn.Parameter(torch.from_numpy(
            mel_filterbank(cfg.dim, cfg.n_fft, cfg.sample_rate)))
        self.window = nn.Parameter(torch.hann_window(self.win, periodic=True, dtype=torch.float64))
        self.mixing = nn.Parameter(torch.from_numpy(
            np.stack([_orthogonal(rng, cfg.dim) for _ in range(cfg.num_layers)])
            if cfg.num_layers else np.zeros((0, cfg.dim, cfg.dim))))
        self.freeze()

    def num_frames(self, length: int) -> int:
        return max(1, length // self.hop)

    def forward(self, wav: torch.Tensor) -> torch.Tensor:
        if wav.dim() == 1:
            wav = wav[None]
        frames = self.num_frames(wav.shape[-1])
        need = (frames - 1) * self.hop + self.win
        wav = F.pad(wav, (0, max(0, need - wav.shape[-1])))
        chunks = wav.unfold(-1, self.win, self.hop)[:, :frames] * self.window.to(wav.dtype)
        spec = torch.fft.rfft(chunks, n=self.cfg.n_fft, dim=-1)
        power = spec.real ** 2 + spec.imag ** 2
        h = torch.log1p(power @ self.mel.to(wav.dtype).T)
        layers = [h]
        for q in self.mixing.to(wav.dtype):
            h = torch.tanh(self.cfg.gain * h @ q)
            layers.append(h)
        return torch.stack(layers, dim=1)


def toy_provider(cfg: ToyProviderConfig | None = None, **overrides) -> ToyProvider:
    if cfg is None:
        cfg = ToyProviderConfig(**overrides)
    return ToyProvider(cfg)


# ---------------------------------------------------------------------------
# External providers and registry
# ---------------------------------------------------------------------------

class ExternalProvider(PhoneticProvider):
    """Adapter around a TorchScript module exported from a pretrained encoder.

    The module must map audio (B, T) to hidden states (B, L+1, T', d). An ASR
    encoder exports its chosen encoder tap as a single layer (L = 0).
    """

    def __init__(self, artifact_path, sample_rate: int, num_layers: int, dim: int,
                 frame_rate: float, differentiable: bool = False, name: str = "external"):
        super().__init__()
        path = Path(artifact_path)
        if not path.exists():
            raise ProviderError(
                f"provider {name!r}: artifact {path} not found. Export the pretrained "
                "encoder with torch.jit.script/trace so it returns (B, L+1, T', d) hidden "
                "states, then point artifact_path at the file.")
        try:
            self.module = torch.jit.load(str(path), map_location="cpu")
        except Exception as exc:  # noqa: BLE001 - surface any loader failure uniformly
            raise ProviderError(f"provider {name!r}: could not load {path}: {exc}") from exc
        self.name = name
        self.sample_rate = sample_rate
        self.num_layers = num_layers
        self.feature_dim = dim
        self.frame_rate = frame_rate
        self.differentiable = differentiable
        self.freeze()

    def num_frames(self, length: int) -> int:
        return max(1, int(length / self.sample_rate * self.frame_rate))

    def forward(self, wav):
        if wav.dim() == 1:
            wav = wav[None]
        out = self.module(wav)
        if out.dim() != 4 or out.shape[1] != self.num_layers or out.shape[-1] != self.feature_dim:
            raise ProviderError(
                f"provider {self.name!r} returned shape {tuple(out.shape)}, expected "
                f"(B, {self.num_layers}, T', {self.feature_dim})")
        return out


@dataclass
class ProviderSpec:
    kind: str = "toy"
    artifact_path: str | None = None
    sample_rate: int = DEFAULT_SAMPLE_RATE
    num_layers: int = 13  # total exposed layers, L + 1
    dim: int = 16
    frame_rate: float = 50.0
    differentiable: bool = False
    seed: int = 0
    options: dict = field(default_factory=dict)


def build_provider(spec: ProviderSpec, name: str = "provider") -> PhoneticProvider:
    if spec.kind == "toy":
        return ToyProvider(ToyProviderConfig(
            num_layers=spec.num_layers - 1, dim=spec.dim, sample_rate=spec.sample_rate,
            frame_rate=spec.frame_rate, seed=spec.seed, **spec.options))
    if spec.kind == "external":
        if not spec.artifact_path:
            raise ProviderError(f"provider {name!r}: external providers need artifact_path")
        return ExternalProvider(spec.artifact_path, spec.sample_rate, spec.num_layers,
                                spec.dim, spec.frame_rate, spec.differentiable, name)
    raise ConfigurationError(f"provider {name!r}: unknown kind {spec.kind!r}")


def load_registry(path) -> dict[str, ProviderSpec]:
    """Read a JSON or TOML mapping of provider name -> ProviderSpec fields."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".toml":
        import tomli

        data = tomli.loads(text)
    else:
        data = json.loads(text)
    return {name: ProviderSpec(**entry) for name, entry in data.items()}


# ---------------------------------------------------------------------------
# Layer selection
# ---------------------------------------------------------------------------

SELECTION_MODES = ("fixed", "mean", "learned")


class LayerSelection(nn.Module):
    """Reduce (B, L+1, T', d) features to (B, T', d).

    ``fixed`` picks one layer, ``mean`` averages all layers and ``learned``
    takes a softmax-weighted average with trainable logits (zeros = uniform).
    """

    def __init__(self, num_layers: int, mode: str = "fixed", index: int = 0):
        super().__init__()
        if mode not in SELECTION_MODES:
            raise ConfigurationError(f"unknown selection mode {mode!r}")
        if mode == "fixed" and not 0 <= index < num_layers:
            raise ValueError(f"layer index {index} out of range for {num_layers} layers")
        self.num_layers = num_layers
        self.mode = mode
        self.index = index
        self.logits = nn.Parameter(torch.zeros(num_layers)) if mode == "learned" else None

    def label(self) -> str:
        if self.mode == "fixed":
            return str(self.index)
        top = self.num_layers - 1
        return f"Avg(0-{top})" if self.mode == "mean" else f"Lrn-W-Avg(0-{top})"

    def weights(self) -> torch.Tensor:
        if self.mode == "learned":
            return torch.softmax(self.logits, dim=0)
        if self.mode == "mean":
            return torch.full((self.num_layers,), 1.0 / self.num_layers)
        return F.one_hot(torch.tensor(self.index), self.num_layers).double()

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[1] != self.num_layers:
            raise ValueError(
                f"expected {self.num_layers} layers, got {features.shape[1]}")
        if self.mode == "fixed":
            return features[:, self.index]
        if self.mode == "mean":
            unnorm = torch.ones(self.num_layers, dtype=features.dtype, device=features.device)
        else:
            logits = self.logits.to(features.dtype)
            unnorm = torch.exp(logits - logits.max())
        # one code path for mean and learned: uniform logits reproduce the mean exactly
        return (unnorm[None, :, None, None] * features).sum(dim=1) / unnorm.sum()

    def extra_repr(self) -> str:
        return f"mode={self.mode}, index={self.index}, num_layers={self.num_layers}"


def select(features, sel: LayerSelection):
    """Apply ``sel`` to a (L+1, T', d) array or (B, L+1, T', d) tensor."""
    if isinstance(features, LayeredFeatures):
        features = features.layers
    if not isinstance(features, torch.Tensor):
        out = sel(torch.as_tensor(np.asarray(features))[None])[0]
        return out.detach().numpy()
    return sel(features)


def report_layer_weights(sel: LayerSelection, out_dir=None, title: str | None = None) -> dict[int, float]:
    """Learned layer weights; optionally written as CSV plus a pie chart."""
    if sel.mode != "learned":
        raise ValueError(f"layer weights are only defined for learned selection, not {sel.mode!r}")
    weights = torch.softmax(sel.logits.detach().double(), dim=0).tolist()
    table = {i: w for i, w in enumerate(weights)}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "layer_weights.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "weight"])
            for i, w in table.items():
                writer.writerow([i, repr(w)])
        _plot_weights(table, out_dir / "layer_weights.png", title)
    return table


def _plot_weights(table: dict[int, float], path: Path, title: str | None):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    labels = [f"L{i}" for i in table]
    ax.pie(list(table.values()), labels=labels, autopct=lambda p: f"{p:.1f}%" if p >= 3 else "",
           startangle=90, counterclock=False)
    ax.set_title(title or "Learned layer weights")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

