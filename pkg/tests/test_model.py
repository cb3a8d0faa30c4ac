import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from oracles import simulate_stages
from phaseforge.audio import valid_length
from phaseforge.errors import ConfigurationError
from phaseforge.model import (
    Demucs, DemucsConfig, causality_probe, lookahead, parameter_count, tap_shapes,
)

TINY = DemucsConfig(hidden=4, depth=2, upscale=1, stride=2, kernel=8)
SMALL = dict(hidden=8, depth=3, upscale=2, stride=2, kernel=8)


def build(cfg, seed=0):
    torch.manual_seed(seed)
    return Demucs(cfg).eval()


@pytest.mark.parametrize("length", [1000, 16000, 72001])
def test_output_length_matches_input(length):
    model = build(DemucsConfig())
    with torch.no_grad():
        y, taps = model(torch.randn(1, length))
    assert y.shape == (1, length)
    assert len(taps) == 6


@given(length=st.integers(1, 3000), causal=st.booleans())
def test_length_preserved_for_any_input(length, causal):
    model = build(DemucsConfig(causal=causal, **SMALL))
    with torch.no_grad():
        y, _ = model(torch.randn(2, length))
    assert y.shape == (2, length)


def test_zero_final_layer_gives_silence():
    model = build(DemucsConfig(hidden=8, depth=3))
    final = model.decoder[-1][-1]
    assert isinstance(final, torch.nn.ConvTranspose1d) and final.out_channels == 1
    with torch.no_grad():
        final.weight.zero_()
        final.bias.zero_()
        y, _ = model(torch.randn(1, 5000))
    assert torch.count_nonzero(y) == 0


def test_tap_shapes_match_layer_arithmetic():
    length = 1001
    model = build(TINY)
    with torch.no_grad():
        _, taps = model(torch.randn(1, length))
    counts, _, exact = simulate_stages(valid_length(length, TINY), 1, 2, 8, 2)
    assert exact
    expected = [(1, counts[0]), (4, counts[1]), (8, counts[2])]
    assert [tuple(t.shape[1:]) for t in taps] == expected
    assert tap_shapes(TINY, length) == expected


def test_forward_is_deterministic():
    x = torch.randn(1, 3000)
    with torch.no_grad():
        a, _ = build(DemucsConfig(**SMALL), seed=3)(x)
        b, _ = build(DemucsConfig(**SMALL), seed=3)(x)
    assert torch.equal(a, b)


# -- parameter count ------------------------------------------------------------

def test_parameter_count_tiny_hand_sum():
    # encoder conv + 1x1 (x2) + transposed conv per layer, then a 2-layer BiLSTM and its output map
    layer1 = (1 * 4 * 8 + 4) + 2 * (4 * 8 + 8) + (4 * 1 * 8 + 1)
    layer2 = (4 * 8 * 8 + 8) + 2 * (8 * 16 + 16) + (8 * 4 * 8 + 4)
    lstm = 2 * 4 * 8 * (8 + 8 + 2) + 2 * 4 * 8 * (16 + 8 + 2)
    out = 16 * 8 + 8
    assert parameter_count(TINY) == layer1 + layer2 + lstm + out == 3913


def test_parameter_count_determinism_and_growth():
    base = DemucsConfig(hidden=48)
    assert parameter_count(base) == parameter_count(DemucsConfig(hidden=48))
    assert parameter_count(DemucsConfig(hidden=96)) > 2 * parameter_count(base)


@given(hidden=st.integers(1, 12), depth=st.integers(1, 4), causal=st.booleans(),
       cond=st.integers(0, 5), lstm=st.integers(1, 2))
def test_parameter_count_matches_instantiated_model(hidden, depth, causal, cond, lstm):
    cfg = DemucsConfig(hidden=hidden, depth=depth, causal=causal, lstm_layers=lstm,
                       cond_dim=0 if causal else cond)
    assert parameter_count(cfg) == sum(p.numel() for p in Demucs(cfg).parameters())


# -- causality ------------------------------------------------------------------

def test_non_causal_model_fails_probe():
    model = build(DemucsConfig(**SMALL))
    assert not causality_probe(model, 1000, lookahead(model.cfg), length=4096)


def test_causal_model_passes_with_its_budget():
    model = build(DemucsConfig(causal=True, **SMALL))
    assert causality_probe(model, 1000, lookahead(model.cfg), length=4096)


def test_probe_detects_a_budget_that_is_too_small():
    model = build(DemucsConfig(causal=True, **SMALL))
    assert not causality_probe(model, 1000, 0, length=4096)


def test_zero_perturbation_always_passes():
    for causal in (True, False):
        model = build(DemucsConfig(causal=causal, **SMALL))
        assert causality_probe(model, 1000, 0, length=4096, perturbation=0.0)


def test_default_causal_config_passes_probe():
    model = build(DemucsConfig(causal=True))
    budget = lookahead(model.cfg)
    assert causality_probe(model, 3000, budget, length=8192)


# -- conditioning -----------------------------------------------------------------

def test_identity_conditioning_matches_unconditioned_forward():
    model = build(DemucsConfig(cond_dim=6, **SMALL))
    model.init_identity_conditioning()
    x = torch.randn(2, 4000)
    feats = torch.randn(2, 13, 6)
    with torch.no_grad():
        conditioned, _ = model(x, cond=feats)
        plain, _ = model(x)
    assert (conditioned - plain).abs().max() < 1e-6


def test_conditioning_features_change_the_output():
    model = build(DemucsConfig(cond_dim=6, **SMALL))
    x = torch.randn(1, 4000)
    with torch.no_grad():
        a, _ = model(x, cond=torch.randn(1, 13, 6))
        b, _ = model(x, cond=torch.randn(1, 13, 6))
    assert not torch.allclose(a, b)


def test_conditioning_rejected_for_causal_models():
    with pytest.raises(ConfigurationError, match="non-causal"):
        DemucsConfig(causal=True, cond_dim=8)
    model = build(DemucsConfig(causal=True, **SMALL))
    with pytest.raises(ConfigurationError, match="non-causal"):
        model(torch.randn(1, 1000), cond=torch.randn(1, 5, 8))


def test_config_invariants():
    with pytest.raises(ConfigurationError):
        DemucsConfig(kernel=2, stride=4)
    with pytest.raises(ConfigurationError):
        DemucsConfig(depth=0)


def test_lstm_direction_follows_causality():
    assert build(DemucsConfig(causal=True, **SMALL)).lstm.bidirectional is False
    assert build(DemucsConfig(causal=False, **SMALL)).lstm.bidirectional is True


def test_config_round_trip():
    cfg = DemucsConfig(hidden=64, upscale=2, stride=2, causal=True)
    assert DemucsConfig.from_dict(cfg.to_dict()) == cfg
    assert np.isfinite(lookahead(cfg))
