import dataclasses
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from oracles import naive_stft, oracle_terms
from phaseforge.audio import StftConfig
from phaseforge.errors import ConfigurationError
from phaseforge.model import DemucsConfig
from phaseforge.objectives import (
    RESOLUTIONS, InjectionSpec, Objective, base_loss, check_compatible, conditioning_objective,
    log_magnitude_loss, make_bridge, regularization_term,
    spectral_convergence, supervision_objective,
)
from phaseforge.phonetic import LayerSelection, toy_provider
from phaseforge.trainer import tiny_setup


def signal(seed, n=16000, scale=0.1):
    return scale * torch.from_numpy(np.random.default_rng(seed).standard_normal(n))


class Passthrough(torch.nn.Module):
    """Stand-in enhancer that returns its input unchanged."""

    cfg = DemucsConfig(hidden=4, depth=2)

    def forward(self, x, cond=None):
        x = x[None] if x.dim() == 1 else x
        return x, [x[:, None]]


# -- identities ---------------------------------------------------------------------

def test_identical_signals_give_zero_terms():
    y = signal(0)
    loss = base_loss(y, y.clone())
    assert abs(float(loss.l1)) < 1e-6
    assert all(abs(float(v)) < 1e-6 for v in loss.sc + loss.mag)
    assert abs(float(loss.total)) < 1e-6


def test_doubling_gives_unit_spectral_convergence():
    y = signal(1)
    for cfg in RESOLUTIONS:
        assert float(spectral_convergence(y, 2 * y, cfg)) == pytest.approx(1.0, abs=1e-6)


def test_scaling_by_e_shifts_every_log_magnitude_by_one():
    y = signal(2, n=4000)
    for cfg in RESOLUTIONS:
        expected = cfg.n_bins * cfg.num_frames(4000) / 4000
        assert float(log_magnitude_loss(y, math.e * y, cfg)) == pytest.approx(expected, rel=1e-6)


# -- oracle agreement ---------------------------------------------------------------

def test_terms_match_dft_oracle_on_short_pair():
    y, y_hat = signal(3, 1024).numpy(), signal(4, 1024).numpy()
    cfg = StftConfig(512, 50, 240)
    ref = oracle_terms(y, y_hat, [(512, 50, 240)])
    assert float(spectral_convergence(torch.from_numpy(y), torch.from_numpy(y_hat), cfg)) == \
        pytest.approx(ref["sc"][0], rel=1e-5)
    assert float(log_magnitude_loss(torch.from_numpy(y), torch.from_numpy(y_hat), cfg)) == \
        pytest.approx(ref["mag"][0], rel=1e-5)


def test_base_loss_matches_clean_room_oracle():
    y, y_hat = signal(5), signal(5) + signal(6, scale=0.05)
    loss = base_loss(y, y_hat)
    ref = oracle_terms(y.numpy(), y_hat.numpy())
    assert float(loss.total) == pytest.approx(ref["total"], rel=1e-5)
    assert float(loss.l1) == pytest.approx(ref["l1"], rel=1e-5)
    np.testing.assert_allclose([float(v) for v in loss.sc], ref["sc"], rtol=1e-5)
    np.testing.assert_allclose([float(v) for v in loss.mag], ref["mag"], rtol=1e-5)


def test_breakdown_recombines_to_total():
    y, y_hat = signal(7), signal(8)
    loss = base_loss(y, y_hat)
    parts = float(loss.l1) + (sum(float(v) for v in loss.sc) + sum(float(v) for v in loss.mag)) / 16000
    assert abs(parts - float(loss.total)) < 1e-6
    record = loss.as_record()
    assert set(record) == {"setting", "l1", "sc", "mag", "phonetic", "total"}
    assert len(record["sc"]) == len(record["mag"]) == 3


def test_resolutions_are_paired_positionally():
    assert [(c.n_fft, c.hop, c.win_length) for c in RESOLUTIONS] == \
        [(512, 50, 240), (1024, 120, 600), (2048, 240, 1200)]


@given(seed=st.integers(0, 2 ** 16), n=st.integers(256, 3000))
def test_losses_are_nonnegative(seed, n):
    rng = np.random.default_rng(seed)
    y = torch.from_numpy(rng.standard_normal(n))
    y_hat = torch.from_numpy(rng.standard_normal(n))
    loss = base_loss(y, y_hat)
    assert float(loss.total) >= 0 and all(float(v) >= 0 for v in loss.sc + loss.mag)


def test_length_mismatch_and_silent_reference():
    with pytest.raises(ValueError):
        base_loss(signal(0, 1000), signal(1, 999))
    with pytest.raises(ValueError, match="silent"):
        spectral_convergence(torch.zeros(1000), signal(1, 1000), RESOLUTIONS[0])


def test_naive_dft_oracle_sanity():
    # the oracle itself: a Hann-windowed constant only reaches bins 0 and 1
    spec = naive_stft(np.ones(64), 16, 8, 16)
    assert np.abs(spec[2:, 2:-2]).max() < 1e-12
    np.testing.assert_allclose(np.abs(spec[:2, 2:-2]), [[8.0] * 5, [4.0] * 5], atol=1e-12)


# -- regularization ---------------------------------------------------------------------

def test_regularization_with_zero_lambda_is_base():
    model, objective, provider, x, y = tiny_setup("regularization", lam=0.0)
    loss = objective(x, y, model)
    base = base_loss(y, model(x)[0])
    assert float(loss.phonetic.detach()) > 0
    assert float(loss.total.detach()) == float(base.total.detach())


def test_forced_tap_gives_zero_regularization():
    bridge = make_bridge(16, 8, seed=1)
    target = torch.randn(2, 11, 8, dtype=torch.float64)
    tap = (target @ bridge.T).transpose(1, 2)  # (B, C, frames)
    assert float(regularization_term(tap, target, bridge)) < 1e-12


def test_bridge_is_orthonormal():
    b = make_bridge(32, 8).numpy()
    np.testing.assert_allclose(b.T @ b, np.eye(8), atol=1e-12)
    b = make_bridge(4, 8).numpy()
    np.testing.assert_allclose(b @ b.T, np.eye(4), atol=1e-12)


def test_regularization_gradients_skip_the_provider():
    model, objective, provider, x, y = tiny_setup("regularization")
    objective(x, y, model).total.backward()
    assert all(p.grad is None for p in provider.parameters())
    assert all(p.grad is not None for p in model.encoder.parameters())


# -- supervision --------------------------------------------------------------------------

def test_perfect_estimate_gives_zero_supervision_term():
    provider = toy_provider(num_layers=3, dim=8)
    y = signal(9, 4000)[None]
    spec = InjectionSpec("supervision", lam=1.0, layer=2)
    loss = supervision_objective(y, y, Passthrough(), provider, spec, LayerSelection(4, "fixed", 2))
    assert float(loss.phonetic) == 0.0 and float(loss.total) < 1e-6


def test_supervision_with_zero_lambda_is_base():
    model, objective, provider, x, y = tiny_setup("supervision", lam=0.0)
    assert float(objective(x, y, model).total) == float(base_loss(y, model(x)[0]).total)


def test_supervision_needs_differentiable_provider():
    provider = toy_provider(num_layers=3, dim=8)
    provider.differentiable = False
    provider.name = "frozen-asr"
    spec = InjectionSpec("supervision", layer=1)
    with pytest.raises(ConfigurationError, match="frozen-asr"):
        supervision_objective(signal(0, 2000)[None], signal(0, 2000)[None], Passthrough(), provider,
                              spec, LayerSelection(4, "fixed", 1))
    with pytest.raises(ConfigurationError):
        check_compatible(spec, DemucsConfig(hidden=4, depth=2), provider)


@pytest.mark.parametrize("setting", ["regularization", "supervision"])
def test_total_is_linear_in_lambda(setting):
    model, objective, provider, x, y = tiny_setup(setting, lam=0.0)
    totals = {}
    for lam in (0.0, 0.5, 1.0, 3.0):
        objective.spec = dataclasses.replace(objective.spec, lam=lam)
        totals[lam] = float(objective(x, y, model).total)
    slope = totals[1.0] - totals[0.0]
    for lam in (0.5, 3.0):
        assert totals[lam] - totals[0.0] == pytest.approx(lam * slope, rel=1e-9)


# -- conditioning ------------------------------------------------------------------------

def test_identity_projection_reduces_to_base():
    model, objective, provider, x, y = tiny_setup("conditioning")
    model.init_identity_conditioning()
    loss = conditioning_objective(x, y, model, provider, objective.spec, objective.selection)
    assert float(loss.phonetic) == 0.0
    assert abs(float(loss.total) - float(base_loss(y, model(x)[0]).total)) < 1e-6


def test_uniform_learned_selection_equals_mean_conditioning():
    model, objective, provider, x, y = tiny_setup("conditioning")
    with torch.no_grad():
        objective.selection.logits.zero_()
    learned = objective(x, y, model)
    mean = conditioning_objective(x, y, model, provider, objective.spec, LayerSelection(5, "mean"))
    assert float(learned.total) == float(mean.total)


def test_selection_logits_receive_gradient():
    model, objective, provider, x, y = tiny_setup("conditioning")
    objective(x, y, model).total.backward()
    assert objective.selection.logits.grad.abs().max() > 0
    assert all(p.grad is None for p in provider.parameters())


def test_conditioning_features_come_from_noisy_input():
    model, objective, provider, x, y = tiny_setup("conditioning")
    a = float(objective(x, y, model).total)
    b = float(objective(x, y + 0.01, model).total)
    x2 = x + 0.01 * torch.randn_like(x)
    assert a != b
    assert float(objective.enhance(x2, model).abs().sum()) != float(objective.enhance(x, model).abs().sum())


def test_compatibility_rules():
    provider = toy_provider(num_layers=3, dim=8)
    small = DemucsConfig(hidden=4, depth=2)
    check_compatible(InjectionSpec("base"), small, None)
    with pytest.raises(ConfigurationError):
        check_compatible(InjectionSpec("regularization"), small, None)
    with pytest.raises(ConfigurationError):
        check_compatible(InjectionSpec("regularization", layer=4), small, provider)
    with pytest.raises(ConfigurationError):
        check_compatible(InjectionSpec("regularization", layer=1, tap_layer=3), small, provider)
    with pytest.raises(ConfigurationError, match="non-causal"):
        check_compatible(InjectionSpec("conditioning", layer=1),
                         DemucsConfig(hidden=4, depth=2, causal=True), provider)
    with pytest.raises(ConfigurationError):
        InjectionSpec("adversarial")
    with pytest.raises(ConfigurationError):
        InjectionSpec("base", lam=-1.0)


def test_objective_state_holds_selection_and_bridge():
    provider = toy_provider(num_layers=3, dim=8)
    cfg = DemucsConfig(hidden=4, depth=2)
    obj = Objective(InjectionSpec("regularization", layer=1, selection="learned"), cfg, provider)
    state = obj.state_dict()
    assert set(state) == {"selection.logits", "bridge"}
    assert tuple(state["bridge"].shape) == (8, 8)
