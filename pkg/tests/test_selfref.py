from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faultloc.evaluation import SyntheticTaskSet, evaluate
from faultloc.model import ModelConfig, init_model, with_alpha
from faultloc.selfref import (
    DEFAULT_ALPHAS,
    EmptyInputError,
    LossProbe,
    ScalingSet,
    alpha_sweep,
    argmax_block,
    block_sensitivity,
    delta_loss,
    localize_self,
    sweep_grid,
)

CFG = ModelConfig(n_blocks=4, d_model=16, n_heads=2, d_ff=32, vocab_size=32, max_seq_len=16, seed=2)
X = SyntheticTaskSet(3, n_sequences=12, seq_len=16, vocab_size=32)


@pytest.fixture(scope="module")
def model():
    m = init_model(CFG)
    # larger weights so that blocks actually move the loss
    return m.with_tensors({k: t.replace_data(t.data * 20) for k, t in m.tensors.items()})


def test_scaling_set_defaults_and_validation():
    assert ScalingSet().values == (0.6, 0.7, 0.8, 0.9, 1.1, 1.2, 1.3, 1.4)
    assert len(ScalingSet()) == 8
    for bad in [(), (1.0,), (0.0, 1.1), (-0.5,), (0.9, 0.9), (float("inf"),)]:
        with pytest.raises(ValueError):
            ScalingSet(bad)


def test_delta_at_unit_alpha_is_exactly_zero(model):
    probe = LossProbe(model, X)
    for b in range(CFG.n_blocks):
        assert probe.delta(b, 1.0) == 0.0
        assert delta_loss(model, b, 1.0, X) == 0.0


def test_probe_matches_full_forward_bitwise(model):
    probe = LossProbe(model, X)
    assert probe.base_loss == evaluate(model, X).loss
    for b, a in [(0, 0.6), (2, 1.3), (3, 0.9)]:
        assert probe.loss(b, a) == evaluate(with_alpha(model, b, a), X).loss


def test_delta_loss_validation(model):
    with pytest.raises(IndexError):
        delta_loss(model, CFG.n_blocks, 0.9, X)
    with pytest.raises(ValueError):
        delta_loss(model, 0, 0.0, X)


@settings(max_examples=200)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=16))
def test_bss_is_sum_of_abs(row):
    expect = 0.0
    for d in row:
        expect += abs(d)
    assert block_sensitivity(row) == expect
    assert block_sensitivity(row) >= 0


@pytest.mark.parametrize(
    "scores,expect",
    [([1, 3, 3, 2], 1), ([0, 0, 0], 0), ([1, float("nan"), 5], 1), ([2.0], 0)],
)
def test_argmax_tie_and_nan(scores, expect):
    assert argmax_block(scores) == expect


def test_report_identities(model):
    rep = localize_self(model, X)
    assert rep.delta_loss.shape == (CFG.n_blocks, len(DEFAULT_ALPHAS))
    for b in range(CFG.n_blocks):
        assert rep.bss[b] == block_sensitivity(rep.delta_loss[b])
    assert np.all(rep.bss >= 0)
    assert rep.suspected_block == argmax_block(rep.bss)
    assert rep.input_set_id == X.set_id
    assert rep.forward_passes == 1 + CFG.n_blocks * len(DEFAULT_ALPHAS)
    d = rep.to_dict()
    assert d["suspected_block"] == rep.suspected_block and len(d["delta_loss"]) == CFG.n_blocks


def test_model_is_left_untouched(model):
    before = model.alpha
    localize_self(model, X)
    assert model.alpha == before


def test_threaded_matches_serial(model):
    a = localize_self(model, X)
    b = localize_self(model, X, workers=3)
    np.testing.assert_array_equal(a.delta_loss, b.delta_loss)
    assert a.suspected_block == b.suspected_block


def test_base_loss_uses_models_own_alpha(model):
    planted = with_alpha(model, 1, 3.0)
    probe = LossProbe(planted, X)
    assert probe.base_loss == evaluate(planted, X).loss
    assert probe.delta(1, 3.0) == 0.0


def test_empty_inputs_rejected(model):
    class Empty:
        tokens = np.zeros((0, 4), dtype=np.int64)
        targets = np.zeros((0, 4), dtype=np.int64)

    with pytest.raises(EmptyInputError):
        localize_self(model, Empty())


def test_sweep_grid():
    g = sweep_grid()
    assert len(g) == 17 and g[0] == 0.2 and g[-1] == 1.8 and 1.0 in g
    with pytest.raises(ValueError):
        sweep_grid(1.0, 0.5)


def test_alpha_sweep_through_unit(model):
    sw = alpha_sweep(model, 2, X)
    assert [a for a, _ in sw] == sweep_grid()
    assert dict(sw)[1.0] == 0.0
    rep = localize_self(model, X, sweep_block=2)
    assert rep.sweep == sw
