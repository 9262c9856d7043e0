from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from faultloc import checkpoint
from faultloc.diff import localize_diff
from faultloc.evaluation import SyntheticTaskSet, evaluate
from faultloc.inject import RANDOM_UNIFORM, inject, select_critical_bits
from faultloc.model import ModelConfig, forward, init_model
from faultloc.recovery import (
    HIGHER_BETTER,
    LOWER_BETTER,
    RESIDUAL_ATTENUATION,
    RESIDUAL_ZEROING,
    TENSOR_RESTORATION,
    RecoveryError,
    attenuation_sweep,
    compute_recovery,
    evaluate_recovery,
    recover_diff,
    recover_self,
    self_mode,
)
from faultloc.tensor import BitAddress, quantize

CFG = ModelConfig(n_blocks=3, d_model=16, n_heads=2, d_ff=32, vocab_size=32, max_seq_len=16, seed=21)
X = SyntheticTaskSet(5, n_sequences=6, seq_len=16, vocab_size=32)


@pytest.fixture(scope="module")
def clean():
    m = init_model(CFG)
    return m.with_tensors({k: quantize(t.replace_data(t.data * 20)) for k, t in m.tensors.items()})


@pytest.mark.parametrize(
    "b,c,r,expect",
    [(61.0, 3.2, 51.0, 82.7), (69.0, 3.9, 56.0, 80.0)],
)
def test_accuracy_form_reference_values(b, c, r, expect):
    assert compute_recovery(b, c, r, HIGHER_BETTER) == pytest.approx(expect, abs=0.05)


def test_recovery_endpoints_and_loss_form():
    assert compute_recovery(70.0, 4.0, 70.0) == 100.0
    assert compute_recovery(70.0, 4.0, 4.0) == 0.0
    # loss: baseline 1, corrupted 5, recovered 2 -> three quarters won back
    assert compute_recovery(1.0, 5.0, 2.0, LOWER_BETTER) == pytest.approx(75.0)
    with pytest.raises(ZeroDivisionError):
        compute_recovery(2.0, 2.0, 1.0)
    with pytest.raises(ValueError):
        compute_recovery(1.0, 2.0, 1.5, "sideways")


@given(
    st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)
)
def test_recovery_sign_symmetry(b, c, r):
    if abs(b - c) < 1e-6:
        return
    assert compute_recovery(b, c, r) == pytest.approx(compute_recovery(-b, -c, -r), rel=1e-9, abs=1e-9)


def test_self_recovery_zeroing_is_residual_identity(clean):
    rec = recover_self(clean, 1)
    assert rec.alpha[1] == 0.0
    tr = forward(rec, X.tokens[:2], capture_hidden=True)
    np.testing.assert_array_equal(tr.block_outputs[2], tr.block_outputs[1])


def test_self_recovery_leaves_weight_bits_alone(clean):
    faulty, _ = inject(clean, select_critical_bits(clean, 1, blocks=[1]))
    rec = recover_self(faulty, 1, 0.3)
    assert all(rec.tensors[n].bitwise_equal(faulty.tensors[n]) for n in faulty.names())
    assert rec.alpha[1] == pytest.approx(0.3)
    # alpha persists through the checkpoint
    assert checkpoint.loads(checkpoint.dump_bytes(rec)).alpha == rec.alpha


@pytest.mark.parametrize("block,att", [(-1, 0.0), (CFG.n_blocks, 0.0)])
def test_self_recovery_block_range(clean, block, att):
    with pytest.raises(IndexError):
        recover_self(clean, block, att)


@pytest.mark.parametrize("att", [1.0, 1.5, -0.1])
def test_self_recovery_rejects_non_attenuating(clean, att):
    with pytest.raises(RecoveryError):
        recover_self(clean, 0, att)


def test_self_mode_names():
    assert self_mode(0.0) == RESIDUAL_ZEROING
    assert self_mode(0.4) == RESIDUAL_ATTENUATION


@pytest.mark.parametrize("granularity", ["tensor", "element"])
def test_diff_recovery_restores_whole_file(clean, granularity):
    faulty, man = inject(clean, select_critical_bits(clean, 2, RANDOM_UNIFORM, seed=3, blocks=[2], sublayers=["mlp"]))
    res = localize_diff(clean, faulty, X)
    assert res.matches(man)
    rec = recover_diff(faulty, clean, res, granularity)
    assert checkpoint.state_file_digest(rec) == checkpoint.state_file_digest(clean)
    assert evaluate(rec, X).loss == evaluate(clean, X).loss


def test_element_patch_keeps_unlisted_elements(clean):
    a, b = BitAddress("block.0.mlp.up", 3, 7), BitAddress("block.0.mlp.up", 9, 7)
    faulty, _ = inject(clean, [a, b])
    res = localize_diff(clean, faulty, X)
    partial = replace(res, bit_findings=res.bit_findings[:1])
    patched = recover_diff(faulty, clean, partial, "element")
    whole = recover_diff(faulty, clean, partial, "tensor")
    assert patched.tensors[a.tensor_name].data[9] == faulty.tensors[a.tensor_name].data[9]
    assert whole.tensors[a.tensor_name].bitwise_equal(clean.tensors[a.tensor_name])


def test_diff_recovery_preconditions(clean):
    with pytest.raises(RecoveryError):
        recover_diff(clean, clean, localize_diff(clean, clean, X))
    faulty, _ = inject(clean, [BitAddress("block.1.attn.v", 0, 6)])
    res = localize_diff(clean, faulty, X)
    with pytest.raises(ValueError):
        recover_diff(faulty, clean, res, "row")
    other = ModelConfig(**{**CFG.to_dict(), "n_blocks": 1})
    with pytest.raises(RecoveryError):
        recover_diff(faulty, init_model(other, dtype="int8"), res)


def test_attenuation_sweep_grid_and_argmin(clean):
    faulty, _ = inject(clean, select_critical_bits(clean, 1, blocks=[0]))
    best, curve = attenuation_sweep(faulty, 0, X)
    assert [a for a, _ in curve] == [round(0.1 * i, 1) for i in range(10)]
    assert best == min(curve, key=lambda p: p[1])[0]
    assert dict(curve)[0.0] == evaluate(recover_self(faulty, 0), X).loss


def test_evaluate_recovery_outcome(clean):
    faulty, _ = inject(clean, select_critical_bits(clean, 1, blocks=[2], sublayers=["mlp.down"]))
    res = localize_diff(clean, faulty, X)
    out = evaluate_recovery(clean, faulty, recover_diff(faulty, clean, res), X, TENSOR_RESTORATION)
    if out.corrupted_metric != out.baseline_metric:
        assert out.recovery_percentage == pytest.approx(100.0)
    assert out.recovered_metric == out.baseline_metric
    no_ref = evaluate_recovery(None, faulty, recover_self(faulty, 2), X, RESIDUAL_ZEROING)
    assert np.isnan(no_ref.baseline_metric) and np.isnan(no_ref.recovery_percentage)
    assert out.to_dict()["mode"] == TENSOR_RESTORATION
