from __future__ import annotations

import json
from pathlib import Path

import pytest

from faultloc import checkpoint
from faultloc.model import ModelConfig, init_model
from faultloc.tensor import quantize

SMALL = ModelConfig(n_blocks=3, d_model=16, n_heads=2, d_ff=32, vocab_size=32, max_seq_len=16, seed=9)


def scaled_int8(cfg: ModelConfig = SMALL, gain: float = 20.0):
    """Untrained int8 model with weights large enough to move activations."""
    m = init_model(cfg)
    return m.with_tensors({k: quantize(t.replace_data(t.data * gain)) for k, t in m.tensors.items()})


@pytest.fixture(scope="session")
def small_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "small.ckpt"
    checkpoint.save(scaled_int8(), path)
    return path


DATA = Path(__file__).parent / "data"
FIXTURE_CKPT = DATA / "fixture.ckpt"
FIXTURE_GOLDEN = DATA / "fixture.json"

# localization inputs and evaluation tasks for every fixture test
FIXTURE_INPUT_SEED = 11
FIXTURE_TASK_SEED = 12
DIFF_BLOCKS = (2, 4, 7)
DIFF_TAGS = ("attn.q", "attn.k", "attn.v", "mlp.up", "mlp.down")
DIFF_SEEDS = (0, 1)
SELF_BLOCKS = (2, 4, 7)
SELF_SEEDS = (0, 1, 2)


def diff_trials():
    """The 30 single-flip differential trials: blocks x projections x seeds."""
    from faultloc.campaign import TrialSpec

    return tuple(
        TrialSpec(seed=s, blocks=(b,), sublayers=(t,)) for b in DIFF_BLOCKS for t in DIFF_TAGS for s in DIFF_SEEDS
    )


def self_trials():
    """The 9 top-magnitude trials used for self-referential localization."""
    from faultloc.campaign import TrialSpec

    return tuple(TrialSpec(seed=s, blocks=(b,)) for b in SELF_BLOCKS for s in SELF_SEEDS)


@pytest.fixture(scope="session")
def golden():
    return json.loads(FIXTURE_GOLDEN.read_text())


@pytest.fixture(scope="session")
def fixture_model():
    return checkpoint.load(FIXTURE_CKPT)


@pytest.fixture(scope="session")
def fixture_inputs(fixture_model):
    from faultloc.evaluation import SyntheticTaskSet

    cfg = fixture_model.config
    return SyntheticTaskSet(FIXTURE_INPUT_SEED, 64, cfg.max_seq_len, cfg.vocab_size)


@pytest.fixture(scope="session")
def fixture_tasks(fixture_model):
    from faultloc.evaluation import SyntheticTaskSet

    cfg = fixture_model.config
    return SyntheticTaskSet(FIXTURE_TASK_SEED, 128, cfg.max_seq_len, cfg.vocab_size)


_VERDICTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def verdict():
    """Record and assert one acceptance criterion: ``verdict(n, ok, detail)``."""

    def record(number: int, ok: bool, detail: str) -> None:
        _VERDICTS[number] = (bool(ok), detail)
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        ok, detail = _VERDICTS[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
