"""Rebuild the fitted fixture and pin its golden values.

    python3 scripts/make_fixture.py [--out tests/data] [--reuse]

Needs the ``fit`` extra (torch). Writes ``fixture.ckpt`` and ``fixture.json``;
every golden is measured from the written checkpoint, not from memory.
``--reuse`` skips fitting and re-measures an existing ``fixture.ckpt``.
"""

from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path

from faultloc import checkpoint
from faultloc.evaluation import SyntheticTaskSet, evaluate
from faultloc.fit import FIXTURE_FIT, build_fixture
from faultloc.inject import inject, select_critical_bits
from faultloc.model import FIXTURE_CONFIG
from faultloc.selfref import LossProbe

INPUT_SEED, TASK_SEED = 11, 12
DAMAGE_RATIO = 2.0


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "tests" / "data"))
    ap.add_argument("--reuse", action="store_true", help="measure the existing checkpoint only")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "fixture.ckpt"
    if not args.reuse:
        checkpoint.save(build_fixture(FIXTURE_CONFIG, FIXTURE_FIT), ckpt)
    m = checkpoint.load(ckpt)
    cfg = m.config
    X = SyntheticTaskSet(INPUT_SEED, 64, cfg.max_seq_len, cfg.vocab_size)
    tasks = SyntheticTaskSet(TASK_SEED, 128, cfg.max_seq_len, cfg.vocab_size)
    base = evaluate(m, tasks)
    probe = LossProbe(m, X)
    envelope = max(abs(probe.delta(b, a)) for b in range(cfg.n_blocks) for a in (0.9, 1.1))
    # the strongest single top-magnitude sign flip, searched over each block's top candidates
    best = None
    for b in range(cfg.n_blocks):
        for addr in select_critical_bits(m, 8, blocks=[b]):
            loss = evaluate(inject(m, [addr])[0], tasks).loss
            if best is None or loss > best[0]:
                best = (loss, addr)
    ratio = best[0] / base.loss
    golden = {
        "config": cfg.to_dict(),
        "fit": FIXTURE_FIT.to_dict(),
        "sha256": checkpoint.file_digest(ckpt),
        "input_seed": INPUT_SEED,
        "task_seed": TASK_SEED,
        "baseline_loss": base.loss,
        "baseline_accuracy": base.accuracy,
        "healthy_envelope": envelope,
        "damage_example": {
            "address": [best[1].tensor_name, best[1].element_index, best[1].bit_index],
            "corrupted_loss": best[0],
            "measured_ratio": ratio,
            "min_ratio": DAMAGE_RATIO,
        },
    }
    (out / "fixture.json").write_text(json.dumps(golden, indent=2, sort_keys=True) + "\n")
    print(json.dumps(golden, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
