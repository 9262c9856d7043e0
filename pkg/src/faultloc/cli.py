"""Command-line entry point: ``faultloc <verb> [flags]``.

Exit codes: 0 success, 1 usage or input error, 2 no fault detected,
3 localization did not match the fault manifest.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import __version__, checkpoint
from .campaign import CampaignSpec, run_campaign
from .diff import AGGREGATIONS, COSINE, L2, ONSET, PEAK, localize_diff
from .evaluation import cost_model, evaluate
from .fit import FIXTURE_FIT, fit_model
from .inject import FIXED_LIST, POLICIES, TOP_MAGNITUDE_MSB, FaultManifest, inject, select_critical_bits
from .model import FIXTURE_CONFIG, ModelConfig, forward, init_model
from .recovery import (
    TENSOR_RESTORATION,
    outcome,
    recover_diff,
    recover_self,
    self_mode,
)
from .reports import dumps, emit_plot_data, export_trace, resolve_inputs, write_text
from .selfref import DEFAULT_ALPHAS, ScalingSet, localize_self
from .tensor import BitAddress

OUT_ENV = "FAULTLOC_OUT"
EXIT_OK, EXIT_USAGE, EXIT_NO_FAULT, EXIT_MISMATCH = 0, 1, 2, 3

log = logging.getLogger("faultloc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def default_out() -> Path:
    return Path(os.environ.get(OUT_ENV, "faultloc-out"))


def _emit(obj, path: Optional[str]) -> None:
    text = dumps(obj)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        write_text(path, text)
    else:
        sys.stdout.write(text)


def _inputs(spec: str, m, n: int):
    return resolve_inputs(spec, m.config.vocab_size, m.config.max_seq_len, n)


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise UsageError(f"bad number list {text!r}") from exc


def _address(text: str) -> BitAddress:
    try:
        name, elem, bit = text.rsplit(":", 2)
        return BitAddress(name, int(elem), int(bit))
    except ValueError as exc:
        raise UsageError(f"address must be NAME:ELEMENT:BIT, got {text!r}") from exc


def cmd_init_model(a) -> int:
    if a.fixture:
        cfg = FIXTURE_CONFIG
    else:
        cfg = ModelConfig(
            n_blocks=a.n_blocks,
            d_model=a.d_model,
            n_heads=a.n_heads,
            d_ff=a.d_ff,
            vocab_size=a.vocab,
            max_seq_len=a.max_seq_len,
            seed=a.seed,
        )
    m = init_model(cfg)
    if a.fixture or a.fit_steps > 0:
        fit = FIXTURE_FIT if a.fit_steps <= 0 else replace(FIXTURE_FIT, steps=a.fit_steps)
        m = fit_model(m, fit, quantize_result=(a.dtype == "int8"))
    elif a.dtype == "int8":
        m = init_model(cfg, dtype="int8")
    out = Path(a.out or default_out() / "model.ckpt")
    out.parent.mkdir(parents=True, exist_ok=True)
    digest = checkpoint.save(m, out)
    _emit({"checkpoint": str(out), "sha256": digest, "config": cfg.to_dict()}, None)
    return EXIT_OK


def cmd_inject(a) -> int:
    m = checkpoint.load(a.checkpoint)
    if a.policy == FIXED_LIST:
        if not a.address:
            raise UsageError("fixed-list needs at least one --address")
        addrs = select_critical_bits(m, len(a.address), FIXED_LIST, addresses=[_address(x) for x in a.address])
    else:
        addrs = select_critical_bits(
            m,
            a.k,
            a.policy,
            seed=a.seed,
            include_embeddings=a.include_embeddings,
            blocks=a.block or None,
            sublayers=a.sublayer or None,
        )
    faulty, manifest = inject(m, addrs, a.policy, injected_at=f"cli:seed={a.seed}")
    out = Path(a.out or default_out())
    out.mkdir(parents=True, exist_ok=True)
    manifest = FaultManifest(
        checkpoint.file_digest(a.checkpoint),
        manifest.records,
        manifest.selection_policy,
        checkpoint.save(faulty, out / "faulty.ckpt"),
        manifest.meta,
    )
    manifest.save(out / "manifest.jsonl")
    _emit({"faulty_checkpoint": "faulty.ckpt", "manifest": "manifest.jsonl",
           "records": [r.to_dict() for r in manifest.records]}, None)
    return EXIT_OK


def cmd_localize_self(a) -> int:
    m = checkpoint.load(a.checkpoint)
    X = _inputs(a.inputs, m, a.n_inputs)
    rep = localize_self(m, X, ScalingSet(_floats(a.alphas)), sweep_block=a.sweep_block)
    report = {
        "inputs": {"checkpoint_sha256": checkpoint.file_digest(a.checkpoint), "inputs": X.set_id},
        "self": {"sensitivity": rep.to_dict()},
    }
    if rep.sweep is not None:
        report["self"]["sweep"] = [list(p) for p in rep.sweep]
    _emit(report, a.report)
    if a.plots:
        emit_plot_data(report, a.plots)
    return EXIT_OK


def cmd_localize_diff(a) -> int:
    clean = checkpoint.load(a.clean)
    faulty = checkpoint.load(a.faulty)
    X = _inputs(a.inputs, clean, a.n_inputs)
    res = localize_diff(clean, faulty, X, a.metric, a.mode, a.aggregation, a.multi_block)
    report = {
        "inputs": {
            "clean_sha256": checkpoint.file_digest(a.clean),
            "faulty_sha256": checkpoint.file_digest(a.faulty),
            "inputs": X.set_id,
        },
        "diff": {"localization": res.to_dict()},
    }
    code = EXIT_NO_FAULT if res.no_fault else EXIT_OK
    if a.manifest:
        ok = res.matches(FaultManifest.load(a.manifest))
        report["diff"]["verified"] = ok
        if not ok and code == EXIT_OK:
            code = EXIT_MISMATCH
    _emit(report, a.report)
    if a.plots:
        emit_plot_data(report, a.plots)
    return code


def cmd_recover(a) -> int:
    faulty = checkpoint.load(a.faulty)
    X = _inputs(a.inputs, faulty, a.n_inputs)
    report: dict = {}
    if a.mode == "diff":
        if not a.clean:
            raise UsageError("--mode diff needs --clean")
        clean = checkpoint.load(a.clean)
        res = localize_diff(clean, faulty, X)
        report["localization"] = res.to_dict()
        if not res.bit_findings:
            _emit(report, a.report)
            return EXIT_NO_FAULT
        recovered = recover_diff(faulty, clean, res, a.granularity)
        mode = TENSOR_RESTORATION
    else:
        clean = checkpoint.load(a.clean) if a.clean else None
        block = a.block
        if block is None:
            rep = localize_self(faulty, X)
            block = rep.suspected_block
            report["sensitivity"] = rep.to_dict()
        recovered = recover_self(faulty, block, a.attenuation)
        report["block"] = block
        mode = self_mode(a.attenuation)
    out = Path(a.out or default_out() / "recovered.ckpt")
    out.parent.mkdir(parents=True, exist_ok=True)
    report["recovered_checkpoint"] = {"path": out.name, "sha256": checkpoint.save(recovered, out)}
    tasks = _inputs(a.tasks, faulty, a.n_tasks)
    corr, rec = evaluate(faulty, tasks), evaluate(recovered, tasks)
    if clean is not None:
        report["recovery"] = outcome(mode, evaluate(clean, tasks), corr, rec).to_dict()
    else:
        report["recovery"] = {"mode": mode, "corrupted_metric": corr.loss, "recovered_metric": rec.loss}
    _emit(report, a.report)
    return EXIT_OK


def cmd_eval(a) -> int:
    m = checkpoint.load(a.checkpoint)
    tasks = _inputs(a.tasks, m, a.n_tasks)
    r = evaluate(m, tasks)
    if a.trace_dir:
        export_trace(forward(m, tasks.tokens[: a.trace_sequences], capture_hidden=True), a.trace_dir)
    _emit({"checkpoint_sha256": checkpoint.file_digest(a.checkpoint), "tasks": tasks.set_id,
           "loss": r.loss, "accuracy": r.accuracy}, a.report)
    return EXIT_OK


def cmd_costmodel(a) -> int:
    c = cost_model(a.blocks, a.tensors, a.elements)
    _emit({"brute": c.brute, "staged": c.staged, "ratio": c.ratio}, None)
    return EXIT_OK


def cmd_campaign(a) -> int:
    d = json.loads(Path(a.spec).read_text())
    if a.out:
        d["output_dir"] = a.out
    d.setdefault("output_dir", str(default_out() / "campaign"))
    if a.parallelism:
        d["parallelism"] = a.parallelism
    result = run_campaign(CampaignSpec.from_dict(d))
    _emit(result.summary, None)
    return EXIT_OK if result.all_verified else EXIT_MISMATCH


def cmd_emit_plots(a) -> int:
    report = json.loads(Path(a.report).read_text())
    for p in emit_plot_data(report, a.out or default_out() / "plots"):
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="faultloc", description="Bit-flip fault injection, localization and recovery.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    s = sub.add_parser("init-model", help="create (and optionally fit) a model checkpoint")
    s.add_argument("--out")
    s.add_argument("--fixture", action="store_true", help="8-block fixture configuration and fitting recipe")
    s.add_argument("--n-blocks", type=int, default=4)
    s.add_argument("--d-model", type=int, default=32)
    s.add_argument("--n-heads", type=int, default=4)
    s.add_argument("--d-ff", type=int, default=128)
    s.add_argument("--vocab", type=int, default=64)
    s.add_argument("--max-seq-len", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dtype", choices=("float32", "int8"), default="int8")
    s.add_argument("--fit-steps", type=int, default=0, help="fit for this many steps with the fixture recipe (needs torch)")
    s.set_defaults(func=cmd_init_model)

    s = sub.add_parser("inject", help="flip selected weight bits")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--policy", choices=POLICIES, default=TOP_MAGNITUDE_MSB)
    s.add_argument("--k", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--block", type=int, action="append", default=[])
    s.add_argument("--sublayer", action="append", default=[], help="e.g. mlp, attn, mlp.up")
    s.add_argument("--address", action="append", default=[], help="NAME:ELEMENT:BIT (fixed-list)")
    s.add_argument("--include-embeddings", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_inject)

    def add_inputs(s):
        s.add_argument("--inputs", default="seed:11", help="seed:N or a JSON-lines token file")
        s.add_argument("--n-inputs", type=int, default=64)

    s = sub.add_parser("localize-self", help="residual-scaling sensitivity localization")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--alphas", default=",".join(str(x) for x in DEFAULT_ALPHAS))
    s.add_argument("--sweep-block", type=int)
    s.add_argument("--report")
    s.add_argument("--plots")
    add_inputs(s)
    s.set_defaults(func=cmd_localize_self)

    s = sub.add_parser("localize-diff", help="differential localization against a clean model")
    s.add_argument("--clean", required=True)
    s.add_argument("--faulty", required=True)
    s.add_argument("--metric", choices=(COSINE, L2), default=COSINE)
    s.add_argument("--mode", choices=(ONSET, PEAK), default=ONSET)
    s.add_argument("--aggregation", choices=AGGREGATIONS, default="mean")
    s.add_argument("--multi-block", action="store_true")
    s.add_argument("--manifest", help="verify against this fault manifest")
    s.add_argument("--report")
    s.add_argument("--plots")
    add_inputs(s)
    s.set_defaults(func=cmd_localize_diff)

    s = sub.add_parser("recover", help="mitigate a localized fault")
    s.add_argument("--mode", choices=("self", "diff"), required=True)
    s.add_argument("--faulty", required=True)
    s.add_argument("--clean")
    s.add_argument("--block", type=int)
    s.add_argument("--attenuation", type=float, default=0.0)
    s.add_argument("--granularity", choices=("tensor", "element"), default="tensor")
    s.add_argument("--tasks", default="seed:12")
    s.add_argument("--n-tasks", type=int, default=128)
    s.add_argument("--out")
    s.add_argument("--report")
    add_inputs(s)
    s.set_defaults(func=cmd_recover)

    s = sub.add_parser("eval", help="loss and accuracy on a task set")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--tasks", default="seed:12")
    s.add_argument("--n-tasks", type=int, default=128)
    s.add_argument("--trace-dir", help="also write per-block hidden states here")
    s.add_argument("--trace-sequences", type=int, default=4)
    s.add_argument("--report")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("costmodel", help="brute-force vs staged localization cost")
    s.add_argument("--blocks", type=int, required=True)
    s.add_argument("--tensors", type=int, required=True)
    s.add_argument("--elems", "--elements", dest="elements", type=int, required=True)
    s.set_defaults(func=cmd_costmodel)

    s = sub.add_parser("campaign", help="run a JSON campaign spec")
    s.add_argument("--spec", required=True)
    s.add_argument("--out")
    s.add_argument("--parallelism", type=int)
    s.set_defaults(func=cmd_campaign)

    s = sub.add_parser("emit-plots", help="write plot data files from a report")
    s.add_argument("--report", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_emit_plots)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s")
    try:
        return a.func(a)
    except (UsageError, ValueError, IndexError, KeyError, FileNotFoundError) as exc:
        print(f"faultloc {a.verb}: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
