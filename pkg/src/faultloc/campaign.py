"""Fault-injection campaigns: inject -> localize -> verify -> recover -> evaluate.

Each trial owns ``<output_dir>/trial-NNN/`` and writes a ``report.json``
there; the campaign adds ``summary.json`` and ``summary.tsv``. Reports hold
no timestamps or absolute paths, so re-running an identical spec
reproduces every report byte for byte.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, checkpoint
from .diff import COSINE, ONSET, localize_diff
from .evaluation import SyntheticTaskSet, evaluate
from .inject import (
    FIXED_LIST,
    RANDOM_UNIFORM,
    TOP_MAGNITUDE_MSB,
    inject,
    select_critical_bits,
)
from .model import ModelState
from .recovery import (
    TENSOR_RESTORATION,
    outcome,
    recover_diff,
    recover_self,
    self_mode,
)
from .reports import dumps, emit_plot_data, write_text
from .selfref import DEFAULT_ALPHAS, ScalingSet, alpha_sweep, localize_self
from .tensor import BitAddress

log = logging.getLogger(__name__)

SETTINGS = ("self", "diff", "both")
DEFAULT_POOL = 40


@dataclass(frozen=True)
class TrialSpec:
    """One injection. With ``top-magnitude-msb`` the ``pool`` strongest
    candidates inside the ``blocks``/``sublayers`` filter are ranked and
    ``seed`` picks ``k`` of them."""

    policy: str = TOP_MAGNITUDE_MSB
    k: int = 1
    seed: int = 0
    blocks: Optional[tuple[int, ...]] = None
    sublayers: Optional[tuple[str, ...]] = None
    pool: int = DEFAULT_POOL
    addresses: tuple[BitAddress, ...] = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["addresses"] = [[a.tensor_name, a.element_index, a.bit_index] for a in self.addresses]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrialSpec":
        d = dict(d)
        d["addresses"] = tuple(BitAddress(n, int(e), int(b)) for n, e, b in d.get("addresses", ()))
        for key in ("blocks", "sublayers"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class CampaignSpec:
    base_checkpoint: str
    trials: tuple[TrialSpec, ...]
    output_dir: str
    settings: str = "both"
    input_seed: int = 11
    task_seed: int = 12
    n_inputs: int = 64
    n_tasks: int = 128
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    metric: str = COSINE
    mode: str = ONSET
    attenuation: float = 0.0
    sweep: bool = True
    plots: bool = True
    parallelism: int = 1

    def __post_init__(self):
        if not self.trials:
            raise ValueError("campaign needs at least one trial")
        if self.settings not in SETTINGS:
            raise ValueError(f"settings must be one of {SETTINGS}")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        ScalingSet(tuple(self.alphas))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trials"] = [t.to_dict() for t in self.trials]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignSpec":
        d = dict(d)
        d["trials"] = tuple(TrialSpec.from_dict(t) for t in d["trials"])
        if "alphas" in d:
            d["alphas"] = tuple(d["alphas"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "CampaignSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def choose_addresses(m: ModelState, trial: TrialSpec) -> list[BitAddress]:
    if trial.policy == FIXED_LIST:
        return select_critical_bits(m, len(trial.addresses), FIXED_LIST, addresses=trial.addresses)
    if trial.policy == RANDOM_UNIFORM:
        return select_critical_bits(
            m, trial.k, RANDOM_UNIFORM, seed=trial.seed, blocks=trial.blocks, sublayers=trial.sublayers
        )
    pool = select_critical_bits(
        m, max(trial.pool, trial.k), trial.policy, blocks=trial.blocks, sublayers=trial.sublayers
    )
    picks = np.random.default_rng(trial.seed).choice(len(pool), size=trial.k, replace=False)
    return [pool[int(i)] for i in picks]


def _eval_dict(r) -> dict:
    return {"loss": r.loss, "accuracy": r.accuracy}


class _Context:
    """Per-campaign shared, read-only state."""

    def __init__(self, spec: CampaignSpec):
        self.spec = spec
        self.out = Path(spec.output_dir)
        self.base_path = Path(spec.base_checkpoint)
        self.base = checkpoint.load(self.base_path)
        self.base_sha = checkpoint.file_digest(self.base_path)
        cfg = self.base.config
        self.X = SyntheticTaskSet(spec.input_seed, spec.n_inputs, cfg.max_seq_len, cfg.vocab_size)
        self.tasks = SyntheticTaskSet(spec.task_seed, spec.n_tasks, cfg.max_seq_len, cfg.vocab_size)
        self.baseline = evaluate(self.base, self.tasks)


def _run_trial(ctx: _Context, index: int, trial: TrialSpec) -> dict:
    spec = ctx.spec
    tdir = ctx.out / f"trial-{index:03d}"
    tdir.mkdir(parents=True, exist_ok=True)
    report: dict = {
        "toolkit_version": __version__,
        "trial": index,
        "trial_spec": trial.to_dict(),
        "seeds": {
            "fault_selection": trial.seed,
            "inputs": spec.input_seed,
            "tasks": spec.task_seed,
            "weight_init": ctx.base.config.seed,
        },
        "inputs": {
            "base_checkpoint": {"path": ctx.base_path.name, "sha256": ctx.base_sha},
            "localization_inputs": ctx.X.set_id,
            "eval_tasks": ctx.tasks.set_id,
        },
        "eval": {"baseline": _eval_dict(ctx.baseline)},
        "errors": [],
    }
    try:
        addrs = choose_addresses(ctx.base, trial)
        faulty, manifest = inject(
            ctx.base, addrs, trial.policy, injected_at=f"trial-{index:03d}:seed={trial.seed}"
        )
    except Exception as exc:  # recorded, campaign continues
        report["errors"].append({"stage": "inject", "error": repr(exc)})
        write_text(tdir / "report.json", dumps(report))
        return report
    report["inputs"]["faulty_checkpoint"] = {
        "path": "faulty.ckpt",
        "sha256": checkpoint.save(faulty, tdir / "faulty.ckpt"),
    }
    report["inputs"]["manifest"] = {
        "path": "manifest.jsonl",
        "sha256": write_text(tdir / "manifest.jsonl", manifest.dumps()),
    }
    report["manifest"] = [r.to_dict() for r in manifest.records]
    truth_blocks = sorted({r.block for r in manifest.records})
    corrupted = evaluate(faulty, ctx.tasks)
    report["eval"]["corrupted"] = _eval_dict(corrupted)

    if spec.settings in ("diff", "both"):
        section: dict = {}
        try:
            result = localize_diff(ctx.base, faulty, ctx.X, spec.metric, spec.mode)
            section["localization"] = result.to_dict()
            section["verified"] = result.matches(manifest)
            if result.bit_findings:
                restored = recover_diff(faulty, ctx.base, result)
                sha = checkpoint.save(restored, tdir / "restored.ckpt")
                section["restored_checkpoint"] = {"path": "restored.ckpt", "sha256": sha}
                section["restored_matches_clean"] = sha == ctx.base_sha
                rec = evaluate(restored, ctx.tasks)
                section["recovery"] = outcome(TENSOR_RESTORATION, ctx.baseline, corrupted, rec).to_dict()
        except Exception as exc:
            report["errors"].append({"stage": "diff", "error": repr(exc)})
            section.setdefault("verified", False)
        report["diff"] = section

    if spec.settings in ("self", "both"):
        section = {}
        try:
            rep = localize_self(faulty, ctx.X, ScalingSet(tuple(spec.alphas)))
            section["sensitivity"] = rep.to_dict()
            section["verified"] = rep.suspected_block in truth_blocks
            if spec.sweep:
                section["sweep"] = [list(p) for p in alpha_sweep(faulty, rep.suspected_block, ctx.X)]
            recovered = recover_self(faulty, rep.suspected_block, spec.attenuation)
            sha = checkpoint.save(recovered, tdir / "recovered.ckpt")
            section["recovered_checkpoint"] = {"path": "recovered.ckpt", "sha256": sha}
            rec = evaluate(recovered, ctx.tasks)
            section["recovery"] = outcome(
                self_mode(spec.attenuation), ctx.baseline, corrupted, rec
            ).to_dict()
        except Exception as exc:
            report["errors"].append({"stage": "self", "error": repr(exc)})
            section.setdefault("verified", False)
        report["self"] = section

    if spec.plots and (report.get("self", {}).get("sensitivity") or report.get("diff", {}).get("localization")):
        emit_plot_data(report, tdir / "plots")
    write_text(tdir / "report.json", dumps(report))
    return report


def _mean(xs) -> float:
    xs = [x for x in xs if x is not None and not math.isnan(x)]
    return float(np.mean(xs)) if xs else float("nan")


def summarize(reports: list[dict], settings: str) -> dict:
    summary: dict = {"n_trials": len(reports), "toolkit_version": __version__}
    for setting in ("diff", "self"):
        if settings not in (setting, "both"):
            continue
        hits = [bool(r.get(setting, {}).get("verified")) for r in reports]
        summary[setting] = {
            "hits": sum(hits),
            "hit_rate": sum(hits) / len(hits),
            "mean_recovery_percentage": _mean(
                r.get(setting, {}).get("recovery", {}).get("recovery_percentage") for r in reports
            ),
        }
    summary["errors"] = sum(len(r["errors"]) for r in reports)
    return summary


@dataclass
class CampaignResult:
    reports: list[dict]
    summary: dict
    output_dir: Path = field(default=Path("."))

    @property
    def all_verified(self) -> bool:
        return all(
            self.summary[s]["hits"] == self.summary["n_trials"] for s in ("diff", "self") if s in self.summary
        )


def run_campaign(spec: CampaignSpec) -> CampaignResult:
    ctx = _Context(spec)
    ctx.out.mkdir(parents=True, exist_ok=True)
    write_text(ctx.out / "campaign.json", dumps(spec.to_dict()))
    jobs = list(enumerate(spec.trials))
    if spec.parallelism > 1:
        with ThreadPoolExecutor(spec.parallelism) as ex:
            reports = list(ex.map(lambda j: _run_trial(ctx, *j), jobs))
    else:
        reports = [_run_trial(ctx, i, t) for i, t in jobs]
    summary = summarize(reports, spec.settings)
    write_text(ctx.out / "summary.json", dumps(summary))
    rows = ["trial\tblocks\tsublayers\tdiff_verified\tself_verified\tcorrupted_loss"]
    for r in reports:
        rows.append(
            "\t".join(
                str(x)
                for x in (
                    r["trial"],
                    ",".join(str(m["block"]) for m in r.get("manifest", [])),
                    ",".join(m["sublayer"] for m in r.get("manifest", [])),
                    r.get("diff", {}).get("verified", ""),
                    r.get("self", {}).get("verified", ""),
                    r["eval"].get("corrupted", {}).get("loss", ""),
                )
            )
        )
    write_text(ctx.out / "summary.tsv", "\n".join(rows) + "\n")
    return CampaignResult(reports, summary, ctx.out)
