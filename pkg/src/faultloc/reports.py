"""Plain-text serialization: reports, input sets and plot data.

Reports are JSON with sorted keys and fixed indentation so that two runs
with the same seeds produce byte-identical files. Plot data is tab-separated
text with a single header line.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .evaluation import IGNORE, SyntheticTaskSet
from .selfref import sweep_grid

ALPHA_SWEEP_FILE = "alpha_sweep.tsv"
HEATMAP_FILE = "delta_loss_heatmap.tsv"
BSS_FILE = "bss.tsv"
SIMILARITY_FILE = "block_similarity.tsv"


def dumps(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n"


def _plain(obj):
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def write_text(path, text: str) -> str:
    """Write ``text`` and return its SHA-256 hex digest."""
    data = text.encode()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def text_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass(frozen=True)
class TokenFileInputs:
    """Input set read from a JSON-lines file of ``{"tokens", "targets"}`` rows."""

    tokens: np.ndarray
    targets: np.ndarray
    set_id: str


def load_token_file(path) -> TokenFileInputs:
    rows = [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not rows:
        raise ValueError(f"{path}: no input rows")
    toks = np.array([r["tokens"] for r in rows], dtype=np.int64)
    tg = np.array([r.get("targets", [IGNORE] * len(r["tokens"])) for r in rows], dtype=np.int64)
    return TokenFileInputs(toks, tg, f"file:sha256={text_digest(path)[:16]}")


def save_token_file(path, tokens, targets) -> None:
    lines = [
        json.dumps({"tokens": [int(x) for x in t], "targets": [int(x) for x in g]})
        for t, g in zip(np.asarray(tokens), np.asarray(targets))
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def resolve_inputs(spec: str, vocab_size: int, seq_len: int, n_sequences: int = 64):
    """``"seed:7"`` or ``"7"`` -> synthetic set; anything else is a file path."""
    text = str(spec)
    if text.startswith("seed:"):
        text = text[5:]
    if text.lstrip("-").isdigit():
        return SyntheticTaskSet(
            seed=int(text), n_sequences=n_sequences, seq_len=seq_len, vocab_size=vocab_size
        )
    return load_token_file(spec)


def _fmt(x) -> str:
    return repr(float(x))


def _tsv(path: Path, header: list[str], rows: list[list]) -> Path:
    lines = ["\t".join(header)] + ["\t".join(str(c) for c in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def emit_plot_data(report: Mapping, outdir) -> list[Path]:
    """Write the data files behind the sweep, heatmap, BSS and similarity plots.

    ``report`` is a run report dict; a ``self`` section (with ``sweep``)
    yields the first three files, a ``diff`` section the last one.
    """
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    sens = report.get("self", {}).get("sensitivity") if report.get("self") else None
    prof = report.get("diff", {}).get("localization", {}).get("profile") if report.get("diff") else None
    if sens is None and prof is None:
        raise ValueError("report has neither a sensitivity report nor a divergence profile")
    if sens is not None:
        missing = {"alphas", "delta_loss", "bss"} - set(sens)
        if missing:
            raise ValueError(f"incomplete sensitivity report, missing {sorted(missing)}")
        alphas = sens["alphas"]
        grid = sens["delta_loss"]
        if len(grid) != len(sens["bss"]) or any(len(r) != len(alphas) for r in grid):
            raise ValueError("heatmap grid does not match the scaling set")
        written.append(
            _tsv(
                out / HEATMAP_FILE,
                ["block"] + [_fmt(a) for a in alphas],
                [[b] + [_fmt(x) for x in row] for b, row in enumerate(grid)],
            )
        )
        written.append(
            _tsv(out / BSS_FILE, ["block", "bss"], [[b, _fmt(x)] for b, x in enumerate(sens["bss"])])
        )
        sweep = report["self"].get("sweep")
        if sweep is not None:
            if [round(a, 10) for a, _ in sweep] != sweep_grid():
                raise ValueError("alpha sweep is not on the standard grid")
            written.append(
                _tsv(out / ALPHA_SWEEP_FILE, ["alpha", "delta_loss"], [[_fmt(a), _fmt(d)] for a, d in sweep])
            )
    if prof is not None:
        written.append(
            _tsv(
                out / SIMILARITY_FILE,
                ["block", "cosine", "l2"],
                [[b, _fmt(c), _fmt(d)] for b, (c, d) in enumerate(zip(prof["cosine"], prof["l2"]))],
            )
        )
    return written


def export_trace(trace, outdir) -> list[Path]:
    """One ``.npy`` matrix per captured hidden state: ``h_00.npy`` is the
    embedding output, ``h_NN.npy`` the input to block NN (the last one is
    the final residual stream)."""
    if not trace.block_outputs:
        raise ValueError("trace was captured without hidden states")
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, h in enumerate(trace.block_outputs):
        path = out / f"h_{i:02d}.npy"
        np.save(path, np.asarray(h))
        paths.append(path)
    return paths


def read_tsv(path) -> tuple[list[str], list[list[str]]]:
    lines = Path(path).read_text().splitlines()
    return lines[0].split("\t"), [ln.split("\t") for ln in lines[1:]]
