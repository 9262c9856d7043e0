from __future__ import annotations

import json

import pytest

from faultloc import checkpoint
from faultloc.cli import EXIT_MISMATCH, EXIT_NO_FAULT, EXIT_OK, EXIT_USAGE, OUT_ENV, main
from faultloc.inject import FaultManifest


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, out


@pytest.fixture
def injected(small_ckpt, tmp_path, capsys):
    code, _ = _run(
        capsys, "inject", "--checkpoint", small_ckpt, "--block", 1, "--sublayer", "mlp.up", "--out", tmp_path / "inj"
    )
    assert code == EXIT_OK
    return tmp_path / "inj"


def test_init_model_uses_env_output(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
    code, out = _run(capsys, "init-model", "--n-blocks", 2, "--d-model", 8, "--d-ff", 16, "--n-heads", 2)
    assert code == EXIT_OK
    path = tmp_path / "env" / "model.ckpt"
    assert json.loads(out)["sha256"] == checkpoint.file_digest(path)
    m = checkpoint.load(path)
    assert m.n_blocks == 2 and m.tensors["block.0.attn.q"].dtype == "int8"


def test_inject_writes_manifest(small_ckpt, injected):
    man = FaultManifest.load(injected / "manifest.jsonl")
    assert man.model_checkpoint_digest == checkpoint.file_digest(small_ckpt)
    assert man.faulty_checkpoint_digest == checkpoint.file_digest(injected / "faulty.ckpt")
    assert [r.address.tensor_name for r in man.records] == ["block.1.mlp.up"]


def test_localize_diff_exit_codes(small_ckpt, injected, tmp_path, capsys):
    faulty = injected / "faulty.ckpt"
    code, _ = _run(
        capsys, "localize-diff", "--clean", small_ckpt, "--faulty", faulty, "--n-inputs", 8,
        "--manifest", injected / "manifest.jsonl", "--report", tmp_path / "r.json", "--plots", tmp_path / "plots",
    )
    assert code == EXIT_OK
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["diff"]["verified"] and rep["diff"]["localization"]["block"] == 1
    assert (tmp_path / "plots" / "block_similarity.tsv").exists()
    code, out = _run(capsys, "localize-diff", "--clean", small_ckpt, "--faulty", small_ckpt, "--n-inputs", 8)
    assert code == EXIT_NO_FAULT and json.loads(out)["diff"]["localization"]["block"] is None
    # a manifest for some other fault does not match
    _run(capsys, "inject", "--checkpoint", small_ckpt, "--block", 2, "--out", tmp_path / "other")
    code, _ = _run(
        capsys, "localize-diff", "--clean", small_ckpt, "--faulty", faulty, "--n-inputs", 8,
        "--manifest", tmp_path / "other" / "manifest.jsonl",
    )
    assert code == EXIT_MISMATCH


def test_localize_self_and_emit_plots(injected, tmp_path, capsys):
    rep = tmp_path / "self.json"
    code, _ = _run(
        capsys, "localize-self", "--checkpoint", injected / "faulty.ckpt", "--inputs", "seed:3",
        "--n-inputs", 8, "--sweep-block", 1, "--report", rep,
    )
    assert code == EXIT_OK
    sens = json.loads(rep.read_text())["self"]["sensitivity"]
    assert len(sens["bss"]) == 3 and len(sens["alphas"]) == 8
    code, out = _run(capsys, "emit-plots", "--report", rep, "--out", tmp_path / "p")
    assert code == EXIT_OK and len(out.splitlines()) == 3
    code, _ = _run(capsys, "localize-self", "--checkpoint", injected / "faulty.ckpt", "--alphas", "1.0")
    assert code == EXIT_USAGE


@pytest.mark.parametrize("mode", ["self", "diff"])
def test_recover(small_ckpt, injected, tmp_path, capsys, mode):
    out = tmp_path / "rec.ckpt"
    code, text = _run(
        capsys, "recover", "--mode", mode, "--faulty", injected / "faulty.ckpt", "--clean", small_ckpt,
        "--block", 1, "--n-inputs", 8, "--n-tasks", 16, "--out", out,
    )
    assert code == EXIT_OK
    rep = json.loads(text)
    assert rep["recovered_checkpoint"]["sha256"] == checkpoint.file_digest(out)
    if mode == "diff":
        assert checkpoint.file_digest(out) == checkpoint.file_digest(small_ckpt)
        assert rep["recovery"]["recovered_metric"] == rep["recovery"]["baseline_metric"]
    else:
        assert checkpoint.load(out).alpha[1] == 0.0
    code, _ = _run(capsys, "recover", "--mode", "diff", "--faulty", injected / "faulty.ckpt")
    assert code == EXIT_USAGE


def test_eval_and_trace(small_ckpt, tmp_path, capsys):
    code, out = _run(
        capsys, "eval", "--checkpoint", small_ckpt, "--tasks", "seed:4", "--n-tasks", 8,
        "--trace-dir", tmp_path / "tr", "--trace-sequences", 2,
    )
    assert code == EXIT_OK
    rep = json.loads(out)
    assert set(rep) == {"accuracy", "checkpoint_sha256", "loss", "tasks"}
    assert len(list((tmp_path / "tr").glob("h_*.npy"))) == 4


def test_costmodel(capsys):
    code, out = _run(capsys, "costmodel", "--blocks", 16, "--tensors", 7, "--elems", 16777216)
    assert code == EXIT_OK
    assert json.loads(out)["staged"] == 16_777_237


def test_campaign_verb(small_ckpt, tmp_path, capsys):
    spec = {
        "base_checkpoint": str(small_ckpt),
        "trials": [{"seed": 0, "blocks": [2], "sublayers": ["mlp.down"]}],
        "settings": "diff",
        "n_inputs": 8,
        "n_tasks": 16,
    }
    p = tmp_path / "spec.json"
    p.write_text(json.dumps(spec))
    code, out = _run(capsys, "campaign", "--spec", p, "--out", tmp_path / "c")
    assert code == EXIT_OK and json.loads(out)["diff"]["hits"] == 1
    # a trial whose injection fails is recorded as unverified
    spec["trials"] = [{"policy": "fixed-list", "addresses": [["block.7.mlp.down", 0, 0]]}]
    p.write_text(json.dumps(spec))
    code, _ = _run(capsys, "campaign", "--spec", p, "--out", tmp_path / "d")
    assert code == EXIT_MISMATCH


def _exit_code(argv) -> int:
    try:
        return main(argv)
    except SystemExit as exc:  # argparse rejects before dispatch
        return exc.code


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["frobnicate"],
        ["inject"],
        ["costmodel", "--blocks", "0", "--tensors", "7", "--elems", "1"],
        ["inject", "--checkpoint", "/nonexistent.ckpt"],
        ["inject", "--checkpoint", "X", "--policy", "fixed-list"],
    ],
)
def test_usage_errors_exit_one(argv, capsys):
    assert _exit_code(argv) == EXIT_USAGE


def test_bad_address_is_usage_error(small_ckpt, tmp_path, capsys):
    code, _ = _run(
        capsys, "inject", "--checkpoint", small_ckpt, "--policy", "fixed-list", "--address", "block.0.attn.q:x:1",
        "--out", tmp_path,
    )
    assert code == EXIT_USAGE


def test_init_model_fit_steps(tmp_path, capsys):
    pytest.importorskip("torch")
    out = tmp_path / "fit.ckpt"
    argv = ["init-model", "--n-blocks", 1, "--d-model", 8, "--n-heads", 2, "--d-ff", 16, "--vocab", 16,
            "--max-seq-len", 16, "--fit-steps", 3, "--out", out]
    code, _ = _run(capsys, *argv)
    assert code == EXIT_OK
    first = out.read_bytes()
    _run(capsys, *argv)
    assert out.read_bytes() == first
