"""Seeded teacher-forced fitting pass.

A randomly initialised model has near-chance loss everywhere, so a bit flip
barely moves it. This module fits the numpy model on the synthetic task
family with a torch mirror of the forward pass, then hands the weights back
as float32 (and optionally int8) tensors. Torch is only needed here.

Regularisers that shape how the fitted model responds to faults:

* ``block_drop``: each block's residual delta is dropped with this
  probability per step, so zeroing one block at inference is survivable.
* ``alpha_jitter``: each block's delta is scaled by a factor drawn from
  ``[1 - j, 1 + j]`` per step, which flattens the loss of a healthy model
  along every block's residual scale.
* ``l1`` and ``sparsity`` (gradual magnitude pruning) concentrate each
  block's function in fewer, larger weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .evaluation import IGNORE, SyntheticTaskSet
from .model import (
    EMBED_POS,
    EMBED_TOK,
    RMS_EPS,
    UNEMBED,
    ModelConfig,
    ModelState,
    block_tensor_name,
    init_model,
)
from .tensor import FLOAT32, WeightTensor, quantize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitConfig:
    steps: int = 1500
    batch_size: int = 64
    lr: float = 3e-3
    weight_decay: float = 0.01
    warmup: int = 100
    block_drop: float = 0.1
    alpha_jitter: float = 0.0
    l1: float = 0.0
    sparsity: float = 0.0
    prune_start: float = 0.1
    prune_end: float = 0.6
    prune_every: int = 50
    task_seed: int = 1_000_003
    torch_seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# the recipe behind tests/data/fixture.ckpt (see scripts/make_fixture.py)
FIXTURE_FIT = FitConfig(
    steps=6000,
    weight_decay=0.0,
    block_drop=0.05,
    alpha_jitter=0.5,
    sparsity=0.9,
    prune_start=0.1,
    prune_end=0.5,
)


def _torch_forward(torch, p, cfg: ModelConfig, toks, keep=None):
    F = torch.nn.functional
    B, T = toks.shape
    H, dh = cfg.n_heads, cfg.head_dim

    def rms(x):
        return x / torch.sqrt((x * x).mean(-1, keepdim=True) + RMS_EPS)

    h = p[EMBED_TOK][toks] + p[EMBED_POS][:T][None]
    mask = torch.ones(T, T, dtype=torch.bool).tril()
    for i in range(cfg.n_blocks):

        def w(tag):
            return p[block_tensor_name(i, tag)]

        x = rms(h)
        q, k, v = (
            (x @ w(f"attn.{n}")).view(B, T, H, dh).transpose(1, 2) for n in ("q", "k", "v")
        )
        s = (q @ k.transpose(-1, -2)) / np.sqrt(dh)
        s = s.masked_fill(~mask, float("-inf"))
        a = (s.softmax(-1) @ v).transpose(1, 2).reshape(B, T, -1) @ w("attn.o")
        u = h + a
        y = rms(u)
        f = (F.silu(y @ w("mlp.gate")) * (y @ w("mlp.up"))) @ w("mlp.down")
        delta = a + f
        if keep is not None:
            delta = delta * keep[i]
        h = h + delta
    return rms(h) @ p[UNEMBED]


def _magnitude_masks(torch, params, sparsity: float) -> dict:
    """Per-tensor keep-masks zeroing the smallest ``sparsity`` share of each
    block tensor (ties broken by flat index)."""
    masks = {}
    for name, p in params.items():
        if not name.startswith("block."):
            continue
        flat = p.detach().abs().reshape(-1)
        n_drop = int(round(sparsity * flat.numel()))
        order = torch.argsort(flat, stable=True)
        keep = torch.ones_like(flat)
        keep[order[:n_drop]] = 0.0
        masks[name] = keep.reshape(p.shape)
        with torch.no_grad():
            p.mul_(masks[name])
    return masks


def _sparsity_at(fit: FitConfig, step: int) -> float:
    """Cubic ramp from 0 at ``prune_start`` to ``sparsity`` at ``prune_end``."""
    if fit.sparsity <= 0:
        return 0.0
    start, end = int(fit.prune_start * fit.steps), int(fit.prune_end * fit.steps)
    if step < start:
        return 0.0
    if step >= end:
        return fit.sparsity
    frac = (step - start) / max(1, end - start)
    return fit.sparsity * (1 - (1 - frac) ** 3)


def fit_model(
    m: ModelState,
    fit: FitConfig = FitConfig(),
    quantize_result: bool = False,
) -> ModelState:
    """Return a fitted copy of ``m``; deterministic for a given ``fit``."""
    import torch

    torch.manual_seed(fit.torch_seed)
    torch.use_deterministic_algorithms(True)
    cfg = m.config
    params = {
        name: torch.tensor(np.array(t.dense, dtype=np.float32), requires_grad=True)
        for name, t in m.tensors.items()
    }
    decay = [p for n, p in params.items() if n.startswith("block.")]
    no_decay = [p for n, p in params.items() if not n.startswith("block.")]
    opt = torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": fit.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=fit.lr,
        betas=(0.9, 0.98),
    )

    def lr_at(step):
        if step < fit.warmup:
            return fit.lr * (step + 1) / fit.warmup
        frac = (step - fit.warmup) / max(1, fit.steps - fit.warmup)
        return fit.lr * 0.5 * (1 + np.cos(np.pi * frac))

    gen = torch.Generator().manual_seed(fit.torch_seed)
    masks: dict = {}
    for step in range(fit.steps):
        target = _sparsity_at(fit, step)
        if target > 0 and (step % fit.prune_every == 0 or step == int(fit.prune_end * fit.steps)):
            masks = _magnitude_masks(torch, params, target)
        batch = SyntheticTaskSet(
            seed=fit.task_seed + step,
            n_sequences=fit.batch_size,
            seq_len=cfg.max_seq_len,
            vocab_size=cfg.vocab_size,
        )
        toks = torch.from_numpy(np.array(batch.tokens))
        tgt = torch.from_numpy(np.array(batch.targets))
        keep = None
        if fit.block_drop > 0:
            keep = (torch.rand(cfg.n_blocks, generator=gen) >= fit.block_drop).float()
        if fit.alpha_jitter > 0:
            u = torch.rand(cfg.n_blocks, generator=gen) * 2 - 1
            scale = 1 + fit.alpha_jitter * u
            keep = scale if keep is None else keep * scale
        lg = _torch_forward(torch, params, cfg, toks, keep)
        loss = torch.nn.functional.cross_entropy(
            lg.reshape(-1, cfg.vocab_size), tgt.reshape(-1), ignore_index=IGNORE
        )
        if fit.l1 > 0:
            loss = loss + fit.l1 * sum(p.abs().sum() for p in decay)
        for g in opt.param_groups:
            g["lr"] = lr_at(step)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(list(params.values()), 1.0)
        opt.step()
        if masks:
            with torch.no_grad():
                for n, mk in masks.items():
                    params[n].mul_(mk)
        if step % 100 == 0 or step == fit.steps - 1:
            log.info("fit step %d loss %.4f", step, loss.item())

    tensors = {}
    for name, p in params.items():
        arr = p.detach().numpy().astype(np.float32)
        t = WeightTensor(name, arr.shape, FLOAT32, arr)
        tensors[name] = quantize(t) if quantize_result else t
    return ModelState(cfg, tensors, m.alpha)


def build_fixture(
    config: ModelConfig, fit: FitConfig = FitConfig(), dtype: str = "int8"
) -> ModelState:
    """init -> fit -> (quantize): the recipe behind the committed fixture."""
    return fit_model(init_model(config), fit, quantize_result=(dtype == "int8"))
