"""Gradient checks of the joint loss on a tiny 64-bit model, and selection-gradient flow probes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gumbel as G
from . import objectives as O
from .model import ModelConfig, TODModel, grad_norms
from .tensor import CheckReport, RngState, grad_check
from .trainer import Batch, forward_losses

TINY_VOCAB = 200
TINY_SEQ = 24


def tiny_config(vocab_size: int = TINY_VOCAB, max_seq_len: int = TINY_SEQ) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        d_model=32,
        n_heads=2,
        n_encoder_layers=1,
        n_decoder_layers=1,
        d_ff=64,
        max_seq_len=max_seq_len,
    )


def _ids(rng: RngState, n: int, length: int, vocab: int, min_len: int) -> np.ndarray:
    out = np.zeros((n, length), dtype=np.int64)
    lens = min_len + rng.integers(length - min_len + 1, size=n)
    for i, ln in enumerate(lens):
        out[i, :ln] = 16 + rng.integers(vocab - 16, size=int(ln))
    return out


def random_batch(config: ModelConfig, batch_size: int = 2, seed: int = 0, seq_len: int | None = None) -> Batch:
    """Random token batch with every field filled (pad id 0, specials excluded from content)."""
    rng = RngState(seed).spawn("batch")
    L = min(seq_len or config.max_seq_len, config.max_seq_len)
    v = config.vocab_size
    ctx = _ids(rng, batch_size, L, v, L // 2)
    belief = _ids(rng, batch_size, L // 2, v, 4)
    resp = _ids(rng, batch_size, L // 2, v, 4)
    resp_enc = _ids(rng, batch_size, L, v, L // 2)
    truth = _ids(rng, batch_size, L, v, L // 2)
    dis = _ids(rng, batch_size, L, v, L // 2)
    tags = rng.integers(config.n_span_tags, size=ctx.shape)
    return Batch(
        keys=[("rand", i) for i in range(batch_size)],
        context=ctx,
        context_mask=ctx != 0,
        span_tags=tags,
        span_mask=ctx != 0,
        belief_in=belief[:, :-1],
        belief_out=belief[:, 1:],
        resp_enc=resp_enc,
        resp_enc_mask=resp_enc != 0,
        resp_in=resp[:, :-1],
        resp_out=resp[:, 1:],
        select_truth=truth,
        select_truth_mask=truth != 0,
        select_distractor=dis,
        select_distractor_mask=dis != 0,
    )


@dataclass
class JointCheck:
    variant: str
    report: CheckReport
    components: dict

    @property
    def passed(self) -> bool:
        return self.report.passed

    def to_dict(self) -> dict:
        return {"variant": self.variant, "passed": self.passed, "components": self.components, **self.report.to_dict()}


def check_joint_loss(
    variant: str,
    n_samples: int = 200,
    seed: int = 0,
    tau: float = 1.0,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    config: ModelConfig | None = None,
) -> JointCheck:
    """Finite-difference check of the full weighted loss for one variant.

    The differentiable variant runs under a frozen straight-through tape so
    the perturbed forward passes reuse the first pass's one-hot offsets.
    """
    variant = O.normalize_variant(variant)
    config = config or tiny_config()
    model = TODModel(config, seed=seed, dtype=np.float64)
    model.train()
    batch = random_batch(config, seed=seed)
    weights = O.LossWeights()
    last = {}

    def run(tape=None):
        if tape is not None:
            tape.rewind()
        res = forward_losses(model, batch, variant, weights, tau, RngState(seed).spawn("gumbel"))
        last.update(res.losses.values())
        return res.losses.total

    if variant == "differentiable":
        with G.frozen_straight_through() as tape:
            report = grad_check(lambda: run(tape), model.params, step=step, tolerance=tolerance, n_samples=n_samples, rng=RngState(seed).spawn("check"))
    else:
        report = grad_check(run, model.params, step=step, tolerance=tolerance, n_samples=n_samples, rng=RngState(seed).spawn("check"))
    return JointCheck(variant, report, dict(last))


def selection_gradient_norms(
    variant: str,
    hardening: str = "straight_through",
    seed: int = 0,
    tau: float = 1.0,
    config: ModelConfig | None = None,
    dtype=np.float64,
) -> dict:
    """Norm of d(select loss)/d(params), grouped by model part."""
    variant = O.normalize_variant(variant)
    if variant == "none":
        raise ValueError("variant none has no selection loss")
    config = config or tiny_config()
    model = TODModel(config, seed=seed, dtype=dtype)
    model.train()
    model.zero_grad()
    batch = random_batch(config, seed=seed)
    res = forward_losses(model, batch, variant, O.LossWeights(), tau, RngState(seed).spawn("gumbel"), hardening)
    res.losses.select_bce.backward()
    groups = model.parameter_groups()
    out = {g: grad_norms(model, names) for g, names in groups.items()}
    out["response_decoder"] = grad_norms(model, [n for n in model.params if n.startswith("resp_decoder.")])
    out["belief_decoder"] = grad_norms(model, [n for n in model.params if n.startswith("belief_decoder.")])
    return out
