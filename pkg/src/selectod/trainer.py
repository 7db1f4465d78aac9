"""Multi-task training: batching, forward losses, AdamW, schedules and the epoch loop."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import corpus as C
from . import gumbel as G
from . import objectives as O
from .model import ModelConfig, TODModel
from .tensor import NonFiniteError, RngState, Tensor, no_grad

logger = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 8
    lr_peak: float = 5e-4
    warmup_fraction: float = 0.10
    weights: O.LossWeights = field(default_factory=O.LossWeights)
    variant: str = "none"
    gumbel: G.GumbelConfig = field(default_factory=G.GumbelConfig)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    max_steps: int | None = None
    hardening: str = "straight_through"
    eval_split: str = "dev"
    max_decode_len: int = 48
    inject_nan_step: int | None = None

    def __post_init__(self):
        if isinstance(self.weights, Mapping):
            self.weights = O.LossWeights(**self.weights)
        if isinstance(self.gumbel, Mapping):
            self.gumbel = G.GumbelConfig(**self.gumbel)
        self.variant = O.normalize_variant(self.variant)
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must be in (0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_peak <= 0:
            raise ValueError("lr_peak must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"{sorted(unknown)[0]}: unknown training option")
        return cls(**d)


# ---------------------------------------------------------------------------
# schedules and optimizer
# ---------------------------------------------------------------------------


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``lr_peak`` over the first ``warmup_fraction`` of steps, then constant."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    step = min(max(step, 0), total_steps)
    warmup = cfg.warmup_fraction * total_steps
    if step >= warmup:
        return cfg.lr_peak
    return cfg.lr_peak * step / warmup


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray | None], state: AdamState, lr: float, hyper: TrainConfig) -> AdamState:
    """Bias-corrected adaptive-moment update with decoupled weight decay, in place.

    Missing gradients count as zero. Weight decay applies to matrices only.
    """
    state.step += 1
    t = state.step
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        if hyper.weight_decay and p.data.ndim >= 2:
            update = update + hyper.weight_decay * p.data
        p.data -= (lr * update).astype(p.data.dtype)
    return state


def clip_grads(grads: Mapping[str, np.ndarray | None], max_norm: float | None) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values() if g is not None))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            if g is not None:
                g *= g.dtype.type(scale)
    return total


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = 0, fill=None) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad_id if fill is None else fill, dtype=np.int64 if fill is None else type(fill))
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


@dataclass
class Batch:
    keys: list
    context: np.ndarray
    context_mask: np.ndarray
    span_tags: np.ndarray
    span_mask: np.ndarray
    belief_in: np.ndarray
    belief_out: np.ndarray
    resp_enc: np.ndarray
    resp_enc_mask: np.ndarray
    resp_in: np.ndarray
    resp_out: np.ndarray
    select_truth: np.ndarray | None = None
    select_truth_mask: np.ndarray | None = None
    select_distractor: np.ndarray | None = None
    select_distractor_mask: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.keys)


def collate(items: Sequence[C.TurnSequences], pad_id: int = 0) -> Batch:
    ctx = pad_batch([s.context for s in items], pad_id)
    belief = pad_batch([s.belief_target for s in items], pad_id)
    resp = pad_batch([s.resp_target for s in items], pad_id)
    resp_enc = pad_batch([s.encoder_input_resp for s in items], pad_id)
    tags = pad_batch([s.span_tags for s in items], 0)
    span_mask = np.zeros(ctx.shape, dtype=bool)
    for i, s in enumerate(items):
        span_mask[i, : len(s.span_mask)] = s.span_mask
    batch = Batch(
        keys=[s.key for s in items],
        context=ctx,
        context_mask=ctx != pad_id,
        span_tags=tags,
        span_mask=span_mask,
        belief_in=belief[:, :-1],
        belief_out=belief[:, 1:],
        resp_enc=resp_enc,
        resp_enc_mask=resp_enc != pad_id,
        resp_in=resp[:, :-1],
        resp_out=resp[:, 1:],
    )
    if all(s.select_truth is not None for s in items):
        truth = pad_batch([s.select_truth for s in items], pad_id)
        batch.select_truth, batch.select_truth_mask = truth, truth != pad_id
    if all(s.select_distractor is not None for s in items):
        dis = pad_batch([s.select_distractor for s in items], pad_id)
        batch.select_distractor, batch.select_distractor_mask = dis, dis != pad_id
    return batch


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


class _component:
    """Tags NonFiniteError with the loss component being computed."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is NonFiniteError and not getattr(exc, "component", None):
            exc.component = self.name
        return False


@dataclass
class ForwardResult:
    losses: O.LossBreakdown
    select_correct: int = 0
    select_count: int = 0

    @property
    def select_accuracy(self) -> float | None:
        return self.select_correct / self.select_count if self.select_count else None


def forward_losses(
    model: TODModel,
    batch: Batch,
    variant: str,
    weights: O.LossWeights,
    tau: float = 1.0,
    noise_rng: RngState | None = None,
    hardening: str = "straight_through",
    pad_id: int = 0,
    nan_component: str | None = None,
) -> ForwardResult:
    """Build the joint-loss graph for one batch."""
    variant = O.normalize_variant(variant)
    with _component("belief_nll"):
        enc = model.encode(batch.context, batch.context_mask)
        belief_nll = O.lm_nll(model.decode_belief(enc, batch.belief_in), batch.belief_out, pad_id)
    with _component("span_ce"):
        span_ce, span_empty = O.span_loss(model.span_head(enc), batch.span_tags, batch.span_mask)
    with _component("resp_nll"):
        enc_r = model.encode(batch.resp_enc, batch.resp_enc_mask)
        resp_logits = model.decode_response(enc_r, batch.resp_in)
        resp_nll = O.lm_nll(resp_logits, batch.resp_out, pad_id)
        if nan_component == "resp_nll":
            resp_nll = resp_nll * float("nan")
    select = None
    correct = count = 0
    with _component("select_bce"):
        if variant == "after_encoder":
            if batch.select_truth is None or batch.select_distractor is None:
                raise ValueError("variant after_encoder needs truth and distractor sequences")
            lt = model.select_head_a(model.encode(batch.select_truth, batch.select_truth_mask))
            ld = model.select_head_a(model.encode(batch.select_distractor, batch.select_distractor_mask))
            select = O.select_loss_a(lt, ld)
            correct = int((lt.data > 0).sum() + (ld.data < 0).sum())
            count = 2 * len(batch)
        elif variant == "differentiable":
            if noise_rng is None:
                raise ValueError("variant differentiable needs a noise stream")
            mask = batch.resp_out != pad_id
            sample = G.straight_through(G.gumbel_softmax(resp_logits, tau, noise_rng), mode=hardening)
            truth = Tensor(G.one_hot(batch.resp_out, model.config.vocab_size, dtype=model.dtype), dtype=model.dtype)
            lt = model.select_head_b(truth, mask)
            lg = model.select_head_b(sample.hard, mask)
            select = O.select_loss_b(lt, lg)
            correct = int((lt.data > 0).sum() + (lg.data < 0).sum())
            count = 2 * len(batch)
    losses = O.total_loss(belief_nll, resp_nll, span_ce, select, weights, variant, span_empty)
    return ForwardResult(losses, correct, count)


def sequences_for(
    corpus: C.Corpus,
    turns: Sequence[C.DialogueTurn],
    max_len: int,
    variant: str,
    distractor_rng: RngState | None = None,
) -> list[C.TurnSequences]:
    out = []
    for t in turns:
        dis = C.sample_distractor(corpus, t, distractor_rng) if variant == "after_encoder" else None
        out.append(C.build_sequences(t, corpus.vocab, corpus.schema, max_len, distractor=dis))
    return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    step: int = 0
    best_score: float = -math.inf
    best_checkpoint: str | None = None
    log: list = field(default_factory=list)
    evaluations: list = field(default_factory=list)
    total_steps: int = 0


def steps_per_epoch(n_turns: int, batch_size: int) -> int:
    return math.ceil(n_turns / batch_size)


def total_steps_for(corpus: C.Corpus, cfg: TrainConfig) -> int:
    total = cfg.epochs * steps_per_epoch(len(corpus.turns("train")), cfg.batch_size)
    return min(total, cfg.max_steps) if cfg.max_steps else total


def _json_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def train(
    corpus: C.Corpus,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir: str | None = None,
    model: TODModel | None = None,
    evaluate: bool = True,
) -> tuple[TrainState, TODModel]:
    """Optimize the joint loss; evaluate on ``eval_split`` each epoch and keep the best checkpoint."""
    from . import evaluator as E

    cfg = train_cfg
    root = RngState(cfg.seed)
    if model is None:
        model = TODModel(model_cfg, seed=cfg.seed)
    data_rng = root.spawn("data")
    distractor_rng = root.spawn("distractors")
    noise_rng = root.spawn("gumbel")
    train_turns = corpus.turns("train")
    if not train_turns:
        raise ValueError("training split is empty")
    total = total_steps_for(corpus, cfg)
    state = TrainState(total_steps=total)
    opt = AdamState()
    pad = corpus.vocab.pad_id
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "train_log.jsonl"), "w")
    try:
        for epoch in range(cfg.epochs):
            if state.step >= total:
                break
            order = data_rng.permutation(len(train_turns))
            epoch_turns = [train_turns[int(i)] for i in order]
            seqs = sequences_for(corpus, epoch_turns, model_cfg.max_seq_len, cfg.variant, distractor_rng)
            for start in range(0, len(seqs), cfg.batch_size):
                if state.step >= total:
                    break
                step = state.step + 1
                lr = lr_schedule(step, total, cfg)
                tau = G.tau_schedule(step, total, cfg.gumbel)
                batch = collate(seqs[start : start + cfg.batch_size], pad)
                model.train()
                model.zero_grad()
                try:
                    result = forward_losses(
                        model, batch, cfg.variant, cfg.weights, tau, noise_rng, cfg.hardening, pad,
                        nan_component="resp_nll" if cfg.inject_nan_step == step else None,
                    )
                    result.losses.total.backward()
                except NonFiniteError as exc:
                    last_good = state.best_checkpoint
                    if out_dir:
                        # weights are untouched by the failed step
                        last_good = os.path.join(out_dir, "last")
                        model.save(last_good, extra={"variant": cfg.variant, "step": state.step})
                    record = {
                        "event": "abort",
                        "step": step,
                        "component": getattr(exc, "component", None),
                        "tau": tau,
                        "lr": lr,
                        "error": str(exc),
                        "last_good_checkpoint": last_good,
                    }
                    if log_fh:
                        log_fh.write(_json_line(record) + "\n")
                    raise TrainingAborted(f"non-finite loss at step {step}", record) from exc
                grads = {n: p.grad for n, p in model.params.items()}
                grad_norm = clip_grads(grads, cfg.clip_norm)
                adam_step(model.params, grads, opt, lr, cfg)
                state.step = step
                values = result.losses.values()
                record = {
                    "step": step,
                    "epoch": epoch + 1,
                    "lr": lr,
                    "tau": tau if cfg.variant == "differentiable" else None,
                    "weights": asdict(cfg.weights),
                    "variant": cfg.variant,
                    **values,
                    "select_acc": result.select_accuracy,
                    "grad_norm": grad_norm,
                }
                state.log.append(record)
                if log_fh:
                    log_fh.write(_json_line(record) + "\n")
            model.eval()
            if evaluate:
                report = E.evaluate(model, corpus, cfg.eval_split, max_len=cfg.max_decode_len)
                entry = {"event": "eval", "epoch": epoch + 1, "step": state.step, "split": cfg.eval_split, **report.headline()}
                improved = report.combined > state.best_score
                if improved:
                    state.best_score = report.combined
                    if out_dir is not None:
                        path = os.path.join(out_dir, "best")
                        model.save(path, extra={"variant": cfg.variant, "step": state.step, "epoch": epoch + 1})
                        state.best_checkpoint = path
                entry["improved"] = improved
                state.evaluations.append(entry)
                if log_fh:
                    log_fh.write(_json_line(entry) + "\n")
                logger.info("epoch %d step %d: dev combined %.2f", epoch + 1, state.step, report.combined)
    finally:
        if log_fh:
            log_fh.close()
    if out_dir is not None:
        model.save(os.path.join(out_dir, "last"), extra={"variant": cfg.variant, "step": state.step})
        if state.best_checkpoint is None:
            state.best_checkpoint = os.path.join(out_dir, "last")
    return state, model


def dataset_losses(
    model: TODModel,
    corpus: C.Corpus,
    variant: str,
    split: str = "train",
    tau: float = 0.8,
    seed: int = 0,
    batch_size: int = 16,
    hardening: str = "straight_through",
) -> dict:
    """Loss components averaged over ``split`` in eval mode (batch means weighted by batch size).

    Also reports ``select_acc``: the fraction of correctly classified
    selection examples, positives and negatives, or None for ``none``.
    """
    variant = O.normalize_variant(variant)
    rng = RngState(seed)
    dis_rng, noise_rng = rng.spawn("distractors"), rng.spawn("gumbel")
    seqs = sequences_for(corpus, corpus.turns(split), model.config.max_seq_len, variant, dis_rng)
    sums: dict = {}
    correct = count = 0
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            for start in range(0, len(seqs), batch_size):
                chunk = seqs[start : start + batch_size]
                res = forward_losses(model, collate(chunk, corpus.vocab.pad_id), variant, O.LossWeights(), tau, noise_rng, hardening, corpus.vocab.pad_id)
                for k, v in res.losses.values().items():
                    if v is not None:
                        sums[k] = sums.get(k, 0.0) + v * len(chunk)
                correct += res.select_correct
                count += res.select_count
    finally:
        if was_training:
            model.train()
    out = {k: v / len(seqs) for k, v in sums.items()}
    out["select_acc"] = correct / count if count else None
    return out


def selection_accuracy(
    model: TODModel,
    corpus: C.Corpus,
    variant: str,
    split: str = "train",
    tau: float = 0.8,
    seed: int = 0,
    batch_size: int = 16,
    hardening: str = "straight_through",
) -> float | None:
    """Fraction of correctly classified selection examples (positives and negatives) on ``split``."""
    if O.normalize_variant(variant) == "none":
        return None
    return dataset_losses(model, corpus, variant, split, tau, seed, batch_size, hardening)["select_acc"]
