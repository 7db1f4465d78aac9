"""Acceptance criteria. The terminal summary prints one PASS/FAIL line per criterion."""

import hashlib
import os
import time

import numpy as np
import pytest

from selectod import evaluator as E
from selectod import gradcheck as GC
from selectod import gumbel as G
from selectod import trainer as Tr
from selectod.model import TODModel
from selectod.tensor import RngState

from conftest import VARIANTS, train_toy
from oracles import brute_force, random_fixture

C1 = "reference score arithmetic (four rows within 5e-3)"
C2 = "joint-loss grad check, both selection variants, 64-bit, >=200 entries, rel err <= 1e-4"
C3 = "straight-through: decoder selection gradient > 0; argmax: exactly 0"
C4 = "distractor variant: encoder selection gradient > 0, decoder exactly 0"
C5 = "Gumbel moments at 1e6 samples; Gumbel-max TV < 0.01 at 1e5"
C6 = "temperature and learning-rate schedules"
C7 = "toy end-to-end: resp_nll < 0.1, selection acc >= 0.95, test combined >= 90, <= 500 steps, <= 10 min"
C8 = "generations unchanged with selection heads removed"
C9 = "identical logs, checkpoints and metrics for identical seeds"
C10 = "inform/success vs brute force; BLEU vs hand value"


def digest(path):
    h = hashlib.sha256()
    for root, dirs, files in os.walk(path):
        dirs.sort()
        for f in sorted(files):
            full = os.path.join(root, f)
            h.update(os.path.relpath(full, path).encode())
            with open(full, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


# -- 1 ------------------------------------------------------------------------------------


@pytest.mark.criterion(1, C1)
@pytest.mark.parametrize(
    "inform,success,bleu,score",
    [(92.30, 84.00, 19.41, 107.56), (89.20, 80.50, 19.14, 103.99), (92.10, 83.30, 19.69, 107.39), (93.50, 84.70, 19.24, 108.34)],
)
def test_c1_score_arithmetic(inform, success, bleu, score):
    assert abs(E.combined_score(inform, success, bleu) - score) <= 5e-3


# -- 2 ------------------------------------------------------------------------------------


@pytest.mark.criterion(2, C2)
@pytest.mark.parametrize("variant", ["after_encoder", "differentiable"])
def test_c2_joint_loss_gradients(variant):
    cfg = GC.tiny_config()
    assert (cfg.d_model, cfg.n_encoder_layers, cfg.n_decoder_layers, cfg.vocab_size) == (32, 1, 1, 200)
    assert cfg.max_seq_len <= 24
    t0 = time.perf_counter()
    chk = GC.check_joint_loss(variant, n_samples=200, seed=0, tolerance=1e-4)
    elapsed = time.perf_counter() - t0
    assert chk.report.n_checked >= 200
    assert chk.report.max_rel_error <= 1e-4, chk.to_dict()
    assert chk.passed
    assert elapsed <= 300


# -- 3, 4 ---------------------------------------------------------------------------------


@pytest.mark.criterion(3, C3)
def test_c3_straight_through_reaches_decoder():
    norms = GC.selection_gradient_norms("differentiable", "straight_through")
    assert norms["response_decoder"] > 0
    assert norms["embedding"] > 0


@pytest.mark.criterion(3, C3)
def test_c3_argmax_blocks_decoder():
    norms = GC.selection_gradient_norms("differentiable", "argmax")
    assert norms["response_decoder"] == 0.0


@pytest.mark.criterion(4, C4)
def test_c4_distractor_variant_flow():
    norms = GC.selection_gradient_norms("after_encoder")
    assert norms["encoder"] > 0
    assert norms["decoder"] == 0.0
    assert norms["response_decoder"] == 0.0 and norms["belief_decoder"] == 0.0


# -- 5 ------------------------------------------------------------------------------------


@pytest.mark.criterion(5, C5)
def test_c5_gumbel_moments():
    g = G.gumbel_noise((1_000_000,), RngState(0).spawn("moments"))
    assert abs(g.mean() - 0.5772) <= 0.01
    assert abs(g.var() - 1.6449) <= 0.02


@pytest.mark.criterion(5, C5)
def test_c5_gumbel_max_matches_softmax():
    logits = np.array([1.2, -0.4, 0.0, 2.1, -1.5, 0.7])
    n = 100_000
    draws = np.argmax(logits + G.gumbel_noise((n, logits.size), RngState(1).spawn("gumbel-max")), axis=1)
    freq = np.bincount(draws, minlength=logits.size) / n
    p = np.exp(logits - logits.max())
    p /= p.sum()
    assert 0.5 * np.abs(freq - p).sum() < 0.01


# -- 6 ------------------------------------------------------------------------------------


@pytest.mark.criterion(6, C6)
def test_c6_schedules():
    T = 1000
    g = G.GumbelConfig()
    assert G.tau_schedule(0, T, g) == 4.0
    assert G.tau_schedule(T, T, g) == pytest.approx(0.8, abs=1e-12)
    assert abs(G.tau_schedule(T // 2, T, g) - 2.4) <= 1e-9
    taus = [G.tau_schedule(s, T, g) for s in range(T + 1)]
    assert np.allclose(np.diff(taus), -3.2 / T, atol=1e-12)
    cfg = Tr.TrainConfig()
    assert Tr.lr_schedule(0, T, cfg) == 0.0
    assert Tr.lr_schedule(T // 10, T, cfg) == 5e-4
    assert all(Tr.lr_schedule(s, T, cfg) == 5e-4 for s in range(T // 10, T + 1))


# -- 7 ------------------------------------------------------------------------------------


@pytest.mark.criterion(7, C7)
def test_c7_corpus_size(toy_corpus):
    assert len(toy_corpus.dialogues) == 64


@pytest.mark.criterion(7, C7)
@pytest.mark.parametrize("variant", VARIANTS)
def test_c7_budget(toy_runs, variant):
    run = toy_runs[variant]
    assert run.state.step <= 500
    assert run.seconds <= 600


@pytest.mark.criterion(7, C7)
@pytest.mark.parametrize("variant", VARIANTS)
def test_c7_response_nll(toy_runs, variant):
    assert toy_runs[variant].train_metrics["resp_nll"] < 0.1


@pytest.mark.criterion(7, C7)
@pytest.mark.parametrize("variant", ["after_encoder", "differentiable"])
def test_c7_selection_accuracy(toy_runs, variant):
    assert toy_runs[variant].train_metrics["select_acc"] >= 0.95


@pytest.mark.criterion(7, C7)
@pytest.mark.parametrize("variant", VARIANTS)
def test_c7_test_combined(toy_runs, variant):
    assert toy_runs[variant].test_report.combined >= 90


@pytest.mark.criterion(7, C7)
def test_c7_comparison_table(toy_runs, acceptance_notes):
    rows = [E.comparison_row("toy", v, r.best.n_parameters(v), r.test_report) for v, r in toy_runs.items()]
    table = E.format_table(rows)
    assert len(table.strip().splitlines()) == 2 + len(VARIANTS)
    acceptance_notes.append("toy comparison (test split, best-by-dev checkpoint):")
    acceptance_notes.extend(table.strip().splitlines())
    for v, r in toy_runs.items():
        m = r.train_metrics
        sel = "n/a" if m["select_acc"] is None else f"{m['select_acc']:.3f}"
        acceptance_notes.append(f"  {v}: steps {r.state.step}, {r.seconds:.0f} s, train resp_nll {m['resp_nll']:.4f}, selection acc {sel}")


# -- 8 ------------------------------------------------------------------------------------


@pytest.mark.criterion(8, C8)
@pytest.mark.parametrize("variant", ["after_encoder", "differentiable"])
def test_c8_heads_do_not_affect_generation(toy_runs, toy_corpus, variant):
    ckpt = toy_runs[variant].state.best_checkpoint
    full = TODModel.load(ckpt)
    stripped = TODModel.load(ckpt, drop_selection_heads=True)
    assert any(k.startswith(TODModel.SELECTION_PREFIXES) for k in full.params)
    assert not any(k.startswith(TODModel.SELECTION_PREFIXES) for k in stripped.params)
    dialogues = toy_corpus.split("test")
    a = E.run_inference(E.ModelGenerator(full, toy_corpus.vocab), toy_corpus, dialogues, full.config.max_seq_len)
    b = E.run_inference(E.ModelGenerator(stripped, toy_corpus.vocab), toy_corpus, dialogues, full.config.max_seq_len)
    assert a == b


# -- 9 ------------------------------------------------------------------------------------


@pytest.mark.criterion(9, C9)
def test_c9_determinism(toy_runs, toy_corpus, tmp_path):
    first = toy_runs["differentiable"]
    second = train_toy(toy_corpus, "differentiable", tmp_path / "again")
    assert (first.out_dir / "train_log.jsonl").read_bytes() == (second.out_dir / "train_log.jsonl").read_bytes()
    for name in ("best", "last"):
        assert digest(first.out_dir / name) == digest(second.out_dir / name)
    assert first.test_report.to_dict() == second.test_report.to_dict()


# -- 10 -----------------------------------------------------------------------------------


@pytest.mark.criterion(10, C10)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_c10_inform_success_brute_force(toy_corpus, seed):
    fixture = random_fixture(toy_corpus, 20, seed)
    expected = [brute_force(g, toy_corpus.db) for g in fixture]
    assert [E.dialogue_inform_success(g, toy_corpus.db)[:2] for g in fixture] == expected
    inform, success, _ = E.inform_success(fixture, toy_corpus.db)
    assert (inform, success) == (5.0 * sum(i for i, _ in expected), 5.0 * sum(s for _, s in expected))


@pytest.mark.criterion(10, C10)
def test_c10_bleu_hand_value():
    # ref 6 tokens, hyp 5; precisions 5/5, 3/4, 1/3, (1e-9)/2; brevity exp(1 - 6/5)
    expected = 100 * np.exp(1 - 6 / 5) * np.exp((np.log(1.0) + np.log(0.75) + np.log(1 / 3) + np.log(1e-9 / 2)) / 4)
    assert abs(E.bleu(["the cat sat on the mat"], ["the cat on the mat"]) - expected) < 1e-6
