"""End-to-end inference and dialogue metrics (BLEU, Inform, Success, combined score)."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np

from . import corpus as C
from .model import EncoderState, TODModel

BLEU_EPS = 1e-9
TABLE_COLUMNS = ("Model", "Variant", "Parameters", "Inform", "Success", "BLEU", "Score")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def combined_score(inform: float, success: float, bleu: float) -> float:
    return 0.5 * (inform + success) + bleu


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(references: Sequence, hypotheses: Sequence, max_n: int = 4) -> float:
    """Corpus BLEU-4 on a 0-100 scale.

    Clipped n-gram matches and candidate n-gram counts are summed over the
    corpus. A zero match count is replaced by ``BLEU_EPS`` (a zero candidate
    count by 1); the brevity penalty is ``exp(1 - r/c)`` when ``c <= r``.
    Strings are split on whitespace; token lists are used as given.
    """
    if len(references) != len(hypotheses):
        raise ValueError(f"{len(references)} references but {len(hypotheses)} hypotheses")
    matches = [0] * max_n
    totals = [0] * max_n
    ref_len = hyp_len = 0
    for ref, hyp in zip(references, hypotheses):
        ref = ref.split() if isinstance(ref, str) else list(ref)
        hyp = hyp.split() if isinstance(hyp, str) else list(hyp)
        ref_len += len(ref)
        hyp_len += len(hyp)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(matches, totals):
        log_p += math.log((m if m > 0 else BLEU_EPS) / (t if t > 0 else 1))
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p / max_n)


@dataclass
class TurnOutput:
    turn_index: int
    belief_text: str
    belief: dict
    belief_ok: bool
    db_state: str
    action_text: str
    response: str
    reference: str
    domain: str | None


@dataclass
class GeneratedDialogue:
    dialogue_id: str
    goal: dict
    turns: list = field(default_factory=list)


def _offered_domains(gen: GeneratedDialogue) -> dict:
    """domain -> set of placeholders it emitted across the dialogue."""
    out: dict = {}
    for t in gen.turns:
        if t.domain is None:
            continue
        out.setdefault(t.domain, set()).update(w for w in t.response.split() if w.startswith("[value_"))
    return out


def dialogue_inform_success(gen: GeneratedDialogue, db: Mapping) -> tuple[int, int, dict]:
    """Per-dialogue Inform/Success.

    For each goal domain the offered entity is the first DB row matching the
    final generated belief for that domain; Inform needs a ``[value_name]``
    in one of the domain's responses and that entity satisfying every goal
    constraint. Success additionally needs every requested slot's
    placeholder in the domain's responses.
    """
    final = gen.turns[-1].belief if gen.turns else {}
    emitted = _offered_domains(gen)
    detail = {}
    inform = success = 1
    for dom, g in gen.goal.items():
        said = emitted.get(dom, set())
        rows = C.db_matches(final.get(dom, {}), db.get(dom, [])) if final.get(dom) else []
        entity_ok = bool(rows) and all(rows[0].get(s) == v for s, v in g["constraints"].items())
        dom_inform = int("[value_name]" in said and entity_ok)
        dom_success = int(dom_inform and all(f"[value_{r}]" in said for r in g["requestables"]))
        detail[dom] = {"inform": dom_inform, "success": dom_success}
        inform &= dom_inform
        success &= dom_success
    return inform, success, detail


def inform_success(generated: Sequence[GeneratedDialogue], db: Mapping) -> tuple[float, float, list]:
    """Percentages over dialogues with a goal; dialogues without one are skipped and listed."""
    n = inf = suc = 0
    excluded = []
    for gen in generated:
        if not gen.goal:
            excluded.append(gen.dialogue_id)
            continue
        i, s, _ = dialogue_inform_success(gen, db)
        n += 1
        inf += i
        suc += s
    if n == 0:
        return 0.0, 0.0, excluded
    return 100.0 * inf / n, 100.0 * suc / n, excluded


@dataclass
class MetricsReport:
    inform: float
    success: float
    bleu: float
    combined: float
    n_dialogues: int
    details: list = field(default_factory=list)
    excluded: list = field(default_factory=list)

    def headline(self) -> dict:
        return {
            "inform": self.inform,
            "success": self.success,
            "bleu": self.bleu,
            "combined": self.combined,
            "n_dialogues": self.n_dialogues,
        }

    def to_dict(self) -> dict:
        return {**self.headline(), "details": self.details, "excluded": self.excluded}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        with open(path) as fh:
            d = json.load(fh)
        return cls(d["inform"], d["success"], d["bleu"], d["combined"], d["n_dialogues"], d.get("details", []), d.get("excluded", []))


def build_report(generated: Sequence[GeneratedDialogue], db: Mapping) -> MetricsReport:
    generated = sorted(generated, key=lambda g: g.dialogue_id)
    refs = [t.reference for g in generated for t in g.turns]
    hyps = [t.response for g in generated for t in g.turns]
    b = bleu(refs, hyps) if refs else 0.0
    inform, success, excluded = inform_success(generated, db)
    details = []
    for g in generated:
        if g.goal:
            i, s, per_domain = dialogue_inform_success(g, db)
        else:
            i = s = None
            per_domain = {}
        details.append(
            {
                "dialogue_id": g.dialogue_id,
                "inform": i,
                "success": s,
                "domains": per_domain,
                "turns": [asdict(t) for t in g.turns],
            }
        )
    n = len(generated) - len(excluded)
    return MetricsReport(inform, success, b, combined_score(inform, success, b), n, details, excluded)


def report_from_details(details: Sequence[Mapping]) -> MetricsReport:
    """Recompute headline numbers from per-dialogue records."""
    scored = [d for d in details if d["inform"] is not None]
    n = len(scored)
    inform = 100.0 * sum(d["inform"] for d in scored) / n if n else 0.0
    success = 100.0 * sum(d["success"] for d in scored) / n if n else 0.0
    refs = [t["reference"] for d in details for t in d["turns"]]
    hyps = [t["response"] for d in details for t in d["turns"]]
    b = bleu(refs, hyps) if refs else 0.0
    return MetricsReport(inform, success, b, combined_score(inform, success, b), n, list(details))


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


class Generator(Protocol):
    def generate_beliefs(self, keys: Sequence[tuple], contexts: Sequence[list]) -> list[list[int]]: ...

    def generate_responses(self, keys: Sequence[tuple], inputs: Sequence[list]) -> list[list[int]]: ...


class ModelGenerator:
    """Greedy decoding with a :class:`TODModel`; selection heads are never touched."""

    def __init__(self, model: TODModel, vocab: C.Vocab, max_len: int = 48):
        self.model = model
        self.vocab = vocab
        self.max_len = max_len

    def _run(self, inputs, decoder, start, eos):
        from .trainer import pad_batch

        ids = pad_batch(inputs, self.vocab.pad_id)
        enc = self.model.encode(ids, ids != self.vocab.pad_id)
        out = self.model.greedy_decode(enc, decoder, self.max_len, self.vocab.index[start], self.vocab.index[eos], self.vocab.pad_id)
        return [[self.vocab.index[start]] + seq for seq in out]

    def generate_beliefs(self, keys, contexts):
        self.model.eval()
        return self._run(contexts, "belief", C.SOS_B, C.EOS_B)

    def generate_responses(self, keys, inputs):
        self.model.eval()
        return self._run(inputs, "response", C.SOS_A, C.EOS_R)


class OracleGenerator:
    """Returns ground-truth sequences; an upper-bound fixture for the metrics."""

    def __init__(self, corpus: C.Corpus):
        self.corpus = corpus
        self._turns = {(d.dialogue_id, t.turn_index): t for d in corpus.dialogues for t in d.turns}

    def generate_beliefs(self, keys, contexts):
        return [self.corpus.vocab.encode_tokens(C.belief_tokens(self._turns[k].belief_state, self.corpus.schema)) for k in keys]

    def generate_responses(self, keys, inputs):
        out = []
        for k in keys:
            t = self._turns[k]
            toks = C.action_tokens(t.system_action) + [C.SOS_R, *C.split_words(t.response), C.EOS_R]
            out.append(self.corpus.vocab.encode_tokens(toks))
        return out


class EmptyResponseGenerator(OracleGenerator):
    """Ground-truth beliefs but empty responses (degenerate fixture)."""

    def generate_responses(self, keys, inputs):
        v = self.corpus.vocab
        return [v.encode_tokens([C.SOS_A, C.EOS_A, C.SOS_R, C.EOS_R]) for _ in keys]


def _split_response(tokens: Sequence[str]) -> tuple[list[str], list[str]]:
    """Action tokens (before ``<sos_r>``) and response words (between ``<sos_r>`` and ``<eos_r>``)."""
    if C.SOS_R in tokens:
        i = tokens.index(C.SOS_R)
        action, rest = list(tokens[:i]), list(tokens[i + 1 :])
    else:
        action, rest = list(tokens), []
    if C.EOS_R in rest:
        rest = rest[: rest.index(C.EOS_R)]
    action = [t for t in action if t not in (C.SOS_A, C.EOS_A, C.PAD)]
    rest = [t for t in rest if t not in C.SPECIAL_TOKENS or t in C.DB_TOKENS]
    return action, rest


def run_inference(
    generator: Generator,
    corpus: C.Corpus,
    dialogues: Sequence[C.Dialogue],
    max_seq_len: int,
    oracle_belief: bool = False,
) -> list[GeneratedDialogue]:
    """Turn-by-turn end-to-end generation, batched across dialogues.

    History rolls forward with the generated responses. With
    ``oracle_belief`` the ground-truth belief replaces the generated one.
    """
    vocab, schema = corpus.vocab, corpus.schema
    gens = {d.dialogue_id: GeneratedDialogue(d.dialogue_id, d.goal) for d in dialogues}
    history = {d.dialogue_id: [] for d in dialogues}
    prev = {d.dialogue_id: ({}, None) for d in dialogues}
    n_turns = max((len(d.turns) for d in dialogues), default=0)
    for ti in range(n_turns):
        active = [d for d in dialogues if ti < len(d.turns)]
        keys = [(d.dialogue_id, ti) for d in active]
        contexts = []
        for d in active:
            segs, user = C.context_tokens(history[d.dialogue_id], d.turns[ti].user_utterance)
            ctx, _ = C.fit_context(segs, user, max_seq_len - C.CONTEXT_RESERVE)
            contexts.append(vocab.encode_tokens(ctx))
        belief_ids = generator.generate_beliefs(keys, contexts)
        resp_inputs, parsed = [], []
        for d, ctx, b_ids in zip(active, contexts, belief_ids):
            turn = d.turns[ti]
            if oracle_belief:
                b_tokens = C.belief_tokens(turn.belief_state, schema)
            else:
                b_tokens = [vocab.tokens[i] for i in b_ids]
            belief, ok = C.parse_belief(b_tokens, schema)
            prev_belief, prev_domain = prev[d.dialogue_id]
            domain = C.infer_active_domain(prev_belief, belief, prev_domain, schema)
            prev[d.dialogue_id] = (belief, domain)
            db_state = C.db_query(belief, corpus.db, domain)
            enc_in = ctx + vocab.encode_tokens(list(b_tokens) + [db_state])
            if len(enc_in) > max_seq_len:
                enc_in = enc_in[-max_seq_len:]
            resp_inputs.append(enc_in)
            parsed.append((b_tokens, belief, ok, db_state))
        resp_ids = generator.generate_responses(keys, resp_inputs)
        for d, (b_tokens, belief, ok, db_state), r_ids in zip(active, parsed, resp_ids):
            turn = d.turns[ti]
            r_tokens = [vocab.tokens[i] for i in r_ids]
            action, words = _split_response(r_tokens)
            response = " ".join(words)
            gens[d.dialogue_id].turns.append(
                TurnOutput(
                    turn_index=ti,
                    belief_text=" ".join(b_tokens),
                    belief=belief,
                    belief_ok=ok,
                    db_state=db_state,
                    action_text=" ".join(action),
                    response=response,
                    reference=turn.response,
                    domain=C.action_domain(action, schema),
                )
            )
            history[d.dialogue_id].append([turn.user_utterance, response])
    return [gens[d.dialogue_id] for d in dialogues]


def evaluate(
    model: TODModel | Generator,
    corpus: C.Corpus,
    split: str = "test",
    max_len: int = 48,
    oracle_belief: bool = False,
    max_seq_len: int | None = None,
) -> MetricsReport:
    if isinstance(model, TODModel):
        gen = ModelGenerator(model, corpus.vocab, max_len)
        max_seq_len = max_seq_len or model.config.max_seq_len
    else:
        gen = model
        max_seq_len = max_seq_len or 512
    dialogues = corpus.split(split)
    generated = run_inference(gen, corpus, dialogues, max_seq_len, oracle_belief)
    return build_report(generated, corpus.db)


# ---------------------------------------------------------------------------
# comparison table
# ---------------------------------------------------------------------------


def comparison_row(model_name: str, variant: str, n_params: float | str, report: MetricsReport | Mapping) -> dict:
    m = report.headline() if isinstance(report, MetricsReport) else report
    return {
        "Model": model_name,
        "Variant": variant,
        "Parameters": n_params,
        "Inform": float(m["inform"]),
        "Success": float(m["success"]),
        "BLEU": float(m["bleu"]),
        "Score": combined_score(float(m["inform"]), float(m["success"]), float(m["bleu"])),
    }


def format_table(rows: Sequence[Mapping], fmt: str = "markdown") -> str:
    def cell(k, v):
        return f"{v:.2f}" if isinstance(v, float) and k != "Parameters" else str(v)

    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for r in rows:
            w.writerow([cell(k, r[k]) for k in TABLE_COLUMNS])
        return buf.getvalue()
    lines = ["| " + " | ".join(TABLE_COLUMNS) + " |", "|" + "---|" * len(TABLE_COLUMNS)]
    for r in rows:
        lines.append("| " + " | ".join(cell(k, r[k]) for k in TABLE_COLUMNS) + " |")
    return "\n".join(lines) + "\n"
