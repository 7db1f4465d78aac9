import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selectod import corpus as C
from selectod.tensor import RngState

SPEC_24 = {"domains": ["restaurant", "hotel"], "dialogues_per_combination": 8, "seed": 7}


@pytest.fixture(scope="module")
def corpus24():
    return C.generate_corpus(SPEC_24)


def test_split_sizes_for_24_dialogues(corpus24):
    assert len(corpus24.dialogues) == 24
    assert {k: len(v) for k, v in corpus24.splits.items()} == {"train": 19, "dev": 2, "test": 3}


@pytest.mark.parametrize("n", [10, 24, 64, 101])
def test_split_counts_are_80_10_10(n):
    tr, dv, te = C.split_counts(n)
    assert tr + dv + te == n
    assert abs(tr - 0.8 * n) <= 1 and abs(dv - 0.1 * n) <= 1 and abs(te - 0.1 * n) <= 1


def test_generation_is_deterministic(corpus24, tmp_path):
    again = C.generate_corpus(SPEC_24)
    C.save_corpus(corpus24, tmp_path / "a")
    C.save_corpus(again, tmp_path / "b")
    for f in C.CORPUS_FILES:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert C.corpus_hash(tmp_path / "a") == C.corpus_hash(tmp_path / "b")
    assert C.corpus_hash(tmp_path / "a") != C.corpus_hash(C.save_corpus(C.generate_corpus({**SPEC_24, "seed": 8}), tmp_path / "c") and tmp_path / "c")


def test_every_turn_is_valid(corpus24):
    assert C.validate_corpus(corpus24) == []


def test_splits_disjoint_and_complete(corpus24):
    ids = [set(v) for v in corpus24.splits.values()]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert set().union(*ids) == {d.dialogue_id for d in corpus24.dialogues}


def test_goal_requestables_appear_in_responses(corpus24):
    for d in corpus24.dialogues:
        said = {w for t in d.turns for w in C.split_words(t.response)}
        for g in d.goal.values():
            assert all(f"[value_{r}]" in said for r in g["requestables"])
            assert "[value_name]" in said


def test_span_tags_mark_exactly_the_belief_values(corpus24):
    names = corpus24.tag_names
    for t in corpus24.turns("train"):
        words = C.split_words(t.user_utterance)
        spans = []
        for i, (w, tag) in enumerate(zip(words, t.span_tags)):
            label = names[tag]
            if label.startswith("B-"):
                spans.append([label[2:], [w]])
            elif label.startswith("I-"):
                assert spans and spans[-1][0] == label[2:]
                spans[-1][1].append(w)
        values = {(s, " ".join(ws)) for s, ws in spans}
        belief_values = {(s, v) for slots in t.belief_state.values() for s, v in slots.items()}
        assert values <= belief_values


def test_belief_chain_is_consistent_with_db(corpus24):
    for d in corpus24.dialogues:
        for t in d.turns:
            assert t.db_state == C.db_query(t.belief_state, corpus24.db, t.active_domain)


def test_active_domain_inference_reproduces_labels(corpus24):
    for d in corpus24.dialogues:
        prev, active = {}, None
        for t in d.turns:
            active = C.infer_active_domain(prev, t.belief_state, active, corpus24.schema)
            assert active == t.active_domain
            prev = t.belief_state


def test_spec_errors_name_the_field():
    with pytest.raises(C.CorpusError, match="dialogues_per_combination"):
        C.generate_corpus({"domains": ["restaurant", "hotel"], "dialogues_per_combination": 0})
    with pytest.raises(C.CorpusError, match="domains"):
        C.generate_corpus({"domains": ["restaurant"]})
    with pytest.raises(C.CorpusError, match="colour"):
        C.generate_corpus({"domains": ["restaurant", "hotel"], "colour": 1})
    with pytest.raises(C.CorpusError, match="db_rows"):
        C.generate_corpus({"domains": ["restaurant", "hotel"], "db_rows": 5})


# -- delexicalization -------------------------------------------------------------


def test_delexicalize_examples():
    assert C.delexicalize("book the golden palace", {"name": "golden palace"}) == "book the [value_name]"
    assert C.delexicalize("nothing to do", {}) == "nothing to do"
    assert C.delexicalize("The Golden Palace is nice", {"name": "golden palace"}) == "The [value_name] is nice"


def test_delexicalize_longest_match_wins():
    ents = {"food": "european", "name": "modern european house"}
    assert C.delexicalize("try modern european house for european food", ents) == "try [value_name] for [value_food] food"


def test_delexicalize_rejects_empty_value():
    with pytest.raises(C.CorpusError):
        C.delexicalize("x", {"food": " "})


WORDS = st.sampled_from(["the", "golden", "palace", "north", "cheap", "italian", "food", "in", "[value_area]", "."])


@settings(max_examples=200, deadline=None)
@given(st.lists(WORDS, max_size=12), st.dictionaries(st.sampled_from(["name", "area", "food"]), st.sampled_from(["golden palace", "north", "italian food", "cheap"]), max_size=3))
def test_delexicalize_is_idempotent(words, ents):
    text = " ".join(words)
    once = C.delexicalize(text, ents)
    assert C.delexicalize(once, ents) == once


# -- tokenization ------------------------------------------------------------------


def test_tokenizer_examples(corpus24):
    v = corpus24.vocab
    assert len(v.tokenize("[value_name] is nice .")) == 4
    assert v.tokenize("") == []
    assert v.tokenize("zzzz") == [v.index[C.UNK]]
    for tok in ("<sos_b>", "<eos_b>", "<sos_a>", "<sos_r>", "[db_4plus]"):
        assert C.split_words(tok) == [tok]


def test_detokenize_roundtrip_on_corpus_lines(corpus24):
    lines = list(C.corpus_texts(corpus24.dialogues, corpus24.schema))
    rng = RngState(0)
    for i in rng.permutation(len(lines))[:100]:
        text = " ".join(C.split_words(lines[i]))
        assert corpus24.vocab.detokenize(corpus24.vocab.tokenize(text)) == text


def test_vocab_save_load(corpus24, tmp_path):
    corpus24.vocab.save(tmp_path / "v.txt")
    assert C.Vocab.load(tmp_path / "v.txt").tokens == corpus24.vocab.tokens
    assert corpus24.vocab.tokens[: len(C.SPECIAL_TOKENS)] == list(C.SPECIAL_TOKENS)


def test_corpus_files_roundtrip(corpus24, tmp_path):
    C.save_corpus(corpus24, tmp_path)
    back = C.load_corpus(tmp_path)
    assert [d.to_dict() for d in back.dialogues] == [d.to_dict() for d in corpus24.dialogues]
    assert back.splits == corpus24.splits and back.vocab.tokens == corpus24.vocab.tokens
    text = (tmp_path / "train.json").read_text()
    assert json.dumps(json.loads(text), indent=1, sort_keys=True) + "\n" == text


def test_load_reports_missing_file(tmp_path):
    with pytest.raises(C.CorpusError, match="train.json"):
        C.load_corpus(tmp_path)


# -- belief / action serialization -----------------------------------------------------


def test_belief_target_format():
    schema = C.canonical_schema(C.DEFAULT_SCHEMA)
    assert C.belief_tokens({"restaurant": {"food": "italian"}}, schema) == ["<sos_b>", "[restaurant]", "food", "italian", "<eos_b>"]
    belief = {"restaurant": {"food": "modern european", "area": "east"}, "hotel": {"stars": "4", "area": "north"}}
    toks = C.belief_tokens(belief, schema)
    assert toks == ["<sos_b>", "[hotel]", "area", "north", "stars", "4", "[restaurant]", "area", "east", "food", "modern", "european", "<eos_b>"]


def test_schema_order_survives_save_and_load(corpus24, tmp_path):
    C.save_corpus(corpus24, tmp_path)
    back = C.load_corpus(tmp_path)
    assert list(back.schema) == list(corpus24.schema)
    for dom in back.schema:
        assert list(back.schema[dom]["informable"]) == list(corpus24.schema[dom]["informable"])


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_parse_belief_inverts_belief_tokens(data):
    schema = C.DEFAULT_SCHEMA
    belief = {}
    for dom in data.draw(st.lists(st.sampled_from(list(schema)), unique=True)):
        slots = schema[dom]["informable"]
        chosen = data.draw(st.lists(st.sampled_from(list(slots)), min_size=1, unique=True))
        belief[dom] = {s: data.draw(st.sampled_from(slots[s])) for s in chosen}
    parsed, ok = C.parse_belief(C.belief_tokens(belief, schema), schema)
    assert ok and parsed == belief


def test_parse_belief_flags_garbage():
    parsed, ok = C.parse_belief(["<sos_b>", "food", "[hotel]", "area", "<eos_b>"], C.DEFAULT_SCHEMA)
    assert not ok and parsed == {}


def test_action_tokens_group_by_domain_and_act():
    act = [["hotel", "inform", "phone"], ["hotel", "inform", "postcode"], ["general", "bye", "none"]]
    assert C.action_tokens(act) == ["<sos_a>", "[hotel]", "[inform]", "phone", "postcode", "[general]", "[bye]", "<eos_a>"]
    assert C.action_domain(C.action_tokens(act), ["hotel"]) == "hotel"


# -- DB ----------------------------------------------------------------------------------


def test_db_buckets():
    table = [{"area": "north", "food": "x"}] * 7 + [{"area": "south", "food": "y"}]
    db = {"restaurant": table}
    assert C.db_query({"restaurant": {"area": "east"}}, db, "restaurant") == "[db_0]"
    assert C.db_query({"restaurant": {"area": "north"}}, db, "restaurant") == "[db_4plus]"
    assert C.db_query({"restaurant": {"food": "y"}}, db, "restaurant") == "[db_1]"
    assert C.db_query({}, {"restaurant": table[:3]}, "restaurant") == "[db_3]"
    with pytest.raises(C.CorpusError, match="unknown domain"):
        C.db_query({}, db, "train")


# -- distractors and sequences ----------------------------------------------------------


def test_distractor_never_equals_truth(corpus24):
    rng = RngState(0)
    turns = corpus24.turns("train")
    for i in range(10_000):
        t = turns[i % len(turns)]
        assert C.sample_distractor(corpus24, t, rng) != t.response


def test_distractor_forced_and_seeded():
    t1 = C.DialogueTurn("d", 0, [], "hi", "hi", {}, "restaurant", "[db_0]", [], "one", [0], {})
    t2 = C.DialogueTurn("d", 1, [], "hi", "hi", {}, "restaurant", "[db_0]", [], "two", [0], {})
    corpus = C.Corpus([C.Dialogue("d", ["restaurant"], {}, [t1, t2])], {"train": ["d"], "dev": [], "test": []}, {}, {}, None)
    assert C.sample_distractor(corpus, t1, RngState(0)) == "two"
    same = C.DialogueTurn("d", 1, [], "hi", "hi", {}, "restaurant", "[db_0]", [], "one", [0], {})
    corpus2 = C.Corpus([C.Dialogue("d", ["restaurant"], {}, [t1, same])], {"train": ["d"], "dev": [], "test": []}, {}, {}, None)
    with pytest.raises(C.CorpusError):
        C.sample_distractor(corpus2, t1, RngState(0))


def test_distractor_draws_are_seeded(corpus24):
    turns = corpus24.turns("train")[:50]
    a = [C.sample_distractor(corpus24, t, RngState(3)) for t in turns]
    b = [C.sample_distractor(corpus24, t, RngState(3)) for t in turns]
    assert a == b


def test_build_sequences_layout(corpus24):
    v = corpus24.vocab
    first = corpus24.split("train")[0].turns[0]
    seq = C.build_sequences(first, v, corpus24.schema, 128, distractor="goodbye .")
    ctx = v.detokenize(seq.context).split()
    assert ctx[0] == C.SOS_U and ctx[-1] == C.EOS_U
    assert ctx[1:-1] == C.split_words(first.user_utterance)
    assert v.detokenize(seq.belief_target).split() == C.belief_tokens(first.belief_state, corpus24.schema)
    resp = v.detokenize(seq.resp_target).split()
    assert resp[0] == C.SOS_A and resp[-1] == C.EOS_R and C.SOS_R in resp
    assert resp[resp.index(C.SOS_R) + 1 : -1] == C.split_words(first.response)
    assert seq.encoder_input_resp == seq.context + seq.belief_target + [v.index[first.db_state]]
    assert v.detokenize(seq.select_distractor[len(seq.context) :]) == "<sos_r> goodbye . <eos_r>"
    assert sum(seq.span_mask) == len(first.span_tags)


def test_build_sequences_round_trip_whole_corpus(corpus24):
    v = corpus24.vocab
    for t in corpus24.turns("train") + corpus24.turns("test"):
        seq = C.build_sequences(t, v, corpus24.schema, 128)
        belief, ok = C.parse_belief(v.detokenize(seq.belief_target).split(), corpus24.schema)
        assert ok and belief == {d: s for d, s in t.belief_state.items() if s}
        resp = v.detokenize(seq.resp_target).split()
        assert resp[: resp.index(C.SOS_R)] == C.action_tokens(t.system_action)
        assert len(seq.context) <= 128 - C.CONTEXT_RESERVE


def test_history_truncation_drops_oldest_turns():
    segs = [["a"] * 5, ["b"] * 5, ["c"] * 5]
    ctx, offset = C.fit_context(segs, ["u"] * 3, 12)
    assert ctx == ["c"] * 5 + ["u"] * 3 and offset == 5
