"""Synthetic MultiWOZ-shaped corpus: schema, DB, generation, tokenization, sequences.

Dialogues are produced from goals over a small schema so that every
goal -> belief -> DB -> action -> response chain is internally consistent.
Responses are delexicalized; user utterances keep their surface values and
carry BIO span tags over the informable slot types.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import os
import re
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

from .tensor import RngState

logger = logging.getLogger(__name__)

PAD, UNK = "<pad>", "<unk>"
SOS_U, EOS_U = "<sos_u>", "<eos_u>"
SOS_B, EOS_B = "<sos_b>", "<eos_b>"
SOS_A, EOS_A = "<sos_a>", "<eos_a>"
SOS_R, EOS_R = "<sos_r>", "<eos_r>"
DB_TOKENS = ("[db_0]", "[db_1]", "[db_2]", "[db_3]", "[db_4plus]")
SEP = "<sep>"
SPECIAL_TOKENS = (PAD, UNK, SOS_U, EOS_U, SOS_B, EOS_B, SOS_A, EOS_A, SOS_R, EOS_R, *DB_TOKENS, SEP)

SPLITS = ("train", "dev", "test")
REQUESTABLE = ("phone", "address", "postcode")

# domain -> informable slot -> values; corpora use the sorted order (see canonical_schema)
DEFAULT_SCHEMA = {
    "restaurant": {
        "noun": "restaurant",
        "informable": {
            "food": ["italian", "chinese", "indian", "british", "french", "modern european"],
            "area": ["north", "south", "east", "west", "centre"],
            "pricerange": ["cheap", "moderate", "expensive"],
        },
    },
    "hotel": {
        "noun": "hotel",
        "informable": {
            "area": ["north", "south", "east", "west", "centre"],
            "pricerange": ["cheap", "moderate", "expensive"],
            "stars": ["2", "3", "4", "5"],
        },
    },
    "attraction": {
        "noun": "attraction",
        "informable": {
            "type": ["museum", "park", "theatre", "college", "swimming pool"],
            "area": ["north", "south", "east", "west", "centre"],
        },
    },
}

_NAME_FIRST = ["golden", "royal", "little", "blue", "red", "old", "green", "silver", "lucky", "happy", "grand", "quiet"]
_NAME_SECOND = {
    "restaurant": ["palace", "kitchen", "garden", "bistro", "table", "grill"],
    "hotel": ["lodge", "inn", "house", "manor", "suites", "rooms"],
    "attraction": ["gallery", "gardens", "hall", "exhibit", "works", "yard"],
}
_STREETS = ["mill road", "king street", "regent street", "hills road", "station road", "bridge street"]

_SLOT_PHRASES = {
    "food": "serving {} food",
    "area": "in the {}",
    "pricerange": "in the {} price range",
    "stars": "with {} stars",
    "type": "of type {}",
}
_OPENERS = ["i am looking for a {}", "i need a {}", "can you find me a {}", "please help me find a {}"]
_SWITCH_OPENERS = ["i also need a {}", "i am also looking for a {}"]
_ANSWER_TEMPLATES = ["i want it {} .", "something {} please .", "i would prefer one {} ."]
_REQUEST_TEMPLATES = ["can i have the {} ?", "what is the {} ?", "please give me the {} ."]
_REQUEST_WORDS = {"phone": "phone number", "address": "address", "postcode": "postcode"}
_BYE_TEMPLATES = ["thank you , goodbye .", "thanks , that is all .", "that is all i need , bye ."]
_ASK_SLOT = {
    "food": "what type of food would you like ?",
    "area": "which area would you like ?",
    "pricerange": "what price range would you like ?",
    "stars": "how many stars would you like ?",
    "type": "what type of attraction would you like ?",
}
_OFFER = {
    "restaurant": "{name} serves {food} food in the {area} and is {pricerange} .",
    "hotel": "{name} is a {pricerange} hotel in the {area} with {stars} stars .",
    "attraction": "{name} is a {type} in the {area} .",
}
_INFO_PARTS = {"phone": "the phone number is {}", "address": "the address is {}", "postcode": "the postcode is {}"}
_BYE_RESPONSE = "thank you for using our service . goodbye ."


class CorpusError(ValueError):
    pass


# ---------------------------------------------------------------------------
# schema helpers
# ---------------------------------------------------------------------------


def slot_types(schema: Mapping) -> list[str]:
    """Sorted union of informable slot names."""
    return sorted({s for d in schema.values() for s in d["informable"]})


def span_tag_names(schema: Mapping) -> list[str]:
    tags = ["O"]
    for s in slot_types(schema):
        tags += [f"B-{s}", f"I-{s}"]
    return tags


def placeholder_inventory(schema: Mapping) -> set[str]:
    slots = {"name", *REQUESTABLE, *slot_types(schema)}
    return {f"[value_{s}]" for s in slots}


def canonical_schema(schema: Mapping) -> dict:
    """Domains and informable slots in sorted order, the order they take after a JSON round trip."""
    out = {}
    for dom in sorted(schema):
        spec = dict(schema[dom])
        spec["informable"] = {k: list(spec["informable"][k]) for k in sorted(spec["informable"])}
        out[dom] = {k: spec[k] for k in sorted(spec)}
    return out


def validate_schema(schema: Mapping) -> None:
    reserved = {f"[{d}]" for d in schema} | set(slot_types(schema)) | {"name", *REQUESTABLE}
    for dom, spec in schema.items():
        if "informable" not in spec or not spec["informable"]:
            raise CorpusError(f"schema domain {dom!r} has no informable slots")
        for slot, values in spec["informable"].items():
            for v in values:
                if not v or set(v.split()) & reserved:
                    raise CorpusError(f"value {v!r} of {dom}.{slot} collides with a slot or domain token")


# ---------------------------------------------------------------------------
# text handling
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"\[[^\]\s]+\]|<[^>\s]+>|[a-z0-9_']+|[^\sa-z0-9_']", re.IGNORECASE)


def split_words(text: str) -> list[str]:
    """Word-level tokens; placeholders and ``<...>`` markers stay atomic."""
    return _TOKEN_RE.findall(text.lower())


def delexicalize(text: str, entities: Mapping[str, str]) -> str:
    """Replace surface values with ``[value_<slot>]``, longest match first, case-insensitively."""
    items = []
    for slot, value in entities.items():
        if value is None or not str(value).strip():
            raise CorpusError(f"empty surface value for slot {slot!r}")
        items.append((str(value).lower(), slot))
    if not items:
        return text
    items.sort(key=lambda kv: (-len(kv[0]), kv[1]))
    lookup: dict[str, str] = {}
    for value, slot in items:
        lookup.setdefault(value, slot)
    alternation = "|".join(re.escape(v) for v in lookup)
    pattern = re.compile(r"(\[[^\]]*\])|(?<![\w\[])(" + alternation + r")(?![\w\]])", re.IGNORECASE)

    def repl(m: re.Match) -> str:
        if m.group(1):
            return m.group(1)
        return f"[value_{lookup[m.group(2).lower()]}]"

    return pattern.sub(repl, text)


class Vocab:
    """Ordered token list; index = id. Specials occupy the first ids."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise CorpusError("vocabulary must start with the reserved special tokens")
        if len(set(tokens)) != len(tokens):
            raise CorpusError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        words = set()
        for text in texts:
            words.update(split_words(text))
        words -= set(SPECIAL_TOKENS)
        return cls(list(SPECIAL_TOKENS) + sorted(words))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    def tokenize(self, text: str) -> list[int]:
        return [self.id(t) for t in split_words(text)]

    def encode_tokens(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def detokenize(self, ids: Iterable[int], strip_special: bool = False) -> str:
        words = [self.tokens[int(i)] for i in ids]
        if strip_special:
            words = [w for w in words if w not in SPECIAL_TOKENS or w in DB_TOKENS]
        return " ".join(words)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path) as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


# ---------------------------------------------------------------------------
# data records
# ---------------------------------------------------------------------------


@dataclass
class DialogueTurn:
    dialogue_id: str
    turn_index: int
    history: list            # prior [user, system] text pairs
    user_utterance: str      # surface text, span-tagged
    user_delex: str
    belief_state: dict       # domain -> {slot: value}, domains in order of appearance
    active_domain: str
    db_state: str
    system_action: list      # [domain, act, slot] triples
    response: str            # delexicalized
    span_tags: list
    goal: dict

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DialogueTurn":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


@dataclass
class Dialogue:
    dialogue_id: str
    domains: list
    goal: dict
    turns: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "dialogue_id": self.dialogue_id,
            "domains": list(self.domains),
            "goal": self.goal,
            "turns": [t.to_dict() for t in self.turns],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Dialogue":
        return cls(d["dialogue_id"], list(d["domains"]), d["goal"], [DialogueTurn.from_dict(t) for t in d["turns"]])


@dataclass
class Corpus:
    dialogues: list
    splits: dict
    schema: dict
    db: dict
    vocab: Vocab

    def __post_init__(self):
        self._by_id = {d.dialogue_id: d for d in self.dialogues}

    def dialogue(self, dialogue_id: str) -> Dialogue:
        return self._by_id[dialogue_id]

    def split(self, name: str) -> list[Dialogue]:
        if name not in self.splits:
            raise CorpusError(f"unknown split {name!r}")
        return [self._by_id[i] for i in self.splits[name]]

    def turns(self, split: str) -> list[DialogueTurn]:
        return [t for d in self.split(split) for t in d.turns]

    @cached_property
    def response_pool(self) -> list[str]:
        """Responses of all training turns, in corpus order."""
        return [t.response for t in self.turns("train")]

    @property
    def tag_names(self) -> list[str]:
        return span_tag_names(self.schema)


# ---------------------------------------------------------------------------
# belief / action serialization
# ---------------------------------------------------------------------------


def belief_tokens(belief_state: Mapping, schema: Mapping) -> list[str]:
    """``<sos_b> [domain] slot value ... <eos_b>``; domains and slots in schema order."""
    out = [SOS_B]
    domains = [d for d in schema if d in belief_state] + sorted(d for d in belief_state if d not in schema)
    for dom in domains:
        slots = belief_state[dom]
        if not slots:
            continue
        out.append(f"[{dom}]")
        order = list(schema[dom]["informable"]) if dom in schema else sorted(slots)
        for slot in order:
            if slot in slots:
                out.append(slot)
                out.extend(split_words(slots[slot]))
    out.append(EOS_B)
    return out


def parse_belief(tokens: Sequence[str], schema: Mapping) -> tuple[dict, bool]:
    """Inverse of :func:`belief_tokens`; returns ``(belief, ok)``.

    Malformed input yields whatever parsed cleanly and ``ok=False``.
    """
    toks = [t for t in tokens if t not in (SOS_B, EOS_B, PAD)]
    belief: dict = {}
    ok = True
    dom = slot = None
    for tok in toks:
        if tok.startswith("[") and tok.endswith("]") and tok[1:-1] in schema:
            dom, slot = tok[1:-1], None
            belief.setdefault(dom, {})
        elif dom is not None and tok in schema[dom]["informable"]:
            slot = tok
            belief[dom][slot] = ""
        elif dom is not None and slot is not None:
            belief[dom][slot] = (belief[dom][slot] + " " + tok).strip()
        else:
            ok = False
    for d in list(belief):
        for s in list(belief[d]):
            if not belief[d][s]:
                del belief[d][s]
                ok = False
        if not belief[d]:
            del belief[d]
    return belief, ok


def action_tokens(action: Sequence) -> list[str]:
    """``<sos_a> [domain] [act] slot ... <eos_a>``; consecutive triples sharing domain/act are grouped."""
    out = [SOS_A]
    prev = None
    for dom, act, slot in action:
        if (dom, act) != prev:
            out += [f"[{dom}]", f"[{act}]"]
            prev = (dom, act)
        if slot and slot != "none":
            out.append(slot)
    out.append(EOS_A)
    return out


def action_domain(tokens: Sequence[str], domains: Iterable[str]) -> str | None:
    known = {f"[{d}]" for d in domains} | {"[general]"}
    for tok in tokens:
        if tok in known:
            return tok[1:-1]
    return None


# ---------------------------------------------------------------------------
# database
# ---------------------------------------------------------------------------


def infer_active_domain(prev_belief: Mapping, belief: Mapping, prev_active: str | None, schema: Mapping) -> str:
    """Domain whose constraints changed this turn; otherwise the previous active domain."""
    changed = [d for d in schema if belief.get(d) and belief.get(d) != prev_belief.get(d)]
    if changed:
        return changed[-1]
    if prev_active is not None:
        return prev_active
    present = [d for d in schema if belief.get(d)]
    return present[-1] if present else next(iter(schema))


def db_count(constraints: Mapping[str, str], table: Sequence[Mapping]) -> int:
    return sum(1 for row in table if all(row.get(s) == v for s, v in constraints.items()))


def db_matches(constraints: Mapping[str, str], table: Sequence[Mapping]) -> list[Mapping]:
    return [row for row in table if all(row.get(s) == v for s, v in constraints.items())]


def db_query(belief_state: Mapping, db_tables: Mapping, domain: str | None = None) -> str:
    """Bucket token for the number of rows matching the active domain's constraints."""
    if domain is None:
        domains = [d for d in belief_state if belief_state[d]]
        if not domains:
            raise CorpusError("empty belief state: pass the active domain explicitly")
        domain = domains[-1]
    if domain not in db_tables:
        raise CorpusError(f"unknown domain {domain!r}")
    table = db_tables[domain]
    constraints = belief_state.get(domain, {})
    for slot in constraints:
        if table and slot not in table[0]:
            raise CorpusError(f"slot {slot!r} is not a column of the {domain} table")
    return DB_TOKENS[min(db_count(constraints, table), 4)]


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


@dataclass
class CorpusSpec:
    domains: list
    dialogues_per_combination: int | dict = 8
    combinations: list | None = None
    db_rows: int = 20
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.domains, (list, tuple)) or len(self.domains) < 2:
            raise CorpusError("domains: at least 2 domains are required")
        for d in self.domains:
            if d not in DEFAULT_SCHEMA:
                raise CorpusError(f"domains: unknown domain {d!r}")
        if self.combinations is None:
            singles = [[d] for d in self.domains]
            pairs = [list(p) for p in itertools.combinations(self.domains, 2)]
            self.combinations = singles + pairs
        for combo in self.combinations:
            if not combo or any(d not in self.domains for d in combo) or len(set(combo)) != len(combo):
                raise CorpusError(f"combinations: invalid combination {combo!r}")
        counts = self.counts()
        if any(not isinstance(n, int) or n < 1 for n in counts.values()):
            raise CorpusError("dialogues_per_combination: every combination needs at least 1 dialogue")
        if not isinstance(self.db_rows, int) or not 10 <= self.db_rows <= 30:
            raise CorpusError("db_rows: must be an integer between 10 and 30")

    def counts(self) -> dict:
        keys = ["+".join(c) for c in self.combinations]
        if isinstance(self.dialogues_per_combination, dict):
            missing = [k for k in keys if k not in self.dialogues_per_combination]
            if missing:
                raise CorpusError(f"dialogues_per_combination: no count for {missing[0]!r}")
            return {k: self.dialogues_per_combination[k] for k in keys}
        return {k: self.dialogues_per_combination for k in keys}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CorpusSpec":
        if not isinstance(d, Mapping):
            raise CorpusError("corpus spec must be a mapping")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise CorpusError(f"{sorted(unknown)[0]}: unknown field")
        if "domains" not in d:
            raise CorpusError("domains: required field missing")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _generate_db(schema: Mapping, n_rows: int, rng: RngState) -> dict:
    db = {}
    phone_seen = set()
    for dom in sorted(schema):
        pairs = [f"{a} {b}" for a in _NAME_FIRST for b in _NAME_SECOND[dom]]
        order = rng.permutation(len(pairs))
        rows = []
        for i in range(n_rows):
            row = {"name": pairs[int(order[i])]}
            for slot, values in schema[dom]["informable"].items():
                row[slot] = rng.choice(values)
            while True:
                phone = "01223" + "".join(str(rng.integers(10)) for _ in range(6))
                if phone not in phone_seen:
                    phone_seen.add(phone)
                    break
            row["phone"] = phone
            row["address"] = f"{10 + rng.integers(90)} {rng.choice(_STREETS)}"
            row["postcode"] = f"cb{1 + rng.integers(9)}{rng.integers(10)}{'abcdefghjk'[rng.integers(10)]}{'lmnpqrstwx'[rng.integers(10)]}"
            rows.append(row)
        db[dom] = rows
    return db


class _TurnBuilder:
    """Assembles user utterances token by token so span tags are exact."""

    def __init__(self, schema: Mapping):
        self.tag_index = {t: i for i, t in enumerate(span_tag_names(schema))}
        self.tokens: list[str] = []
        self.tags: list[int] = []

    def words(self, text: str) -> None:
        toks = split_words(text)
        self.tokens += toks
        self.tags += [0] * len(toks)

    def value(self, slot: str, value: str) -> None:
        toks = split_words(value)
        self.tokens += toks
        self.tags += [self.tag_index[f"B-{slot}"]] + [self.tag_index[f"I-{slot}"]] * (len(toks) - 1)

    def phrase(self, template: str, slot: str, value: str) -> None:
        before, after = template.split("{}")
        self.words(before)
        self.value(slot, value)
        self.words(after)

    def text(self) -> str:
        return " ".join(self.tokens)


def _constraint_phrases(b: _TurnBuilder, slots: Sequence[str], constraints: Mapping[str, str]) -> None:
    for slot in slots:
        b.phrase(_SLOT_PHRASES[slot], slot, constraints[slot])


def _generate_dialogue(dialogue_id: str, domains: Sequence[str], schema: Mapping, db: Mapping, rng: RngState) -> Dialogue:
    goal = {}
    for dom in domains:
        row = db[dom][rng.integers(len(db[dom]))]
        constraints = {s: row[s] for s in schema[dom]["informable"]}
        n_req = 1 + rng.integers(len(REQUESTABLE))
        req_order = rng.permutation(len(REQUESTABLE))[:n_req]
        requestables = [r for i, r in enumerate(REQUESTABLE) if i in set(int(x) for x in req_order)]
        goal[dom] = {"constraints": constraints, "requestables": requestables}

    dialogue = Dialogue(dialogue_id, list(domains), goal)
    history: list = []
    belief: dict = {}

    def add_turn(builder: _TurnBuilder, dom: str, action: list, lex_response: str, entities: Mapping) -> None:
        user = builder.text()
        db_state = db_query(belief, db, dom)
        response = delexicalize(lex_response, entities) if entities else lex_response
        user_entities = {s: v for s, v in belief.get(dom, {}).items()}
        turn = DialogueTurn(
            dialogue_id=dialogue_id,
            turn_index=len(dialogue.turns),
            history=[list(p) for p in history],
            user_utterance=user,
            user_delex=delexicalize(user, user_entities) if user_entities else user,
            belief_state={d: dict(s) for d, s in belief.items()},
            active_domain=dom,
            db_state=db_state,
            system_action=action,
            response=response,
            span_tags=list(builder.tags),
            goal=goal,
        )
        dialogue.turns.append(turn)
        history.append([user, response])

    for k, dom in enumerate(domains):
        informable = list(schema[dom]["informable"])
        constraints = goal[dom]["constraints"]
        n_first = 1 + rng.integers(len(informable))
        picked = set(int(i) for i in rng.permutation(len(informable))[:n_first])
        mentioned = [s for i, s in enumerate(informable) if i in picked]
        noun = schema[dom]["noun"]

        b = _TurnBuilder(schema)
        opener = rng.choice(_SWITCH_OPENERS if k else _OPENERS)
        b.words(opener.format(noun))
        _constraint_phrases(b, mentioned, constraints)
        b.words(".")
        belief[dom] = {s: constraints[s] for s in mentioned}

        while True:
            count = db_count(belief[dom], db[dom])
            missing = [s for s in informable if s not in belief[dom]]
            if count > 1 and missing:
                ask = missing[0]
                add_turn(b, dom, [[dom, "request", ask]], _ASK_SLOT[ask], {})
                b = _TurnBuilder(schema)
                b.phrase(rng.choice(_ANSWER_TEMPLATES).format(_SLOT_PHRASES[ask]), ask, constraints[ask])
                belief[dom][ask] = constraints[ask]
                continue
            offered = db_matches(belief[dom], db[dom])[0]
            entities = {"name": offered["name"], **{s: offered[s] for s in informable}}
            action = [[dom, "offer", "name"]] + [[dom, "offer", s] for s in informable]
            add_turn(b, dom, action, _OFFER[dom].format(**entities), entities)
            break

        reqs = goal[dom]["requestables"]
        b = _TurnBuilder(schema)
        b.words(rng.choice(_REQUEST_TEMPLATES).format(" and ".join(_REQUEST_WORDS[r] for r in reqs)))
        entities = {r: offered[r] for r in reqs}
        lex = " and ".join(_INFO_PARTS[r].format(offered[r]) for r in reqs) + " ."
        add_turn(b, dom, [[dom, "inform", r] for r in reqs], lex, entities)

    b = _TurnBuilder(schema)
    b.words(rng.choice(_BYE_TEMPLATES))
    add_turn(b, domains[-1], [["general", "bye", "none"]], _BYE_RESPONSE, {})
    return dialogue


def split_counts(n: int) -> tuple[int, int, int]:
    """80/10/10: train and dev rounded down, the rest goes to test."""
    n_train = (8 * n) // 10
    n_dev = n // 10
    return n_train, n_dev, n - n_train - n_dev


def generate_corpus(spec: CorpusSpec | Mapping, seed: int | None = None) -> Corpus:
    if not isinstance(spec, CorpusSpec):
        spec = CorpusSpec.from_dict(spec)
    seed = spec.seed if seed is None else seed
    root = RngState(seed)
    schema = canonical_schema({d: DEFAULT_SCHEMA[d] for d in spec.domains})
    validate_schema(schema)
    db = _generate_db(schema, spec.db_rows, root.spawn("db"))
    dialog_rng = root.spawn("dialogues")
    dialogues = []
    for combo, count in zip(spec.combinations, spec.counts().values()):
        for i in range(count):
            did = f"{'+'.join(combo)}-{i:04d}"
            dialogues.append(_generate_dialogue(did, combo, schema, db, dialog_rng))
    dialogues.sort(key=lambda d: d.dialogue_id)
    order = root.spawn("splits").permutation(len(dialogues))
    ids = [dialogues[int(i)].dialogue_id for i in order]
    n_train, n_dev, _ = split_counts(len(ids))
    splits = {
        "train": sorted(ids[:n_train]),
        "dev": sorted(ids[n_train : n_train + n_dev]),
        "test": sorted(ids[n_train + n_dev :]),
    }
    vocab = Vocab.build(corpus_texts(dialogues, schema))
    return Corpus(dialogues, splits, schema, db, vocab)


def corpus_texts(dialogues: Iterable[Dialogue], schema: Mapping) -> Iterable[str]:
    """Every string the tokenizer has to cover."""
    yield " ".join(f"[{d}]" for d in schema) + " [general]"
    yield " ".join(slot_types(schema)) + " name " + " ".join(REQUESTABLE)
    yield " ".join(sorted(placeholder_inventory(schema)))
    for d in dialogues:
        for t in d.turns:
            yield t.user_utterance
            yield t.user_delex
            yield t.response
            yield " ".join(belief_tokens(t.belief_state, schema))
            yield " ".join(action_tokens(t.system_action))


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def validate_turn(turn: DialogueTurn, schema: Mapping) -> list[str]:
    """Return invariant violations (empty when the turn is valid)."""
    problems = []
    inventory = placeholder_inventory(schema)
    for tok in split_words(turn.response):
        if tok.startswith("[value_") and tok not in inventory:
            problems.append(f"unknown placeholder {tok}")
    if len(turn.span_tags) != len(split_words(turn.user_utterance)):
        problems.append("span_tags length differs from tokenized user utterance")
    n_tags = len(span_tag_names(schema))
    if any(not 0 <= t < n_tags for t in turn.span_tags):
        problems.append("span tag id out of range")
    for dom, slots in turn.belief_state.items():
        if dom not in schema:
            problems.append(f"belief domain {dom} not in schema")
            continue
        for slot in slots:
            if slot not in schema[dom]["informable"]:
                problems.append(f"belief slot {dom}.{slot} not in schema")
    if turn.db_state not in DB_TOKENS:
        problems.append(f"bad db_state {turn.db_state}")
    return problems


def validate_corpus(corpus: Corpus) -> list[str]:
    problems = []
    all_ids = [d.dialogue_id for d in corpus.dialogues]
    seen = set()
    for name in SPLITS:
        ids = set(corpus.splits.get(name, []))
        if ids & seen:
            problems.append(f"split {name} overlaps another split")
        seen |= ids
    if seen != set(all_ids):
        problems.append("splits do not cover the dialogues exactly")
    for d in corpus.dialogues:
        for t in d.turns:
            problems += [f"{d.dialogue_id}/{t.turn_index}: {p}" for p in validate_turn(t, corpus.schema)]
    for text in corpus_texts(corpus.dialogues, corpus.schema):
        for tok in split_words(text):
            if tok not in corpus.vocab:
                problems.append(f"token {tok!r} missing from vocabulary")
    return problems


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

CORPUS_FILES = ("train.json", "dev.json", "test.json", "schema.json", "vocab.txt")


def _dump(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def save_corpus(corpus: Corpus, directory) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for name in SPLITS:
        path = os.path.join(directory, f"{name}.json")
        _dump({"split": name, "dialogues": [d.to_dict() for d in corpus.split(name)]}, path)
        paths.append(path)
    path = os.path.join(directory, "schema.json")
    _dump({"schema": corpus.schema, "db": corpus.db}, path)
    paths.append(path)
    path = os.path.join(directory, "vocab.txt")
    corpus.vocab.save(path)
    paths.append(path)
    return paths


def load_corpus(directory) -> Corpus:
    for fname in CORPUS_FILES:
        if not os.path.exists(os.path.join(directory, fname)):
            raise CorpusError(f"corpus directory {directory} lacks {fname}")
    with open(os.path.join(directory, "schema.json")) as fh:
        meta = json.load(fh)
    dialogues, splits = [], {}
    for name in SPLITS:
        with open(os.path.join(directory, f"{name}.json")) as fh:
            doc = json.load(fh)
        ds = [Dialogue.from_dict(d) for d in doc["dialogues"]]
        splits[name] = [d.dialogue_id for d in ds]
        dialogues += ds
    dialogues.sort(key=lambda d: d.dialogue_id)
    vocab = Vocab.load(os.path.join(directory, "vocab.txt"))
    return Corpus(dialogues, splits, canonical_schema(meta["schema"]), meta["db"], vocab)


def corpus_hash(directory) -> str:
    h = hashlib.sha256()
    for fname in CORPUS_FILES:
        with open(os.path.join(directory, fname), "rb") as fh:
            h.update(fname.encode())
            h.update(fh.read())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# distractors and model sequences
# ---------------------------------------------------------------------------


def sample_distractor(corpus: Corpus, turn: DialogueTurn, rng: RngState, max_retries: int = 1000) -> str:
    """Uniform draw from training responses that differs string-wise from ``turn.response``."""
    pool = corpus.response_pool
    if not any(r != turn.response for r in pool):
        raise CorpusError("no distractor differs from the ground-truth response")
    for _ in range(max_retries):
        candidate = pool[rng.integers(len(pool))]
        if candidate != turn.response:
            return candidate
    raise CorpusError(f"no distinct distractor after {max_retries} draws")


def context_tokens(history: Sequence, user_utterance: str) -> tuple[list[list[str]], list[str]]:
    """Per-history-turn token segments and the current user segment."""
    segs = [[SOS_U, *split_words(u), EOS_U, SOS_R, *split_words(r), EOS_R] for u, r in history]
    return segs, [SOS_U, *split_words(user_utterance), EOS_U]


def fit_context(history_segs: list[list[str]], user_seg: list[str], budget: int) -> tuple[list[str], int]:
    """Drop the oldest history turns until the context fits ``budget``.

    Returns the context tokens and the offset of the user segment.
    """
    segs = list(history_segs)
    while segs and sum(map(len, segs)) + len(user_seg) > budget:
        segs.pop(0)
    if len(user_seg) > budget:
        logger.warning("user utterance of %d tokens truncated from the left to %d", len(user_seg), budget)
        user_seg = user_seg[len(user_seg) - budget :]
    ctx = [t for s in segs for t in s]
    return ctx + user_seg, len(ctx)


# tokens kept free after the context for belief, response or candidate sequences
CONTEXT_RESERVE = 32


@dataclass
class TurnSequences:
    """Token-id sequences for one training turn."""

    key: tuple
    context: list
    span_tags: list
    span_mask: list
    belief_target: list
    encoder_input_resp: list
    resp_target: list
    select_truth: list | None = None
    select_distractor: list | None = None


def build_sequences(
    turn: DialogueTurn,
    vocab: Vocab,
    schema: Mapping,
    max_len: int,
    distractor: str | None = None,
) -> TurnSequences:
    belief = belief_tokens(turn.belief_state, schema)
    resp = action_tokens(turn.system_action) + [SOS_R, *split_words(turn.response), EOS_R]
    truth = [SOS_R, *split_words(turn.response), EOS_R]
    dis = [SOS_R, *split_words(distractor), EOS_R] if distractor is not None else []
    history_segs, user_seg = context_tokens(turn.history, turn.user_utterance)
    budget = max_len - max(CONTEXT_RESERVE, len(belief) + 1, len(truth), len(dis))
    ctx, offset = fit_context(history_segs, user_seg, budget)
    n_user = len(ctx) - offset
    tags = [0] * len(ctx)
    mask = [False] * len(ctx)
    user_words = split_words(turn.user_utterance)
    if n_user == len(user_words) + 2:
        for i, t in enumerate(turn.span_tags):
            tags[offset + 1 + i] = t
            mask[offset + 1 + i] = True
    ctx_ids = vocab.encode_tokens(ctx)
    return TurnSequences(
        key=(turn.dialogue_id, turn.turn_index),
        context=ctx_ids,
        span_tags=tags,
        span_mask=mask,
        belief_target=vocab.encode_tokens(belief),
        encoder_input_resp=ctx_ids + vocab.encode_tokens(belief + [turn.db_state]),
        resp_target=vocab.encode_tokens(resp),
        select_truth=ctx_ids + vocab.encode_tokens(truth),
        select_distractor=(ctx_ids + vocab.encode_tokens(dis)) if distractor is not None else None,
    )
