"""Deterministic synthetic NLU corpora with Zipfian word frequencies.

Words are split into role pools (carrier words, domain keywords, intent
keywords, slot values per slot type, out-of-domain words). Templates place
role slots in a sequence (with ``shuffle_slots`` the slot types of a
template trade positions on every draw); instantiating a template samples one word per
slot from its pool with probability proportional to ``rank ** -s``, where
``s`` is ``zipf_exponent`` for carrier words and the steeper
``value_zipf_exponent`` for the label-bearing pools, which gives those pools
a tail of words seen only a few times in training.

Corpus text format, one utterance per line after ``#`` metadata lines::

    domain<TAB>intent<TAB>tok:tag tok:tag ...
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .embio import UNK, EmbeddingMatrix, Vocabulary, atomic_write
from .errors import ParseError, SpecError
from .nlu import OOD, OOD_INTENT, OTHER, TagSchema, Utterance

SPLITS = ("train", "validation", "test")
_FORBIDDEN = (":", " ", "\t", "\n")
# share of the non-carrier words given to domain, intent, slot-value and OOD pools
POOL_WEIGHTS = (0.05, 0.15, 0.65, 0.15)


@dataclass
class CorpusSpec:
    seed: int = 0
    n_domains: int = 5
    intents_per_domain: int = 4
    n_slot_tags: int = 12
    templates_per_intent: int = 4
    slot_types_per_intent: int = 3
    vocab_size: int = 2000
    zipf_exponent: float = 1.1
    value_zipf_exponent: float = 1.6
    carrier_share: float = 0.2
    n_train: int = 20000
    n_validation: int = 2000
    n_test: int = 2000
    ood_fraction: float = 0.1
    label_noise: float = 0.02
    shuffle_slots: bool = True

    def __post_init__(self):
        if self.n_domains < 2:
            raise SpecError("need at least one supported domain besides OOD")
        if self.n_slot_tags < 2:
            raise SpecError("need at least one slot tag besides Other")
        if not 0.0 <= self.ood_fraction < 1.0:
            raise SpecError(f"ood_fraction must be in [0, 1), got {self.ood_fraction}")
        if not 0.0 <= self.label_noise < 1.0:
            raise SpecError(f"label_noise must be in [0, 1), got {self.label_noise}")
        if self.zipf_exponent <= 0 or self.value_zipf_exponent <= 0:
            raise SpecError("Zipf exponents must be positive")
        if self.intents_per_domain < 1 or self.templates_per_intent < 1:
            raise SpecError("need at least one intent and one template")


@dataclass
class Corpus:
    utterances: list
    schema: TagSchema
    vocab: Vocabulary
    split: str = "train"

    def __len__(self):
        return len(self.utterances)

    def token_counts(self) -> np.ndarray:
        counts = np.zeros(len(self.vocab), dtype=np.int64)
        for u in self.utterances:
            np.add.at(counts, list(u.tokens), 1)
        return counts


@dataclass
class Lexicon:
    """Role pools as lists of vocabulary ids, each ordered by Zipf rank."""

    vocab: Vocabulary
    schema: TagSchema
    carrier: list
    ood: list
    domain_words: dict = field(default_factory=dict)   # domain id -> ids
    intent_words: dict = field(default_factory=dict)   # intent id -> ids
    slot_words: dict = field(default_factory=dict)     # tag id -> ids
    intent_domain: dict = field(default_factory=dict)  # intent id -> domain id
    intent_slots: dict = field(default_factory=dict)   # intent id -> tag ids
    templates: dict = field(default_factory=dict)      # intent id -> list of templates


def zipf_probs(n: int, s: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -s
    return w / w.sum()


def _schema(spec: CorpusSpec) -> TagSchema:
    domains = [OOD] + [f"Dom{d}" for d in range(1, spec.n_domains)]
    intents = [OOD_INTENT] + [f"Dom{d}Int{i}" for d in range(1, spec.n_domains)
                              for i in range(1, spec.intents_per_domain + 1)]
    tags = [OTHER] + [f"Slot{t}" for t in range(1, spec.n_slot_tags)]
    return TagSchema(domains, intents, tags)


def _split_sizes(total: int, weights) -> list[int]:
    raw = np.asarray(weights, dtype=np.float64) * total / np.sum(weights)
    sizes = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - sizes), kind="stable")[: total - sizes.sum()]:
        sizes[i] += 1
    return sizes.tolist()


def parse_template(text: str, schema: TagSchema) -> tuple:
    """``"fill int slot:Slot3 dom"`` -> element tuple; unknown tags raise :class:`SpecError`."""
    out = []
    for part in text.split():
        if part in ("fill", "int", "dom"):
            out.append((part, None))
        elif part.startswith("slot:"):
            tag = part[5:]
            if tag not in schema.tags or tag == OTHER:
                raise SpecError(f"template references undeclared slot tag {tag!r}")
            out.append(("slot", schema.tags.index(tag)))
        else:
            raise SpecError(f"bad template element {part!r}")
    if not out:
        raise SpecError("empty template")
    return tuple(out)


def build_lexicon(spec: CorpusSpec, templates: dict | None = None, words: list | None = None) -> Lexicon:
    """Assign words to role pools and draw templates, all from ``spec.seed``.

    ``templates`` optionally maps intent names to lists of template strings;
    ``words`` optionally supplies the token strings (``vocab_size - 1`` of them).
    """
    rng = nx.make_rng(spec.seed * 7919 + 1)
    schema = _schema(spec)
    n_words = spec.vocab_size - 1
    if words is None:
        words = [f"w{i:04d}" for i in range(1, n_words + 1)]
    words = list(words)
    if len(words) != n_words:
        raise SpecError(f"need {n_words} words, got {len(words)}")
    for w in words:
        if any(ch in w for ch in _FORBIDDEN) or not w or w == UNK:
            raise SpecError(f"token {w!r} is not allowed in the corpus format")
    vocab = Vocabulary([UNK] + words)

    n_dom = spec.n_domains - 1
    n_int = n_dom * spec.intents_per_domain
    n_types = spec.n_slot_tags - 1
    n_carrier = int(round(spec.carrier_share * n_words))
    rest = n_words - n_carrier
    pools = _split_sizes(rest, list(POOL_WEIGHTS))
    if min(pools[0] // n_dom, pools[1] // n_int, pools[2] // n_types, pools[3], n_carrier) < 2:
        raise SpecError("vocab_size too small for the requested label inventory")
    ids = rng.permutation(np.arange(1, spec.vocab_size)).tolist()

    def take(n):
        out = ids[:n]
        del ids[:n]
        return out

    lex = Lexicon(vocab=vocab, schema=schema, carrier=take(n_carrier), ood=[])
    dom_sizes = _split_sizes(pools[0], [1] * n_dom)
    int_sizes = _split_sizes(pools[1], [1] * n_int)
    slot_sizes = _split_sizes(pools[2], [1] * n_types)
    for d in range(n_dom):
        lex.domain_words[d + 1] = take(dom_sizes[d])
    for i in range(n_int):
        lex.intent_words[i + 1] = take(int_sizes[i])
        lex.intent_domain[i + 1] = 1 + i // spec.intents_per_domain
    for t in range(n_types):
        lex.slot_words[t + 1] = take(slot_sizes[t])
    lex.ood = take(len(ids))

    # each domain owns a window of slot types; intents pick from their domain's window
    per_dom = max(1, min(n_types, spec.slot_types_per_intent + 1))
    for i in range(1, n_int + 1):
        d = lex.intent_domain[i]
        window = [1 + ((d - 1) * per_dom + j) % n_types for j in range(per_dom)]
        k = min(spec.slot_types_per_intent, len(window))
        lex.intent_slots[i] = sorted(rng.choice(window, size=k, replace=False).tolist())

    for i in range(1, n_int + 1):
        name = schema.intents[i]
        if templates and name in templates:
            lex.templates[i] = [parse_template(t, schema) for t in templates[name]]
            continue
        lex.templates[i] = [_random_template(rng, lex.intent_slots[i]) for _ in range(spec.templates_per_intent)]
    if templates:
        unknown = set(templates) - set(schema.intents)
        if unknown:
            raise SpecError(f"templates for unknown intents: {sorted(unknown)}")
    return lex


def _random_template(rng, slot_types) -> tuple:
    n_slots = int(rng.integers(1, len(slot_types) + 1))
    elems = [("int", None)]
    elems += [("slot", int(t)) for t in rng.choice(slot_types, size=n_slots, replace=False)]
    if rng.random() < 0.5:
        elems.append(("dom", None))
    elems += [("fill", None)] * int(rng.integers(1, 4))
    order = rng.permutation(len(elems))
    return tuple(elems[j] for j in order)


class _Sampler:
    def __init__(self, lex: Lexicon, spec: CorpusSpec, rng):
        self.lex, self.spec, self.rng = lex, spec, rng
        self._p = {}

    def word(self, pool: list, carrier: bool = False) -> int:
        n = len(pool)
        s = self.spec.zipf_exponent if carrier else self.spec.value_zipf_exponent
        if (n, s) not in self._p:
            self._p[n, s] = np.cumsum(zipf_probs(n, s))
        r = int(np.searchsorted(self._p[n, s], self.rng.random(), side="right"))
        return pool[min(r, n - 1)]

    def in_domain(self) -> Utterance:
        lex, rng = self.lex, self.rng
        intent = int(rng.integers(1, len(lex.intent_words) + 1))
        domain = lex.intent_domain[intent]
        template = lex.templates[intent][int(rng.integers(len(lex.templates[intent])))]
        if self.spec.shuffle_slots:
            template = self._shuffle_slots(template)
        tokens, tags = [], []
        other = lex.schema.other_tag
        for kind, arg in template:
            if kind == "fill":
                tokens.append(self.word(lex.carrier, carrier=True))
                tags.append(other)
            elif kind == "int":
                tokens.append(self.word(lex.intent_words[intent]))
                tags.append(other)
            elif kind == "dom":
                tokens.append(self.word(lex.domain_words[domain]))
                tags.append(other)
            else:
                tokens.append(self.word(lex.slot_words[arg]))
                tags.append(arg)
        if self.spec.label_noise and rng.random() < self.spec.label_noise:
            siblings = [i for i, d in lex.intent_domain.items() if d == domain and i != intent]
            if siblings:
                intent = int(siblings[int(rng.integers(len(siblings)))])
        return Utterance(tokens, domain, intent, tags)

    def _shuffle_slots(self, template):
        # slot types trade places, so a tag cannot be read off its position
        pos = [j for j, (kind, _) in enumerate(template) if kind == "slot"]
        if len(pos) < 2:
            return template
        args = [template[j][1] for j in pos]
        out = list(template)
        for j, k in zip(pos, self.rng.permutation(len(args))):
            out[j] = ("slot", args[k])
        return tuple(out)

    def out_of_domain(self) -> Utterance:
        lex, rng = self.lex, self.rng
        n = int(rng.integers(3, 9))
        tokens = [self.word(lex.ood) if rng.random() < 0.5 else self.word(lex.carrier, carrier=True) for _ in range(n)]
        if rng.random() < 0.25:
            pools = list(lex.slot_words.values()) + list(lex.intent_words.values())
            tokens[int(rng.integers(n))] = self.word(pools[int(rng.integers(len(pools)))])
        other = lex.schema.other_tag
        return Utterance(tokens, lex.schema.ood_domain, lex.schema.ood_intent, [other] * n)


def generate(spec: CorpusSpec, templates: dict | None = None, words: list | None = None):
    """Return ``(train, validation, test)`` corpora.

    Utterances are unique across all three splits (a repeated token sequence is
    redrawn), so held-out splits never contain a training sentence verbatim.
    """
    lex = build_lexicon(spec, templates, words)
    rng = nx.make_rng(spec.seed * 7919 + 2)
    sampler = _Sampler(lex, spec, rng)
    seen = set()
    out = []
    for split, n in zip(SPLITS, (spec.n_train, spec.n_validation, spec.n_test)):
        utts = []
        while len(utts) < n:
            for _ in range(1000):
                u = sampler.out_of_domain() if rng.random() < spec.ood_fraction else sampler.in_domain()
                if u.tokens not in seen:
                    break
            else:
                raise SpecError("could not draw enough distinct utterances; enlarge the vocabulary")
            seen.add(u.tokens)
            utts.append(u)
        out.append(Corpus(utts, lex.schema, lex.vocab, split))
    return tuple(out)


def pretrained_embeddings(spec: CorpusSpec, dim: int = 50, noise: float = 0.8, scale: float = 1.0,
                          sibling_gap: float = 0.2, intent_spread: float = 0.35,
                          carrier_spread: float = 1.0, templates: dict | None = None,
                          words: list | None = None) -> EmbeddingMatrix:
    """Stand-in for pretrained word vectors: role-clustered Gaussian vectors.

    Words sharing a role (an intent, a domain, a slot type, the carriers)
    scatter around a common centre, and intents of one domain sit within
    ``intent_spread`` of their domain's centre, so vector geometry carries
    most of the label information. Slot types come in sibling pairs whose
    centres differ by ``sibling_gap`` times a standard normal draw; small
    gaps leave the pair separable only through the per-word detail that
    lossy compression blurs.

    The defaults keep the geometry frequency-neutral: frequent roles
    (carriers, intent keywords) are no harder to code than rare ones, so a
    reconstruction-only autoencoder has a flat error profile over frequency.
    ``scale`` multiplies everything; at 1.0 the drift that baseline training
    adds to frequent words is small next to the per-word detail.
    """
    lex = build_lexicon(spec, templates, words)
    rng = nx.make_rng(spec.seed * 7919 + 3)
    W = np.zeros((spec.vocab_size, dim))
    dom_centre = {d: rng.normal(size=dim) for d in lex.domain_words}

    def fill(ids, centre):
        for i in ids:
            W[i] = centre + noise * rng.normal(size=dim)

    for d, ids in lex.domain_words.items():
        fill(ids, dom_centre[d])
    for i, ids in lex.intent_words.items():
        fill(ids, dom_centre[lex.intent_domain[i]] + intent_spread * rng.normal(size=dim))
    pair_centre = {}
    for t, ids in lex.slot_words.items():
        base = pair_centre.setdefault((t - 1) // 2, rng.normal(size=dim))
        fill(ids, base + sibling_gap * rng.normal(size=dim))
    fill(lex.carrier, carrier_spread * rng.normal(size=dim))
    fill(lex.ood, 0.5 * rng.normal(size=dim))
    W *= scale
    W[0] = W[1:].mean(axis=0)
    return EmbeddingMatrix(lex.vocab, W)


# ---------------------------------------------------------------------------
# corpus text format
# ---------------------------------------------------------------------------

def corpus_to_text(corpus: Corpus) -> str:
    s, v = corpus.schema, corpus.vocab
    lines = [f"# split: {corpus.split}",
             "# domains: " + " ".join(s.domains),
             "# intents: " + " ".join(s.intents),
             "# tags: " + " ".join(s.tags),
             "# vocab: " + " ".join(v.tokens)]
    for u in corpus.utterances:
        pairs = " ".join(f"{v.token(t)}:{s.tags[g]}" for t, g in zip(u.tokens, u.slots))
        lines.append(f"{s.domains[u.domain]}\t{s.intents[u.intent]}\t{pairs}")
    return "\n".join(lines) + "\n"


def write_corpus(path, corpus: Corpus):
    atomic_write(path, corpus_to_text(corpus).encode("utf-8"))


def corpus_from_text(text: str, vocab: Vocabulary | None = None) -> Corpus:
    meta = {}
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            meta[key.strip()] = value.split()
            continue
        rows.append((lineno, line))
    for key in ("domains", "intents", "tags"):
        if key not in meta:
            raise ParseError(f"missing '# {key}:' metadata line")
    schema = TagSchema(meta["domains"], meta["intents"], meta["tags"])
    if vocab is None:
        if "vocab" not in meta:
            raise ParseError("missing '# vocab:' metadata line and no vocabulary given")
        vocab = Vocabulary(meta["vocab"])
    dom = {n: i for i, n in enumerate(schema.domains)}
    ints = {n: i for i, n in enumerate(schema.intents)}
    tags = {n: i for i, n in enumerate(schema.tags)}
    utts = []
    for lineno, line in rows:
        fields = line.split("\t")
        if len(fields) != 3:
            raise ParseError("expected domain<TAB>intent<TAB>tokens", line=lineno)
        d, i, body = fields
        if d not in dom or i not in ints:
            raise ParseError(f"unknown domain/intent {d!r}/{i!r}", line=lineno)
        toks, slots = [], []
        for pair in body.split():
            tok, sep, tag = pair.rpartition(":")
            if not sep or not tok or tag not in tags:
                raise ParseError(f"bad token:tag pair {pair!r}", line=lineno)
            toks.append(vocab.index(tok))
            slots.append(tags[tag])
        if not toks:
            raise ParseError("utterance without tokens", line=lineno)
        utts.append(Utterance(toks, dom[d], ints[i], slots))
    split = meta.get("split", ["train"])
    return Corpus(utts, schema, vocab, split[0] if split else "train")


def read_corpus(path, vocab: Vocabulary | None = None) -> Corpus:
    with open(path, encoding="utf-8") as fh:
        return corpus_from_text(fh.read(), vocab)


def label_histograms(corpus: Corpus) -> tuple[dict, dict, dict]:
    dom, ints, tags = {}, {}, {}
    for u in corpus.utterances:
        dom[u.domain] = dom.get(u.domain, 0) + 1
        ints[u.intent] = ints.get(u.intent, 0) + 1
        for t in u.slots:
            tags[t] = tags.get(t, 0) + 1
    return dom, ints, tags


def rank_frequency_slope(counts) -> float:
    """Least-squares slope of log frequency against log rank (negative for Zipf)."""
    c = np.sort(np.asarray(counts, dtype=np.float64))[::-1]
    c = c[c > 0]
    ranks = np.arange(1, c.size + 1, dtype=np.float64)
    slope, _ = np.polyfit(np.log(ranks), np.log(c), 1)
    return float(slope)

