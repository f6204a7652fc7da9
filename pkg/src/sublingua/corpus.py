"""Deterministic synthetic multilingual data generator.

A shared abstract grammar (Markov chain over symbol categories) is rendered
into per-language surface forms through bijective lexicons and invertible
reorder rules. The three task types are masked-token prediction (MLM),
per-token category tagging (TAG), and 3-way sentence-pair classification
(CLS). Labels depend only on the abstract sentence, never on the language.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .numerics import ContractViolation, Rng

# Special surface token ids; regular tokens start at NUM_SPECIALS.
PAD, MASK, SEP, UNK = 0, 1, 2, 3
NUM_SPECIALS = 4

# Symbol categories. Symbols are partitioned into contiguous equal blocks.
ENTITY, ACTION, MODIFIER, FILLER = 0, 1, 2, 3
CATEGORY_NAMES = ("ENTITY", "ACTION", "MODIFIER", "FILLER")
NUM_CATEGORIES = 4

MLM, TAG, CLS = "mlm", "tag", "cls"
TASKS = (MLM, TAG, CLS)

MLM_MASK_RATE = 0.15
PARAPHRASE_RESAMPLE_PROB = 0.3


@dataclass(frozen=True)
class AbstractGrammar:
    """Language-independent sentence source.

    ``category_transition`` is a row-stochastic matrix over categories;
    ``antonym_pairing`` is a fixed-point-free involution over ACTION symbols.
    """

    symbol_count: int = 64
    category_transition: np.ndarray = None
    antonym_pairing: dict = None
    seed: int = 0

    def __post_init__(self):
        if self.symbol_count % NUM_CATEGORIES != 0:
            raise ContractViolation("symbol_count must be divisible by 4")
        if self.category_transition is None:
            object.__setattr__(self, "category_transition",
                               default_transition(self.seed))
        t = np.asarray(self.category_transition, dtype=np.float64)
        if t.shape != (NUM_CATEGORIES, NUM_CATEGORIES):
            raise ContractViolation("transition matrix must be 4x4")
        if np.abs(t.sum(axis=1) - 1.0).max() > 1e-12:
            raise ContractViolation("transition rows must sum to 1")
        object.__setattr__(self, "category_transition", t)
        if self.antonym_pairing is None:
            object.__setattr__(self, "antonym_pairing",
                               default_antonyms(self.symbol_count))
        for a, b in self.antonym_pairing.items():
            if a == b or self.antonym_pairing.get(b) != a:
                raise ContractViolation("antonym pairing must be a "
                                        "fixed-point-free involution")
            if self.category_of(a) != ACTION or self.category_of(b) != ACTION:
                raise ContractViolation("antonyms must be ACTION symbols")

    @property
    def symbols_per_category(self) -> int:
        return self.symbol_count // NUM_CATEGORIES

    def category_of(self, symbol: int) -> int:
        return symbol // self.symbols_per_category

    def symbols_in(self, category: int) -> range:
        k = self.symbols_per_category
        return range(category * k, (category + 1) * k)

    def stationary(self) -> np.ndarray:
        """Stationary distribution of the category chain (power iteration)."""
        pi = np.full(NUM_CATEGORIES, 1.0 / NUM_CATEGORIES)
        for _ in range(10_000):
            nxt = pi @ self.category_transition
            if np.abs(nxt - pi).max() < 1e-15:
                break
            pi = nxt
        return pi / pi.sum()


def default_transition(seed: int) -> np.ndarray:
    """Seeded strictly-positive stochastic matrix (rows sum to 1 exactly)."""
    rng = Rng(seed).child("grammar-transition")
    w = np.array([[0.2 + rng.next_float() for _ in range(NUM_CATEGORIES)]
                  for _ in range(NUM_CATEGORIES)])
    return w / w.sum(axis=1, keepdims=True)


def default_antonyms(symbol_count: int) -> dict:
    """Pair consecutive ACTION symbols: a0<->a1, a2<->a3, ..."""
    k = symbol_count // NUM_CATEGORIES
    base = ACTION * k
    pairs = {}
    for i in range(0, k - 1, 2):
        pairs[base + i] = base + i + 1
        pairs[base + i + 1] = base + i
    return pairs


@dataclass(frozen=True)
class LanguageSpec:
    """Surface realization of the grammar for one language.

    ``lexicon`` maps abstract symbols to surface token ids bijectively.
    ``reorder_rule`` is an ordered list of category-pair swap directives: each
    directive swaps the tokens at every even adjacent position pair whose
    (unordered) category pair matches, which makes each pass an involution
    and the whole rule invertible.
    """

    language_id: str
    lexicon: dict
    reorder_rule: tuple
    shared_token_fraction: float

    def __post_init__(self):
        if len(set(self.lexicon.values())) != len(self.lexicon):
            raise ContractViolation("lexicon must be bijective")
        object.__setattr__(self, "_inverse",
                           {v: k for k, v in self.lexicon.items()})

    def inverse_lexicon(self) -> dict:
        return self._inverse


def generate_language(grammar: AbstractGrammar, language_index: int,
                      shared_fraction: float, seed: int) -> LanguageSpec:
    """Build the lexicon and reorder rule for one language.

    Exactly ``floor(shared_fraction * A)`` symbols (a fixed set chosen from
    the grammar seed) render to the same surface ids in every language; the
    remaining symbols get language-private ids. Language 0 is the pivot and
    carries no reorder rule.
    """
    if not (0 <= language_index < 16):
        raise ContractViolation("language_index must be in [0, 16)")
    if not (0.0 <= shared_fraction <= 1.0):
        raise ContractViolation("shared fraction must be in [0, 1]")
    a = grammar.symbol_count
    n_shared = math.floor(shared_fraction * a)
    shared_syms = list(range(a))
    Rng(grammar.seed).child("shared-symbols").shuffle(shared_syms)
    shared_syms = sorted(shared_syms[:n_shared])
    shared_set = set(shared_syms)

    # Shared symbols occupy the id block right after the specials; private
    # symbols follow, one block per language index.
    lexicon = {}
    for rank, sym in enumerate(shared_syms):
        lexicon[sym] = NUM_SPECIALS + rank
    private_syms = [s for s in range(a) if s not in shared_set]
    base = NUM_SPECIALS + n_shared + language_index * len(private_syms)
    order = list(private_syms)
    Rng(seed).child("lexicon", language_index).shuffle(order)
    for rank, sym in enumerate(order):
        lexicon[sym] = base + rank

    # Full vocabulary sharing means the "languages" coincide, so no reorder
    # rule either; language 0 is the pivot and stays in canonical order.
    if language_index == 0 or shared_fraction >= 1.0:
        reorder = ()
    else:
        rng = Rng(seed).child("reorder", language_index)
        cats = [ENTITY, ACTION, MODIFIER, FILLER]
        reorder = tuple((cats[rng.randint(4)], cats[rng.randint(4)])
                        for _ in range(1 + rng.randint(2)))
    return LanguageSpec(language_id=f"L{language_index}", lexicon=lexicon,
                        reorder_rule=reorder,
                        shared_token_fraction=shared_fraction)


def vocab_size(grammar: AbstractGrammar, languages: list) -> int:
    top = NUM_SPECIALS
    for lang in languages:
        top = max(top, max(lang.lexicon.values()) + 1)
    return top


def sample_abstract_sentence(grammar: AbstractGrammar, length: int, rng: Rng,
                             start_category: int | None = None) -> list:
    """Markov sample of abstract symbols; uniform symbol within category."""
    if not (4 <= length <= 32):
        raise ContractViolation("sentence length must be in [4, 32]")
    t = grammar.category_transition
    if start_category is None:
        cat = rng.choice_weighted(grammar.stationary())
    else:
        cat = start_category
    k = grammar.symbols_per_category
    out = []
    for _ in range(length):
        out.append(cat * k + rng.randint(k))
        cat = rng.choice_weighted(t[cat])
    return out


def _reorder_permutation(categories: list, rule: tuple) -> list:
    """Composition of the rule's even-boundary swap passes as a permutation."""
    perm = list(range(len(categories)))
    for a, b in rule:
        for i in range(0, len(perm) - 1, 2):
            ca, cb = categories[perm[i]], categories[perm[i + 1]]
            if {ca, cb} == {a, b}:
                perm[i], perm[i + 1] = perm[i + 1], perm[i]
    return perm


def render(abstract_sentence: list, grammar: AbstractGrammar,
           lang: LanguageSpec) -> list:
    """Lexicon substitution followed by the language's reorder rule."""
    for sym in abstract_sentence:
        if not (0 <= sym < grammar.symbol_count):
            raise ContractViolation(f"symbol {sym} outside grammar range")
    cats = [grammar.category_of(s) for s in abstract_sentence]
    perm = _reorder_permutation(cats, lang.reorder_rule)
    return [lang.lexicon[abstract_sentence[p]] for p in perm]


def inverse_render(surface_tokens: list, grammar: AbstractGrammar,
                   lang: LanguageSpec) -> list:
    """Recover the abstract sentence from its rendering.

    Each reorder pass is an involution at fixed positions, so applying the
    passes in reverse order undoes the permutation exactly.
    """
    inv = lang.inverse_lexicon()
    syms = [inv[t] for t in surface_tokens]
    for a, b in reversed(lang.reorder_rule):
        for i in range(0, len(syms) - 1, 2):
            ca = grammar.category_of(syms[i])
            cb = grammar.category_of(syms[i + 1])
            if {ca, cb} == {a, b}:
                syms[i], syms[i + 1] = syms[i + 1], syms[i]
    return syms


def abstract_id(abstract_sentence: list) -> int:
    """Stable 64-bit id of an abstract sentence."""
    h = 0xCBF29CE484222325
    for s in abstract_sentence:
        h = ((h ^ (s + 1)) * 0x100000001B3) & ((1 << 64) - 1)
    return h


@dataclass(frozen=True)
class Example:
    task_kind: str
    surface_tokens: tuple
    labels: tuple  # MLM: ((pos, original_token), ...); TAG: per-token cats; CLS: (label,)
    abstract_source_id: int

    def __post_init__(self):
        if len(self.surface_tokens) > 32:
            raise ContractViolation("surface sequence longer than 32 tokens")
        if self.task_kind == TAG and len(self.labels) != len(self.surface_tokens):
            raise ContractViolation("TAG labels must align with tokens")
        if self.task_kind == CLS and self.labels[0] not in (0, 1, 2):
            raise ContractViolation("CLS label must be 0, 1 or 2")


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    valid: tuple
    language_id: str
    task_kind: str
    generation_seed: int


def _mlm_example(sentence: list, grammar: AbstractGrammar, lang: LanguageSpec,
                 rng: Rng) -> Example:
    tokens = render(sentence, grammar, lang)
    n_mask = math.ceil(MLM_MASK_RATE * len(tokens))
    positions = list(range(len(tokens)))
    rng.shuffle(positions)
    masked = sorted(positions[:n_mask])
    inp = list(tokens)
    labels = []
    for p in masked:
        labels.append((p, tokens[p]))
        inp[p] = MASK
    return Example(MLM, tuple(inp), tuple(labels), abstract_id(sentence))


def _tag_example(sentence: list, grammar: AbstractGrammar,
                 lang: LanguageSpec) -> Example:
    cats = [grammar.category_of(s) for s in sentence]
    perm = _reorder_permutation(cats, lang.reorder_rule)
    tokens = [lang.lexicon[sentence[p]] for p in perm]
    labels = [cats[p] for p in perm]
    return Example(TAG, tuple(tokens), tuple(labels), abstract_id(sentence))


def _paraphrase(sentence: list, grammar: AbstractGrammar, rng: Rng) -> list:
    out = []
    for sym in sentence:
        cat = grammar.category_of(sym)
        if cat != ACTION and rng.next_float() < PARAPHRASE_RESAMPLE_PROB:
            k = grammar.symbols_per_category
            out.append(cat * k + rng.randint(k))
        else:
            out.append(sym)
    return out


def _sample_with_action(grammar: AbstractGrammar, length: int,
                        rng: Rng) -> list:
    """Sentence guaranteed to contain at least one ACTION symbol."""
    while True:
        s = sample_abstract_sentence(grammar, length, rng)
        if any(grammar.category_of(x) == ACTION for x in s):
            return s


def _cls_example(grammar: AbstractGrammar, lang: LanguageSpec, length: int,
                 label: int, rng: Rng) -> Example:
    premise = _sample_with_action(grammar, length, rng)
    if label == 1:
        hypothesis = _sample_with_action(grammar, length, rng)
    else:
        hypothesis = _paraphrase(premise, grammar, rng)
        if label == 2:
            hypothesis = [grammar.antonym_pairing.get(s, s)
                          if grammar.category_of(s) == ACTION else s
                          for s in hypothesis]
    tokens = (tuple(render(premise, grammar, lang)) + (SEP,)
              + tuple(render(hypothesis, grammar, lang)))
    return Example(CLS, tokens, (label,), abstract_id(premise))


def _gen_examples(grammar: AbstractGrammar, lang: LanguageSpec,
                  task_kind: str, count: int, length: int, rng: Rng,
                  taken: set) -> list:
    """Generate ``count`` examples whose abstract ids avoid ``taken``."""
    out = []
    i = 0
    while len(out) < count:
        sub = rng.child("example", i)
        i += 1
        if task_kind == CLS:
            ex = _cls_example(grammar, lang, length, len(out) % 3, sub)
        else:
            sent = sample_abstract_sentence(grammar, length, sub)
            if task_kind == MLM:
                ex = _mlm_example(sent, grammar, lang, sub)
            else:
                ex = _tag_example(sent, grammar, lang)
        if ex.abstract_source_id in taken:
            continue
        taken.add(ex.abstract_source_id)
        out.append(ex)
    return out


def build_split(grammar: AbstractGrammar, lang: LanguageSpec, task_kind: str,
                train_size: int, valid_size: int, seed: int,
                sentence_length: int = 16) -> DatasetSplit:
    """Deterministic task split; train/valid disjoint by abstract id."""
    if task_kind not in TASKS:
        raise ContractViolation(f"unknown task kind {task_kind!r}")
    if train_size <= 0 or valid_size <= 0:
        raise ContractViolation("split sizes must be positive")
    if task_kind == CLS:
        # premise + SEP + hypothesis must fit in 32 tokens
        sentence_length = min(sentence_length, 15)
    # The abstract stream depends on (seed, task) but not on the language,
    # so one seed yields parallel splits across languages.
    rng = Rng(seed).child("split", task_kind)
    taken: set = set()
    train = _gen_examples(grammar, lang, task_kind, train_size,
                          sentence_length, rng.child("train"), taken)
    valid = _gen_examples(grammar, lang, task_kind, valid_size,
                          sentence_length, rng.child("valid"), taken)
    return DatasetSplit(tuple(train), tuple(valid), lang.language_id,
                        task_kind, seed)


def build_pretraining_mix(grammar: AbstractGrammar, languages: list,
                          per_language: int, seed: int,
                          valid_per_language: int = 0,
                          sentence_length: int = 16) -> DatasetSplit:
    """Joint MLM mix over all languages, interleaved round-robin."""
    if len(languages) < 1:
        raise ContractViolation("need at least one language")
    splits = [build_split(grammar, lang, MLM, per_language,
                          max(valid_per_language, 1), seed, sentence_length)
              for lang in languages]
    train = []
    for i in range(per_language):
        for s in splits:
            train.append(s.train[i])
    valid = []
    if valid_per_language > 0:
        for i in range(valid_per_language):
            for s in splits:
                valid.append(s.valid[i])
    lang_id = "+".join(lang.language_id for lang in languages)
    return DatasetSplit(tuple(train), tuple(valid), lang_id, MLM, seed)


def build_combined_task_split(splits: list, keep_fraction: float) -> DatasetSplit:
    """Concatenate the head of each split's train set and reshuffle.

    With ``keep_fraction = 1/len(splits)`` the combined train set matches a
    single split's size. Validation sets are concatenated in full.
    """
    if not splits:
        raise ContractViolation("need at least one split")
    if not (0.0 < keep_fraction <= 1.0):
        raise ContractViolation("keep_fraction must be in (0, 1]")
    kinds = {s.task_kind for s in splits}
    if len(kinds) != 1:
        raise ContractViolation("splits must share one task kind")
    train = []
    for s in splits:
        train.extend(s.train[: math.floor(keep_fraction * len(s.train))])
    seed = splits[0].generation_seed
    Rng(seed).child("combined-shuffle").shuffle(train)
    valid = [e for s in splits for e in s.valid]
    lang_id = "+".join(s.language_id for s in splits)
    return DatasetSplit(tuple(train), tuple(valid), lang_id,
                        splits[0].task_kind, seed)


def export_jsonl(split: DatasetSplit, path) -> None:
    """One example per line: task, language, tokens, labels, abstract id."""
    with open(path, "w", encoding="utf-8") as fh:
        for part, examples in (("train", split.train), ("valid", split.valid)):
            for ex in examples:
                fh.write(json.dumps({
                    "task": ex.task_kind,
                    "language": split.language_id,
                    "split": part,
                    "tokens": list(ex.surface_tokens),
                    "labels": [list(l) if isinstance(l, tuple) else l
                               for l in ex.labels],
                    "abstract_id": ex.abstract_source_id,
                }) + "\n")
