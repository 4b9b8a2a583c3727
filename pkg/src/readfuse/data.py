"""Vocabularies, the toy bilingual task, synthetic external words and scenario simulation."""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK, NULL = "<pad>", "<s>", "</s>", "<unk>", "<null>"
RESERVED = (PAD, BOS, EOS, UNK, NULL)
SCENARIOS = ("dict", "lex", "smt", "bow")


class Vocabulary:
    """Bidirectional token/id map with the reserved tokens at ids 0..4."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)

    pad_id = property(lambda self: 0)
    bos_id = property(lambda self: 1)
    eos_id = property(lambda self: 2)
    unk_id = property(lambda self: 3)
    null_id = property(lambda self: 4)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    @property
    def content_ids(self) -> np.ndarray:
        """Ids of all non-reserved tokens."""
        return np.arange(len(RESERVED), len(self.itos))

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, tokens: Sequence[str]) -> "Vocabulary":
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        return cls(tokens[len(RESERVED):])


UNK_ID = RESERVED.index(UNK)


def build_vocabulary(corpus: Iterable[Sequence[str]], max_size: int) -> Vocabulary:
    """Rank tokens by frequency (ties broken lexicographically) and keep the top ``max_size`` ids."""
    if max_size < len(RESERVED):
        raise ValueError(f"max_size {max_size} is smaller than the {len(RESERVED)} reserved tokens")
    counts = Counter(tok for sent in corpus for tok in sent)
    if not counts:
        raise ValueError("corpus is empty")
    for tok in RESERVED:
        counts.pop(tok, None)
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocabulary(ranked[: max_size - len(RESERVED)])


@dataclass(frozen=True)
class SentencePair:
    source: tuple[int, ...]
    target: tuple[int, ...]


@dataclass(frozen=True)
class ExternalWordSet:
    """External words followed by exactly one ``<null>`` id."""

    words: tuple[int, ...]
    null_id: int = RESERVED.index(NULL)
    provenance: str = "synthetic"

    @property
    def ids(self) -> tuple[int, ...]:
        return self.words + (self.null_id,)

    def __len__(self) -> int:
        return len(self.words)


@dataclass(frozen=True)
class TrainingTriple:
    pair: SentencePair
    external: ExternalWordSet

    @property
    def source(self):
        return self.pair.source

    @property
    def target(self):
        return self.pair.target


# -- toy task ------------------------------------------------------------------


@dataclass(frozen=True)
class ToyTaskSpec:
    """Seeded stand-in for a bilingual corpus.

    Every source word has a lemma in the target language (a seeded bijection).
    Each lemma has two surface forms, ``<lemma>_a`` and ``<lemma>_b``; the form
    is chosen by the parity of the preceding source word and then flipped with
    probability ``form_noise``, so the correct form is only partly predictable
    from the source.  Adjacent target words are swapped with probability
    ``swap_prob``.
    """

    source_vocab_size: int = 50
    min_len: int = 5
    max_len: int = 15
    swap_prob: float = 0.1
    form_noise: float = 0.2
    single_form: bool = False
    corpus_size: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.min_len <= self.max_len <= 50:
            raise ValueError("sentence lengths must satisfy 1 <= min_len <= max_len <= 50")
        if self.source_vocab_size < 2:
            raise ValueError("source_vocab_size must be at least 2")
        if not (0 <= self.swap_prob <= 1 and 0 <= self.form_noise <= 1):
            raise ValueError("probabilities must lie in [0, 1]")

    def source_words(self) -> list[str]:
        return [f"s{i:03d}" for i in range(self.source_vocab_size)]

    def lexicon(self) -> dict[str, str]:
        """Source word -> target lemma (seeded bijection)."""
        rng = np.random.default_rng([self.seed, 1])
        perm = rng.permutation(self.source_vocab_size)
        return {w: f"t{perm[i]:03d}" for i, w in enumerate(self.source_words())}

    def forms(self, lemma: str) -> tuple[str, ...]:
        return (lemma,) if self.single_form else (lemma + "_a", lemma + "_b")

    def target_words(self) -> list[str]:
        lex = self.lexicon()
        return [f for w in self.source_words() for f in self.forms(lex[w])]

    def rule_form(self, source: Sequence[str], i: int) -> int:
        """Context-determined suffix index for position ``i`` before noise."""
        if self.single_form or i == 0:
            return 0
        return int(source[i - 1][1:]) % 2

    def checksum(self, pairs: Sequence[tuple[list[str], list[str]]]) -> str:
        h = hashlib.sha256()
        for src, tgt in pairs:
            h.update((" ".join(src) + " ||| " + " ".join(tgt) + "\n").encode())
        return h.hexdigest()


def generate_toy_corpus(spec: ToyTaskSpec) -> list[tuple[list[str], list[str]]]:
    """Token-level sentence pairs for ``spec``; identical output for identical specs."""
    rng = np.random.default_rng([spec.seed, 2])
    src_words = spec.source_words()
    lex = spec.lexicon()
    out = []
    for _ in range(spec.corpus_size):
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        src = [src_words[k] for k in rng.integers(0, spec.source_vocab_size, size=n)]
        flips = rng.random(n) < spec.form_noise
        tgt = []
        for i, w in enumerate(src):
            forms = spec.forms(lex[w])
            k = spec.rule_form(src, i)
            if len(forms) > 1 and flips[i]:
                k = 1 - k
            tgt.append(forms[k])
        swaps = rng.random(n - 1) < spec.swap_prob
        i = 0
        while i < n - 1:
            if swaps[i]:
                tgt[i], tgt[i + 1] = tgt[i + 1], tgt[i]
                i += 2
            else:
                i += 1
        out.append((src, tgt))
    return out


def encode_pairs(pairs, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> list[SentencePair]:
    return [SentencePair(tuple(src_vocab.encode(s)), tuple(tgt_vocab.encode(t))) for s, t in pairs]


# -- synthetic external words ----------------------------------------------------


def _counts(zeta: float, v_ratio: float, length: int) -> tuple[int, int]:
    # round away float noise before the ceilings (0.7 * 10 is 7.000000000000001)
    pos = math.ceil(round(zeta * v_ratio * length, 9))
    neg = math.ceil(round((1.0 - zeta) * v_ratio * length, 9))
    return pos, neg


def sample_external_words(pair: SentencePair, vocab: Vocabulary, v_ratio: float = 1.0,
                          seed=None, zeta: float | None = None,
                          rng: np.random.Generator | None = None) -> ExternalWordSet:
    """Draw positive words from the reference and negatives from the rest of the vocabulary.

    ``zeta`` (the intended share of positives) is drawn from U(0, 1) unless
    given.  Positives come from the distinct target tokens, clamped to their
    count; negatives exclude every reserved token.
    """
    if not pair.target:
        raise ValueError("target sentence is empty")
    if v_ratio <= 0:
        raise ValueError("v_ratio must be positive")
    if rng is None:
        rng = np.random.default_rng(seed)
    if zeta is None:
        zeta = float(rng.uniform(0.0, 1.0))
    distinct = np.array(sorted(set(pair.target)))
    n_pos, n_neg = _counts(zeta, v_ratio, len(pair.target))
    n_pos = min(n_pos, len(distinct))
    in_target = np.zeros(len(vocab), dtype=bool)
    in_target[distinct] = True
    pool = vocab.content_ids[~in_target[vocab.content_ids]]
    if n_neg > len(pool):
        raise ValueError(f"need {n_neg} negative words but only {len(pool)} are available")
    pos = rng.choice(distinct, size=n_pos, replace=False) if n_pos else np.empty(0, int)
    neg = rng.choice(pool, size=n_neg, replace=False) if n_neg else np.empty(0, int)
    words = np.concatenate([pos, neg]).astype(int)
    rng.shuffle(words)
    return ExternalWordSet(tuple(int(w) for w in words), vocab.null_id)


def synthesize_dataset(pairs: Sequence[SentencePair], vocab: Vocabulary, v_ratio: float = 1.0,
                       seed: int = 0, zeta: float | None = None) -> list[TrainingTriple]:
    """Attach one external word set to every pair (a static dataset, drawn once)."""
    rng = np.random.default_rng(seed)
    return [TrainingTriple(p, sample_external_words(p, vocab, v_ratio, zeta=zeta, rng=rng))
            for p in pairs]


def measure_ratios(words: ExternalWordSet, pair: SentencePair) -> tuple[float, float]:
    """Return (v_ratio, p_ratio) with ``<null>`` excluded from all counts."""
    ids = [w for w in words.words if w != words.null_id]
    if not ids or not pair.target:
        return 0.0, 0.0
    ref = set(pair.target)
    pos = sum(1 for w in ids if w in ref)
    return len(ids) / len(pair.target), pos / len(ids)


# -- scenarios -------------------------------------------------------------------


@dataclass
class NoisyLexicon:
    """Source token -> weighted target candidates, most probable first."""

    entries: dict[str, list[tuple[str, float]]] = field(default_factory=dict)

    def best(self, word: str) -> str | None:
        cands = self.entries.get(word)
        return cands[0][0] if cands else None

    def all(self, word: str) -> list[str]:
        return [t for t, _ in self.entries.get(word, [])]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for src in sorted(self.entries):
                for tgt, w in self.entries[src]:
                    fh.write(f"{src}\t{tgt}\t{w:.6g}\n")

    @classmethod
    def load(cls, path) -> "NoisyLexicon":
        entries: dict[str, list[tuple[str, float]]] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
                entries.setdefault(parts[0], []).append((parts[1], float(parts[2])))
        for cands in entries.values():
            cands.sort(key=lambda e: -e[1])
        return cls(entries)


def build_toy_lexicon(spec: ToyTaskSpec, wrong_fraction: float = 0.2, seed: int = 0) -> NoisyLexicon:
    """A word-translation table for the toy task with the flaws of real lexicons.

    Entries carry no context, so only one form per lemma can rank first
    (missing morphology).  ``wrong_fraction`` of the source words get an
    unrelated lemma as their top entry.
    """
    rng = np.random.default_rng([seed, 3])
    lex = spec.lexicon()
    lemmas = sorted(set(lex.values()))
    entries = {}
    for w in spec.source_words():
        forms = spec.forms(lex[w])
        cands = [(forms[0], 0.6)] + ([(forms[1], 0.3)] if len(forms) > 1 else [])
        if rng.random() < wrong_fraction:
            other = lemmas[int(rng.integers(len(lemmas)))]
            while other == lex[w] and len(lemmas) > 1:
                other = lemmas[int(rng.integers(len(lemmas)))]
            cands = [(spec.forms(other)[0], 0.7)] + cands
        total = sum(c for _, c in cands)
        entries[w] = [(t, c / total) for t, c in cands]
    return NoisyLexicon(entries)


@dataclass(frozen=True)
class NoiseConfig:
    smt_rate: float = 0.3
    bow_rate: float = 0.5
    lex_max: int = 2


def simulate_scenario(pair: SentencePair, scenario: str, lexicon: NoisyLexicon | None,
                      src_vocab: Vocabulary, tgt_vocab: Vocabulary,
                      noise: NoiseConfig = NoiseConfig(), seed=None) -> ExternalWordSet:
    """External words as a real-world source would supply them.

    ``dict``/``lex`` translate source words one at a time (the single best
    entry, or up to ``noise.lex_max`` entries); ``smt`` corrupts the reference
    by substitution, deletion and insertion at ``noise.smt_rate``; ``bow``
    replaces ``noise.bow_rate`` of the distinct reference words with random
    words that are not in the reference.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    rng = np.random.default_rng(seed)
    content = tgt_vocab.content_ids
    ref = set(pair.target)
    out: list[int] = []
    if scenario in ("dict", "lex"):
        if lexicon is None:
            raise ValueError(f"scenario {scenario!r} needs a lexicon")
        for sid in pair.source:
            word = src_vocab.token(sid)
            cands = [lexicon.best(word)] if scenario == "dict" else lexicon.all(word)[: noise.lex_max]
            out.extend(tgt_vocab.id(c) for c in cands if c is not None and c in tgt_vocab)
    elif scenario == "smt":
        for tid in pair.target:
            r = rng.random()
            if r < noise.smt_rate / 3:
                continue
            if r < 2 * noise.smt_rate / 3:
                out.append(int(rng.choice(content)))
                continue
            out.append(tid)
            if r < noise.smt_rate:
                out.append(int(rng.choice(content)))
    else:
        pool = np.array([c for c in content if c not in ref])
        for tid in sorted(ref):
            if rng.random() < noise.bow_rate and len(pool):
                out.append(int(rng.choice(pool)))
            else:
                out.append(tid)
    words = tuple(dict.fromkeys(out))
    return ExternalWordSet(words, tgt_vocab.null_id, provenance=scenario)


# -- files ----------------------------------------------------------------------


def write_corpus(path, pairs: Iterable[tuple[Sequence[str], Sequence[str]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for src, tgt in pairs:
            fh.write(" ".join(src) + " ||| " + " ".join(tgt) + "\n")


def read_corpus(path) -> list[tuple[list[str], list[str]]]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            if "|||" not in line:
                raise ValueError(f"{path}:{lineno}: missing ' ||| ' separator")
            src, tgt = line.split("|||", 1)
            pairs.append((src.split(), tgt.split()))
    return pairs


def write_external(path, sets: Iterable[ExternalWordSet], vocab: Vocabulary) -> None:
    """One JSON record per line, aligned with corpus lines; ``<null>`` is implicit."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, s in enumerate(sets):
            fh.write(json.dumps({"id": i, "words": vocab.decode(s.words)}) + "\n")


def read_external(path, vocab: Vocabulary) -> list[ExternalWordSet]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("id") != len(out):
                raise ValueError(f"{path}:{lineno}: record id {rec.get('id')} out of sequence")
            words = [w for w in rec["words"] if w != NULL]
            out.append(ExternalWordSet(tuple(vocab.encode(words)), vocab.null_id, provenance="file"))
    return out


