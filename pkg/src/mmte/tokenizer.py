"""Shared source-target subword vocabulary via deterministic byte-pair encoding.

Vocabulary construction samples lines from the parallel corpora with the same
temperature policy used for training batches, retains the smallest character
set reaching the requested coverage, and greedily merges the most frequent
adjacent symbol pair until the vocabulary is full (ties broken by
lexicographically greatest pair, so results are reproducible).

Pair statistics are computed on plain symbol strings; word-initial subwords
are distinguished by a "▁" prefix in the vocabulary lookup only. Every
character and merge product therefore owns two ids (word-initial and
word-internal), which is what lets translation output be detokenized back
into whitespace-separated words.
"""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass

import numpy as np

MARKER = "▁"

PAD, UNK, BOS, EOS, SEP = "PAD", "UNK", "BOS", "EOS", "SEP"
PAD_ID, UNK_ID, BOS_ID, EOS_ID, SEP_ID = 0, 1, 2, 3, 4
_BASE_SPECIALS = (PAD, UNK, BOS, EOS, SEP)
FILLER = "UNUSED0"


@dataclass
class TokenizedText:
    """Token ids plus a mask that is True exactly at each word's first subword."""

    ids: list[int]
    first_subword_mask: list[bool]

    def __post_init__(self):
        if len(self.ids) != len(self.first_subword_mask):
            raise ValueError("ids and first_subword_mask must have equal length")

    def __len__(self):
        return len(self.ids)

    @property
    def word_count(self) -> int:
        return sum(self.first_subword_mask)


class SubwordModel:
    """Immutable learned merge table + vocabulary (safe for concurrent encode)."""

    def __init__(self, merges, vocab, specials, char_coverage):
        self.merges: list[tuple[str, str]] = list(merges)
        self.vocab: dict[str, int] = dict(vocab)
        self.specials: dict[str, int] = dict(specials)
        self.char_coverage = float(char_coverage)
        self._validate()
        self._special_ids = frozenset(self.specials.values())
        self._chars = {t for t in self.vocab if len(t) == 1}
        size = len(self.vocab) + len(self.specials)
        self._id_to_token: list[str | None] = [None] * size
        for name, i in self.specials.items():
            self._id_to_token[i] = None  # specials render as nothing
        for tok, i in self.vocab.items():
            self._id_to_token[i] = tok
        self._word_cache: dict[str, tuple[int, ...]] = {}

    def _validate(self):
        ids = sorted(list(self.vocab.values()) + list(self.specials.values()))
        if ids != list(range(len(ids))):
            raise ValueError("token ids must be contiguous from 0")
        for name, want in zip(_BASE_SPECIALS, range(5)):
            if self.specials.get(name) != want:
                raise ValueError(f"special {name} must have id {want}")

    @property
    def vocab_size(self) -> int:
        return len(self.vocab) + len(self.specials)

    def lang_token_id(self, lang: str) -> int:
        name = f"<2{lang}>"
        if name not in self.specials:
            raise KeyError(f"no target-language token {name}; known: {sorted(n for n in self.specials if n.startswith('<2'))}")
        return self.specials[name]

    @property
    def lang_token_ids(self) -> dict[str, int]:
        return {n[2:-1]: i for n, i in self.specials.items() if n.startswith("<2") and n.endswith(">")}

    def is_special(self, token_id: int) -> bool:
        return token_id in self._special_ids

    # -- encoding ---------------------------------------------------------

    def _encode_word(self, word: str) -> tuple[int, ...]:
        cached = self._word_cache.get(word)
        if cached is not None:
            return cached
        symbols: list[str | None] = [c if c in self._chars else None for c in word]
        for pair in self.merges:
            if pair[0] in symbols and pair[1] in symbols:
                symbols = _merge_once_all(symbols, pair)
        ids = []
        for k, s in enumerate(symbols):
            if s is None:
                ids.append(UNK_ID)
            elif k == 0:
                ids.append(self.vocab[MARKER + s])
            else:
                ids.append(self.vocab[s])
        result = tuple(ids)
        self._word_cache[word] = result
        return result

    def encode(self, text: str) -> TokenizedText:
        """Deterministic segmentation; the mask marks word starts."""
        text = unicodedata.normalize("NFC", text)
        ids: list[int] = []
        mask: list[bool] = []
        for word in text.split():
            wids = self._encode_word(word)
            ids.extend(wids)
            mask.append(True)
            mask.extend([False] * (len(wids) - 1))
        return TokenizedText(ids, mask)

    def decode(self, ids) -> str:
        """Inverse of encode on coverage-retained text; special ids are dropped."""
        if isinstance(ids, TokenizedText):
            ids = ids.ids
        pieces = []
        for i in ids:
            i = int(i)
            if i < 0 or i >= self.vocab_size:
                raise ValueError(f"token id {i} out of range [0, {self.vocab_size})")
            tok = self._id_to_token[i]
            if tok is not None:
                pieces.append(tok)
        return "".join(pieces).replace(MARKER, " ").strip()

    # -- serialization ----------------------------------------------------

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(serialize(self))

    @classmethod
    def load(cls, path) -> "SubwordModel":
        with open(path, encoding="utf-8") as fh:
            return parse(fh.read())


def serialize(model: SubwordModel) -> str:
    lines = ["MMTE-SPM v1", f"coverage={model.char_coverage!r}"]
    for name, i in sorted(model.specials.items(), key=lambda kv: kv[1]):
        lines.append(f"special {name} {i}")
    for left, right in model.merges:
        lines.append(f"merge {left} {right}")
    for tok, i in sorted(model.vocab.items(), key=lambda kv: kv[1]):
        lines.append(f"token {tok} {i}")
    return "\n".join(lines) + "\n"


def parse(text: str) -> SubwordModel:
    lines = text.splitlines()
    if not lines or lines[0] != "MMTE-SPM v1":
        raise ValueError("not a subword model file (missing 'MMTE-SPM v1' header)")
    if len(lines) < 2 or not lines[1].startswith("coverage="):
        raise ValueError("missing coverage line")
    coverage = float(lines[1].split("=", 1)[1])
    specials: dict[str, int] = {}
    merges: list[tuple[str, str]] = []
    vocab: dict[str, int] = {}
    for ln, line in enumerate(lines[2:], start=3):
        if not line:
            continue
        kind, _, rest = line.partition(" ")
        fields = rest.split(" ")
        if kind == "special" and len(fields) == 2:
            specials[fields[0]] = int(fields[1])
        elif kind == "merge" and len(fields) == 2:
            merges.append((fields[0], fields[1]))
        elif kind == "token" and len(fields) == 2:
            vocab[fields[0]] = int(fields[1])
        else:
            raise ValueError(f"line {ln}: cannot parse {line!r}")
    return SubwordModel(merges, vocab, specials, coverage)


# ---------------------------------------------------------------------------
# vocabulary construction
# ---------------------------------------------------------------------------


def _merge_once_all(symbols: list, pair: tuple[str, str]) -> list:
    """Replace every (left-to-right, non-overlapping) occurrence of ``pair``."""
    left, right = pair
    out = []
    i = 0
    n = len(symbols)
    while i < n:
        if i + 1 < n and symbols[i] == left and symbols[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def temperature_sample_indices(sizes, temperature: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` corpus indices with P(l) proportional to sizes[l]^(1/T)."""
    weights = np.asarray(sizes, dtype=np.float64) ** (1.0 / temperature)
    return rng.choice(len(weights), size=n, p=weights / weights.sum())


def build_vocab(
    corpora,
    vocab_size: int,
    temperature: float = 5.0,
    char_coverage: float = 0.999995,
    seed: int = 0,
    sample_size: int = 10_000,
) -> SubwordModel:
    """Learn a shared subword model over a temperature-balanced sample.

    ``corpora`` is an iterable of parallel corpora (``.pair.tgt``,
    ``.examples``, ``.size``); both sides of each sampled example feed the
    statistics. Deterministic given ``seed``.
    """
    corpora = list(corpora)
    if not corpora:
        raise ValueError("build_vocab needs at least one corpus")
    lang_names = sorted({f"<2{c.pair.tgt}>" for c in corpora})
    specials = {name: i for i, name in enumerate(_BASE_SPECIALS)}
    for name in lang_names:
        specials[name] = len(specials)

    rng = np.random.default_rng(seed)
    picks = temperature_sample_indices([c.size for c in corpora], temperature, sample_size, rng)
    word_counts: Counter[str] = Counter()
    for ci in picks:
        corpus = corpora[int(ci)]
        src, tgt = corpus.examples[int(rng.integers(corpus.size))]
        for side in (src, tgt):
            word_counts.update(unicodedata.normalize("NFC", side).split())

    char_counts: Counter[str] = Counter()
    for word, count in word_counts.items():
        for ch in word:
            char_counts[ch] += count
    if not char_counts:
        raise ValueError("sampled corpus contains no characters")
    total = sum(char_counts.values())
    retained: list[str] = []
    cum = 0
    for ch, count in sorted(char_counts.items(), key=lambda kv: (-kv[1], kv[0])):
        if cum >= char_coverage * total:
            break
        retained.append(ch)
        cum += count
    retained.sort()

    n_specials = len(specials)
    minimum = n_specials + 2 * len(retained) + 2
    if vocab_size < minimum:
        raise ValueError(
            f"vocab_size {vocab_size} too small: need at least {minimum} "
            f"({n_specials} specials + 2*{len(retained)} character entries + one merge)"
        )
    budget = vocab_size - n_specials - 2 * len(retained)
    n_merges = budget // 2
    filler = budget % 2 == 1

    retained_set = set(retained)
    words = []
    for word, count in sorted(word_counts.items()):
        words.append(([c if c in retained_set else None for c in word], count))

    pair_counts: Counter[tuple[str, str]] = Counter()
    pair_words: dict[tuple[str, str], set[int]] = {}

    def word_pairs(symbols):
        for a, b in zip(symbols, symbols[1:]):
            if a is not None and b is not None:
                yield (a, b)

    for wid, (symbols, count) in enumerate(words):
        for p in word_pairs(symbols):
            pair_counts[p] += count
            pair_words.setdefault(p, set()).add(wid)

    merges: list[tuple[str, str]] = []
    for _ in range(n_merges):
        live = {p: c for p, c in pair_counts.items() if c > 0}
        if not live:
            raise ValueError(
                f"corpus exhausted after {len(merges)} merges; lower vocab_size "
                f"to at most {n_specials + 2 * len(retained) + 2 * len(merges)}"
            )
        best = max(live.items(), key=lambda kv: (kv[1], kv[0]))[0]
        merges.append(best)
        for wid in sorted(pair_words.get(best, ())):
            symbols, count = words[wid]
            if not any(p == best for p in word_pairs(symbols)):
                continue  # stale membership
            for p in word_pairs(symbols):
                pair_counts[p] -= count
            symbols = _merge_once_all(symbols, best)
            words[wid] = (symbols, count)
            for p in word_pairs(symbols):
                pair_counts[p] += count
                pair_words.setdefault(p, set()).add(wid)

    vocab: dict[str, int] = {}
    next_id = n_specials
    for ch in retained:
        vocab[MARKER + ch] = next_id
        vocab[ch] = next_id + 1
        next_id += 2
    for left, right in merges:
        tok = left + right
        vocab[MARKER + tok] = next_id
        vocab[tok] = next_id + 1
        next_id += 2
    if filler:
        specials[FILLER] = next_id
        next_id += 1
    assert next_id == vocab_size
    return SubwordModel(merges, vocab, specials, char_coverage)
