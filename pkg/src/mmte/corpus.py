"""Parallel corpora, the temperature sampling policy, synthetic-language
generation, downstream task data, and the TSV/CoNLL loaders."""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass

import numpy as np

from . import tokenizer as tok

_LANG_RE = re.compile(r"^[a-z]{2,8}$")


@dataclass(frozen=True)
class LanguagePair:
    src: str
    tgt: str

    def __post_init__(self):
        for code in (self.src, self.tgt):
            if not _LANG_RE.match(code):
                raise ValueError(f"language code {code!r} must be lowercase ASCII letters")
        if self.src == self.tgt:
            raise ValueError(f"source and target language must differ, got {self.src!r} twice")

    def __str__(self):
        return f"{self.src}-{self.tgt}"


@dataclass
class ParallelCorpus:
    pair: LanguagePair
    examples: list[tuple[str, str]]

    def __post_init__(self):
        if not self.examples:
            raise ValueError(f"corpus {self.pair} has no examples")

    @property
    def size(self) -> int:
        return len(self.examples)


@dataclass
class SamplingPolicy:
    temperature: float
    probabilities: dict[LanguagePair, float]

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        total = sum(self.probabilities.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"pair probabilities sum to {total}, expected 1")
        if any(q <= 0 for q in self.probabilities.values()):
            raise ValueError("every pair must have positive probability")


def sampling_distribution(sizes: dict[LanguagePair, int], temperature: float) -> SamplingPolicy:
    """q_l proportional to D_l^(1/T); the natural-distribution denominators cancel."""
    if not sizes:
        raise ValueError("no corpus sizes given")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if any(d < 1 for d in sizes.values()):
        raise ValueError("corpus sizes must be >= 1")
    weights = {pair: float(d) ** (1.0 / temperature) for pair, d in sizes.items()}
    total = sum(weights.values())
    return SamplingPolicy(temperature, {pair: w / total for pair, w in weights.items()})


def sample_batch(
    corpora: dict[LanguagePair, ParallelCorpus],
    policy: SamplingPolicy,
    batch_size: int,
    rng: np.random.Generator,
    subwords: tok.SubwordModel,
    conditioning: str = "in_source",
) -> list[tuple[list[int], list[int], int]]:
    """Draw a training batch of (source ids, target ids, target-language token id).

    Pairs are drawn i.i.d. from the policy, examples uniformly within a pair.
    With ``in_source`` conditioning the source begins with the target
    language's ``<2xx>`` id; with ``external`` it is returned unprepended for
    the model's separate token encoder. Sources end with EOS; targets are
    framed BOS ... EOS.
    """
    pairs = list(corpora)
    missing = [p for p in pairs if p not in policy.probabilities]
    if missing:
        raise ValueError(f"policy does not cover pairs: {missing}")
    if conditioning not in ("in_source", "external"):
        raise ValueError(f"unknown conditioning {conditioning!r}")
    probs = np.array([policy.probabilities[p] for p in pairs])
    probs = probs / probs.sum()
    picks = rng.choice(len(pairs), size=batch_size, p=probs)
    batch = []
    for pi in picks:
        corpus = corpora[pairs[int(pi)]]
        src_text, tgt_text = corpus.examples[int(rng.integers(corpus.size))]
        lang_id = subwords.lang_token_id(corpus.pair.tgt)
        src = subwords.encode(src_text).ids + [tok.EOS_ID]
        if conditioning == "in_source":
            src = [lang_id] + src
        tgt = [tok.BOS_ID] + subwords.encode(tgt_text).ids + [tok.EOS_ID]
        batch.append((src, tgt, lang_id))
    return batch


# ---------------------------------------------------------------------------
# synthetic languages
# ---------------------------------------------------------------------------

IDENTITY_LANG = "en"


@dataclass
class SyntheticLanguageSpec:
    """Abstract interlingua plus per-language bijective surface lexicons.

    The identity language renders symbols as themselves; every other
    language's surface vocabulary is disjoint from all the rest, so any
    downstream transfer must be mediated by the encoder, not shared tokens.
    """

    symbols: list[str]
    classes: dict[str, str]
    lexicons: dict[str, dict[str, str]]
    reorders: dict[str, str | None]
    length_range: tuple[int, int] = (3, 8)
    seed: int = 0

    def __post_init__(self):
        if IDENTITY_LANG not in self.lexicons:
            raise ValueError(f"spec must include the identity language {IDENTITY_LANG!r}")
        for sym in self.symbols:
            if self.lexicons[IDENTITY_LANG][sym] != sym:
                raise ValueError("identity language must map symbols to themselves")
        for lang, lex in self.lexicons.items():
            if sorted(lex) != sorted(self.symbols):
                raise ValueError(f"lexicon for {lang!r} does not cover the interlingua")
            if len(set(lex.values())) != len(lex):
                raise ValueError(f"lexicon for {lang!r} is not a bijection")
        lo, hi = self.length_range
        if not (1 <= lo <= hi):
            raise ValueError("invalid sentence length range")

    @property
    def languages(self) -> list[str]:
        return [lang for lang in self.lexicons if lang != IDENTITY_LANG]

    def render(self, lang: str, symbols: list[str]) -> list[str]:
        lex = self.lexicons[lang]
        tokens = [lex[s] for s in symbols]
        return _reorder(tokens, self.reorders.get(lang))

    def tags_for(self, symbols: list[str], lang: str) -> list[str]:
        tags = [self.classes[s] for s in symbols]
        return _reorder(tags, self.reorders.get(lang))

    def sentence_label(self, symbols: list[str]) -> str:
        counts: dict[str, int] = {}
        for s in symbols:
            c = self.classes[s]
            counts[c] = counts.get(c, 0) + 1
        best = max(counts.values())
        return min(c for c, n in counts.items() if n == best)


def _reorder(tokens: list[str], rule: str | None) -> list[str]:
    if rule is None:
        return list(tokens)
    if rule == "swap_pairs":
        out = list(tokens)
        for i in range(0, len(out) - 1, 2):
            out[i], out[i + 1] = out[i + 1], out[i]
        return out
    if rule == "reverse":
        return tokens[::-1]
    raise ValueError(f"unknown reordering rule {rule!r}")


def default_synthetic_spec(n_languages: int = 4, n_symbols: int = 30, n_classes: int = 4, seed: int = 0) -> SyntheticLanguageSpec:
    """Lexicon-substitution languages sized to pretrain in minutes."""
    if n_languages < 1:
        raise ValueError("need at least one non-identity language")
    codes = ["aa", "bb", "cc", "dd", "ee", "ff", "gg", "hh", "ii", "jj"]
    if n_languages > len(codes):
        raise ValueError(f"at most {len(codes)} synthetic languages supported")
    symbols = [f"s{i:02d}" for i in range(n_symbols)]
    classes = {s: f"c{i % n_classes}" for i, s in enumerate(symbols)}
    lexicons: dict[str, dict[str, str]] = {IDENTITY_LANG: {s: s for s in symbols}}
    for lang in codes[:n_languages]:
        lexicons[lang] = {s: f"{lang}{i:02d}" for i, s in enumerate(symbols)}
    reorders = {lang: None for lang in lexicons}
    return SyntheticLanguageSpec(symbols, classes, lexicons, reorders, seed=seed)


@dataclass
class TaskExample:
    lang: str
    text: str
    label: str
    text2: str | None = None


@dataclass
class TaggingExample:
    lang: str
    words: list[str]
    tags: list[str]


@dataclass
class SyntheticData:
    corpora: dict[LanguagePair, ParallelCorpus]
    classify: dict[str, list[TaskExample]]
    tagging: dict[str, list[TaggingExample]]


def generate_synthetic(spec: SyntheticLanguageSpec, n_per_pair: int, n_task_per_lang: int = 300) -> SyntheticData:
    """Emit L<->identity corpora plus per-language gold task data.

    Every sentence is an i.i.d. draw of interlingua symbols; labels are the
    per-token symbol classes (tagging) and the majority class (classification,
    ties to the lexicographically smallest class). Deterministic given the
    spec's seed.
    """
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.length_range

    def draw_sentence() -> list[str]:
        n = int(rng.integers(lo, hi + 1))
        return [spec.symbols[int(i)] for i in rng.integers(len(spec.symbols), size=n)]

    corpora: dict[LanguagePair, ParallelCorpus] = {}
    for lang in spec.languages:
        for pair in (LanguagePair(lang, IDENTITY_LANG), LanguagePair(IDENTITY_LANG, lang)):
            examples = []
            for _ in range(n_per_pair):
                sent = draw_sentence()
                src = " ".join(spec.render(pair.src, sent))
                tgt = " ".join(spec.render(pair.tgt, sent))
                examples.append((src, tgt))
            corpora[pair] = ParallelCorpus(pair, examples)

    classify: dict[str, list[TaskExample]] = {}
    tagging: dict[str, list[TaggingExample]] = {}
    for lang in [IDENTITY_LANG] + spec.languages:
        cls, tags = [], []
        for _ in range(n_task_per_lang):
            sent = draw_sentence()
            words = spec.render(lang, sent)
            cls.append(TaskExample(lang, " ".join(words), spec.sentence_label(sent)))
            tags.append(TaggingExample(lang, words, spec.tags_for(sent, lang)))
        classify[lang] = cls
        tagging[lang] = tags
    return SyntheticData(corpora, classify, tagging)


def few_shot_mixture(base: list, per_lang: dict[str, list], upsample_to: int, rng: np.random.Generator) -> list:
    """Base (pivot-language) data plus each language's k examples upsampled
    round-robin to exactly ``upsample_to`` items, shuffled with the run seed."""
    if upsample_to < 1:
        raise ValueError("upsample_to must be >= 1")
    combined = list(base)
    for lang in sorted(per_lang):
        shots = per_lang[lang]
        if not shots:
            raise ValueError(f"language {lang!r} has no few-shot examples")
        if len(shots) > upsample_to:
            raise ValueError(f"language {lang!r} has {len(shots)} examples > upsample_to {upsample_to}")
        combined.extend(shots[i % len(shots)] for i in range(upsample_to))
    order = rng.permutation(len(combined))
    return [combined[int(i)] for i in order]


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def load_parallel_tsv(path) -> dict[LanguagePair, ParallelCorpus]:
    """UTF-8 TSV: src_lang<TAB>tgt_lang<TAB>source<TAB>target per line."""
    grouped: dict[LanguagePair, list[tuple[str, str]]] = {}
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise ValueError(f"{path}:{ln}: expected 4 tab-separated fields, got {len(fields)}")
            src_lang, tgt_lang, src, tgt = fields
            pair = LanguagePair(src_lang, tgt_lang)
            grouped.setdefault(pair, []).append((src, tgt))
    if not grouped:
        raise ValueError(f"{path}: no records")
    return {pair: ParallelCorpus(pair, ex) for pair, ex in grouped.items()}


def write_parallel_tsv(path, corpora: dict[LanguagePair, ParallelCorpus]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for pair in corpora:
            for src, tgt in corpora[pair].examples:
                fh.write(f"{pair.src}\t{pair.tgt}\t{src}\t{tgt}\n")


def load_classification_tsv(path) -> list[TaskExample]:
    """UTF-8 TSV: lang<TAB>label<TAB>text[<TAB>text2]."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) not in (3, 4):
                raise ValueError(f"{path}:{ln}: expected 3 or 4 tab-separated fields, got {len(fields)}")
            lang, label, text = fields[0], fields[1], fields[2]
            text2 = fields[3] if len(fields) == 4 else None
            records.append(TaskExample(lang, text, label, text2))
    if not records:
        raise ValueError(f"{path}: no records")
    return records


def write_classification_tsv(path, examples: list[TaskExample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            if ex.text2 is None:
                fh.write(f"{ex.lang}\t{ex.label}\t{ex.text}\n")
            else:
                fh.write(f"{ex.lang}\t{ex.label}\t{ex.text}\t{ex.text2}\n")


_IOB_RE = re.compile(r"^(O|[BI]-.+)$")


def load_tagging_conll(path) -> list[TaggingExample]:
    """CoNLL-style: '# lang = xx' comment, token<TAB>tag lines, blank separators.

    When the tag set looks like IOB, I-X tags not preceded by B-X/I-X raise a
    validation warning listing the offending positions.
    """
    sentences: list[TaggingExample] = []
    lang = None
    words: list[str] = []
    tags: list[str] = []

    def flush(ln):
        nonlocal lang, words, tags
        if words:
            if lang is None:
                raise ValueError(f"{path}:{ln}: sentence missing '# lang = xx' comment")
            sentences.append(TaggingExample(lang, words, tags))
        lang, words, tags = None, [], []

    with open(path, encoding="utf-8") as fh:
        ln = 0
        for ln, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                flush(ln)
                continue
            if line.startswith("#"):
                m = re.match(r"#\s*lang\s*=\s*(\S+)", line)
                if m:
                    lang = m.group(1)
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise ValueError(f"{path}:{ln}: expected token<TAB>tag, got {line!r}")
            words.append(fields[0])
            tags.append(fields[1])
        flush(ln)
    if not sentences:
        raise ValueError(f"{path}: no records")

    if all(_IOB_RE.match(t) for s in sentences for t in s.tags):
        bad: list[str] = []
        for si, sent in enumerate(sentences):
            prev = "O"
            for ti, tag in enumerate(sent.tags):
                if tag.startswith("I-"):
                    kind = tag[2:]
                    if not (prev == f"B-{kind}" or prev == f"I-{kind}"):
                        bad.append(f"sentence {si} position {ti} ({tag} after {prev})")
                prev = tag
        if bad:
            warnings.warn(f"{path}: ill-formed IOB continuations at: " + "; ".join(bad))
    return sentences


def write_tagging_conll(path, examples: list[TaggingExample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(f"# lang = {ex.lang}\n")
            for word, tag in zip(ex.words, ex.tags):
                fh.write(f"{word}\t{tag}\n")
            fh.write("\n")
