"""Translation and task metrics: corpus BLEU, accuracy, token F1, span F1,
and the MetricReport record emitted by every experiment."""

from __future__ import annotations

import hashlib
import math
import re
from collections import Counter
from dataclasses import dataclass, field


def bleu(hypotheses: list[list[str]], references: list[list[str]]) -> float:
    """Corpus-level BLEU in [0, 100]: geometric mean of clipped n-gram
    precisions (n = 1..4) with the brevity penalty exp(1 - r/c) for c < r.

    No smoothing: a zero matched n-gram count at any order gives 0.0.
    Orders longer than every hypothesis are skipped, so identical corpora
    score 100 regardless of sentence length.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"got {len(hypotheses)} hypotheses for {len(references)} references")
    if not hypotheses:
        raise ValueError("need at least one hypothesis/reference pair")
    matched = [0] * 4
    total = [0] * 4
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            hyp_ngrams = Counter(tuple(hyp[i : i + n]) for i in range(len(hyp) - n + 1))
            ref_ngrams = Counter(tuple(ref[i : i + n]) for i in range(len(ref) - n + 1))
            total[n - 1] += sum(hyp_ngrams.values())
            matched[n - 1] += sum(min(c, ref_ngrams[g]) for g, c in hyp_ngrams.items())
    if hyp_len == 0:
        return 0.0
    log_prec = 0.0
    orders = 0
    for m, t in zip(matched, total):
        if t == 0:
            continue
        if m == 0:
            return 0.0
        log_prec += math.log(m / t)
        orders += 1
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_prec / orders)


def accuracy(preds, golds) -> float:
    if len(preds) != len(golds):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(golds)} golds")
    if not preds:
        raise ValueError("accuracy of an empty set is undefined")
    return sum(p == g for p, g in zip(preds, golds)) / len(preds)


def token_f1(pred_tags, gold_tags) -> float:
    """Micro-averaged F1 over aligned tag sequences.

    With exactly one prediction per gold token, TP + FP == TP + FN, so this
    equals accuracy (asserted in the test suite).
    """
    if len(pred_tags) != len(gold_tags):
        raise ValueError(f"length mismatch: {len(pred_tags)} predicted tags vs {len(gold_tags)} gold")
    if not pred_tags:
        raise ValueError("token_f1 of an empty set is undefined")
    tp = sum(p == g for p, g in zip(pred_tags, gold_tags))
    fp = len(pred_tags) - tp
    fn = len(gold_tags) - tp
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


_TAG_RE = re.compile(r"^(O|[BI]-.+)$")


def iob_spans(tags: list[str]) -> set[tuple[str, int, int]]:
    """Extract (label, start, end-inclusive) spans from one IOB sequence.

    B-X starts a span; I-X continues a span of the same type; an I-X after O
    or a different type starts a new span (CoNLL convention for ill-formed
    sequences). Unknown tag strings raise.
    """
    spans: set[tuple[str, int, int]] = set()
    label = None
    start = 0
    for i, tag in enumerate(tags):
        if not _TAG_RE.match(tag):
            raise ValueError(f"unknown IOB tag {tag!r} at position {i}")
        if tag == "O":
            if label is not None:
                spans.add((label, start, i - 1))
                label = None
        elif tag.startswith("B-") or (tag.startswith("I-") and tag[2:] != label):
            if label is not None:
                spans.add((label, start, i - 1))
            label = tag[2:]
            start = i
    if label is not None:
        spans.add((label, start, len(tags) - 1))
    return spans


def span_f1(pred_seqs: list[list[str]], gold_seqs: list[list[str]]) -> tuple[float, float, float]:
    """Span-based precision/recall/F1 over aligned IOB sequences."""
    if len(pred_seqs) != len(gold_seqs):
        raise ValueError(f"got {len(pred_seqs)} predicted sequences for {len(gold_seqs)} gold")
    tp = fp = fn = 0
    for pred, gold in zip(pred_seqs, gold_seqs):
        if len(pred) != len(gold):
            raise ValueError(f"sequence length mismatch: {len(pred)} vs {len(gold)}")
        p_spans = iob_spans(list(pred))
        g_spans = iob_spans(list(gold))
        tp += len(p_spans & g_spans)
        fp += len(p_spans - g_spans)
        fn += len(g_spans - p_spans)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass
class MetricReport:
    """Per-language values for one (task, metric) under one seed/step."""

    task: str
    metric: str
    values: dict[str, float]
    seed: int
    step: int
    config: str = ""
    extra: dict[str, float] = field(default_factory=dict)

    @property
    def average(self) -> float:
        if not self.values:
            raise ValueError("report has no per-language values")
        return sum(self.values.values()) / len(self.values)

    def to_text(self) -> str:
        """One record per (task, language, metric, value, seed, step); stable order."""
        lines = []
        rows = [(lang, self.metric, value) for lang, value in self.values.items()]
        rows.append(("avg", self.metric, self.average))
        rows.extend(("all", k, v) for k, v in self.extra.items())
        for lang, metric, value in sorted(rows):
            lines.append(
                f"task={self.task}\tlang={lang}\tmetric={metric}\tvalue={value!r}\t"
                f"seed={self.seed}\tstep={self.step}\tconfig={self.config}"
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        values: dict[str, float] = {}
        extra: dict[str, float] = {}
        task = metric = config = ""
        seed = step = 0
        for line in text.splitlines():
            if not line:
                continue
            fields = dict(f.split("=", 1) for f in line.split("\t"))
            task = fields["task"]
            seed = int(fields["seed"])
            step = int(fields["step"])
            config = fields["config"]
            if fields["lang"] == "avg":
                metric = fields["metric"]
                continue
            if fields["lang"] == "all":
                extra[fields["metric"]] = float(fields["value"])
                continue
            metric = fields["metric"]
            values[fields["lang"]] = float(fields["value"])
        if not values:
            raise ValueError("no per-language records in report text")
        return cls(task, metric, values, seed, step, config, extra)
