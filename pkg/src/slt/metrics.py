"""WER, corpus BLEU-1..4 and ROUGE-L F1 over whitespace tokens."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .errors import CorpusError

ROUGE_VARIANT = "rouge-l-f1-sentence-mean"
TASKS = ("sign2gloss", "gloss2text", "sign2gloss2text", "sign2text")


def _tokens(x) -> list:
    return x.split() if isinstance(x, str) else list(x)


def edit_ops(hyp, ref) -> int:
    """Levenshtein distance: substitutions + deletions + insertions."""
    hyp, ref = _tokens(hyp), _tokens(ref)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(hyp, ref) -> float:
    ref = _tokens(ref)
    if not ref:
        raise CorpusError("WER is undefined for an empty reference")
    return edit_ops(hyp, ref) / len(ref)


def corpus_wer(hyps: Sequence, refs: Sequence) -> float:
    _check_corpus(hyps, refs)
    total = sum(len(_tokens(r)) for r in refs)
    if total == 0:
        raise CorpusError("WER is undefined when all references are empty")
    return sum(edit_ops(h, r) for h, r in zip(hyps, refs)) / total


def _check_corpus(hyps, refs):
    if len(hyps) != len(refs):
        raise CorpusError(f"{len(hyps)} hypotheses for {len(refs)} references")
    if not hyps:
        raise CorpusError("empty corpus")


def _ngrams(tokens: list, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(hyps: Sequence, refs: Sequence, n: int = 4) -> float:
    """Unsmoothed corpus BLEU with uniform weights over 1..n grams, in [0, 100]."""
    if not 1 <= n <= 4:
        raise ValueError(f"BLEU order must be 1..4, got {n}")
    _check_corpus(hyps, refs)
    matches = [0] * n
    totals = [0] * n
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        h, r = _tokens(h), _tokens(r)
        hyp_len += len(h)
        ref_len += len(r)
        for k in range(1, n + 1):
            hc, rc = _ngrams(h, k), _ngrams(r, k)
            matches[k - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[k - 1] += max(len(h) - k + 1, 0)
    if min(matches) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def bleu_scores(hyps, refs) -> list[float]:
    return [bleu_n(hyps, refs, n) for n in range(1, 5)]


def lcs_length(a: list, b: list) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(hyps: Sequence, refs: Sequence) -> float:
    """Mean sentence-level ROUGE-L F1 (beta = 1), in [0, 100]."""
    _check_corpus(hyps, refs)
    total = 0.0
    for h, r in zip(hyps, refs):
        h, r = _tokens(h), _tokens(r)
        lcs = lcs_length(h, r)
        if lcs:
            p, rec = lcs / len(h), lcs / len(r)
            total += 2 * p * rec / (p + rec)
    return 100.0 * total / len(hyps)


@dataclass
class EvalReport:
    task: str
    split: str
    n_samples: int
    wer: float | None = None
    bleu: list[float] | None = None
    rouge: float | None = None
    decoding: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; valid tasks: {', '.join(TASKS)}")

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        if self.task == "sign2gloss":
            d.pop("bleu", None)
            d.pop("rouge", None)
        else:
            d.pop("wer", None)
            d["rouge_variant"] = ROUGE_VARIANT
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def text_report(task, split, hyps, refs, decoding=None) -> EvalReport:
    return EvalReport(
        task=task,
        split=split,
        n_samples=len(refs),
        bleu=bleu_scores(hyps, refs),
        rouge=rouge_l(hyps, refs),
        decoding=decoding or {},
    )
