"""BLEU-4, ROUGE-N, ROUGE-L and answer-containment accuracy."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence


def tokenize(text: str) -> list[str]:
    """Whitespace split; text with no whitespace at all falls back to characters."""
    if not text or not text.strip():
        return []
    if any(ch.isspace() for ch in text.strip()):
        return text.split()
    return list(text.strip())


def _tokens(x) -> list[str]:
    toks = tokenize(x) if isinstance(x, str) else list(x)
    if any(t == "" for t in toks):
        raise ValueError("token sequences may not contain empty tokens")
    return toks


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate, references) -> float:
    """Sentence BLEU-4 with clipped counts and brevity penalty, no smoothing.

    Any zero n-gram precision makes the score 0. The effective reference
    length is the reference length closest to the candidate (ties go shorter).
    """
    cand = _tokens(candidate)
    refs = [_tokens(r) for r in references]
    if not refs:
        raise ValueError("bleu4 needs at least one reference")
    if not cand:
        raise ValueError("bleu4 needs a non-empty candidate")
    log_p = 0.0
    for n in range(1, 5):
        counts = ngrams(cand, n)
        total = sum(counts.values())
        if total == 0:
            return 0.0
        max_ref: Counter = Counter()
        for r in refs:
            for g, c in ngrams(r, n).items():
                max_ref[g] = max(max_ref[g], c)
        clipped = sum(min(c, max_ref[g]) for g, c in counts.items())
        if clipped == 0:
            return 0.0
        log_p += 0.25 * math.log(clipped / total)
    c = len(cand)
    r = min((len(ref) for ref in refs), key=lambda L: (abs(L - c), L))
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(log_p)


def rouge_n(candidate, reference, n: int = 1) -> float:
    """Recall of reference n-grams (clipped match counts)."""
    cand, ref = _tokens(candidate), _tokens(reference)
    if len(ref) < n:
        raise ValueError(f"reference has {len(ref)} tokens, fewer than n={n}")
    ref_counts, cand_counts = ngrams(ref, n), ngrams(cand, n)
    match = sum(min(c, cand_counts[g]) for g, c in ref_counts.items())
    return match / sum(ref_counts.values())


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference, beta: float = 1.0) -> float:
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand or not ref:
        raise ValueError("rouge_l needs non-empty candidate and reference")
    lcs = lcs_length(ref, cand)
    if lcs == 0:
        return 0.0
    r, p = lcs / len(ref), lcs / len(cand)
    b2 = beta * beta
    return (1 + b2) * r * p / (r + b2 * p)


def answer_accuracy(outputs: Sequence[dict], gold: Sequence[str]) -> dict[str, float]:
    """Strict accuracy (gold inside the answer segment) and accuracy (anywhere).

    Each output is ``{"answer_segment": str, "full_text": str}``. The answer
    segment counts as part of the full text.
    """
    if len(outputs) != len(gold):
        raise ValueError(f"{len(outputs)} outputs but {len(gold)} gold answers")
    if not gold:
        return {"sa": 0.0, "accuracy": 0.0}
    sa = acc = 0
    for out, g in zip(outputs, gold):
        seg = out.get("answer_segment", "") or ""
        full = out.get("full_text", "") or ""
        hit_seg = g in seg
        sa += hit_seg
        acc += hit_seg or g in full
    return {"sa": sa / len(gold), "accuracy": acc / len(gold)}


@dataclass
class MetricReport:
    bleu4: float = 0.0
    rouge1: float = 0.0
    rouge2: float = 0.0
    rougeL: float = 0.0
    sa: float = 0.0
    accuracy: float = 0.0
    samples: int = 0

    def to_dict(self, percent: bool = False) -> dict:
        d = asdict(self)
        if percent:
            for k in ("bleu4", "rouge1", "rouge2", "rougeL", "sa", "accuracy"):
                d[k] *= 100.0
        return d


def evaluate_records(records: Iterable[dict]) -> MetricReport:
    """Average metrics over JSON-lines style records.

    Records carry ``candidate`` and ``references``; ``gold`` (and optionally
    ``answer_segment``) enables SA/accuracy. ROUGE uses the first reference.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to evaluate")
    b = r1 = r2 = rl = 0.0
    outputs, gold = [], []
    for rec in records:
        cand, refs = rec["candidate"], rec["references"]
        if isinstance(refs, str):
            refs = [refs]
        b += bleu4(cand, refs)
        ref0 = refs[0]
        r1 += rouge_n(cand, ref0, 1)
        r2 += rouge_n(cand, ref0, 2) if len(_tokens(ref0)) >= 2 else 0.0
        rl += rouge_l(cand, ref0)
        if "gold" in rec:
            outputs.append({"answer_segment": rec.get("answer_segment", cand), "full_text": rec.get("full_text", cand)})
            gold.append(rec["gold"])
    n = len(records)
    acc = answer_accuracy(outputs, gold)
    return MetricReport(b / n, r1 / n, r2 / n, rl / n, acc["sa"], acc["accuracy"], n)
