"""Corpus-level caption metrics: BLEU-N, ROUGE-L, CIDEr, exact-match METEOR, S*_m."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

from .data import normalize
from .errors import ContractError

ROUGE_BETA2 = 1.44
METRIC_ORDER = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR_exact", "ROUGE_L", "CIDEr", "S*_m")


@dataclass
class EvalCorpus:
    """Aligned hypotheses and their references, already tokenized."""

    hyps: list[list[str]]
    refs: list[list[list[str]]]

    def __post_init__(self):
        if len(self.hyps) != len(self.refs):
            raise ContractError(f"{len(self.hyps)} hypotheses for {len(self.refs)} reference sets")
        for i, rs in enumerate(self.refs):
            if not rs:
                raise ContractError(f"sample {i} has no references")
        for seq in [*self.hyps, *(r for rs in self.refs for r in rs)]:
            if any(not tok for tok in seq):
                raise ContractError("empty token")

    @classmethod
    def from_strings(cls, hyps: Sequence[str], refs: Sequence[Sequence[str]]) -> "EvalCorpus":
        return cls([normalize(h) for h in hyps], [[normalize(r) for r in rs] for rs in refs])

    def __len__(self) -> int:
        return len(self.hyps)


def _nonempty(corpus: EvalCorpus) -> None:
    if len(corpus) == 0:
        raise ContractError("empty corpus")


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU


def bleu_n(corpus: EvalCorpus, n: int = 4) -> float:
    """Corpus BLEU with orders 1..n, clipped counts, no smoothing.

    The effective reference length per sample is the closest reference length
    (shorter wins ties).
    """
    _nonempty(corpus)
    if not 1 <= n <= 4:
        raise ContractError("BLEU order must be 1..4")
    matched = [0] * n
    total = [0] * n
    hyp_len = ref_len = 0
    for hyp, refs in zip(corpus.hyps, corpus.refs):
        hyp_len += len(hyp)
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        for k in range(1, n + 1):
            counts = ngrams(hyp, k)
            ceiling: Counter = Counter()
            for r in refs:
                ceiling |= ngrams(r, k)
            matched[k - 1] += sum(min(c, ceiling[g]) for g, c in counts.items())
            total[k - 1] += sum(counts.values())
    if min(matched) == 0:
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(matched, total)) / n
    brevity = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return brevity * math.exp(log_precision)


# ---------------------------------------------------------------------------
# ROUGE-L


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sample(hyp: Sequence[str], refs: Sequence[Sequence[str]], beta2: float = ROUGE_BETA2) -> float:
    best = 0.0
    for ref in refs:
        lcs = lcs_length(hyp, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(hyp), lcs / len(ref)
        best = max(best, (1 + beta2) * p * r / (r + beta2 * p))
    return best


def rouge_l(corpus: EvalCorpus) -> float:
    _nonempty(corpus)
    return sum(rouge_l_sample(h, rs) for h, rs in zip(corpus.hyps, corpus.refs)) / len(corpus)


# ---------------------------------------------------------------------------
# CIDEr


def _tfidf(tokens, n, df, log_docs):
    vec = {g: c * (log_docs - math.log(max(1.0, df.get(g, 0)))) for g, c in ngrams(tokens, n).items()}
    return vec, math.sqrt(sum(v * v for v in vec.values()))


def cider_scores(corpus: EvalCorpus, max_n: int = 4) -> list[float]:
    """Per-sample CIDEr on the 0..10 scale; document frequencies come from the references."""
    if len(corpus) < 2:
        raise ContractError("CIDEr needs at least 2 samples to estimate document frequencies")
    df: Counter = Counter()
    for refs in corpus.refs:
        df.update({g for r in refs for n in range(1, max_n + 1) for g in ngrams(r, n)})
    log_docs = math.log(len(corpus))
    scores = []
    for hyp, refs in zip(corpus.hyps, corpus.refs):
        per_ref = []
        for ref in refs:
            sims = []
            for n in range(1, max_n + 1):
                hv, hnorm = _tfidf(hyp, n, df, log_docs)
                rv, rnorm = _tfidf(ref, n, df, log_docs)
                dot = sum(v * rv.get(g, 0.0) for g, v in hv.items())
                sims.append(dot / (hnorm * rnorm) if hnorm and rnorm else 0.0)
            per_ref.append(sum(sims) / max_n)
        scores.append(10.0 * sum(per_ref) / len(per_ref))
    return scores


def cider(corpus: EvalCorpus) -> float:
    scores = cider_scores(corpus)
    return sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# METEOR (exact match only)


def align_exact(hyp: Sequence[str], ref: Sequence[str]) -> tuple[int, int]:
    """(matches, chunks) of the unigram alignment with the most matches and, among
    those, the fewest chunks. Exhaustive over hypothesis positions left to right."""
    hyp, ref = tuple(hyp), tuple(ref)
    where = {w: [j for j, r in enumerate(ref) if r == w] for w in set(hyp)}

    @lru_cache(maxsize=None)
    def best(i: int, used: int, prev: int) -> tuple[int, int]:
        # returns (matches, -chunks) for hyp[i:], maximised lexicographically
        if i == len(hyp):
            return 0, 0
        m, c = best(i + 1, used, -1)
        top = (m, c)
        for j in where[hyp[i]]:
            if used >> j & 1:
                continue
            m, c = best(i + 1, used | 1 << j, j)
            cand = (m + 1, c - (0 if prev >= 0 and j == prev + 1 else 1))
            if cand > top:
                top = cand
        return top

    m, neg_chunks = best(0, 0, -1)
    return m, -neg_chunks


def meteor_sample(hyp: Sequence[str], refs: Sequence[Sequence[str]]) -> float:
    best = 0.0
    for ref in refs:
        m, chunks = align_exact(hyp, ref)
        if m == 0:
            continue
        p, r = m / len(hyp), m / len(ref)
        f = 10 * p * r / (r + 9 * p)
        best = max(best, f * (1 - 0.5 * (chunks / m) ** 3))
    return best


def meteor_exact(corpus: EvalCorpus) -> float:
    _nonempty(corpus)
    return sum(meteor_sample(h, rs) for h, rs in zip(corpus.hyps, corpus.refs)) / len(corpus)


# ---------------------------------------------------------------------------
# composite


def s_m_average(bleu4: float | None, meteor: float | None, rouge_l: float | None, cider: float | None) -> float:
    """Arithmetic mean of BLEU-4, METEOR, ROUGE-L and CIDEr, all on one display scale."""
    parts = {"bleu4": bleu4, "meteor": meteor, "rouge_l": rouge_l, "cider": cider}
    missing = [k for k, v in parts.items() if v is None]
    if missing:
        raise ContractError(f"S*_m needs all four components; missing {missing}")
    return (bleu4 + meteor + rouge_l + cider) / 4


def evaluate(corpus: EvalCorpus) -> dict[str, float]:
    """Every metric in report order. BLEU, METEOR and ROUGE-L lie in [0, 1];
    CIDEr in [0, 10]."""
    report = {f"BLEU-{n}": bleu_n(corpus, n) for n in range(1, 5)}
    report["METEOR_exact"] = meteor_exact(corpus)
    report["ROUGE_L"] = rouge_l(corpus)
    report["CIDEr"] = cider(corpus) if len(corpus) >= 2 else float("nan")
    report["S*_m"] = s_m_average(report["BLEU-4"], report["METEOR_exact"], report["ROUGE_L"], report["CIDEr"])
    return report


def format_report(report: dict[str, float]) -> str:
    return "".join(f"{k}\t{report[k]:.4f}\n" for k in METRIC_ORDER if k in report)
