"""Sentence-level text metrics: BLEU-4 and ROUGE-L.

BLEU smoothing: any n-gram order with zero clipped matches contributes a
floor precision of 1 / (2 * len(candidate)); orders with no candidate
n-grams at all use the same floor.  The brevity penalty uses the closest
reference length, ties to the shorter one.  ROUGE-L is the LCS F-measure
with beta = 1.2.
"""
from __future__ import annotations

import math
from collections import Counter

ROUGE_BETA = 1.2


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate, references, max_order=4):
    """BLEU with up to 4-gram clipped precisions, in [0, 1].

    `candidate` is a token list; `references` a list of token lists.
    An empty candidate scores 0.
    """
    if not references or not any(references):
        raise ValueError("need at least one non-empty reference")
    if not candidate:
        return 0.0
    c = len(candidate)
    log_sum = 0.0
    floor = 1.0 / (2.0 * c)
    for n in range(1, max_order + 1):
        cand = _ngrams(candidate, n)
        total = max(c - n + 1, 0)
        clipped = 0
        if total > 0 and cand:
            best = Counter()
            for ref in references:
                rn = _ngrams(ref, n)
                for g, cnt in rn.items():
                    if cnt > best[g]:
                        best[g] = cnt
            clipped = sum(min(cnt, best[g]) for g, cnt in cand.items())
        p = clipped / total if clipped > 0 else floor
        log_sum += math.log(p)
    ref_len = min((len(r) for r in references),
                  key=lambda rl: (abs(rl - c), rl))
    bp = 1.0 if c >= ref_len else math.exp(1.0 - ref_len / c)
    return bp * math.exp(log_sum / max_order)


def lcs_length(a, b):
    """Longest common subsequence length (iterative DP, O(len a * len b))."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference, beta=ROUGE_BETA):
    """LCS-based F-measure in [0, 1]; empty input scores 0."""
    if not candidate or not reference:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    rec = lcs / len(reference)
    prec = lcs / len(candidate)
    denom = rec + beta * beta * prec
    return (1.0 + beta * beta) * rec * prec / denom
