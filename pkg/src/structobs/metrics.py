"""Surface-overlap, label-efficacy, and retrieval metrics."""

from collections import Counter
from dataclasses import dataclass, field

import numpy as np


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses, references, max_order=4):
    """Corpus BLEU with clipped n-gram counts pooled before the geometric mean.

    `references` holds one list of reference token lists per hypothesis.
    Brevity penalty exp(1 - r/c) applies when the hypothesis corpus is
    shorter than the (closest-length) reference corpus.
    """
    if not 1 <= max_order <= 4:
        raise ValueError(f"max_order must be in 1..4, got {max_order}")
    if not hypotheses or len(hypotheses) != len(references):
        raise ValueError("need equal, non-zero numbers of hypotheses and reference sets")
    matched = [0] * max_order
    possible = [0] * max_order
    hyp_len = 0
    ref_len = 0
    for hyp, refs in zip(hypotheses, references):
        if not refs:
            raise ValueError("each hypothesis needs at least one reference")
        hyp_len += len(hyp)
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        for n in range(1, max_order + 1):
            counts = _ngrams(hyp, n)
            best = Counter()
            for ref in refs:
                ref_counts = _ngrams(ref, n)
                for gram, c in ref_counts.items():
                    best[gram] = max(best[gram], c)
            possible[n - 1] += max(len(hyp) - n + 1, 0)
            matched[n - 1] += sum(min(c, best[gram]) for gram, c in counts.items())
    if any(p == 0 or m == 0 for m, p in zip(matched, possible)):
        return 0.0
    log_precision = sum(np.log(m / p) for m, p in zip(matched, possible)) / max_order
    bp = 1.0 if hyp_len >= ref_len else float(np.exp(1.0 - ref_len / hyp_len))
    return float(bp * np.exp(log_precision))


def bleu(hypothesis, references, max_order=4):
    """Single-pair convenience wrapper over corpus_bleu."""
    return corpus_bleu([hypothesis], [references], max_order)


def _lcs_length(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(hypothesis, reference):
    """LCS-based F-measure with beta = 1 (balanced precision/recall)."""
    if not reference:
        raise ValueError("reference must be non-empty")
    if not hypothesis:
        return 0.0
    lcs = _lcs_length(hypothesis, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(hypothesis)
    r = lcs / len(reference)
    return 2 * p * r / (p + r)


def corpus_rouge_l(hypotheses, references):
    if not hypotheses or len(hypotheses) != len(references):
        raise ValueError("need equal, non-zero numbers of hypotheses and references")
    return float(np.mean([rouge_l(h, r) for h, r in zip(hypotheses, references)]))


def ce_metrics(pred_labels, true_labels, average="micro"):
    """Precision, recall, F1 over multi-hot label matrices; 0 on empty denominators."""
    pred = np.asarray(pred_labels, dtype=bool)
    true = np.asarray(true_labels, dtype=bool)
    if pred.shape != true.shape:
        raise ValueError(f"label shapes differ: {pred.shape} vs {true.shape}")

    def prf(tp, fp, fn):
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        return p, r, f

    if average == "micro":
        tp = int(np.sum(pred & true))
        fp = int(np.sum(pred & ~true))
        fn = int(np.sum(~pred & true))
        return prf(tp, fp, fn)
    if average == "macro":
        per_label = [
            prf(int(np.sum(pred[:, j] & true[:, j])),
                int(np.sum(pred[:, j] & ~true[:, j])),
                int(np.sum(~pred[:, j] & true[:, j])))
            for j in range(pred.shape[1])
        ]
        return tuple(float(np.mean([m[i] for m in per_label])) for i in range(3))
    raise ValueError(f"unknown averaging mode {average!r}")


def retrieval_recall(text_tokens, volume_tokens, ks=(1, 5, 10)):
    """Report-to-volume recall@K with structure-mean cosine scores.

    `text_tokens[i]` maps structure index -> projected text token for query
    subject i; `volume_tokens[j]` is the (n_structures, d) matrix of
    projected visual tokens for candidate subject j. The query's score for
    a candidate averages the dot products over the query's present
    structures; ties rank the lower volume index first.
    """
    n = len(text_tokens)
    if n == 0 or n != len(volume_tokens):
        raise ValueError("need equal, non-zero numbers of queries and volumes")
    vol = np.stack(volume_tokens)  # (n, n_structures, d)
    ranks = np.zeros(n, dtype=int)
    for i, query in enumerate(text_tokens):
        if not query:
            raise ValueError(f"query {i} has no present structures")
        structs = sorted(query)
        qmat = np.stack([query[s] for s in structs])  # (m, d)
        scores = np.einsum("nmd,md->n", vol[:, structs, :], qmat) / len(structs)
        order = np.argsort(-scores, kind="stable")
        ranks[i] = int(np.nonzero(order == i)[0][0])
    return {k: float(np.mean(ranks < k)) for k in ks}


@dataclass
class MetricReport:
    """All evaluation numbers for one split, each in [0, 1]."""

    bleu1: float
    bleu4: float
    rouge_l: float
    ce_precision: float
    ce_recall: float
    ce_f1: float
    recall_at: dict = field(default_factory=dict)
    case_count: int = 0

    def rows(self):
        rows = [
            ("bleu1", self.bleu1),
            ("bleu4", self.bleu4),
            ("rouge_l", self.rouge_l),
            ("ce_precision", self.ce_precision),
            ("ce_recall", self.ce_recall),
            ("ce_f1", self.ce_f1),
        ]
        rows.extend((f"recall_at_{k}", v) for k, v in sorted(self.recall_at.items()))
        rows.append(("case_count", self.case_count))
        return rows
