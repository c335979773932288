"""Evaluation metrics: ROUGE, BLEU, a resource-free METEOR, Recall@K.

All scores live in [0, 1]; multiply by 100 for the conventional reporting
scale. Token lists are compared as given, so hypothesis and reference must
come through the same tokenizer.
"""

from __future__ import annotations

import json
from collections import Counter
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def rouge_n(hyp: Sequence[str], ref: Sequence[str], n: int) -> float:
    """Clipped n-gram overlap F1; 0 when either side has no n-grams."""
    if n < 1:
        raise ValueError("n-gram order must be >= 1")
    hyp_counts = _ngrams(hyp, n)
    ref_counts = _ngrams(ref, n)
    total_h = sum(hyp_counts.values())
    total_r = sum(ref_counts.values())
    if total_h == 0 or total_r == 0:
        return 0.0
    overlap = sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
    return _f1(overlap / total_h, overlap / total_r)


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(hyp: Sequence[str], ref: Sequence[str]) -> float:
    """Longest-common-subsequence F1."""
    if not hyp or not ref:
        return 0.0
    lcs = _lcs_length(hyp, ref)
    return _f1(lcs / len(hyp), lcs / len(ref))


def bleu(hyp: Sequence[str], ref: Sequence[str], max_n: int = 4) -> Dict[int, float]:
    """B-1..B-max_n: clipped precision, geometric mean, brevity penalty.

    Orders >= 2 with zero matches get add-one smoothing; an order with no
    hypothesis n-grams at all zeroes the score for that and higher n.
    """
    scores: Dict[int, float] = {}
    if not hyp:
        return {n: 0.0 for n in range(1, max_n + 1)}
    bp = 1.0 if len(hyp) >= len(ref) else float(np.exp(1.0 - len(ref) / len(hyp)))
    log_precisions: List[float] = []
    dead = False
    for n in range(1, max_n + 1):
        hyp_counts = _ngrams(hyp, n)
        total = sum(hyp_counts.values())
        if total == 0:
            dead = True
        if dead:
            scores[n] = 0.0
            continue
        ref_counts = _ngrams(ref, n)
        matched = sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
        if matched == 0:
            if n == 1:
                dead = True
                scores[n] = 0.0
                continue
            p = (matched + 1.0) / (total + 1.0)
        else:
            p = matched / total
        log_precisions.append(np.log(p))
        scores[n] = bp * float(np.exp(np.mean(log_precisions)))
    return scores


def _stem(token: str) -> str:
    return token[:4]


def _align_meteor(hyp: Sequence[str], ref: Sequence[str],
                  node_budget: int = 200_000) -> Tuple[int, int]:
    """(matches, chunks): max matches, then min chunks among such alignments.

    Exhaustive DFS over per-hypothesis-token choices with memo-free pruning;
    falls back to the greedy left-to-right alignment if the budget runs out.
    """
    h_stems = [_stem(t) for t in hyp]
    r_stems = [_stem(t) for t in ref]
    options = [
        [j for j, rs in enumerate(r_stems) if rs == hs] for hs in h_stems
    ]
    remaining = [len(o) > 0 for o in options]

    best = [-1, 0]  # (matches, chunks), more matches then fewer chunks wins

    def chunks_of(pairs: List[Tuple[int, int]]) -> int:
        count = 0
        prev = None
        for hi, rj in pairs:  # pairs arrive sorted by hypothesis position
            if prev is None or hi != prev[0] + 1 or rj != prev[1] + 1:
                count += 1
            prev = (hi, rj)
        return count

    state = {"nodes": 0, "aborted": False}

    def dfs(i: int, used: set, pairs: List[Tuple[int, int]]):
        if state["aborted"]:
            return
        state["nodes"] += 1
        if state["nodes"] > node_budget:
            state["aborted"] = True
            return
        upper = len(pairs) + sum(1 for k in range(i, len(hyp)) if remaining[k])
        if upper < best[0]:
            return
        if i == len(hyp):
            ch = chunks_of(pairs)
            if len(pairs) > best[0] or (len(pairs) == best[0] and ch < best[1]):
                best[0], best[1] = len(pairs), ch
            return
        for j in options[i]:
            if j not in used:
                used.add(j)
                pairs.append((i, j))
                dfs(i + 1, used, pairs)
                pairs.pop()
                used.remove(j)
        dfs(i + 1, used, pairs)

    dfs(0, set(), [])
    if not state["aborted"]:
        return best[0], best[1]

    # greedy fallback: first available reference slot per hypothesis token
    used: set = set()
    pairs: List[Tuple[int, int]] = []
    for i, opts in enumerate(options):
        for j in opts:
            if j not in used:
                used.add(j)
                pairs.append((i, j))
                break
    return len(pairs), chunks_of(pairs)


def meteor_lite(hyp: Sequence[str], ref: Sequence[str]) -> float:
    """Unigram METEOR with exact + 4-char-prefix matching, no synonym data.

    F_mean = 10PR/(R+9P), penalty = 0.5*(chunks/matches)^3 once the
    alignment fragments; a single contiguous chunk carries no penalty, so
    identical sequences score exactly 1.
    """
    if not hyp or not ref:
        return 0.0
    matches, chunks = _align_meteor(hyp, ref)
    if matches == 0:
        return 0.0
    p = matches / len(hyp)
    r = matches / len(ref)
    f_mean = 10 * p * r / (r + 9 * p)
    penalty = 0.5 * (chunks / matches) ** 3 if chunks > 1 else 0.0
    return f_mean * (1.0 - penalty)


def recall_at_k(scores: np.ndarray, gold: np.ndarray, k: int) -> float:
    """Fraction of queries whose gold candidate ranks in the top k.

    Ties resolve to the lower candidate index; k beyond the candidate count
    is clamped to it.
    """
    scores = np.asarray(scores, dtype=float)
    gold = np.asarray(gold)
    if scores.ndim != 2:
        raise ValueError("score table must be 2-d (queries x candidates)")
    q, c = scores.shape
    if gold.shape != (q,) or gold.min() < 0 or gold.max() >= c:
        raise ValueError("gold indices must be one valid candidate per query")
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, c)
    hits = 0
    rows = np.arange(q)
    gold_scores = scores[rows, gold]
    better = (scores > gold_scores[:, None]).sum(axis=1)
    tied_before = ((scores == gold_scores[:, None])
                   & (np.arange(c)[None, :] < gold[:, None])).sum(axis=1)
    rank = better + tied_before + 1
    hits = int((rank <= k).sum())
    return hits / q


def sequence_scores(hyp: Sequence[str], ref: Sequence[str]) -> Dict[str, float]:
    """All generation metrics for one (hypothesis, reference) pair."""
    b = bleu(hyp, ref)
    return {
        "rouge1": rouge_n(hyp, ref, 1),
        "rouge2": rouge_n(hyp, ref, 2),
        "rougeL": rouge_l(hyp, ref),
        "bleu1": b[1],
        "bleu2": b[2],
        "bleu3": b[3],
        "bleu4": b[4],
        "meteor_lite": meteor_lite(hyp, ref),
    }


def corpus_scores(pairs: Sequence[Tuple[Sequence[str], Sequence[str]]]) -> Dict[str, float]:
    """Mean of per-sample scores over (hyp, ref) pairs."""
    if not pairs:
        raise ValueError("cannot score an empty corpus")
    rows = [sequence_scores(h, r) for h, r in pairs]
    return {key: float(np.mean([row[key] for row in rows])) for key in rows[0]}


def write_report(path, corpus: Dict[str, float],
                 per_sample: Optional[List[Dict[str, float]]] = None,
                 extra: Optional[Dict] = None) -> None:
    """JSONL report: one corpus row, then one row per sample."""
    with open(path, "w") as fh:
        head = {"kind": "corpus", **(extra or {}), **corpus}
        fh.write(json.dumps(head) + "\n")
        for i, row in enumerate(per_sample or []):
            fh.write(json.dumps({"kind": "sample", "index": i, **row}) + "\n")


def read_report(path) -> Dict:
    """Corpus row of a report written by write_report."""
    with open(path) as fh:
        first = json.loads(fh.readline())
    if first.get("kind") != "corpus":
        raise ValueError("report file does not start with a corpus row")
    return first
