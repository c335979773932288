"""Beam-search decoding over a step function.

The decoder is abstracted to `step_fn(prefixes) -> logits`: prefixes is an
int array (active, t) of BOS-prefixed sequences of equal length, logits
(active, vocab). Scores are cumulative log-probabilities; final ranking
divides by generated token count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List

import numpy as np
from scipy.special import logsumexp


@dataclass
class BeamHypothesis:
    ids: List[int]            # BOS-prefixed token ids
    score: float = 0.0        # cumulative log-probability
    finished: bool = False

    @property
    def generated(self) -> List[int]:
        return self.ids[1:]

    @property
    def normalized_score(self) -> float:
        n = len(self.ids) - 1
        return self.score / max(n, 1)


def _rank_key(hyp: BeamHypothesis):
    # higher normalized score first; ties to the lexicographically smaller
    # token sequence, which also puts a shorter prefix before its extension
    return (-hyp.normalized_score, tuple(hyp.generated))


def beam_search(step_fn: Callable[[np.ndarray], np.ndarray], bos_id: int,
                eos_id: int, beam_size: int = 5,
                max_len: int = 64) -> BeamHypothesis:
    """Best finished hypothesis; beam_size=1 reduces to greedy argmax."""
    hyps = beam_search_all(step_fn, bos_id, eos_id, beam_size, max_len)
    return hyps[0]


def beam_search_all(step_fn, bos_id: int, eos_id: int, beam_size: int = 5,
                    max_len: int = 64) -> List[BeamHypothesis]:
    """All finished hypotheses, best first."""
    if beam_size < 1:
        raise ValueError("beam size must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    active = [BeamHypothesis(ids=[bos_id])]
    finished: List[BeamHypothesis] = []

    for _ in range(max_len):
        if not active:
            break
        prefixes = np.array([h.ids for h in active], dtype=np.int64)
        logits = np.asarray(step_fn(prefixes), dtype=np.float64)
        logp = logits - logsumexp(logits, axis=-1, keepdims=True)
        scores = np.array([h.score for h in active])[:, None] + logp

        flat = scores.reshape(-1)
        vocab = logp.shape[-1]
        # stable sort on score; index order breaks ties by parent then token id
        order = np.argsort(-flat, kind="stable")

        next_active: List[BeamHypothesis] = []
        taken = 0
        for idx in order:
            if taken >= beam_size:
                break
            parent = active[idx // vocab]
            token = idx % vocab
            child = BeamHypothesis(ids=parent.ids + [token], score=flat[idx])
            taken += 1
            if token == eos_id:
                child.finished = True
                finished.append(child)
            else:
                next_active.append(child)
        active = next_active

    for hyp in active:  # length cutoff reached without EOS
        hyp.finished = True
        finished.append(hyp)
    finished.sort(key=_rank_key)
    return finished


def greedy_decode(step_fn, bos_id: int, eos_id: int,
                  max_len: int = 64) -> BeamHypothesis:
    return beam_search(step_fn, bos_id, eos_id, beam_size=1, max_len=max_len)
