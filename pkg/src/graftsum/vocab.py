"""Tokenizer and vocabulary with fixed reserved ids."""

from __future__ import annotations

import json
import re
from collections import Counter
from typing import Dict, Iterable, List, Sequence

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
MASK_ID = 4

RESERVED = ["[PAD]", "[BOS]", "[EOS]", "[UNK]", "[MASK]"]

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)
_WORDLike = re.compile(r"\w", re.UNICODE)


def tokenize(text: str) -> List[str]:
    """Word tokens plus standalone punctuation marks."""
    return _TOKEN_RE.findall(text)


def detokenize(tokens: Sequence[str]) -> str:
    """Joins with spaces; punctuation tokens attach to the previous word."""
    out: List[str] = []
    for tok in tokens:
        if out and not _WORDLike.search(tok):
            out[-1] = out[-1] + tok
        else:
            out.append(tok)
    return " ".join(out)


class Vocabulary:
    """token<->id map; non-reserved ids ordered by (freq desc, token asc)."""

    def __init__(self, tokens_in_order: Sequence[str]):
        self._tokens: List[str] = list(RESERVED) + list(tokens_in_order)
        if len(set(self._tokens)) != len(self._tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self._ids: Dict[str, int] = {t: i for i, t in enumerate(self._tokens)}

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self._ids.get(t, UNK_ID) for t in tokens]

    def encode_text(self, text: str) -> List[int]:
        return self.encode(tokenize(text))

    def decode(self, ids: Sequence[int], skip_special: bool = True) -> List[str]:
        out = []
        for i in ids:
            if skip_special and i < len(RESERVED):
                continue
            out.append(self._tokens[int(i)])
        return out

    def decode_text(self, ids: Sequence[int], skip_special: bool = True) -> str:
        return detokenize(self.decode(ids, skip_special))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"tokens": self._tokens[len(RESERVED):]}, fh)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path) as fh:
            payload = json.load(fh)
        return cls(payload["tokens"])


def build_vocab(corpus: Iterable[str], min_freq: int = 1) -> Vocabulary:
    """Count tokens over text lines and keep those with freq >= min_freq."""
    counts: Counter = Counter()
    saw_any = False
    for line in corpus:
        saw_any = True
        counts.update(tokenize(line))
    if not saw_any or not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = [t for t, c in counts.items() if c >= min_freq and t not in RESERVED]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)
