"""Corpus ingestion, on-disk layout, and batch assembly.

JSONL schemas (one record per line):
  nlg:      {"source": str, "target": str}
  matching: {"caption": str, "video_features": [[...]] | "video": relative path}
  triplet:  {"transcript": str, "headline": str,
             "video_features": [[...]] | "video": relative path}

"video" paths resolve relative to the JSONL file and point at frame-feature
binaries; "video_features" carries the matrix inline. Overlong transcripts are
never dropped quietly: the length policy either rejects them or splits them
into windowed samples.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from .encoders import FrameSampler, read_frame_features, write_frame_features
from .synthetic import MatchingPair, NlgPair, SyntheticCorpora, Triplet
from .vocab import BOS_ID, EOS_ID, MASK_ID, PAD_ID, Vocabulary, tokenize

log = logging.getLogger("graftsum.data")

SCHEMAS = {
    "nlg": ("source", "target"),
    "matching": ("caption",),
    "triplet": ("transcript", "headline"),
}


class DataError(Exception):
    """Malformed input data; maps to CLI exit code 3."""


def _load_features(record: dict, line_no: int, jsonl_dir: Path) -> np.ndarray:
    if "video_features" in record:
        try:
            feats = np.asarray(record["video_features"], dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise DataError(f"line {line_no}: video_features not numeric: {exc}")
        if feats.ndim != 2 or feats.size == 0:
            raise DataError(f"line {line_no}: video_features must be a non-empty matrix")
        if not np.all(np.isfinite(feats)):
            raise DataError(f"line {line_no}: non-finite value in video_features")
        return feats.astype(np.float32)
    if "video" in record:
        path = jsonl_dir / record["video"]
        try:
            feats = read_frame_features(path)
        except (OSError, ValueError) as exc:
            raise DataError(f"line {line_no}: video file {record['video']!r}: {exc}")
        if not np.all(np.isfinite(feats)):
            raise DataError(f"line {line_no}: non-finite value in video {record['video']!r}")
        return feats
    raise DataError(f"line {line_no}: missing field video_features (or video path)")


def ingest_jsonl(path, schema: str) -> List:
    """Schema-validated samples from a JSONL file; errors carry line numbers."""
    if schema not in SCHEMAS:
        raise ValueError(f"unknown schema {schema!r}")
    path = Path(path)
    jsonl_dir = path.parent
    samples: List = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {line_no}: invalid JSON: {exc}")
            if not isinstance(record, dict):
                raise DataError(f"line {line_no}: record is not an object")
            for fieldname in SCHEMAS[schema]:
                if fieldname not in record:
                    raise DataError(f"line {line_no}: missing field {fieldname!r}")
                if not isinstance(record[fieldname], str):
                    raise DataError(f"line {line_no}: field {fieldname!r} must be a string")
            if schema == "nlg":
                samples.append(NlgPair(source=record["source"], target=record["target"]))
            elif schema == "matching":
                feats = _load_features(record, line_no, jsonl_dir)
                samples.append(MatchingPair(frames=feats, caption=record["caption"]))
            else:
                feats = _load_features(record, line_no, jsonl_dir)
                samples.append(Triplet(frames=feats, transcript=record["transcript"],
                                       headline=record["headline"]))
    if not samples:
        log.warning("no samples in %s (empty file)", path)
    return samples


def write_corpora(corpora: SyntheticCorpora, out_dir) -> Dict[str, Path]:
    """Write all splits to out_dir; videos go to frame-feature binaries."""
    out = Path(out_dir)
    frames_dir = out / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    written: Dict[str, Path] = {}

    for split, pairs in corpora.nlg.items():
        path = out / f"nlg_{split}.jsonl"
        with open(path, "w") as fh:
            for pair in pairs:
                fh.write(json.dumps({"source": pair.source, "target": pair.target}) + "\n")
        written[f"nlg_{split}"] = path

    for split, pairs in corpora.matching.items():
        path = out / f"matching_{split}.jsonl"
        with open(path, "w") as fh:
            for i, pair in enumerate(pairs):
                rel = f"frames/match_{split}_{i:06d}.frames"
                write_frame_features(out / rel, pair.frames)
                fh.write(json.dumps({"caption": pair.caption, "video": rel}) + "\n")
        written[f"matching_{split}"] = path

    for split, triplets in corpora.triplets.items():
        path = out / f"triplet_{split}.jsonl"
        with open(path, "w") as fh:
            for i, tri in enumerate(triplets):
                rel = f"frames/triplet_{split}_{i:06d}.frames"
                write_frame_features(out / rel, tri.frames)
                fh.write(json.dumps({"transcript": tri.transcript,
                                     "headline": tri.headline, "video": rel}) + "\n")
        written[f"triplet_{split}"] = path
    return written


def apply_length_policy(tokens: List[str], limit: int, policy: str,
                        what: str = "sequence") -> List[List[str]]:
    """Fit a token list under `limit`: 'reject' errors, 'split' windows it."""
    if policy not in ("reject", "split"):
        raise ValueError(f"unknown length policy {policy!r}")
    if len(tokens) <= limit:
        return [tokens]
    if policy == "reject":
        raise DataError(
            f"{what} has {len(tokens)} tokens, over the {limit}-token limit "
            f"(set the length policy to 'split' to window it)"
        )
    return [tokens[i:i + limit] for i in range(0, len(tokens), limit)]


def preprocess_nlg(pairs: Sequence[NlgPair], max_src: int,
                   policy: str = "reject") -> List[NlgPair]:
    """Resolve overlong sources up front so batching never truncates.

    Splitting is only well-defined for identity pairs (source == target); a
    windowed source cannot be realigned with an arbitrary target.
    """
    out: List[NlgPair] = []
    for i, pair in enumerate(pairs):
        tokens = tokenize(pair.source)
        if len(tokens) > max_src and policy == "split" and pair.source != pair.target:
            raise DataError(
                f"nlg sample {i}: cannot split a pair whose source and target differ"
            )
        for window in apply_length_policy(tokens, max_src, policy,
                                          f"nlg sample {i} source"):
            text = " ".join(window)
            out.append(NlgPair(source=text, target=text)
                       if pair.source == pair.target else pair)
    return out


def preprocess_triplets(triplets: Sequence[Triplet], max_src: int,
                        policy: str = "reject") -> List[Triplet]:
    """Window overlong transcripts; each window keeps the video and headline."""
    out: List[Triplet] = []
    for i, tri in enumerate(triplets):
        tokens = tokenize(tri.transcript)
        for window in apply_length_policy(tokens, max_src, policy,
                                          f"triplet {i} transcript"):
            out.append(Triplet(frames=tri.frames, transcript=" ".join(window),
                               headline=tri.headline))
    return out


def _pad_rows(rows: Sequence[List[int]], pad: int = PAD_ID) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), pad, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def _corruption_rng(seed: int, sample_id: int, pass_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 7, sample_id, pass_index]))


def corrupt_ids(ids: List[int], vocab_size: int, rng: np.random.Generator,
                rate: float = 0.15) -> tuple:
    """BERT-style corruption: (noisy ids, masked-position flags).

    Of the chosen positions, 80% become [MASK], 10% a random non-reserved id,
    10% stay; at least one position is always chosen.
    """
    n = len(ids)
    flags = rng.random(n) < rate
    if not flags.any():
        flags[rng.integers(n)] = True
    noisy = list(ids)
    for i in np.flatnonzero(flags):
        roll = rng.random()
        if roll < 0.8:
            noisy[i] = MASK_ID
        elif roll < 0.9:
            noisy[i] = int(rng.integers(5, vocab_size))
    return noisy, flags


@dataclass
class Seq2SeqBatch:
    src: np.ndarray          # (B, S) noisy source ids
    src_mask: np.ndarray     # (B, S) True on real tokens
    mlm_positions: np.ndarray  # (B, S) True where corrupted
    mlm_targets: np.ndarray  # (B, S) original ids (valid at mlm positions)
    tgt_in: np.ndarray       # (B, T) BOS-prefixed decoder input
    tgt_out: np.ndarray      # (B, T) EOS-terminated targets, PAD elsewhere


@dataclass
class MatchingBatch:
    video_tokens: np.ndarray  # (B, l, frame_dim) sampled frame rows
    captions: np.ndarray      # (B, S)
    caption_mask: np.ndarray


@dataclass
class TripletBatch:
    src: np.ndarray
    src_mask: np.ndarray
    video_tokens: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    references: List[List[str]]  # gold headline tokens per row


def _check_len(tokens: List, limit: int, what: str) -> List:
    if len(tokens) > limit:
        raise DataError(
            f"{what} has {len(tokens)} tokens, over the {limit}-token limit; "
            f"run the split/reject preprocessing first"
        )
    return tokens


def _seq2seq_rows(ids_in: List[List[int]], ids_out: List[List[int]]):
    tgt_in = _pad_rows([[BOS_ID] + r for r in ids_in])
    tgt_out = _pad_rows([r + [EOS_ID] for r in ids_out])
    return tgt_in, tgt_out


def make_nlg_batch(vocab: Vocabulary, pairs: Sequence[NlgPair],
                   indices: Sequence[int], max_src: int, max_tgt: int,
                   seed: int, pass_index: int, corrupt: bool = True,
                   mlm_rate: float = 0.15) -> Seq2SeqBatch:
    srcs, flags_rows, originals, tgts = [], [], [], []
    for idx in indices:
        pair = pairs[idx]
        src_tokens = _check_len(tokenize(pair.source), max_src, f"nlg source {idx}")
        ids = vocab.encode(src_tokens)
        if corrupt:
            rng = _corruption_rng(seed, idx, pass_index)
            noisy, flags = corrupt_ids(ids, len(vocab), rng, mlm_rate)
        else:
            noisy, flags = ids, np.zeros(len(ids), dtype=bool)
        srcs.append(noisy)
        flags_rows.append(flags)
        originals.append(ids)
        tgt_tokens = _check_len(tokenize(pair.target), max_tgt - 1,
                                f"nlg target {idx}")
        tgts.append(vocab.encode(tgt_tokens))
    src = _pad_rows(srcs)
    mlm_positions = np.zeros(src.shape, dtype=bool)
    mlm_targets = np.full(src.shape, PAD_ID, dtype=np.int64)
    for i, (flags, ids) in enumerate(zip(flags_rows, originals)):
        mlm_positions[i, : len(flags)] = flags
        mlm_targets[i, : len(ids)] = ids
    tgt_in, tgt_out = _seq2seq_rows(tgts, tgts)
    return Seq2SeqBatch(src=src, src_mask=src != PAD_ID,
                        mlm_positions=mlm_positions, mlm_targets=mlm_targets,
                        tgt_in=tgt_in, tgt_out=tgt_out)


def sample_video_tokens(frames: np.ndarray, sampler: FrameSampler,
                        sample_id: int, pass_index: int) -> np.ndarray:
    idx = sampler.indices(frames.shape[0], sample_id, pass_index)
    return frames[idx - 1]


def make_matching_batch(vocab: Vocabulary, pairs: Sequence[MatchingPair],
                        indices: Sequence[int], sampler: FrameSampler,
                        pass_index: int, max_caption: int = 64) -> MatchingBatch:
    vids, caps = [], []
    for idx in indices:
        pair = pairs[idx]
        vids.append(sample_video_tokens(pair.frames, sampler, idx, pass_index))
        tokens = _check_len(tokenize(pair.caption), max_caption, f"caption {idx}")
        caps.append(vocab.encode(tokens))
    captions = _pad_rows(caps)
    return MatchingBatch(video_tokens=np.stack(vids), captions=captions,
                         caption_mask=captions != PAD_ID)


def make_triplet_batch(vocab: Vocabulary, triplets: Sequence[Triplet],
                       indices: Sequence[int], sampler: FrameSampler,
                       pass_index: int, max_src: int, max_tgt: int) -> TripletBatch:
    srcs, vids, tgts, refs = [], [], [], []
    for idx in indices:
        tri = triplets[idx]
        tokens = _check_len(tokenize(tri.transcript), max_src, f"transcript {idx}")
        srcs.append(vocab.encode(tokens))
        vids.append(sample_video_tokens(tri.frames, sampler, idx, pass_index))
        ref = _check_len(tokenize(tri.headline), max_tgt - 1, f"headline {idx}")
        refs.append(ref)
        tgts.append(vocab.encode(ref))
    src = _pad_rows(srcs)
    tgt_in, tgt_out = _seq2seq_rows(tgts, tgts)
    return TripletBatch(src=src, src_mask=src != PAD_ID,
                        video_tokens=np.stack(vids),
                        tgt_in=tgt_in, tgt_out=tgt_out, references=refs)


def epoch_indices(n: int, batch_size: int, rng: np.random.Generator,
                  drop_tail_below: int = 2) -> Iterator[np.ndarray]:
    """Shuffled batch index slices; tails smaller than the floor are dropped."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        chunk = order[start: start + batch_size]
        if len(chunk) >= drop_tail_below:
            yield chunk
