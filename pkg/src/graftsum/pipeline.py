"""Stage orchestration: data generation, the two pre-trains, grafted
fine-tuning, decoding evaluation, retrieval scoring, and the gradient battery.

Every training stage writes a JSONL curve file (one row per step, validation
loss on a fixed 100-step grid with fixed batches) so runs started from
different grafts stay comparable point-for-point.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import (
    GRAFT_ATTRS, graft, load_graft_manifest, read_bundle, save_bundle,
    trainable_parameters,
)
from .config import (
    ModelConfig, PipelineConfig, component_config, graft_component_configs,
    headline_model_kwargs, write_effective_config,
)
from .data import (
    DataError, epoch_indices, ingest_jsonl, make_matching_batch,
    make_nlg_batch, make_triplet_batch, preprocess_nlg, preprocess_triplets,
    sample_video_tokens, write_corpora,
)
from .encoders import FrameSampler
from .fusion import JointModalityLayer
from .gradcheck import check_gradients
from .metrics import corpus_scores, recall_at_k, sequence_scores, write_report
from .model import HeadlineModel, MatchingModel, Seq2SeqTextModel
from .nn import seed_dropout
from .optim import Adam
from .synthetic import SyntheticWorldConfig, generate_synthetic
from .tensor import Tensor
from .vocab import Vocabulary, build_vocab, tokenize

log = logging.getLogger("graftsum.pipeline")

DFS_MODES = ("stochastic", "deterministic")


class NonFiniteLossError(RuntimeError):
    """Training produced NaN/inf; maps to CLI exit code 4."""


# ---------------------------------------------------------------- utilities

def _sub_rng(seed: int, code: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, code]))


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise DataError(f"missing {path} ({hint})")
    return path


def load_vocab(data_dir) -> Vocabulary:
    path = _require(Path(data_dir) / "vocab.json", "run gen-data first")
    return Vocabulary.load(path)


def _maybe_ingest(path: Path, schema: str) -> list:
    """Validation files are optional; a missing one just disables val logging."""
    return ingest_jsonl(path, schema) if path.exists() else []


def _batch_stream(n: int, batch_size: int, seed: int):
    """Endless (pass_index, indices) pairs; fresh shuffle each pass."""
    if n < 2:
        raise DataError(f"need at least 2 training samples, have {n}")
    rng = _sub_rng(seed, 3)
    pass_index = 0
    while True:
        for idx in epoch_indices(n, batch_size, rng):
            yield pass_index, idx
        pass_index += 1


def _fixed_val_indices(n: int, batch_size: int, val_batches: int) -> List[List[int]]:
    out = []
    for start in range(0, n, batch_size):
        chunk = list(range(start, min(start + batch_size, n)))
        if len(chunk) >= 2:
            out.append(chunk)
        if len(out) >= val_batches:
            break
    return out


def _eval_mean_loss(model, loss_fn: Callable[[], Sequence[Tensor]]) -> float:
    model.eval()
    with T.no_grad():
        vals = [float(t.data) for t in loss_fn()]
    model.train()
    return float(np.mean(vals))


def train_loop(label: str, params: Sequence[Tensor],
               step_fn: Callable[[], Tensor], steps: int, lr: float, tcfg,
               curve_path, val_fn: Optional[Callable[[], float]] = None,
               after_step: Optional[Callable[[], None]] = None) -> Path:
    """Adam loop with per-step curve logging and non-finite detection."""
    opt = Adam(params, lr=lr, weight_decay=tcfg.weight_decay,
               clip_norm=tcfg.clip_norm)
    curve_path = Path(curve_path)
    with open(curve_path, "w") as fh:
        def emit(row: dict) -> None:
            fh.write(json.dumps(row) + "\n")

        if val_fn is not None:
            emit({"step": 0, "val_loss": val_fn()})
        for step in range(1, steps + 1):
            loss = step_fn()
            value = float(loss.data)
            if not np.isfinite(value):
                raise NonFiniteLossError(f"{label}: non-finite loss at step {step}")
            loss.backward()
            opt.step()
            if after_step is not None:
                after_step()
            row = {"step": step, "loss": value}
            if val_fn is not None and (step % tcfg.val_every == 0 or step == steps):
                row["val_loss"] = val_fn()
            emit(row)
            if step % tcfg.log_every == 0 or step == steps:
                log.info("%s step %d/%d loss %.4f", label, step, steps, value)
    return curve_path


# ------------------------------------------------------------ model builders

def build_seq2seq(mc: ModelConfig, vocab_size: int,
                  rng: np.random.Generator) -> Seq2SeqTextModel:
    return Seq2SeqTextModel(vocab_size=vocab_size, dim=mc.dim,
                            encoder_layers=mc.text_layers,
                            decoder_layers=mc.decoder_layers, heads=mc.heads,
                            max_src=mc.max_src, max_tgt=mc.max_tgt, rng=rng,
                            ff_mult=mc.ff_mult, dropout=mc.dropout)


def build_matching(mc: ModelConfig, vocab_size: int,
                   rng: np.random.Generator) -> MatchingModel:
    return MatchingModel(vocab_size=vocab_size, dim=mc.dim,
                         video_layers=mc.video_layers,
                         caption_layers=mc.caption_layers, heads=mc.heads,
                         frame_dim=mc.frame_dim, video_tokens=mc.video_tokens,
                         max_caption=mc.max_caption,
                         contrastive_dim=mc.contrastive_dim, rng=rng,
                         ff_mult=mc.ff_mult, dropout=mc.dropout)


# ------------------------------------------------------- model dir save/load

def save_headline_model(model: HeadlineModel, mc: ModelConfig,
                        vocab_size: int, out_dir) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: Dict[str, Path] = {}
    for kind, attr in GRAFT_ATTRS.items():
        path = out / f"{kind.replace('-', '_')}.grmm"
        save_bundle(path, kind, component_config(kind, mc, vocab_size),
                    getattr(model, attr))
        paths[kind] = path
    info = {"kind": "headline", "fusion_mode": model.fusion_mode,
            "vocab_size": vocab_size,
            "model": {f: getattr(mc, f) for f in mc.__dataclass_fields__}}
    (out / "model.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    paths["model.json"] = out / "model.json"
    return paths


def load_headline_model(model_dir) -> HeadlineModel:
    out = Path(model_dir)
    info = json.loads(_require(out / "model.json", "not a saved model dir").read_text())
    if info.get("kind") != "headline":
        raise DataError(f"{out}: model.json does not describe a headline model")
    mc = ModelConfig(**info["model"])
    kwargs = headline_model_kwargs(mc, info["vocab_size"], info["fusion_mode"])
    model = HeadlineModel(rng=np.random.default_rng(0), **kwargs)
    for kind, attr in GRAFT_ATTRS.items():
        _, _, arrays = read_bundle(out / f"{kind.replace('-', '_')}.grmm")
        getattr(model, attr).load_state_arrays(arrays, strict=True)
    return model


def save_matching_model(model: MatchingModel, mc: ModelConfig,
                        vocab_size: int, out_dir) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_bundle(out / "video_encoder.grmm", "video-encoder",
                component_config("video-encoder", mc, vocab_size),
                model.video_encoder)
    save_bundle(out / "matching_heads.grmm", "matching-heads",
                component_config("matching-heads", mc, vocab_size),
                model.heads)
    info = {"kind": "matching", "vocab_size": vocab_size,
            "model": {f: getattr(mc, f) for f in mc.__dataclass_fields__}}
    (out / "model.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    return {"video-encoder": out / "video_encoder.grmm",
            "matching-heads": out / "matching_heads.grmm",
            "model.json": out / "model.json"}


def load_matching_model(model_dir) -> MatchingModel:
    out = Path(model_dir)
    info = json.loads(_require(out / "model.json", "not a saved model dir").read_text())
    if info.get("kind") != "matching":
        raise DataError(f"{out}: model.json does not describe a matching model")
    mc = ModelConfig(**info["model"])
    model = build_matching(mc, info["vocab_size"], np.random.default_rng(0))
    _, _, arrays = read_bundle(out / "video_encoder.grmm")
    model.video_encoder.load_state_arrays(arrays, strict=True)
    _, _, arrays = read_bundle(out / "matching_heads.grmm")
    model.heads.load_state_arrays(arrays, strict=True)
    return model


# -------------------------------------------------------------------- stages

def stage_gen_data(cfg: PipelineConfig, out_dir) -> Dict[str, Path]:
    """Synthetic corpora + the shared vocabulary."""
    world_cfg = SyntheticWorldConfig(seed=cfg.train.seed, **cfg.data.world_kwargs())
    corpora = generate_synthetic(world_cfg, nlg_sizes=cfg.data.sizes("nlg"),
                                 matching_sizes=cfg.data.sizes("matching"),
                                 triplet_sizes=cfg.data.sizes("triplet"))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = write_corpora(corpora, out)
    texts = [p.source for p in corpora.nlg["train"]]
    texts += [p.caption for p in corpora.matching["train"]]
    for tri in corpora.triplets["train"]:
        texts.append(tri.transcript)
        texts.append(tri.headline)
    vocab = build_vocab(texts)
    vocab.save(out / "vocab.json")
    written["vocab"] = out / "vocab.json"
    write_effective_config(cfg, out, "gen-data")
    log.info("gen-data: %d vocabulary entries -> %s", len(vocab), out)
    return written


def stage_pretrain_nlg(cfg: PipelineConfig, data_dir, out_dir) -> Dict[str, Path]:
    mc, tcfg = cfg.model, cfg.train
    data_dir = Path(data_dir)
    vocab = load_vocab(data_dir)
    limit = min(mc.max_src, mc.max_tgt - 1)
    train = preprocess_nlg(ingest_jsonl(_require(data_dir / "nlg_train.jsonl",
                                                 "run gen-data first"), "nlg"),
                           limit, tcfg.length_policy)
    val = preprocess_nlg(_maybe_ingest(data_dir / "nlg_val.jsonl", "nlg"),
                         limit, tcfg.length_policy)

    model = build_seq2seq(mc, len(vocab), _sub_rng(tcfg.seed, 1))
    seed_dropout(model, _sub_rng(tcfg.seed, 4))
    stream = _batch_stream(len(train), tcfg.batch_size, tcfg.seed)

    def step_fn() -> Tensor:
        pass_index, idx = next(stream)
        batch = make_nlg_batch(vocab, train, idx, mc.max_src, mc.max_tgt,
                               tcfg.seed, pass_index, mlm_rate=tcfg.mlm_rate)
        return model.loss(batch)["total"]

    val_idx = _fixed_val_indices(len(val), tcfg.batch_size, tcfg.val_batches)

    def val_fn() -> float:
        def losses():
            return [model.loss(make_nlg_batch(vocab, val, idx, mc.max_src,
                                              mc.max_tgt, tcfg.seed, 0,
                                              mlm_rate=tcfg.mlm_rate))["total"]
                    for idx in val_idx]
        return _eval_mean_loss(model, losses)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    curve = train_loop("pretrain-nlg", model.parameters(), step_fn,
                       tcfg.pretrain_nlg.steps, tcfg.pretrain_nlg.lr, tcfg,
                       out / "curve_pretrain_nlg.jsonl",
                       val_fn if val_idx else None)
    paths = {"curve": curve}
    for kind, module, name in (("text-encoder", model.encoder, "text_encoder"),
                               ("text-decoder", model.decoder, "text_decoder"),
                               ("mlm-head", model.mlm, "mlm_head")):
        path = out / f"{name}.grmm"
        save_bundle(path, kind, component_config(kind, mc, len(vocab)), module)
        paths[kind] = path
    write_effective_config(cfg, out, "pretrain-nlg",
                           {"data_dir": str(data_dir)})
    return paths


def stage_pretrain_match(cfg: PipelineConfig, data_dir, out_dir) -> Dict[str, Path]:
    mc, tcfg = cfg.model, cfg.train
    data_dir = Path(data_dir)
    vocab = load_vocab(data_dir)
    train = ingest_jsonl(_require(data_dir / "matching_train.jsonl",
                                  "run gen-data first"), "matching")
    val = _maybe_ingest(data_dir / "matching_val.jsonl", "matching")

    model = build_matching(mc, len(vocab), _sub_rng(tcfg.seed, 2))
    seed_dropout(model, _sub_rng(tcfg.seed, 4))
    train_sampler = FrameSampler(mc.video_tokens, mode="train", seed=tcfg.seed)
    eval_sampler = FrameSampler(mc.video_tokens, mode="eval")
    stream = _batch_stream(len(train), tcfg.batch_size, tcfg.seed)

    def step_fn() -> Tensor:
        pass_index, idx = next(stream)
        batch = make_matching_batch(vocab, train, idx, train_sampler,
                                    pass_index, mc.max_caption)
        return model.loss(batch)

    val_idx = _fixed_val_indices(len(val), tcfg.batch_size, tcfg.val_batches)

    def val_fn() -> float:
        def losses():
            return [model.loss(make_matching_batch(vocab, val, idx,
                                                   eval_sampler, 0,
                                                   mc.max_caption))
                    for idx in val_idx]
        return _eval_mean_loss(model, losses)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    curve = train_loop("pretrain-match", model.parameters(), step_fn,
                       tcfg.pretrain_match.steps, tcfg.pretrain_match.lr, tcfg,
                       out / "curve_pretrain_match.jsonl",
                       val_fn if val_idx else None,
                       after_step=model.after_step)
    paths = save_matching_model(model, mc, len(vocab), out)
    paths["curve"] = curve
    write_effective_config(cfg, out, "pretrain-match",
                           {"data_dir": str(data_dir)})
    return paths


def _assemble_from_manifest(cfg: PipelineConfig, vocab_size: int,
                            manifest_path, fusion_mode: str) -> HeadlineModel:
    manifest_path = Path(manifest_path)
    manifest = load_graft_manifest(_require(manifest_path, "graft manifest"))
    kwargs = headline_model_kwargs(cfg.model, vocab_size, fusion_mode)
    return graft(manifest, kwargs,
                 graft_component_configs(cfg.model, vocab_size),
                 base_dir=manifest_path.parent)


def _finetune_parameters(model: HeadlineModel) -> List[Tensor]:
    """Trainable params, minus components the fusion mode never touches
    (their gradients would be missing) and frozen grafted components."""
    unused = {"text-only": {"video_encoder", "fusion"},
              "concat": {"fusion"}}.get(model.fusion_mode, set())
    return [p for name, p in trainable_parameters(model)
            if name.split(".")[0] not in unused]


def stage_finetune(cfg: PipelineConfig, data_dir, manifest_path, out_dir,
                   fusion_mode: str = "joint",
                   dfs_mode: str = "stochastic") -> Dict[str, Path]:
    if dfs_mode not in DFS_MODES:
        raise DataError(f"dfs mode must be one of {DFS_MODES}")
    mc, tcfg = cfg.model, cfg.train
    data_dir = Path(data_dir)
    vocab = load_vocab(data_dir)
    train = preprocess_triplets(
        ingest_jsonl(_require(data_dir / "triplet_train.jsonl",
                              "run gen-data first"), "triplet"),
        mc.max_src, tcfg.length_policy)
    val = preprocess_triplets(_maybe_ingest(data_dir / "triplet_val.jsonl",
                                            "triplet"),
                              mc.max_src, tcfg.length_policy)

    model = _assemble_from_manifest(cfg, len(vocab), manifest_path, fusion_mode)
    seed_dropout(model, _sub_rng(tcfg.seed, 4))
    sampler_mode = "train" if dfs_mode == "stochastic" else "eval"
    train_sampler = FrameSampler(mc.video_tokens, mode=sampler_mode,
                                 seed=tcfg.seed)
    eval_sampler = FrameSampler(mc.video_tokens, mode="eval")
    stream = _batch_stream(len(train), tcfg.batch_size, tcfg.seed)

    def step_fn() -> Tensor:
        pass_index, idx = next(stream)
        batch = make_triplet_batch(vocab, train, idx, train_sampler,
                                   pass_index, mc.max_src, mc.max_tgt)
        return model.loss(batch)

    val_idx = _fixed_val_indices(len(val), tcfg.batch_size, tcfg.val_batches)

    def val_fn() -> float:
        def losses():
            return [model.loss(make_triplet_batch(vocab, val, idx,
                                                  eval_sampler, 0, mc.max_src,
                                                  mc.max_tgt))
                    for idx in val_idx]
        return _eval_mean_loss(model, losses)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = _finetune_parameters(model)
    curve = train_loop("finetune", params, step_fn, tcfg.finetune.steps,
                       tcfg.finetune.lr, tcfg, out / "curve_finetune.jsonl",
                       val_fn if val_idx else None)
    paths = save_headline_model(model, mc, len(vocab), out)
    paths["curve"] = curve
    write_effective_config(cfg, out, "finetune",
                           {"data_dir": str(data_dir),
                            "manifest": str(manifest_path),
                            "fusion_mode": fusion_mode, "dfs_mode": dfs_mode,
                            "frozen_components": model.frozen_components,
                            "trainable_parameters": int(sum(p.size for p in params))})
    return paths


def stage_graft_summary(cfg: PipelineConfig, data_dir, manifest_path,
                        out_dir) -> Path:
    """Dry-run assembly: validate the manifest and report what it builds."""
    vocab = load_vocab(Path(data_dir))
    model = _assemble_from_manifest(cfg, len(vocab), manifest_path, "joint")
    manifest = load_graft_manifest(manifest_path)
    counts = {}
    for kind, attr in GRAFT_ATTRS.items():
        module = getattr(model, attr)
        counts[kind] = {
            "parameters": int(module.num_parameters()),
            "source": manifest.components[kind] or "fresh",
            "frozen": bool(manifest.freeze.get(kind, False)),
        }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "graft_summary.json"
    payload = {"seed": manifest.seed, "components": counts,
               "total_parameters": int(model.num_parameters()),
               "trainable_parameters": int(sum(p.size for _, p in
                                               trainable_parameters(model)))}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    write_effective_config(cfg, out, "graft", {"manifest": str(manifest_path)})
    return path


def decode_split(model: HeadlineModel, vocab: Vocabulary, triplets,
                 mc: ModelConfig, beam_size: int, max_len: int):
    """(hypothesis tokens, reference tokens) per sample, deterministic DFS."""
    sampler = FrameSampler(mc.video_tokens, mode="eval")
    model.eval()
    pairs = []
    for i, tri in enumerate(triplets):
        tokens = tokenize(tri.transcript)
        if len(tokens) > mc.max_src:
            raise DataError(
                f"transcript {i} has {len(tokens)} tokens, over the model's "
                f"{mc.max_src}-token budget; evaluation never truncates"
            )
        src = np.asarray(vocab.encode(tokens), dtype=np.int64)
        mask = np.ones(len(src), dtype=bool)
        video = sample_video_tokens(tri.frames, sampler, i, 0)
        hyp = model.generate(src, mask, video, beam_size=beam_size,
                             max_len=max_len)
        pairs.append((vocab.decode(hyp.generated), tokenize(tri.headline)))
    return pairs


def stage_evaluate(cfg: PipelineConfig, data_dir, model_dir, out_dir,
                   split: str = "test") -> Dict[str, float]:
    mc, tcfg = cfg.model, cfg.train
    data_dir = Path(data_dir)
    vocab = load_vocab(data_dir)
    triplets = ingest_jsonl(_require(data_dir / f"triplet_{split}.jsonl",
                                     "run gen-data first"), "triplet")
    if not triplets:
        raise DataError(f"no samples in triplet_{split}.jsonl")
    model = load_headline_model(model_dir)
    max_len = min(tcfg.max_decode_len, mc.max_tgt)
    pairs = decode_split(model, vocab, triplets, mc, tcfg.beam_size, max_len)
    corpus = corpus_scores(pairs)
    rows = []
    for hyp, ref in pairs:
        row = sequence_scores(hyp, ref)
        row["hypothesis"] = " ".join(hyp)
        row["reference"] = " ".join(ref)
        rows.append(row)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = out / "eval_report.jsonl"
    write_report(report, corpus, rows,
                 extra={"split": split, "samples": len(pairs),
                        "beam_size": tcfg.beam_size,
                        "fusion_mode": model.fusion_mode})
    write_effective_config(cfg, out, "evaluate",
                           {"data_dir": str(data_dir),
                            "model_dir": str(model_dir), "split": split})
    log.info("evaluate: rougeL %.4f over %d samples",
             corpus.get("rougeL", 0.0), len(pairs))
    return corpus


def embed_matching_split(model: MatchingModel, vocab: Vocabulary, pairs,
                         mc: ModelConfig, batch_size: int):
    """Unit-norm video and caption embeddings for a whole split."""
    sampler = FrameSampler(mc.video_tokens, mode="eval")
    model.eval()
    vids, caps = [], []
    with T.no_grad():
        for start in range(0, len(pairs), batch_size):
            idx = list(range(start, min(start + batch_size, len(pairs))))
            batch = make_matching_batch(vocab, pairs, idx, sampler, 0,
                                        mc.max_caption)
            vids.append(model.embed_video(batch.video_tokens).data)
            caps.append(model.embed_caption(batch.captions,
                                            batch.caption_mask).data)
    return np.concatenate(vids), np.concatenate(caps)


def retrieval_scores(video_emb: np.ndarray, caption_emb: np.ndarray,
                     ks=(1, 5, 10)) -> Dict[str, Dict[str, float]]:
    sim = video_emb @ caption_emb.T
    gold = np.arange(len(sim))
    return {
        "video_to_text": {f"recall_at_{k}": recall_at_k(sim, gold, k)
                          for k in ks},
        "text_to_video": {f"recall_at_{k}": recall_at_k(sim.T, gold, k)
                          for k in ks},
    }


def stage_retrieve(cfg: PipelineConfig, data_dir, model_dir, out_dir,
                   split: str = "test") -> Dict:
    mc, tcfg = cfg.model, cfg.train
    data_dir = Path(data_dir)
    vocab = load_vocab(data_dir)
    pairs = ingest_jsonl(_require(data_dir / f"matching_{split}.jsonl",
                                  "run gen-data first"), "matching")
    if len(pairs) < 2:
        raise DataError(f"retrieval needs >= 2 pairs, have {len(pairs)}")
    model = load_matching_model(model_dir)
    vids, caps = embed_matching_split(model, vocab, pairs, mc, tcfg.batch_size)
    payload = {"pairs": len(pairs), "split": split,
               **retrieval_scores(vids, caps)}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "retrieval_report.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    write_effective_config(cfg, out, "retrieve",
                           {"data_dir": str(data_dir),
                            "model_dir": str(model_dir), "split": split})
    log.info("retrieve: v->t R@1 %.3f, t->v R@1 %.3f",
             payload["video_to_text"]["recall_at_1"],
             payload["text_to_video"]["recall_at_1"])
    return payload


# ---------------------------------------------------------- gradient battery

def _op_cases(rng: np.random.Generator):
    """(name, build_loss, params) triples covering every differentiable op."""
    def t(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    a, b = t(3, 4), t(3, 4)
    m1, m2 = t(3, 5), t(5, 4)
    gain, bias = t(6), t(6)
    x6 = t(2, 6)
    emb = t(7, 4)
    ids = rng.integers(0, 7, size=(2, 3))
    logits = t(4, 9)
    targets = rng.integers(0, 9, size=4)
    targets[0] = 2
    mask = rng.random((3, 4)) < 0.3
    drop_rng_seed = int(rng.integers(2 ** 31))
    pos = t(3, 4)

    cases = [
        ("add", lambda: T.sum_(T.mul(T.add(a, b), b)), [a, b]),
        ("sub", lambda: T.sum_(T.mul(T.sub(a, b), a)), [a, b]),
        ("mul", lambda: T.sum_(T.mul(a, b)), [a, b]),
        ("div", lambda: T.sum_(T.div(a, T.add(T.mul(b, b), 1.0))), [a, b]),
        ("neg", lambda: T.sum_(T.mul(T.neg(a), b)), [a]),
        ("sqrt", lambda: T.sum_(T.sqrt(T.add(T.mul(pos, pos), 0.5))), [pos]),
        ("gelu", lambda: T.sum_(T.mul(T.gelu(a), b)), [a]),
        ("matmul", lambda: T.sum_(T.mul(T.matmul(m1, m2),
                                        T.matmul(m1, m2))), [m1, m2]),
        ("reshape", lambda: T.sum_(T.mul(T.reshape(a, (4, 3)),
                                         T.reshape(b, (4, 3)))), [a, b]),
        ("transpose", lambda: T.sum_(T.mul(T.transpose(a, (1, 0)),
                                           T.transpose(b, (1, 0)))), [a]),
        ("concat", lambda: T.sum_(T.mul(T.concat([a, b], axis=1),
                                        T.concat([b, a], axis=1))), [a, b]),
        ("sum", lambda: T.sum_(T.mul(T.sum_(a, axis=0, keepdims=True), b)), [a, b]),
        ("mean", lambda: T.sum_(T.mul(T.mean(a, axis=1, keepdims=True), b)), [a, b]),
        ("max", lambda: T.sum_(T.mul(T.max_(a, axis=1, keepdims=True), b)), [a, b]),
        ("softmax", lambda: T.sum_(T.mul(T.softmax(a, axis=-1), b)), [a, b]),
        ("layer_norm", lambda: T.sum_(T.mul(T.layer_norm(x6, gain, bias),
                                            x6)), [x6, gain, bias]),
        ("mask_fill", lambda: T.sum_(T.mul(T.softmax(
            T.mask_fill(a, mask, -1e9), axis=-1), b)), [a, b]),
        ("embedding_lookup", lambda: T.sum_(T.mul(
            T.embedding_lookup(emb, ids),
            T.embedding_lookup(emb, ids))), [emb]),
        ("cross_entropy", lambda: T.cross_entropy(logits, targets,
                                                  ignore_id=2), [logits]),
        ("dropout", lambda: T.sum_(T.mul(T.dropout(
            a, 0.4, np.random.default_rng(drop_rng_seed), training=True),
            b)), [a, b]),
    ]
    return cases


def _fusion_case(seed: int):
    rng = np.random.default_rng(seed)
    layer = JointModalityLayer(8, 2, rng)
    # the silent-start projection would zero the wv path; give it weight
    layer.wo.weight.data = rng.normal(size=(8, 8))
    e_t = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
    e_v = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
    text_mask = np.array([True, True, True, True, False])

    def build_loss():
        out = layer.fuse(e_t, e_v, text_mask)
        return T.sum_(T.mul(out.fused, out.fused))

    return build_loss, list(layer.parameters()) + [e_t, e_v]


def _full_model_case(seed: int):
    rng = np.random.default_rng(seed)
    vocab_size, frame_dim = 23, 5
    model = HeadlineModel(vocab_size=vocab_size, dim=8, text_layers=1,
                          decoder_layers=1, video_layers=1, heads=2,
                          frame_dim=frame_dim, max_src=10, video_tokens=3,
                          max_tgt=6, rng=rng)
    src = rng.integers(5, vocab_size, size=(2, 7))
    src[1, 5:] = 0
    src_mask = src != 0
    video = rng.normal(size=(2, 3, frame_dim))
    tgt = rng.integers(5, vocab_size, size=(2, 4))

    class Batch:
        pass

    batch = Batch()
    batch.src, batch.src_mask, batch.video_tokens = src, src_mask, video
    batch.tgt_in = np.concatenate([np.ones((2, 1), dtype=np.int64), tgt], axis=1)
    batch.tgt_out = np.concatenate([tgt, np.full((2, 1), 2, dtype=np.int64)], axis=1)

    def build_loss():
        return model.loss(batch)

    return build_loss, list(model.parameters())


def gradient_battery(seeds=(0, 1, 2), max_entries: int = 40) -> List[Dict]:
    """Finite-difference checks over every op, the fusion layer, and the full
    model, at several seeds. 64-bit throughout."""
    results: List[Dict] = []
    with T.using_dtype(np.float64):
        for seed in seeds:
            rng = np.random.default_rng(seed)
            for name, build_loss, params in _op_cases(rng):
                res = check_gradients(build_loss, params, max_entries=max_entries,
                                      rng=np.random.default_rng(seed + 1))
                results.append({"case": name, "seed": int(seed), "ok": res.ok,
                                "summary": res.summary()})
            for name, (build_loss, params) in (
                    ("joint-modality", _fusion_case(seed)),
                    ("full-model", _full_model_case(seed))):
                res = check_gradients(build_loss, params, max_entries=max_entries,
                                      rng=np.random.default_rng(seed + 2))
                results.append({"case": name, "seed": int(seed), "ok": res.ok,
                                "summary": res.summary()})
    return results
