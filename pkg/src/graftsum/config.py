"""Run configuration: model shape, training schedule, synthetic-data sizes.

Config files are JSON with three optional sections ("model", "train",
"data"); unknown sections or keys are hard errors, and every stage writes the
fully resolved values back out as effective_config.json.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional


class ConfigError(Exception):
    """Invalid configuration; maps to CLI exit code 2."""


@dataclass
class ModelConfig:
    dim: int = 64
    heads: int = 4
    text_layers: int = 2
    decoder_layers: int = 2
    video_layers: int = 1
    caption_layers: int = 1
    frame_dim: int = 64
    max_src: int = 64          # transcript token budget (m)
    video_tokens: int = 16     # sampled frame slots (l)
    max_tgt: int = 64
    max_caption: int = 64
    contrastive_dim: int = 32
    ff_mult: int = 4
    dropout: float = 0.1

    def validate(self) -> None:
        for name in ("dim", "heads", "text_layers", "decoder_layers",
                     "video_layers", "caption_layers", "frame_dim", "max_src",
                     "video_tokens", "max_tgt", "max_caption",
                     "contrastive_dim", "ff_mult"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if self.dim % self.heads:
            raise ConfigError(
                f"model.dim {self.dim} must be divisible by model.heads {self.heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("model.dropout must be in [0, 1)")
        if self.max_tgt < 2:
            raise ConfigError("model.max_tgt must leave room for BOS and EOS")


@dataclass
class StageSchedule:
    steps: int
    lr: float

    def validate(self, name: str) -> None:
        if self.steps < 1:
            raise ConfigError(f"train.{name}.steps must be >= 1")
        if not 0.0 < self.lr < 1.0:
            raise ConfigError(f"train.{name}.lr must be in (0, 1)")


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 32
    weight_decay: float = 0.01
    clip_norm: float = 0.1
    mlm_rate: float = 0.15
    length_policy: str = "reject"
    val_every: int = 100
    val_batches: int = 4
    log_every: int = 100
    beam_size: int = 5
    max_decode_len: int = 64
    pretrain_nlg: StageSchedule = field(default_factory=lambda: StageSchedule(1500, 3e-4))
    pretrain_match: StageSchedule = field(default_factory=lambda: StageSchedule(1500, 3e-4))
    finetune: StageSchedule = field(default_factory=lambda: StageSchedule(1000, 3e-4))

    def validate(self) -> None:
        if self.seed < 0:
            raise ConfigError("train.seed must be >= 0")
        for name in ("batch_size", "val_every", "val_batches", "log_every",
                     "beam_size", "max_decode_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("train.batch_size must be >= 2 (in-batch negatives)")
        if not 0.0 < self.mlm_rate < 1.0:
            raise ConfigError("train.mlm_rate must be in (0, 1)")
        if self.length_policy not in ("reject", "split"):
            raise ConfigError("train.length_policy must be 'reject' or 'split'")
        for wd in ("weight_decay", "clip_norm"):
            if getattr(self, wd) < 0:
                raise ConfigError(f"train.{wd} must be >= 0")
        self.pretrain_nlg.validate("pretrain_nlg")
        self.pretrain_match.validate("pretrain_match")
        self.finetune.validate("finetune")


@dataclass
class DataConfig:
    topics: int = 12
    motifs_per_topic: int = 8
    distractor_count: int = 1800
    fact_count: int = 50
    frame_dim: int = 64
    min_frames: int = 24
    max_frames: int = 48
    segments_per_video: int = 4
    caption_motifs: int = 3
    min_transcript: int = 16
    max_transcript: int = 28
    noise_scale: float = 0.3
    echo: bool = False
    nlg_train: int = 20_000
    nlg_val: int = 200
    nlg_test: int = 200
    matching_train: int = 10_000
    matching_val: int = 200
    matching_test: int = 200
    triplet_train: int = 2_000
    triplet_val: int = 200
    triplet_test: int = 200

    def world_kwargs(self) -> dict:
        keep = ("topics", "motifs_per_topic", "distractor_count", "fact_count",
                "frame_dim", "min_frames", "max_frames", "segments_per_video",
                "caption_motifs", "min_transcript", "max_transcript",
                "noise_scale", "echo")
        return {k: getattr(self, k) for k in keep}

    def sizes(self, kind: str) -> tuple:
        return (getattr(self, f"{kind}_train"), getattr(self, f"{kind}_val"),
                getattr(self, f"{kind}_test"))

    def validate(self) -> None:
        for name in ("nlg_train", "matching_train", "triplet_train"):
            if getattr(self, name) < 1:
                raise ConfigError(f"data.{name} must be >= 1")


@dataclass
class PipelineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.data.validate()
        if self.data.frame_dim != self.model.frame_dim:
            raise ConfigError(
                f"data.frame_dim {self.data.frame_dim} must equal "
                f"model.frame_dim {self.model.frame_dim}"
            )
        if self.data.max_transcript > self.model.max_src and \
                self.train.length_policy == "reject":
            raise ConfigError(
                "data.max_transcript exceeds model.max_src under the reject policy"
            )


_SECTION_TYPES = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}


def _typed(current, value, where: str):
    """Coerce `value` to the type of the default it replaces."""
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if isinstance(current, int):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    raise ConfigError(f"{where}: unsupported value")


def _coerce(cls, payload: dict, where: str):
    defaults = {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - set(defaults))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {}
    for key, value in payload.items():
        default = defaults[key]
        if isinstance(default, StageSchedule):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.{key}: expected an object")
            sub = dataclasses.asdict(default)
            bad = sorted(set(value) - set(sub))
            if bad:
                raise ConfigError(f"{where}.{key}: unknown key(s) {bad}")
            for k, v in value.items():
                sub[k] = _typed(sub[k], v, f"{where}.{key}.{k}")
            kwargs[key] = StageSchedule(**sub)
        else:
            kwargs[key] = _typed(default, value, f"{where}.{key}")
    return cls(**kwargs)


def config_from_dict(payload: dict) -> PipelineConfig:
    if not isinstance(payload, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = sorted(set(payload) - set(_SECTION_TYPES))
    if unknown:
        raise ConfigError(f"unknown config section(s) {unknown}")
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        body = payload.get(name, {})
        if not isinstance(body, dict):
            raise ConfigError(f"section {name!r} must be an object")
        sections[name] = _coerce(cls, body, name)
    cfg = PipelineConfig(**sections)
    cfg.validate()
    return cfg


def load_config(path: Optional[str] = None) -> PipelineConfig:
    """Config from a JSON file; None means all defaults."""
    if path is None:
        cfg = PipelineConfig()
        cfg.validate()
        return cfg
    try:
        payload = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}")
    return config_from_dict(payload)


def config_to_dict(cfg: PipelineConfig) -> dict:
    return dataclasses.asdict(cfg)


def write_effective_config(cfg: PipelineConfig, out_dir, stage: str,
                           extras: Optional[Dict] = None) -> Path:
    """Snapshot the fully resolved run parameters next to the artifacts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"stage": stage, **(extras or {}), "config": config_to_dict(cfg)}
    path = out / "effective_config.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def component_config(kind: str, mc: ModelConfig, vocab_size: int) -> dict:
    """Constructor kwargs for one component, as stored in its bundle."""
    if kind == "text-encoder":
        return dict(vocab_size=vocab_size, dim=mc.dim, layers=mc.text_layers,
                    heads=mc.heads, max_len=mc.max_src, ff_mult=mc.ff_mult,
                    dropout=mc.dropout)
    if kind == "text-decoder":
        return dict(vocab_size=vocab_size, dim=mc.dim, layers=mc.decoder_layers,
                    heads=mc.heads, max_len=mc.max_tgt, ff_mult=mc.ff_mult,
                    dropout=mc.dropout)
    if kind == "video-encoder":
        return dict(feature_dim=mc.frame_dim, dim=mc.dim, layers=mc.video_layers,
                    heads=mc.heads, max_tokens=mc.video_tokens,
                    ff_mult=mc.ff_mult, dropout=mc.dropout)
    if kind == "joint-modality":
        return dict(dim=mc.dim, heads=mc.heads)
    if kind == "mlm-head":
        return dict(dim=mc.dim, vocab_size=vocab_size)
    if kind == "matching-heads":
        return dict(vocab_size=vocab_size, dim=mc.dim, layers=mc.caption_layers,
                    heads=mc.heads, max_caption=mc.max_caption,
                    contrastive_dim=mc.contrastive_dim, ff_mult=mc.ff_mult,
                    dropout=mc.dropout)
    raise ValueError(f"unknown component kind {kind!r}")


def graft_component_configs(mc: ModelConfig, vocab_size: int) -> Dict[str, dict]:
    return {kind: component_config(kind, mc, vocab_size)
            for kind in ("text-encoder", "text-decoder", "video-encoder",
                         "joint-modality")}


def headline_model_kwargs(mc: ModelConfig, vocab_size: int,
                          fusion_mode: str = "joint") -> dict:
    return dict(vocab_size=vocab_size, dim=mc.dim, text_layers=mc.text_layers,
                decoder_layers=mc.decoder_layers, video_layers=mc.video_layers,
                heads=mc.heads, frame_dim=mc.frame_dim, max_src=mc.max_src,
                video_tokens=mc.video_tokens, max_tgt=mc.max_tgt,
                fusion_mode=fusion_mode, ff_mult=mc.ff_mult,
                dropout=mc.dropout)
