"""Component bundles and the graft manifest.

A bundle is one pre-trained component on disk:

    magic b"GRMM" | u32 version | u64 manifest length | manifest JSON
    | raw little-endian tensor payloads | trailing 8-byte checksum

The manifest records the component kind, its constructor config, and the
name/shape/dtype/offset of every tensor. The checksum is the first 8 bytes
of a SHA-256 over everything before it.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .encoders import MlmHead, TextEncoder, VideoEncoder
from .fusion import JointModalityLayer
from .model import HeadlineModel, MatchingHeads
from .nn import Module
from .tensor import Tensor

BUNDLE_MAGIC = b"GRMM"
BUNDLE_VERSION = 1
_HEADER = struct.Struct("<4sIQ")

COMPONENT_KINDS = (
    "text-encoder", "text-decoder", "video-encoder",
    "joint-modality", "mlm-head", "matching-heads",
)
# multimodal model components and the attribute each one grafts into
GRAFT_ATTRS = {
    "text-encoder": "text_encoder",
    "text-decoder": "decoder",
    "video-encoder": "video_encoder",
    "joint-modality": "fusion",
}
# config keys allowed to differ between a bundle and its graft target;
# none of them affect stored tensor shapes or meaning
_LENIENT_KEYS = frozenset({"dropout", "temperature_init", "max_len", "max_tokens", "max_caption"})


class BundleError(Exception):
    """Unreadable, corrupt, or wrong-kind bundle file."""


class GraftError(Exception):
    """Invalid graft manifest or incompatible bundle/target pair."""


def save_bundle(path, kind: str, config: dict, module: Module) -> None:
    if kind not in COMPONENT_KINDS:
        raise BundleError(f"unknown component kind {kind!r}")
    entries = []
    payloads = []
    offset = 0
    for name, p in module.named_parameters():
        # not ascontiguousarray: that would promote 0-d params to shape (1,)
        arr = np.asarray(p.data, order="C")
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.str,
            "offset": offset,
        })
        payloads.append(arr.tobytes())
        offset += len(payloads[-1])
    manifest = json.dumps(
        {"kind": kind, "config": config, "tensors": entries},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    body = _HEADER.pack(BUNDLE_MAGIC, BUNDLE_VERSION, len(manifest))
    body += manifest + b"".join(payloads)
    digest = hashlib.sha256(body).digest()[:8]
    Path(path).write_bytes(body + digest)


def read_bundle(path) -> Tuple[str, dict, Dict[str, np.ndarray]]:
    """Parse and verify a bundle; returns (kind, config, name->array)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + 8:
        raise BundleError(f"{path}: too short to be a component bundle")
    body, digest = raw[:-8], raw[-8:]
    if hashlib.sha256(body).digest()[:8] != digest:
        raise BundleError(f"{path}: checksum mismatch, file is corrupt")
    magic, version, mlen = _HEADER.unpack_from(body)
    if magic != BUNDLE_MAGIC:
        raise BundleError(f"{path}: not a component bundle (bad magic {magic!r})")
    if version != BUNDLE_VERSION:
        raise BundleError(f"{path}: unsupported bundle version {version}")
    if _HEADER.size + mlen > len(body):
        raise BundleError(f"{path}: manifest length {mlen} overruns file")
    try:
        manifest = json.loads(body[_HEADER.size:_HEADER.size + mlen])
    except json.JSONDecodeError as exc:
        raise BundleError(f"{path}: manifest is not valid JSON: {exc}") from None
    kind = manifest.get("kind")
    if kind not in COMPONENT_KINDS:
        raise BundleError(f"{path}: unknown component kind {kind!r}")
    payload = body[_HEADER.size + mlen:]
    arrays: Dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        dt = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = entry["offset"] + count * dt.itemsize
        if end > len(payload):
            raise BundleError(f"{path}: tensor {entry['name']!r} overruns payload")
        flat = np.frombuffer(payload, dtype=dt, count=count, offset=entry["offset"])
        arrays[entry["name"]] = flat.reshape(shape).copy()
    return kind, manifest["config"], arrays


def build_component(kind: str, config: dict, rng: np.random.Generator) -> Module:
    """Fresh component of the given kind; weights come from rng."""
    ctors = {
        "text-encoder": TextEncoder,
        "text-decoder": _build_decoder,
        "video-encoder": VideoEncoder,
        "joint-modality": JointModalityLayer,
        "mlm-head": MlmHead,
        "matching-heads": MatchingHeads,
    }
    if kind not in ctors:
        raise BundleError(f"unknown component kind {kind!r}")
    return ctors[kind](rng=rng, **config)


def _build_decoder(rng, **config):
    from .transformer import DecoderStack
    return DecoderStack(rng=rng, **config)


def load_component(path, expected_kind: Optional[str] = None) -> Tuple[Module, dict]:
    """Rebuild a component from its bundle, bit-for-bit."""
    kind, config, arrays = read_bundle(path)
    if expected_kind is not None and kind != expected_kind:
        raise BundleError(
            f"{path}: bundle holds a {kind!r} component, expected {expected_kind!r}"
        )
    module = build_component(kind, config, np.random.default_rng(0))
    module.load_state_arrays(arrays, strict=True)
    return module, config


@dataclass
class GraftManifest:
    """Recipe for assembling the multimodal model: per component either a
    bundle path or fresh init, plus a global seed and optional freeze flags."""

    seed: int
    components: Dict[str, Optional[str]]  # kind -> bundle path, None = fresh
    freeze: Dict[str, bool] = field(default_factory=dict)

    def frozen_kinds(self) -> List[str]:
        return sorted(k for k, v in self.freeze.items() if v)


def parse_graft_manifest(obj: dict) -> GraftManifest:
    if not isinstance(obj, dict):
        raise GraftError("graft manifest must be a JSON object")
    seed = obj.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise GraftError(f"manifest seed must be a non-negative integer, got {seed!r}")
    comps_in = obj.get("components")
    if not isinstance(comps_in, dict):
        raise GraftError("manifest needs a 'components' object")
    unknown = sorted(set(comps_in) - set(GRAFT_ATTRS))
    if unknown:
        raise GraftError(f"unknown component(s) in manifest: {unknown}")
    missing = sorted(set(GRAFT_ATTRS) - set(comps_in))
    if missing:
        raise GraftError(f"manifest is missing component(s): {missing}")
    components: Dict[str, Optional[str]] = {}
    for kind, entry in comps_in.items():
        if not isinstance(entry, dict):
            raise GraftError(f"component {kind!r} must map to an object")
        if entry.get("fresh") is True and "bundle" not in entry:
            components[kind] = None
        elif isinstance(entry.get("bundle"), str) and "fresh" not in entry:
            components[kind] = entry["bundle"]
        else:
            raise GraftError(
                f"component {kind!r} must be either {{\"bundle\": path}} or {{\"fresh\": true}}"
            )
    freeze_in = obj.get("freeze", {})
    if not isinstance(freeze_in, dict):
        raise GraftError("manifest 'freeze' must be an object of booleans")
    unknown = sorted(set(freeze_in) - set(GRAFT_ATTRS))
    if unknown:
        raise GraftError(f"unknown component(s) in freeze map: {unknown}")
    freeze = {}
    for kind, flag in freeze_in.items():
        if not isinstance(flag, bool):
            raise GraftError(f"freeze flag for {kind!r} must be true or false")
        freeze[kind] = flag
    return GraftManifest(seed=seed, components=components, freeze=freeze)


def load_graft_manifest(path) -> GraftManifest:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise GraftError(f"{path}: manifest is not valid JSON: {exc}") from None
    return parse_graft_manifest(obj)


def _check_config(kind: str, stored: dict, expected: dict, path) -> None:
    """A bundle may only differ from its graft target in length-like knobs."""
    for key in sorted(set(stored) & set(expected)):
        if key in _LENIENT_KEYS:
            continue
        if stored[key] != expected[key]:
            raise GraftError(
                f"{path}: {kind} bundle has {key}={stored[key]!r} but the graft "
                f"target expects {key}={expected[key]!r}"
            )


def graft(manifest: GraftManifest, model_kwargs: dict,
          component_configs: Dict[str, dict],
          base_dir: Optional[Path] = None) -> HeadlineModel:
    """Assemble the multimodal model per the manifest.

    model_kwargs are HeadlineModel constructor args (minus rng);
    component_configs gives the expected per-kind config for mismatch checks.
    Bundle paths resolve relative to base_dir. Freeze flags land on the
    returned model as .frozen_components for the trainer to honor.
    """
    rng = np.random.default_rng(manifest.seed)
    model = HeadlineModel(rng=rng, **model_kwargs)
    for kind in sorted(GRAFT_ATTRS):
        rel = manifest.components[kind]
        if rel is None:
            continue
        path = Path(rel)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        stored_kind, config, arrays = read_bundle(path)
        if stored_kind != kind:
            raise GraftError(
                f"{path}: bundle holds a {stored_kind!r} component, expected {kind!r}"
            )
        _check_config(kind, config, component_configs[kind], path)
        try:
            getattr(model, GRAFT_ATTRS[kind]).load_state_arrays(arrays, strict=True)
        except (KeyError, ValueError) as exc:
            raise GraftError(f"{path}: {kind} bundle does not fit the target: {exc}") from None
    model.frozen_components = manifest.frozen_kinds()
    return model


def trainable_parameters(model: Module) -> List[Tuple[str, Tensor]]:
    """Named parameters minus any component the graft manifest froze."""
    frozen = getattr(model, "frozen_components", [])
    blocked = {GRAFT_ATTRS[k] for k in frozen}
    return [(name, p) for name, p in model.named_parameters()
            if name.split(".")[0] not in blocked]
