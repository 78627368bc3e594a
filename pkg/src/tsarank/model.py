"""Decoder-only causal transformer over byte tokens, with checkpointing.

Pre-norm blocks, learned positional embeddings, untied output head. All
parameters are float64 tensors from :mod:`tsarank.autodiff`; a fixed seed
gives bit-identical initialisation. Checkpoints are a versioned binary
format: magic + JSON header (config, manifest, stage tag, metadata)
followed by raw little-endian float64 parameter payloads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tokenizer import DEFAULT_VOCAB_SIZE, SequenceTooLongError, TokenSequence

STAGES = ("base", "cpt", "sft")

CHECKPOINT_MAGIC = b"TSRKCKPT"
CHECKPOINT_VERSION = 1

_LN_EPS = 1e-5
_MASK_VALUE = -1e9
_INIT_STD = 0.02


class CorruptCheckpointError(ValueError):
    """Checkpoint bytes are malformed or truncated."""


class CheckpointFormatError(ValueError):
    """Checkpoint format version not supported by this build."""


class CheckpointMismatchError(ValueError):
    """Checkpoint does not match the configuration expected by the caller."""


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int = DEFAULT_VOCAB_SIZE
    num_layers: int = 2
    model_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    max_sequence_length: int = 256
    positional_encoding: str = "learned"

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.max_sequence_length < 2:
            raise ValueError(f"max_sequence_length must be >= 2, got {self.max_sequence_length}")
        if self.model_dim % self.num_heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.positional_encoding != "learned":
            raise ValueError(f"unsupported positional encoding {self.positional_encoding!r}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


def parameter_shapes(config: LmConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape manifest; the checkpoint layout follows it."""
    d, f, v = config.model_dim, config.ffn_dim, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "embed.tok": (v, d),
        "embed.pos": (config.max_sequence_length, d),
    }
    for i in range(config.num_layers):
        prefix = f"layers.{i}"
        shapes[f"{prefix}.ln1.gain"] = (d,)
        shapes[f"{prefix}.ln1.bias"] = (d,)
        for proj in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.attn.{proj}"] = (d, d)
        for proj in ("bq", "bk", "bv", "bo"):
            shapes[f"{prefix}.attn.{proj}"] = (d,)
        shapes[f"{prefix}.ln2.gain"] = (d,)
        shapes[f"{prefix}.ln2.bias"] = (d,)
        shapes[f"{prefix}.ffn.w1"] = (d, f)
        shapes[f"{prefix}.ffn.b1"] = (f,)
        shapes[f"{prefix}.ffn.w2"] = (f, d)
        shapes[f"{prefix}.ffn.b2"] = (d,)
    shapes["final_norm.gain"] = (d,)
    shapes["final_norm.bias"] = (d,)
    shapes["head.weight"] = (d, v)
    shapes["head.bias"] = (v,)
    return shapes


def init_parameters(config: LmConfig, seed: int) -> dict[str, Tensor]:
    """Deterministic initialisation: N(0, 0.02) weights, unit gains, zero biases."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            values = np.ones(shape)
        elif leaf in ("bias", "bq", "bk", "bv", "bo", "b1", "b2"):
            values = np.zeros(shape)
        else:
            values = rng.normal(0.0, _INIT_STD, size=shape)
        params[name] = Tensor(values, requires_grad=True)
    return params


@dataclass
class LmCheckpoint:
    """A model: config, named parameters, pipeline stage tag, run metadata."""

    config: LmConfig
    params: dict[str, Tensor]
    stage: str = "base"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage tag {self.stage!r}")
        expected = parameter_shapes(self.config)
        if set(self.params) != set(expected):
            missing = set(expected) - set(self.params)
            extra = set(self.params) - set(expected)
            raise ValueError(f"parameter set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"parameter {name!r} has shape {self.params[name].shape}, expected {shape}")

    def copy(self) -> "LmCheckpoint":
        """Deep copy; training mutates copies, never loaded checkpoints."""
        params = {name: Tensor(t.values.copy(), requires_grad=True) for name, t in self.params.items()}
        return LmCheckpoint(config=self.config, params=params, stage=self.stage, metadata=dict(self.metadata))


def new_model(config: LmConfig, seed: int, metadata: dict | None = None) -> LmCheckpoint:
    meta = {"seed": seed}
    if metadata:
        meta.update(metadata)
    return LmCheckpoint(config=config, params=init_parameters(config, seed), stage="base", metadata=meta)


# ----------------------------------------------------------------------
# forward pass


def _layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    mu = ad.tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = ad.tmean(centered * centered, axis=-1, keepdims=True)
    inv = ad.pow_const(var + _LN_EPS, -0.5)
    return centered * inv * gain + bias


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(x: Tensor) -> Tensor:
    inner = ad.mul(x + x * x * x * 0.044715, _GELU_C)
    return x * 0.5 * (ad.tanh(inner) + 1.0)


def _attention(x: Tensor, params: dict[str, Tensor], prefix: str, config: LmConfig, mask: np.ndarray) -> Tensor:
    batch, width, dim = x.shape
    heads, head_dim = config.num_heads, config.head_dim

    def split_heads(t: Tensor) -> Tensor:
        return ad.swapaxes(ad.reshape(t, (batch, width, heads, head_dim)), 1, 2)

    q = split_heads(x @ params[f"{prefix}.attn.wq"] + params[f"{prefix}.attn.bq"])
    k = split_heads(x @ params[f"{prefix}.attn.wk"] + params[f"{prefix}.attn.bk"])
    v = split_heads(x @ params[f"{prefix}.attn.wv"] + params[f"{prefix}.attn.bv"])

    scores = ad.mul(q @ ad.swapaxes(k, -1, -2), 1.0 / math.sqrt(head_dim)) + mask
    weights = ad.softmax(scores, axis=-1)
    context = ad.reshape(ad.swapaxes(weights @ v, 1, 2), (batch, width, dim))
    return context @ params[f"{prefix}.attn.wo"] + params[f"{prefix}.attn.bo"]


def forward_ids(model: LmCheckpoint, ids: np.ndarray) -> Tensor:
    """Per-position next-token log-probabilities for a batch of id rows.

    ``ids`` is (batch, width) int64; rows may be right-padded (padding can
    never influence earlier positions under the causal mask). Output is
    (batch, width, vocab) and each row exponentiates to a distribution.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    batch, width = ids.shape
    config = model.config
    if width == 0:
        raise ValueError("cannot run forward on an empty sequence")
    if width > config.max_sequence_length:
        raise SequenceTooLongError(
            f"sequence length {width} exceeds max_sequence_length {config.max_sequence_length}"
        )
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValueError(f"token id out of range for vocab_size {config.vocab_size}")

    params = model.params
    x = ad.embedding(params["embed.tok"], ids) + ad.embedding(
        params["embed.pos"], np.arange(width, dtype=np.int64)
    )
    mask = np.triu(np.full((width, width), _MASK_VALUE), k=1)
    for i in range(config.num_layers):
        prefix = f"layers.{i}"
        h = _layer_norm(x, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
        x = x + _attention(h, params, prefix, config, mask)
        h = _layer_norm(x, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
        ffn = _gelu(h @ params[f"{prefix}.ffn.w1"] + params[f"{prefix}.ffn.b1"]) @ params[f"{prefix}.ffn.w2"] + params[f"{prefix}.ffn.b2"]
        x = x + ffn
    x = _layer_norm(x, params["final_norm.gain"], params["final_norm.bias"])
    logits = x @ params["head.weight"] + params["head.bias"]
    return ad.softmax_logprobs(logits, axis=-1)


def forward(model: LmCheckpoint, tokens: TokenSequence) -> Tensor:
    """Log-probability rows for one sequence: (length, vocab)."""
    if len(tokens) == 0:
        raise ValueError("cannot run forward on an empty sequence")
    out = forward_ids(model, tokens.ids[None, :])
    return ad.reshape(out, (len(tokens), model.config.vocab_size))


# ----------------------------------------------------------------------
# persistence


def save_checkpoint(model: LmCheckpoint, path) -> None:
    manifest = [{"name": name, "shape": list(shape)} for name, shape in parameter_shapes(model.config).items()]
    header = {
        "config": asdict(model.config),
        "stage": model.stage,
        "metadata": model.metadata,
        "manifest": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(CHECKPOINT_VERSION.to_bytes(4, "little"))
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        for entry in manifest:
            fh.write(model.params[entry["name"]].values.astype("<f8").tobytes())


def load_checkpoint(path, expected_config: LmConfig | None = None) -> LmCheckpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 12 or blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path} is not a tsarank checkpoint")
    offset = len(CHECKPOINT_MAGIC)
    version = int.from_bytes(blob[offset : offset + 4], "little")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"checkpoint format version {version}, this build reads {CHECKPOINT_VERSION}")
    offset += 4
    header_len = int.from_bytes(blob[offset : offset + 8], "little")
    offset += 8
    if offset + header_len > len(blob):
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from exc
    offset += header_len

    config = LmConfig(**header["config"])
    if expected_config is not None and config != expected_config:
        raise CheckpointMismatchError(
            f"checkpoint config {asdict(config)} does not match expected {asdict(expected_config)}"
        )
    expected_shapes = parameter_shapes(config)
    manifest = header["manifest"]
    manifest_shapes = {entry["name"]: tuple(entry["shape"]) for entry in manifest}
    if manifest_shapes != expected_shapes:
        raise CheckpointMismatchError(f"{path}: manifest does not match shapes implied by config")

    payload = blob[offset:]
    expected_bytes = sum(int(np.prod(shape)) * 8 for shape in manifest_shapes.values())
    if len(payload) != expected_bytes:
        raise CorruptCheckpointError(
            f"{path}: payload has {len(payload)} bytes, manifest requires {expected_bytes}"
        )
    params: dict[str, Tensor] = {}
    cursor = 0
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=cursor).reshape(shape)
        params[entry["name"]] = Tensor(arr.copy(), requires_grad=True)
        cursor += count * 8
    return LmCheckpoint(config=config, params=params, stage=header["stage"], metadata=header["metadata"])
