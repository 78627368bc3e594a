"""Run configuration: defaults, file loading, overrides, and seeding.

One JSON document configures a whole experiment. Precedence is
flags > config file > defaults. All randomness flows from the single
global seed through named substreams, so each component can be re-seeded
independently without touching the others.
"""

from __future__ import annotations

import copy
import hashlib
import json
import zlib

import numpy as np

from .data import SynthParams
from .model import LmConfig
from .objectives import SftHyperparams
from .training import StageConfig, default_sft_trainable_layers


class ConfigError(ValueError):
    """Configuration file or override is invalid."""


DEFAULTS: dict = {
    "seed": 42,
    "model": {
        "vocab_size": 260,
        "num_layers": 2,
        "model_dim": 64,
        "num_heads": 4,
        "ffn_dim": 256,
        "max_sequence_length": 192,
        "positional_encoding": "learned",
    },
    "synth": {
        "vocab_words": 120,
        "word_len": [3, 6],
        "doc_words": [8, 16],
        "query_words": [2, 4],
        "corpus_size": 1200,
        "num_weak_pairs": 5000,
        "num_train_queries": 500,
        "num_eval_queries": 200,
        "noise_rate": 0.1,
        "contiguous_prob": 0.5,
    },
    "mining": {"top_k": 100},
    "cpt": {
        "epochs": 1,
        "batch_size": 16,
        "learning_rate": 3e-3,
        "trainable_layers": None,
        "train_embeddings": True,
        "train_head": True,
        "grad_clip": 1.0,
    },
    "sft": {
        "epochs": 1,
        "batch_size": 4,
        "learning_rate": 1e-3,
        "trainable_layers": None,
        "train_embeddings": False,
        "train_head": True,
        "grad_clip": 1.0,
        "ntp_aux": True,
        "dp_aux": True,
        "hyperparams": {"tau": 0.001, "alpha": 0.6, "m": 48},
    },
    "eval": {"k": 10, "candidates": 100, "ppl_pairs": 200, "generate_queries": 48, "generate_len": 24},
    "sweep": {
        "alpha": [0.2, 0.4, 0.6, 0.8, 1.0],
        "m": [8, 16, 32, 48],
        "cpt_fraction": [0.25, 0.5, 1.0],
    },
}


def _deep_merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key in out and isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _apply_override(cfg: dict, spec: str) -> None:
    if "=" not in spec:
        raise ConfigError(f"override {spec!r} must look like section.key=value")
    dotted, raw = spec.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    keys = dotted.split(".")
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise ConfigError(f"override {spec!r}: unknown config section {key!r}")
        node = node[key]
    if keys[-1] not in node:
        raise ConfigError(f"override {spec!r}: unknown config key {keys[-1]!r}")
    node[keys[-1]] = value


def load_config(path=None, overrides: list[str] = (), seed: int | None = None) -> dict:
    """Merge defaults, an optional config file, and command-line overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                file_cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"{path}: unknown config sections {sorted(unknown)}")
        cfg = _deep_merge(cfg, file_cfg)
    for spec in overrides:
        _apply_override(cfg, spec)
    if seed is not None:
        cfg["seed"] = seed
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    """Instantiate every typed sub-config so invariant violations fail early."""
    try:
        model_config(cfg)
        synth_params(cfg)
        hyperparams(cfg)
        stage_config(cfg, "cpt")
        stage_config(cfg, "sft")
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if int(cfg["eval"]["k"]) < 1 or int(cfg["eval"]["candidates"]) < 1:
        raise ConfigError("eval.k and eval.candidates must be >= 1")
    if int(cfg["mining"]["top_k"]) < 1:
        raise ConfigError("mining.top_k must be >= 1")


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


# ----------------------------------------------------------------------
# typed views


def model_config(cfg: dict) -> LmConfig:
    return LmConfig(**cfg["model"])


def synth_params(cfg: dict) -> SynthParams:
    section = dict(cfg["synth"])
    for key in ("word_len", "doc_words", "query_words"):
        section[key] = tuple(section[key])
    return SynthParams(**section)


def hyperparams(cfg: dict) -> SftHyperparams:
    section = cfg["sft"]["hyperparams"]
    return SftHyperparams(tau=section["tau"], alpha=section["alpha"], num_negatives=section["m"])


def stage_config(cfg: dict, stage: str) -> StageConfig:
    section = dict(cfg[stage])
    lm = model_config(cfg)
    trainable = section.pop("trainable_layers")
    if stage == "sft":
        hp_section = section.pop("hyperparams")
        hp = SftHyperparams(tau=hp_section["tau"], alpha=hp_section["alpha"], num_negatives=hp_section["m"])
        if trainable is None:
            trainable = default_sft_trainable_layers(lm.num_layers)
        return StageConfig(
            seed=substream_seed(cfg["seed"], "sft"),
            trainable_layers=trainable,
            hyperparams=hp,
            **section,
        )
    return StageConfig(seed=substream_seed(cfg["seed"], "cpt"), trainable_layers=trainable, **section)


# ----------------------------------------------------------------------
# seeding


def substream_seed(seed: int, name: str) -> int:
    """A derived integer seed for a named component."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def rng_for(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))]))
