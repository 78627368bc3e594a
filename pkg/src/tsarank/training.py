"""Two-stage training: continual pre-training, then mixed-objective fine-tuning.

Stage one trains every parameter on weakly supervised pairs with the
next-token objective. Stage two freezes the lower half of the network by
default, keeps a frozen copy of its input model as the drift-penalty
reference, and minimises the mixed objective over ranking examples.
Training loops are sequential over batches and fully determined by
(seed, config, data); per-sequence losses are token-count normalised so
gradients are comparable across query lengths.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import OptimizerState, Tensor
from .data import InvertedIndex, RankExample, WeakPair
from .model import LmCheckpoint
from .objectives import SftHyperparams, combine_sft_terms, sft_loss_terms
from .scoring import assemble_scoring_sequence, batched_query_logprob_sums, _as_sequence

log = logging.getLogger(__name__)


class StageError(ValueError):
    """Checkpoint stage tag does not fit the requested training stage."""


class EmptyDatasetError(ValueError):
    """No training data supplied."""


@dataclass
class StageConfig:
    """One training stage: schedule, freeze policy, and (for SFT) hyperparams.

    ``trainable_layers`` counts transformer layers from the top; ``None``
    trains all of them. The output head group includes the final norm.
    """

    epochs: int = 1
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    trainable_layers: int | None = None
    train_embeddings: bool = True
    train_head: bool = True
    grad_clip: float | None = 1.0
    hyperparams: SftHyperparams = field(default_factory=SftHyperparams)
    ntp_aux: bool = True
    dp_aux: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")


def default_sft_trainable_layers(num_layers: int) -> int:
    """Fine-tune the top half of the stack by default."""
    return max(1, math.ceil(num_layers / 2))


def trainable_parameter_names(config, stage_cfg: StageConfig) -> set[str]:
    num_layers = config.num_layers
    k = stage_cfg.trainable_layers
    if k is None:
        k = num_layers
    if k > num_layers:
        raise ValueError(f"trainable_layers {k} exceeds num_layers {num_layers}")
    names: set[str] = set()
    for i in range(num_layers - k, num_layers):
        names.update(_layer_param_names(config, i))
    if stage_cfg.train_embeddings:
        names.update({"embed.tok", "embed.pos"})
    if stage_cfg.train_head:
        names.update({"head.weight", "head.bias", "final_norm.gain", "final_norm.bias"})
    return names


def _layer_param_names(config, i: int) -> list[str]:
    from .model import parameter_shapes

    prefix = f"layers.{i}."
    return [name for name in parameter_shapes(config) if name.startswith(prefix)]


def _apply_step(model: LmCheckpoint, trainable: set[str], optimizer: OptimizerState, grad_clip: float | None) -> None:
    params = {name: model.params[name] for name in trainable}
    grads = {}
    for name, p in params.items():
        grads[name] = p.grad if p.grad is not None else np.zeros_like(p.values)
    if grad_clip is not None:
        ad.clip_global_norm(grads, grad_clip)
    ad.adam_step(params, grads, optimizer)
    ad.zero_grads(model.params.values())


def run_cpt(base: LmCheckpoint, pairs: list[WeakPair], cfg: StageConfig, data_fingerprint: str = "") -> tuple[LmCheckpoint, list[dict]]:
    """Adapt a base model on weak pairs with the next-token objective.

    Returns the stage-tagged checkpoint and one log record per step.
    """
    if base.stage != "base":
        raise StageError(f"continual pre-training expects a 'base' checkpoint, got {base.stage!r}")
    if not pairs:
        raise EmptyDatasetError("no weak pairs supplied")
    model = base.copy()
    trainable = trainable_parameter_names(model.config, cfg)
    optimizer = OptimizerState(learning_rate=cfg.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC97]))
    max_len = model.config.max_sequence_length

    records: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(pairs), cfg.batch_size):
            batch = [pairs[int(i)] for i in order[start : start + cfg.batch_size]]
            seqs = [assemble_scoring_sequence(p.query, p.document, max_len) for p in batch]
            inv_lens = np.array([1.0 / len(_as_sequence(p.query, "query")) for p in batch])
            sums = batched_query_logprob_sums(model, seqs)
            loss = ad.tmean(ad.mul(ad.neg(sums), inv_lens))
            loss.backward()
            _apply_step(model, trainable, optimizer, cfg.grad_clip)
            records.append({"stage": "cpt", "epoch": epoch, "step": step, "loss": loss.item()})
            step += 1

    model.stage = "cpt"
    model.metadata = dict(model.metadata)
    model.metadata.update({"cpt_seed": cfg.seed, "cpt_epochs": cfg.epochs, "cpt_data_fingerprint": data_fingerprint})
    return model, records


def run_sft(
    cpt: LmCheckpoint,
    examples: list[RankExample],
    cfg: StageConfig,
    data_fingerprint: str = "",
) -> tuple[LmCheckpoint, list[dict]]:
    """Fine-tune on ranking examples with the mixed objective.

    The drift-penalty reference is a frozen deep copy of the input model.
    Only the configured top layers (plus head group) receive updates;
    everything else is bit-identical afterwards. With the mixture weight at
    1 or both auxiliaries disabled, the auxiliary code path is skipped
    entirely and the reference is never consulted.
    """
    if cpt.stage not in ("cpt", "base"):
        raise StageError(f"fine-tuning expects a 'cpt' (or 'base') checkpoint, got {cpt.stage!r}")
    if cpt.stage == "base":
        log.warning("fine-tuning directly from a base checkpoint (no continual pre-training)")
    if not examples:
        raise EmptyDatasetError("no ranking examples supplied")
    hp = cfg.hyperparams
    for ex in examples:
        if len(ex.negatives) != hp.num_negatives:
            raise ValueError(
                f"example {ex.query_id!r} has {len(ex.negatives)} negatives, config expects {hp.num_negatives}"
            )

    model = cpt.copy()
    use_ntp = cfg.ntp_aux and hp.alpha < 1.0
    use_dp = cfg.dp_aux and hp.alpha < 1.0
    reference = cpt.copy() if use_dp else None
    trainable = trainable_parameter_names(model.config, cfg)
    optimizer = OptimizerState(learning_rate=cfg.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5F7]))

    records: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(examples))
        for start in range(0, len(examples), cfg.batch_size):
            batch = [examples[int(i)] for i in order[start : start + cfg.batch_size]]
            totals: list[Tensor] = []
            comp_sums = {"rank": 0.0, "ntp": 0.0, "dp": 0.0}
            for ex in batch:
                terms = sft_loss_terms(
                    model, reference, ex, hp, use_ntp=use_ntp, use_dp=use_dp, normalize_ntp=True
                )
                totals.append(combine_sft_terms(terms, hp.alpha))
                for key, tensor in terms.items():
                    comp_sums[key] += tensor.item()
            loss = totals[0]
            for t in totals[1:]:
                loss = ad.add(loss, t)
            loss = ad.mul(loss, 1.0 / len(totals))
            loss.backward()
            _apply_step(model, trainable, optimizer, cfg.grad_clip)
            record = {"stage": "sft", "epoch": epoch, "step": step, "loss": loss.item(),
                      "loss_rank": comp_sums["rank"] / len(batch)}
            if use_ntp:
                record["loss_ntp"] = comp_sums["ntp"] / len(batch)
            if use_dp:
                record["loss_dp"] = comp_sums["dp"] / len(batch)
            records.append(record)
            step += 1

    model.stage = "sft"
    model.metadata = dict(model.metadata)
    model.metadata.update(
        {
            "sft_seed": cfg.seed,
            "sft_epochs": cfg.epochs,
            "sft_data_fingerprint": data_fingerprint,
            "sft_alpha": hp.alpha,
            "sft_tau": hp.tau,
            "sft_m": hp.num_negatives,
            "sft_from_stage": cpt.stage,
        }
    )
    return model, records


ABLATION_CONFIGS = ("full", "-cpt", "-sft", "-cpt_sft", "-ntp", "-dp", "-ntp_dp")


@dataclass
class AblationRun:
    name: str
    model: LmCheckpoint
    mean_ndcg: float
    per_query_ndcg: dict[str, float]
    sft_log: list[dict] = field(default_factory=list)


def ablation_suite(
    base: LmCheckpoint,
    weak_pairs: list[WeakPair],
    examples: list[RankExample],
    corpus: dict[str, str],
    eval_queries: dict[str, str],
    eval_qrels: dict[tuple[str, str], int],
    cpt_cfg: StageConfig,
    sft_cfg: StageConfig,
    k: int = 10,
    num_candidates: int = 20,
) -> dict[str, AblationRun]:
    """Train and evaluate the full pipeline plus its six ablations.

    The continual pre-training stage is shared across every configuration
    that includes it, so all variants see the same intermediate model.
    Disabling both auxiliaries collapses the mixture onto the ranking term
    (equivalent to running with the mixture weight at 1).
    """
    from .evaluation import evaluate_ranking

    cpt_model, _ = run_cpt(base, weak_pairs, cpt_cfg)
    index = InvertedIndex(corpus)

    def sft_variant(start: LmCheckpoint, **flags) -> tuple[LmCheckpoint, list[dict]]:
        cfg = StageConfig(
            epochs=sft_cfg.epochs,
            batch_size=sft_cfg.batch_size,
            learning_rate=sft_cfg.learning_rate,
            seed=sft_cfg.seed,
            trainable_layers=sft_cfg.trainable_layers,
            train_embeddings=sft_cfg.train_embeddings,
            train_head=sft_cfg.train_head,
            grad_clip=sft_cfg.grad_clip,
            hyperparams=sft_cfg.hyperparams,
            **flags,
        )
        return run_sft(start, examples, cfg)

    variants: dict[str, tuple[LmCheckpoint, list[dict]]] = {}
    variants["full"] = sft_variant(cpt_model)
    variants["-cpt"] = sft_variant(base)
    variants["-sft"] = (cpt_model, [])
    variants["-cpt_sft"] = (base, [])
    variants["-ntp"] = sft_variant(cpt_model, ntp_aux=False)
    variants["-dp"] = sft_variant(cpt_model, dp_aux=False)
    variants["-ntp_dp"] = sft_variant(cpt_model, ntp_aux=False, dp_aux=False)

    out: dict[str, AblationRun] = {}
    for name in ABLATION_CONFIGS:
        model, sft_log = variants[name]
        mean_ndcg, per_query, _ = evaluate_ranking(model, index, corpus, eval_queries, eval_qrels, k, num_candidates)
        out[name] = AblationRun(name=name, model=model, mean_ndcg=mean_ndcg, per_query_ndcg=per_query, sft_log=sft_log)
    return out
