"""Training objectives: next-token, contrastive ranking, drift penalty, mixture.

The ranking loss is a softmax cross-entropy over raw generation
probabilities (not log-scores) divided by a temperature; the drift penalty
is a per-position categorical KL from a frozen reference model's query-token
distributions to the trained model's, averaged over positions. The mixed
objective weights ranking against the two auxiliaries with a single
trade-off parameter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import LmCheckpoint, forward_ids
from .scoring import (
    _as_sequence,
    assemble_scoring_sequence,
    batched_query_logprob_sums,
    query_logprob_sum,
)
from .tokenizer import TokenSequence, pad_batch


class MissingPositiveError(ValueError):
    """Ranking example has no positive document."""


class NegativeCountMismatchError(ValueError):
    """Example's negative count disagrees with the configured m."""


class ConfigMismatchError(ValueError):
    """Models passed to the drift penalty have different configurations."""


@dataclass(frozen=True)
class SftHyperparams:
    """Fine-tuning knobs: softmax temperature, mixture weight, negatives per example."""

    tau: float = 0.001
    alpha: float = 0.6
    num_negatives: int = 48

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.num_negatives < 1:
            raise ValueError(f"num_negatives must be >= 1, got {self.num_negatives}")


@dataclass(frozen=True)
class QueryTokenDistributions:
    """Categorical next-token distributions at each query position (|T| x |V|)."""

    probs: np.ndarray

    def __post_init__(self):
        if self.probs.ndim != 2:
            raise ValueError("expected a positions-by-vocab matrix")
        if np.any(self.probs < 0) or np.any(np.abs(self.probs.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("each row must be a probability distribution")


def _query_prediction_rows(seq: TokenSequence) -> tuple[np.ndarray, np.ndarray]:
    """Row indices that predict each query token, and the token ids."""
    positions = np.where(seq.role_mask("query") > 0)[0]
    return positions - 1, seq.ids[positions]


def query_token_distributions(model: LmCheckpoint, query, document) -> QueryTokenDistributions:
    """The model's next-token distributions at every query position."""
    seq = assemble_scoring_sequence(query, document, model.config.max_sequence_length)
    rows, _ = _query_prediction_rows(seq)
    with ad.no_grad():
        logp = forward_ids(model, seq.ids[None, :]).values[0]
    return QueryTokenDistributions(probs=np.exp(logp[rows]))


# ----------------------------------------------------------------------
# losses


def ntp_loss(model: LmCheckpoint, query, document, normalize: bool = False) -> Tensor:
    """Negative sum of query-token log-probs; optionally per-token."""
    total = ad.neg(query_logprob_sum(model, query, document))
    if normalize:
        q = _as_sequence(query, "query")
        return ad.mul(total, 1.0 / len(q))
    return total


def _rank_loss_from_sums(log_score_sums: Tensor, tau: float) -> Tensor:
    """Contrastive loss given per-document log-scores, positive first."""
    raw_scores = ad.exp(log_score_sums)
    logits = ad.mul(raw_scores, 1.0 / tau)
    return ad.neg(ad.gather_last(ad.softmax_logprobs(logits, axis=0), np.asarray(0)))


def rank_loss(model: LmCheckpoint, example, hp: SftHyperparams) -> Tensor:
    """Softmax cross-entropy at the positive over scores/tau for the m+1 docs."""
    if not getattr(example, "positive", None):
        raise MissingPositiveError(f"example {example.query_id!r} has no positive document")
    if len(example.negatives) != hp.num_negatives:
        raise NegativeCountMismatchError(
            f"example {example.query_id!r} has {len(example.negatives)} negatives, expected {hp.num_negatives}"
        )
    max_len = model.config.max_sequence_length
    q = _as_sequence(example.query, "query")
    seqs = [assemble_scoring_sequence(q, example.positive, max_len)]
    seqs += [assemble_scoring_sequence(q, neg, max_len) for neg in example.negatives]
    sums = batched_query_logprob_sums(model, seqs)
    return _rank_loss_from_sums(sums, hp.tau)


def _dp_from_rows(ref_logp_rows: np.ndarray, student_rows: Tensor) -> Tensor:
    """Mean over positions of KL(reference row || student row)."""
    p_ref = np.exp(ref_logp_rows)
    entropy_term = float((p_ref * ref_logp_rows).sum())
    cross = ad.tsum(ad.mul(student_rows, p_ref))
    return ad.mul(ad.sub(entropy_term, cross), 1.0 / ref_logp_rows.shape[0])


def dp_loss(sft_model: LmCheckpoint, cpt_reference: LmCheckpoint, query, document) -> Tensor:
    """Drift penalty: KL from the frozen reference's query-token distributions.

    The reference is treated as a constant; no gradient reaches it.
    """
    if sft_model.config != cpt_reference.config:
        raise ConfigMismatchError(
            f"model config {sft_model.config} differs from reference config {cpt_reference.config}"
        )
    seq = assemble_scoring_sequence(query, document, sft_model.config.max_sequence_length)
    rows, _ = _query_prediction_rows(seq)
    with ad.no_grad():
        ref_logp = forward_ids(cpt_reference, seq.ids[None, :]).values[0][rows]
    student_logp = forward_ids(sft_model, seq.ids[None, :])
    flat = ad.reshape(student_logp, (len(seq), sft_model.config.vocab_size))
    student_rows = ad.embedding(flat, rows)
    return _dp_from_rows(ref_logp, student_rows)


def combine_sft_terms(terms: dict[str, Tensor], alpha: float) -> Tensor:
    """alpha * rank + (1 - alpha) * (sum of whichever auxiliaries are present).

    With no auxiliaries the mixture degenerates to the ranking term alone
    (there is nothing to trade off against).
    """
    aux = [terms[k] for k in ("ntp", "dp") if k in terms]
    if not aux:
        return terms["rank"]
    aux_total = aux[0] if len(aux) == 1 else ad.add(aux[0], aux[1])
    return ad.add(ad.mul(terms["rank"], alpha), ad.mul(aux_total, 1.0 - alpha))


def sft_loss_terms(
    model: LmCheckpoint,
    cpt_reference: LmCheckpoint | None,
    example,
    hp: SftHyperparams,
    use_ntp: bool = True,
    use_dp: bool = True,
    normalize_ntp: bool = False,
) -> dict[str, Tensor]:
    """All enabled loss terms off one student forward pass.

    The positive sequence is batch row 0, so the ranking score sum, the NTP
    term, and the student side of the drift penalty share its
    log-probability rows. Auxiliaries evaluate the positive pair only.
    """
    if not getattr(example, "positive", None):
        raise MissingPositiveError(f"example {example.query_id!r} has no positive document")
    if len(example.negatives) != hp.num_negatives:
        raise NegativeCountMismatchError(
            f"example {example.query_id!r} has {len(example.negatives)} negatives, expected {hp.num_negatives}"
        )
    max_len = model.config.max_sequence_length
    q = _as_sequence(example.query, "query")
    pos_seq = assemble_scoring_sequence(q, example.positive, max_len)
    seqs = [pos_seq] + [assemble_scoring_sequence(q, neg, max_len) for neg in example.negatives]

    ids, query_mask = pad_batch(seqs)
    logp = forward_ids(model, ids)
    next_ids = np.zeros_like(ids)
    next_ids[:, :-1] = ids[:, 1:]
    next_mask = np.zeros_like(query_mask)
    next_mask[:, :-1] = query_mask[:, 1:]
    sums = ad.tsum(ad.gather_last(logp, next_ids) * next_mask, axis=1)

    terms: dict[str, Tensor] = {"rank": _rank_loss_from_sums(sums, hp.tau)}
    if use_ntp:
        l_ntp = ad.neg(ad.gather_last(sums, np.asarray(0)))
        if normalize_ntp:
            l_ntp = ad.mul(l_ntp, 1.0 / len(q))
        terms["ntp"] = l_ntp
    if use_dp:
        if cpt_reference is None:
            raise ValueError("drift penalty requested but no reference model supplied")
        if model.config != cpt_reference.config:
            raise ConfigMismatchError(
                f"model config {model.config} differs from reference config {cpt_reference.config}"
            )
        rows, _ = _query_prediction_rows(pos_seq)
        with ad.no_grad():
            ref_logp = forward_ids(cpt_reference, pos_seq.ids[None, :]).values[0][rows]
        width = ids.shape[1]
        flat = ad.reshape(logp, (ids.shape[0] * width, model.config.vocab_size))
        student_rows = ad.embedding(flat, rows)  # batch row 0 occupies the first `width` rows
        terms["dp"] = _dp_from_rows(ref_logp, student_rows)
    return terms


def sft_loss(
    model: LmCheckpoint,
    cpt_reference: LmCheckpoint | None,
    example,
    hp: SftHyperparams,
    use_ntp: bool = True,
    use_dp: bool = True,
    normalize_ntp: bool = False,
) -> Tensor:
    """The mixed fine-tuning objective for one ranking example."""
    terms = sft_loss_terms(
        model, cpt_reference, example, hp, use_ntp=use_ntp, use_dp=use_dp, normalize_ntp=normalize_ntp
    )
    return combine_sft_terms(terms, hp.alpha)
