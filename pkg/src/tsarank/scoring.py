"""Query-likelihood relevance scoring and pointwise ranking.

A document's relevance to a query is the probability of generating the
query, token by token, after the document-conditioned prompt
``Document: <doc> Query:``. All arithmetic stays in log space; the raw
probability is materialised only where a consumer needs it (the ranking
loss and reports). A single ASCII space separates ``Query:`` from the
query span; the space belongs to the conditioning context, not to the
scored tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import LmCheckpoint, forward_ids
from .tokenizer import (
    SequenceTooLongError,
    TokenSequence,
    concat_sequences,
    pad_batch,
    tokenize,
    truncate_right,
)

PROMPT_PREFIX = "Document: "
PROMPT_SUFFIX = " Query:"
QUERY_SEPARATOR = " "

# Prompt template cost in tokens, separator included.
PROMPT_OVERHEAD = len(PROMPT_PREFIX.encode()) + len(PROMPT_SUFFIX.encode()) + len(QUERY_SEPARATOR.encode())


class EmptyDocumentError(ValueError):
    """Document supplied to the prompt builder has no tokens."""


class EmptyQueryError(ValueError):
    """Query supplied to the scorer has no tokens."""


class DuplicateDocIdError(ValueError):
    """Candidate list passed to rank() contains a repeated document id."""


def _as_sequence(text_or_seq, role: str) -> TokenSequence:
    if isinstance(text_or_seq, TokenSequence):
        if len(text_or_seq) == 0:
            return text_or_seq
        return TokenSequence(ids=text_or_seq.ids, spans=((role, 0, len(text_or_seq)),))
    return tokenize(text_or_seq, role=role)


def build_prompt(document) -> TokenSequence:
    """``Document: <doc> Query:`` as a role-tagged token sequence."""
    doc = _as_sequence(document, "document")
    if len(doc) == 0:
        raise EmptyDocumentError("cannot build a prompt for an empty document")
    return concat_sequences(tokenize(PROMPT_PREFIX, role="prompt"), doc, tokenize(PROMPT_SUFFIX, role="prompt"))


def assemble_scoring_sequence(query, document, max_len: int) -> TokenSequence:
    """Prompt + separator + query, truncating the document from the right.

    The query is never truncated; if prompt overhead plus query already
    exceed ``max_len`` the assembly fails.
    """
    q = _as_sequence(query, "query")
    if len(q) == 0:
        raise EmptyQueryError("cannot score an empty query")
    doc = _as_sequence(document, "document")
    if len(doc) == 0:
        raise EmptyDocumentError("cannot score against an empty document")
    doc_budget = max_len - PROMPT_OVERHEAD - len(q)
    if doc_budget < 1:
        raise SequenceTooLongError(
            f"query of {len(q)} tokens leaves no room for the document under max length {max_len}"
        )
    doc = truncate_right(doc, doc_budget)
    return concat_sequences(build_prompt(doc), tokenize(QUERY_SEPARATOR, role="prompt"), q)


def batched_query_logprob_sums(model: LmCheckpoint, seqs: list[TokenSequence]) -> Tensor:
    """Sum of query-token log-probs for each sequence, one forward pass.

    Differentiable; position t's prediction row scores the token at t+1,
    so targets and the query mask are shifted left by one.
    """
    ids, query_mask = pad_batch(seqs)
    logp = forward_ids(model, ids)
    next_ids = np.zeros_like(ids)
    next_ids[:, :-1] = ids[:, 1:]
    next_mask = np.zeros_like(query_mask)
    next_mask[:, :-1] = query_mask[:, 1:]
    token_logp = ad.gather_last(logp, next_ids)
    return ad.tsum(token_logp * next_mask, axis=1)


def query_logprob_sum(model: LmCheckpoint, query, document) -> Tensor:
    """Differentiable scalar: sum_j log p(q_j | prompt(d), q_<j)."""
    seq = assemble_scoring_sequence(query, document, model.config.max_sequence_length)
    sums = batched_query_logprob_sums(model, [seq])
    return ad.gather_last(sums, np.asarray(0))


def relevance_log_score(model: LmCheckpoint, query, document) -> float:
    """Log of the query-generation probability given the document."""
    with ad.no_grad():
        return query_logprob_sum(model, query, document).item()


def perplexity(model: LmCheckpoint, query, document) -> float:
    """exp(-log_score / |q|): per-token inverse likelihood of the query."""
    q = _as_sequence(query, "query")
    if len(q) == 0:
        raise EmptyQueryError("cannot compute perplexity of an empty query")
    return float(np.exp(-relevance_log_score(model, q, document) / len(q)))


@dataclass(frozen=True)
class ScoredDocument:
    doc_id: str
    log_score: float
    score: float
    rank: int


@dataclass(frozen=True)
class RankedList:
    query_id: str
    docs: tuple[ScoredDocument, ...]


_SCORE_BATCH = 32


def score_documents(model: LmCheckpoint, query, documents) -> list[float]:
    """Log-scores for one query against many documents, batched."""
    q = _as_sequence(query, "query")
    max_len = model.config.max_sequence_length
    seqs = [assemble_scoring_sequence(q, doc, max_len) for doc in documents]
    out: list[float] = []
    with ad.no_grad():
        for start in range(0, len(seqs), _SCORE_BATCH):
            sums = batched_query_logprob_sums(model, seqs[start : start + _SCORE_BATCH])
            out.extend(float(v) for v in sums.values)
    return out


def rank(model: LmCheckpoint, query, documents: list[tuple[str, str]], query_id: str = "q") -> RankedList:
    """Score and sort candidates; ties keep their input order.

    ``documents`` is a list of (doc_id, text) pairs with unique ids.
    """
    if not documents:
        raise ValueError("rank() needs at least one candidate document")
    ids = [doc_id for doc_id, _ in documents]
    if len(set(ids)) != len(ids):
        dupes = sorted({d for d in ids if ids.count(d) > 1})
        raise DuplicateDocIdError(f"duplicate candidate document ids: {dupes}")
    log_scores = score_documents(model, query, [text for _, text in documents])
    order = sorted(range(len(documents)), key=lambda i: log_scores[i], reverse=True)
    docs = tuple(
        ScoredDocument(doc_id=ids[i], log_score=log_scores[i], score=float(np.exp(log_scores[i])), rank=pos + 1)
        for pos, i in enumerate(order)
    )
    return RankedList(query_id=query_id, docs=docs)


# ----------------------------------------------------------------------
# run files: one line per (query id, doc id, rank, log_score), tab-separated


def write_run_file(ranked_lists: list[RankedList], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ranked in ranked_lists:
            for doc in ranked.docs:
                fh.write(f"{ranked.query_id}\t{doc.doc_id}\t{doc.rank}\t{doc.log_score:.17g}\n")


def read_run_file(path) -> list[RankedList]:
    by_query: dict[str, list[ScoredDocument]] = {}
    order: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            query_id, doc_id, rank_str, log_score_str = parts
            if query_id not in by_query:
                by_query[query_id] = []
                order.append(query_id)
            log_score = float(log_score_str)
            by_query[query_id].append(
                ScoredDocument(doc_id=doc_id, log_score=log_score, score=float(np.exp(log_score)), rank=int(rank_str))
            )
    out = []
    for query_id in order:
        docs = sorted(by_query[query_id], key=lambda d: d.rank)
        out.append(RankedList(query_id=query_id, docs=tuple(docs)))
    return out
