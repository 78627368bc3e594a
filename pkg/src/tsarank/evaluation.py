"""Ranking evaluation: NDCG@k, perplexity analysis, query token statistics.

NDCG uses exponential gain (2^grade - 1) and a log2(rank + 1) discount,
with the ideal ranking taken over every judged document for the query.
Queries whose judgments are all zero score 0 rather than being dropped, so
per-query vectors stay aligned across models. Token statistics are an
automated proxy: lowercase, punctuation-stripped matching against the
paired document and a bundled stopword list.
"""

from __future__ import annotations

import logging
import math
import string
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import autodiff as ad
from .data import InvertedIndex, read_qrels, terms
from .model import LmCheckpoint, forward_ids
from .scoring import (
    QUERY_SEPARATOR,
    RankedList,
    build_prompt,
    perplexity,
    rank,
)
from .tokenizer import EOS_ID, TokenSequence, concat_sequences, tokenize

log = logging.getLogger(__name__)


class UnknownQueryError(KeyError):
    """Run file references a query id outside the evaluation set."""


@dataclass(frozen=True)
class Qrels:
    """Ground-truth relevance grades keyed by (query id, doc id)."""

    grades: dict[tuple[str, str], int]

    def __post_init__(self):
        for key, grade in self.grades.items():
            if grade < 0:
                raise ValueError(f"negative grade {grade} for {key}")

    @classmethod
    def from_file(cls, path) -> "Qrels":
        return cls(grades=read_qrels(path))

    def grade(self, query_id: str, doc_id: str) -> int:
        return self.grades.get((query_id, doc_id), 0)

    def judged(self, query_id: str) -> dict[str, int]:
        return {d: g for (q, d), g in self.grades.items() if q == query_id}

    def query_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for query_id, _ in self.grades:
            seen.setdefault(query_id)
        return list(seen)


def _gain(grade: int) -> float:
    return float(2**grade - 1)


def ndcg_at_k(ranked: RankedList, qrels: Qrels, k: int) -> float:
    """Normalised DCG at cutoff k; 0.0 when no judged document is relevant."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    dcg = 0.0
    for doc in ranked.docs:
        if doc.rank > k:
            continue
        grade = qrels.grade(ranked.query_id, doc.doc_id)
        if grade > 0:
            dcg += _gain(grade) / math.log2(doc.rank + 1)
    ideal_grades = sorted(qrels.judged(ranked.query_id).values(), reverse=True)[:k]
    idcg = sum(_gain(g) / math.log2(pos + 2) for pos, g in enumerate(ideal_grades) if g > 0)
    if idcg == 0.0:
        return 0.0
    return dcg / idcg


def build_candidates(index: InvertedIndex, query: str, n: int) -> list[str]:
    """Top-n lexical candidates for evaluation; positives are not excluded."""
    if n < 1:
        raise ValueError(f"candidate count must be >= 1, got {n}")
    return [doc_id for doc_id, _ in index.search(terms(query))[:n]]


def evaluate_ranking(
    model: LmCheckpoint,
    index: InvertedIndex,
    corpus: dict[str, str],
    queries: dict[str, str],
    qrels: dict[tuple[str, str], int] | Qrels,
    k: int = 10,
    num_candidates: int = 100,
) -> tuple[float, dict[str, float], list[RankedList]]:
    """Rank lexical candidates for each query and average NDCG@k."""
    judgments = qrels if isinstance(qrels, Qrels) else Qrels(grades=qrels)
    per_query: dict[str, float] = {}
    run: list[RankedList] = []
    for query_id, query_text in queries.items():
        candidate_ids = build_candidates(index, query_text, num_candidates)
        ranked = rank(model, query_text, [(doc_id, corpus[doc_id]) for doc_id in candidate_ids], query_id=query_id)
        run.append(ranked)
        per_query[query_id] = ndcg_at_k(ranked, judgments, k)
    mean = float(np.mean(list(per_query.values()))) if per_query else 0.0
    return mean, per_query, run


def ndcg_for_run(run: list[RankedList], qrels: Qrels, k: int, known_query_ids=None) -> tuple[float, dict[str, float]]:
    """Score an existing run file against judgments."""
    if known_query_ids is not None:
        known = set(known_query_ids)
        for ranked in run:
            if ranked.query_id not in known:
                raise UnknownQueryError(f"run file references unknown query id {ranked.query_id!r}")
    per_query = {ranked.query_id: ndcg_at_k(ranked, qrels, k) for ranked in run}
    mean = float(np.mean(list(per_query.values()))) if per_query else 0.0
    return mean, per_query


# ----------------------------------------------------------------------
# perplexity analysis


@dataclass(frozen=True)
class PplRow:
    label: str
    stage: str
    ppl_pos: float
    ppl_neg: float

    @property
    def delta(self) -> float:
        return self.ppl_neg - self.ppl_pos


def ppl_report(
    models: list[tuple[str, LmCheckpoint]],
    pos_pairs: list[tuple[str, str]],
    neg_pairs: list[tuple[str, str]],
) -> list[PplRow]:
    """Mean query perplexity over positive and negative pairs, per model."""
    if not pos_pairs or not neg_pairs:
        raise ValueError("both pair sets must be nonempty")
    rows = []
    for label, model in models:
        ppl_pos = float(np.mean([perplexity(model, q, d) for q, d in pos_pairs]))
        ppl_neg = float(np.mean([perplexity(model, q, d) for q, d in neg_pairs]))
        rows.append(PplRow(label=label, stage=model.stage, ppl_pos=ppl_pos, ppl_neg=ppl_neg))
    return rows


# ----------------------------------------------------------------------
# token statistics


def load_stopwords() -> frozenset[str]:
    """The bundled English stopword list, versioned with the package."""
    text = resources.files("tsarank").joinpath("stopwords.txt").read_text(encoding="utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip() and not w.startswith("#"))


_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_token(token: str) -> str:
    return token.lower().translate(_PUNCT_TABLE)


@dataclass(frozen=True)
class TokenStats:
    doc_word_proportion: float
    stop_word_proportion: float
    skipped_empty: int = 0


def token_stats(queries: list[str], documents: list[str], stopwords: frozenset[str] | set[str]) -> TokenStats:
    """Average per-pair proportions of document words and stop words.

    Doc-word proportion counts non-stopword query tokens whose normalised
    form occurs in the paired document; pairs whose query normalises to
    nothing are skipped and counted. Pairs with only stopword tokens
    contribute to the stop-word average but not the doc-word one.
    """
    if len(queries) != len(documents):
        raise ValueError("queries and documents must pair up")
    doc_props: list[float] = []
    stop_props: list[float] = []
    skipped = 0
    for query, document in zip(queries, documents):
        query_tokens = [normalize_token(t) for t in query.split()]
        query_tokens = [t for t in query_tokens if t]
        if not query_tokens:
            skipped += 1
            continue
        doc_tokens = {normalize_token(t) for t in document.split()}
        doc_tokens.discard("")
        stop_props.append(sum(1 for t in query_tokens if t in stopwords) / len(query_tokens))
        content = [t for t in query_tokens if t not in stopwords]
        if content:
            doc_props.append(sum(1 for t in content if t in doc_tokens) / len(content))
    if skipped:
        log.warning("token_stats skipped %d empty-query pairs", skipped)
    return TokenStats(
        doc_word_proportion=float(np.mean(doc_props)) if doc_props else 0.0,
        stop_word_proportion=float(np.mean(stop_props)) if stop_props else 0.0,
        skipped_empty=skipped,
    )


# ----------------------------------------------------------------------
# greedy decoding


def greedy_generate(model: LmCheckpoint, document, max_len: int) -> TokenSequence:
    """Argmax-decode a query from the document prompt.

    Ties break toward the lowest token id; decoding stops at the end token
    or after ``max_len`` generated tokens.
    """
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    context = concat_sequences(build_prompt(document), tokenize(QUERY_SEPARATOR, role="prompt"))
    ids = list(context.ids)
    generated: list[int] = []
    limit = model.config.max_sequence_length
    with ad.no_grad():
        for _ in range(max_len):
            if len(ids) >= limit:
                break
            logp = forward_ids(model, np.asarray(ids, dtype=np.int64)[None, :]).values[0, -1]
            next_id = int(np.argmax(logp))
            if next_id == EOS_ID:
                break
            generated.append(next_id)
            ids.append(next_id)
    arr = np.asarray(generated, dtype=np.int64)
    spans = (("query", 0, len(arr)),) if len(arr) else ()
    return TokenSequence(ids=arr, spans=spans)
