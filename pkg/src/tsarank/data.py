"""Data ingestion and construction: weak pairs, lexical mining, synthesis.

All on-disk formats are line-oriented and language-neutral: JSON-Lines for
pairs/corpora/examples, TSV for qrels. Loaders reject malformed lines with
their line numbers instead of aborting the whole file. Every generator and
sampler is a deterministic function of its inputs and a seed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

CATEGORIES = (
    "title-body",
    "title-abstract",
    "citation-reference",
    "post-comment",
    "entity-description",
    "question-answer",
    "summary-content",
)


class UnknownDocError(KeyError):
    """Document id not present in the index."""


class InsufficientCandidatesError(ValueError):
    """A query has fewer mined candidates than the requested m."""


class InvalidParameterError(ValueError):
    """Synthetic-corpus parameters out of range."""


@dataclass(frozen=True)
class WeakPair:
    """A mined (short text, long text) pair standing in for (query, document)."""

    pair_id: str
    query: str
    document: str
    category: str

    def __post_init__(self):
        if not self.query or not self.document:
            raise ValueError(f"weak pair {self.pair_id!r}: query and document must be nonempty")
        if self.category not in CATEGORIES:
            raise ValueError(f"weak pair {self.pair_id!r}: unknown category {self.category!r}")


@dataclass(frozen=True)
class RankExample:
    """One query with its positive document and m distinct negatives."""

    query_id: str
    query: str
    positive_id: str
    positive: str
    negative_ids: tuple[str, ...]
    negatives: tuple[str, ...]
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.positive_id in self.negative_ids:
            raise ValueError(f"example {self.query_id!r}: positive {self.positive_id!r} appears among negatives")
        if len(set(self.negative_ids)) != len(self.negative_ids):
            raise ValueError(f"example {self.query_id!r}: negatives must be pairwise distinct")
        if len(self.negative_ids) != len(self.negatives):
            raise ValueError(f"example {self.query_id!r}: negative ids and texts differ in length")


# ----------------------------------------------------------------------
# file formats


def load_weak_pairs(path, on_reject=None) -> list[WeakPair]:
    """Read a JSON-Lines weak-pairs file, skipping malformed lines.

    Each rejected line is reported as (line_number, reason) through
    ``on_reject``; the default logs a warning.
    """

    def reject(lineno: int, reason: str) -> None:
        if on_reject is not None:
            on_reject(lineno, reason)
        else:
            log.warning("%s:%d: %s", path, lineno, reason)

    pairs: list[WeakPair] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                reject(lineno, f"invalid JSON: {exc.msg}")
                continue
            missing = [k for k in ("id", "query", "document", "category") if k not in record]
            if missing:
                reject(lineno, f"missing fields: {', '.join(missing)}")
                continue
            try:
                pairs.append(
                    WeakPair(
                        pair_id=str(record["id"]),
                        query=record["query"],
                        document=record["document"],
                        category=record["category"],
                    )
                )
            except ValueError as exc:
                reject(lineno, str(exc))
    return pairs


def write_weak_pairs(pairs: list[WeakPair], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(
                json.dumps(
                    {"id": p.pair_id, "query": p.query, "document": p.document, "category": p.category},
                    sort_keys=True,
                )
                + "\n"
            )


def load_corpus(path) -> dict[str, str]:
    """JSON-Lines {id, text} -> ordered id->text mapping."""
    corpus: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if "id" not in record or "text" not in record:
                raise ValueError(f"{path}:{lineno}: expected fields 'id' and 'text'")
            doc_id = str(record["id"])
            if doc_id in corpus:
                raise ValueError(f"{path}:{lineno}: duplicate id {doc_id!r}")
            corpus[doc_id] = record["text"]
    return corpus


def write_corpus(corpus: dict[str, str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc_id, text in corpus.items():
            fh.write(json.dumps({"id": doc_id, "text": text}, sort_keys=True) + "\n")


load_queries = load_corpus
write_queries = write_corpus


def read_qrels(path) -> dict[tuple[str, str], int]:
    """TSV (query id, doc id, grade) -> mapping with non-negative grades."""
    qrels: dict[tuple[str, str], int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            query_id, doc_id, grade_str = parts
            grade = int(grade_str)
            if grade < 0:
                raise ValueError(f"{path}:{lineno}: negative relevance grade {grade}")
            key = (query_id, doc_id)
            if key in qrels:
                raise ValueError(f"{path}:{lineno}: duplicate judgment for {key}")
            qrels[key] = grade
    return qrels


def write_qrels(qrels: dict[tuple[str, str], int], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for (query_id, doc_id), grade in qrels.items():
            fh.write(f"{query_id}\t{doc_id}\t{grade}\n")


def write_examples(examples: list[RankExample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(
                json.dumps(
                    {
                        "query_id": ex.query_id,
                        "query": ex.query,
                        "positive_id": ex.positive_id,
                        "negative_ids": list(ex.negative_ids),
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_examples(path, corpus: dict[str, str]) -> list[RankExample]:
    """Materialise ranking examples by joining stored doc ids against a corpus."""
    examples: list[RankExample] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            try:
                positive = corpus[record["positive_id"]]
                negatives = tuple(corpus[i] for i in record["negative_ids"])
            except KeyError as exc:
                raise UnknownDocError(f"{path}:{lineno}: document id {exc.args[0]!r} not in corpus") from exc
            examples.append(
                RankExample(
                    query_id=str(record["query_id"]),
                    query=record["query"],
                    positive_id=str(record["positive_id"]),
                    positive=positive,
                    negative_ids=tuple(str(i) for i in record["negative_ids"]),
                    negatives=negatives,
                )
            )
    return examples


def file_fingerprint(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def dataset_fingerprint(paths: dict[str, str]) -> str:
    """Stable fingerprint over a named set of files."""
    digest = hashlib.sha256()
    for name in sorted(paths):
        digest.update(name.encode("utf-8"))
        digest.update(file_fingerprint(paths[name]).encode("ascii"))
    return digest.hexdigest()


def pairs_fingerprint(pairs: list[WeakPair]) -> str:
    digest = hashlib.sha256()
    for p in pairs:
        digest.update(f"{p.pair_id}\x1f{p.query}\x1f{p.document}\x1f{p.category}\x1e".encode("utf-8"))
    return digest.hexdigest()


def examples_fingerprint(examples: list[RankExample]) -> str:
    digest = hashlib.sha256()
    for ex in examples:
        digest.update(
            f"{ex.query_id}\x1f{ex.query}\x1f{ex.positive_id}\x1f{','.join(ex.negative_ids)}\x1e".encode("utf-8")
        )
    return digest.hexdigest()


# ----------------------------------------------------------------------
# lexical index and BM25

_TERM_RE = re.compile(r"[a-z0-9]+")

BM25_K1 = 1.2
BM25_B = 0.75


def terms(text: str) -> list[str]:
    """Lowercased alphanumeric terms, in order."""
    return _TERM_RE.findall(text.lower())


class InvertedIndex:
    """Term -> postings over an immutable corpus, with BM25 statistics.

    Build once, then share freely: scoring and mining never mutate it.
    """

    def __init__(self, corpus: dict[str, str]):
        self.doc_ids: list[str] = list(corpus)
        self.doc_lengths: dict[str, int] = {}
        self.postings: dict[str, list[tuple[str, int]]] = {}
        for doc_id, text in corpus.items():
            toks = terms(text)
            self.doc_lengths[doc_id] = len(toks)
            counts: dict[str, int] = {}
            for tok in toks:
                counts[tok] = counts.get(tok, 0) + 1
            for tok, tf in counts.items():
                self.postings.setdefault(tok, []).append((doc_id, tf))
        for plist in self.postings.values():
            plist.sort(key=lambda entry: entry[0])
        self.num_docs = len(self.doc_ids)
        total_len = sum(self.doc_lengths.values())
        self.avg_doc_length = total_len / self.num_docs if self.num_docs else 0.0

    def _idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return float(np.log(1.0 + (self.num_docs - df + 0.5) / (df + 0.5)))

    def bm25_score(self, query_terms: list[str], doc_id: str) -> float:
        """Okapi BM25 for one document; unique query terms each count once."""
        if doc_id not in self.doc_lengths:
            raise UnknownDocError(f"document id {doc_id!r} not in index")
        dl = self.doc_lengths[doc_id]
        norm = BM25_K1 * (1.0 - BM25_B + BM25_B * dl / self.avg_doc_length)
        score = 0.0
        for term in dict.fromkeys(query_terms):
            tf = 0
            for candidate, freq in self.postings.get(term, ()):
                if candidate == doc_id:
                    tf = freq
                    break
            if tf == 0:
                continue
            score += self._idf(term) * tf * (BM25_K1 + 1.0) / (tf + norm)
        return score

    def search(self, query_terms: list[str], exclude: set[str] | None = None) -> list[tuple[str, float]]:
        """Every non-excluded document ordered by BM25 descending, id ascending.

        Documents sharing no term with the query score exactly 0 and sort
        after all matching documents.
        """
        exclude = exclude or set()
        scores: dict[str, float] = {}
        for term in dict.fromkeys(query_terms):
            plist = self.postings.get(term)
            if not plist:
                continue
            idf = self._idf(term)
            for doc_id, tf in plist:
                dl = self.doc_lengths[doc_id]
                norm = BM25_K1 * (1.0 - BM25_B + BM25_B * dl / self.avg_doc_length)
                scores[doc_id] = scores.get(doc_id, 0.0) + idf * tf * (BM25_K1 + 1.0) / (tf + norm)
        ranked = [(doc_id, scores.get(doc_id, 0.0)) for doc_id in self.doc_ids if doc_id not in exclude]
        ranked.sort(key=lambda entry: (-entry[1], entry[0]))
        return ranked


def bm25_score(index: InvertedIndex, query_terms: list[str], doc_id: str) -> float:
    return index.bm25_score(query_terms, doc_id)


def mine_negatives(index: InvertedIndex, query: str, positive_ids: set[str], top_k: int) -> list[str]:
    """The top_k most lexically relevant non-positive documents, best first."""
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    ranked = index.search(terms(query), exclude=set(positive_ids))
    return [doc_id for doc_id, _ in ranked[:top_k]]


def sample_examples(
    queries: dict[str, str],
    positives: dict[str, list[str]],
    candidates: dict[str, list[str]],
    corpus: dict[str, str],
    m: int,
    seed: int,
) -> list[RankExample]:
    """Draw m negatives per query uniformly without replacement, seeded."""
    rng = np.random.default_rng(seed)
    examples: list[RankExample] = []
    for query_id, query_text in queries.items():
        pos_ids = positives.get(query_id, [])
        if not pos_ids:
            raise InsufficientCandidatesError(f"query {query_id!r} has no positive document")
        cands = candidates.get(query_id, [])
        if len(cands) < m:
            raise InsufficientCandidatesError(
                f"query {query_id!r} has {len(cands)} candidates, needs at least {m}"
            )
        positive_id = pos_ids[int(rng.integers(len(pos_ids)))] if len(pos_ids) > 1 else pos_ids[0]
        chosen = rng.choice(len(cands), size=m, replace=False)
        negative_ids = tuple(cands[int(i)] for i in chosen)
        examples.append(
            RankExample(
                query_id=query_id,
                query=query_text,
                positive_id=positive_id,
                positive=corpus[positive_id],
                negative_ids=negative_ids,
                negatives=tuple(corpus[i] for i in negative_ids),
                provenance={"seed": seed, "m": m},
            )
        )
    return examples


# ----------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SynthParams:
    """Knobs for the synthetic ranking task.

    Documents are random word strings; each query is a contiguous or sampled
    subset of its positive document's words with noise-rate corruption, so
    query tokens overwhelmingly occur in the positive document.
    """

    vocab_words: int = 120
    word_len: tuple[int, int] = (3, 6)
    doc_words: tuple[int, int] = (8, 16)
    query_words: tuple[int, int] = (2, 4)
    corpus_size: int = 1200
    num_weak_pairs: int = 5000
    num_train_queries: int = 500
    num_eval_queries: int = 200
    noise_rate: float = 0.1
    contiguous_prob: float = 0.5

    def __post_init__(self):
        if self.vocab_words < 10:
            raise InvalidParameterError(f"vocab_words must be >= 10, got {self.vocab_words}")
        for name in ("word_len", "doc_words", "query_words"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise InvalidParameterError(f"{name} range ({lo}, {hi}) is invalid")
        if self.corpus_size < 4:
            raise InvalidParameterError(f"corpus_size must be >= 4, got {self.corpus_size}")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise InvalidParameterError(f"noise_rate must be in [0, 1], got {self.noise_rate}")
        if not 0.0 <= self.contiguous_prob <= 1.0:
            raise InvalidParameterError(f"contiguous_prob must be in [0, 1], got {self.contiguous_prob}")
        if min(self.num_weak_pairs, self.num_train_queries, self.num_eval_queries) < 1:
            raise InvalidParameterError("pair and query counts must be >= 1")


@dataclass(frozen=True)
class SynthDataset:
    corpus: dict[str, str]
    weak_pairs: list[WeakPair]
    train_queries: dict[str, str]
    train_qrels: dict[tuple[str, str], int]
    eval_queries: dict[str, str]
    eval_qrels: dict[tuple[str, str], int]


_LETTERS = "abcdefghijklmnopqrstuvwxyz"
_ZIPF_EXPONENT = 1.05
_ZIPF_SHIFT = 2.7


def _make_vocab(rng: np.random.Generator, params: SynthParams) -> list[str]:
    words: list[str] = []
    seen: set[str] = set()
    lo, hi = params.word_len
    while len(words) < params.vocab_words:
        length = int(rng.integers(lo, hi + 1))
        word = "".join(_LETTERS[int(i)] for i in rng.integers(0, len(_LETTERS), size=length))
        if word not in seen:
            seen.add(word)
            words.append(word)
    return words


def _word_weights(n: int) -> np.ndarray:
    ranks = np.arange(n, dtype=np.float64)
    weights = 1.0 / (ranks + _ZIPF_SHIFT) ** _ZIPF_EXPONENT
    return weights / weights.sum()


def _make_document(rng: np.random.Generator, vocab: list[str], weights: np.ndarray, params: SynthParams) -> list[str]:
    lo, hi = params.doc_words
    n = int(rng.integers(lo, hi + 1))
    picks = rng.choice(len(vocab), size=n, p=weights)
    return [vocab[int(i)] for i in picks]


def _make_query(rng: np.random.Generator, doc_words: list[str], vocab: list[str], params: SynthParams) -> list[str]:
    lo, hi = params.query_words
    n = min(int(rng.integers(lo, hi + 1)), len(doc_words))
    if rng.random() < params.contiguous_prob and len(doc_words) > n:
        start = int(rng.integers(0, len(doc_words) - n + 1))
        picked = doc_words[start : start + n]
    else:
        idx = np.sort(rng.choice(len(doc_words), size=n, replace=False))
        picked = [doc_words[int(i)] for i in idx]
    out = []
    for word in picked:
        if rng.random() < params.noise_rate:
            out.append(vocab[int(rng.integers(len(vocab)))])
        else:
            out.append(word)
    return out


def synth_corpus(params: SynthParams, seed: int) -> SynthDataset:
    """Generate the full synthetic fixture; deterministic under the seed.

    Train and eval queries draw their positives from disjoint halves of the
    corpus, so evaluation positives are never part of fine-tuning data.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5D47A]))
    vocab = _make_vocab(rng, params)
    weights = _word_weights(len(vocab))

    corpus: dict[str, str] = {}
    doc_words: dict[str, list[str]] = {}
    for i in range(params.corpus_size):
        doc_id = f"d{i:05d}"
        words = _make_document(rng, vocab, weights, params)
        corpus[doc_id] = " ".join(words)
        doc_words[doc_id] = words

    weak_pairs: list[WeakPair] = []
    for i in range(params.num_weak_pairs):
        words = _make_document(rng, vocab, weights, params)
        query_words = _make_query(rng, words, vocab, params)
        category = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
        weak_pairs.append(
            WeakPair(
                pair_id=f"wp{i:05d}",
                query=" ".join(query_words),
                document=" ".join(words),
                category=category,
            )
        )

    half = params.corpus_size // 2
    train_ids = list(corpus)[:half]
    eval_ids = list(corpus)[half:]

    def make_queries(prefix: str, count: int, pool: list[str]) -> tuple[dict[str, str], dict[tuple[str, str], int]]:
        queries: dict[str, str] = {}
        qrels: dict[tuple[str, str], int] = {}
        for i in range(count):
            query_id = f"{prefix}{i:04d}"
            positive_id = pool[int(rng.integers(len(pool)))]
            query_words = _make_query(rng, doc_words[positive_id], vocab, params)
            queries[query_id] = " ".join(query_words)
            qrels[(query_id, positive_id)] = 1
        return queries, qrels

    train_queries, train_qrels = make_queries("tq", params.num_train_queries, train_ids)
    eval_queries, eval_qrels = make_queries("eq", params.num_eval_queries, eval_ids)

    return SynthDataset(
        corpus=corpus,
        weak_pairs=weak_pairs,
        train_queries=train_queries,
        train_qrels=train_qrels,
        eval_queries=eval_queries,
        eval_qrels=eval_qrels,
    )
