"""Byte-level tokenizer and role-tagged token sequences.

One token per UTF-8 byte (ids 0-255) plus four reserved special ids, so the
default vocabulary is 260 and every input string round-trips losslessly with
no external vocabulary assets. Spans tag which positions belong to the
prompt template, the document, or the query; the training losses and the
scorer read supervision masks off the query spans.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BYTE_VOCAB = 256
BOS_ID = 256
EOS_ID = 257
PAD_ID = 258
RESERVED_ID = 259
DEFAULT_VOCAB_SIZE = 260

ROLES = ("prompt", "query", "document")


class SequenceTooLongError(ValueError):
    """Assembled sequence exceeds the model's maximum length."""


@dataclass(frozen=True)
class TokenSequence:
    """Token ids with a role tag per contiguous span.

    Spans are (role, start, end) with half-open ends and cover the whole
    sequence in order.
    """

    ids: np.ndarray
    spans: tuple[tuple[str, int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "ids", np.asarray(self.ids, dtype=np.int64))
        for role, start, end in self.spans:
            if role not in ROLES:
                raise ValueError(f"unknown span role {role!r}")
            if not 0 <= start <= end <= len(self.ids):
                raise ValueError(f"span ({role}, {start}, {end}) out of range for length {len(self.ids)}")

    def __len__(self) -> int:
        return len(self.ids)

    def role_mask(self, role: str) -> np.ndarray:
        """Float mask, 1.0 on positions carrying ``role``."""
        mask = np.zeros(len(self.ids), dtype=np.float64)
        for r, start, end in self.spans:
            if r == role:
                mask[start:end] = 1.0
        return mask

    def span_slice(self, role: str) -> np.ndarray:
        """Ids of the positions carrying ``role``, in order."""
        return self.ids[self.role_mask(role) > 0]


def tokenize(text: str, role: str = "document") -> TokenSequence:
    """Encode a string as one token per UTF-8 byte."""
    raw = text.encode("utf-8")
    ids = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    spans = ((role, 0, len(ids)),) if len(ids) else ()
    return TokenSequence(ids=ids, spans=spans)


def detokenize(seq, errors: str = "strict") -> str:
    """Decode a TokenSequence or id array back to text, skipping special ids.

    Tokenizer output always round-trips strictly; model-generated ids may
    not form valid UTF-8, so generation consumers pass ``errors="replace"``.
    """
    ids = seq.ids if isinstance(seq, TokenSequence) else np.asarray(seq, dtype=np.int64)
    byte_ids = ids[ids < BYTE_VOCAB]
    return byte_ids.astype(np.uint8).tobytes().decode("utf-8", errors=errors)


def concat_sequences(*seqs: TokenSequence) -> TokenSequence:
    """Concatenate sequences, shifting span offsets."""
    parts = [s for s in seqs if len(s)]
    if not parts:
        return TokenSequence(ids=np.zeros(0, dtype=np.int64), spans=())
    ids = np.concatenate([s.ids for s in parts])
    spans: list[tuple[str, int, int]] = []
    offset = 0
    for s in parts:
        for role, start, end in s.spans:
            spans.append((role, start + offset, end + offset))
        offset += len(s)
    return TokenSequence(ids=ids, spans=tuple(spans))


def truncate_right(seq: TokenSequence, max_len: int) -> TokenSequence:
    """Drop tokens from the right until the sequence fits ``max_len``."""
    if len(seq) <= max_len:
        return seq
    spans = tuple(
        (role, start, min(end, max_len)) for role, start, end in seq.spans if start < max_len
    )
    return TokenSequence(ids=seq.ids[:max_len], spans=spans)


def pad_batch(seqs: list[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad sequences into an (N, T) id matrix plus a query mask.

    Padded positions never influence real positions under a causal mask, so
    right padding is safe for per-position log-probabilities.
    """
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    query_mask = np.zeros((len(seqs), width), dtype=np.float64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s.ids
        query_mask[i, : len(s)] = s.role_mask("query")
    return ids, query_mask
