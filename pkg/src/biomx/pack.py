"""Post-tokenization grouping of variable-length sequences into fixed-length chunks.

Sequences are concatenated with a separator token appended after each one
(including the last), then cut into consecutive non-overlapping chunks of
exactly ``chunk_len`` tokens. No padding is ever inserted. The remainder
shorter than ``chunk_len`` is dropped unless ``keep_tail`` is set; a stream
shorter than one chunk comes back whole as a single short chunk.
"""

from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_positive_int

DEFAULT_CHUNK_LEN = 2048
MAX_TOKEN_ID = 2**32 - 1


@dataclass(frozen=True)
class PackStats:
    sequences_in: int
    chunks_out: int
    tokens_in: int
    tokens_emitted: int
    tokens_dropped: int
    reduction_pct: float

    def to_dict(self):
        return asdict(self)


def _check_ids(values, what):
    arr = np.asarray(values, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() > MAX_TOKEN_ID):
        raise ValueError(f"{what} must be unsigned 32-bit token ids")
    return arr


def flatten_with_separator(sequences, sep_id):
    """Concatenate sequences, appending ``sep_id`` after each one."""
    _check_ids([sep_id], "sep_id")
    parts = []
    for seq in sequences:
        parts.append(_check_ids(seq, "tokens").ravel())
        parts.append(np.array([sep_id], dtype=np.int64))
    if not parts:
        return np.zeros(0, dtype=np.uint32)
    return np.concatenate(parts).astype(np.uint32)


def pack_stream(sequences, sep_id, chunk_len=DEFAULT_CHUNK_LEN, keep_tail=False):
    """Group ``sequences`` into chunks; returns a list of lists of token ids."""
    if isinstance(chunk_len, bool) or not isinstance(chunk_len, (int, np.integer)) or chunk_len < 2:
        raise ValueError(f"chunk_len must be an integer >= 2, got {chunk_len!r}")
    tokens = flatten_with_separator(sequences, sep_id)
    n = tokens.size
    if n == 0:
        return []
    if n < chunk_len:
        return [tokens.tolist()]
    full = (n // chunk_len) * chunk_len
    chunks = tokens[:full].reshape(-1, chunk_len).tolist()
    if keep_tail and full < n:
        chunks.append(tokens[full:].tolist())
    return chunks


def packing_stats(sequences, chunks, sep_id, chunk_len=DEFAULT_CHUNK_LEN):
    """Counts and sequence-count reduction for a packing of ``sequences``.

    Raises ``ValueError`` when ``chunks`` is not a packing of ``sequences``.
    """
    sequences = list(sequences)
    tokens = flatten_with_separator(sequences, sep_id)
    emitted = sum(len(c) for c in chunks)
    if emitted > tokens.size:
        raise ValueError("chunks hold more tokens than the flattened stream")
    if chunks:
        joined = np.concatenate([np.asarray(c, dtype=np.int64) for c in chunks])
        if not np.array_equal(joined, tokens[:emitted].astype(np.int64)):
            raise ValueError("chunks are not a prefix of the flattened stream")
    short = [c for c in chunks if len(c) != chunk_len]
    if len(short) > 1 or (short and short[0] is not chunks[-1]):
        raise ValueError("only the final chunk may be shorter than chunk_len")
    if tokens.size - emitted >= chunk_len:
        raise ValueError("dropped suffix is at least one full chunk")
    n_seq = len(sequences)
    reduction = 100.0 * (1.0 - len(chunks) / n_seq) if n_seq else 0.0
    return PackStats(
        sequences_in=n_seq,
        chunks_out=len(chunks),
        tokens_in=int(tokens.size - n_seq),
        tokens_emitted=int(emitted),
        tokens_dropped=int(tokens.size - emitted),
        reduction_pct=reduction,
    )


class SequencePacker(TransformerMixin, BaseEstimator):
    """Stateless transformer: ``transform(sequences)`` returns packed chunks.

    ``stats_`` describes the most recent ``transform`` call.
    """

    def __init__(self, chunk_len=DEFAULT_CHUNK_LEN, sep_id=2, keep_tail=False):
        self.chunk_len = chunk_len
        self.sep_id = sep_id
        self.keep_tail = keep_tail

    def fit(self, X=None, y=None):
        check_positive_int(self.chunk_len, "chunk_len", minimum=2)
        _check_ids([self.sep_id], "sep_id")
        return self

    def transform(self, X):
        X = list(X)
        chunks = pack_stream(X, self.sep_id, self.chunk_len, self.keep_tail)
        self.stats_ = packing_stats(X, chunks, self.sep_id, self.chunk_len)
        return chunks
