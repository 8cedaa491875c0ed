"""Decoding demonstration sequences from a trained composer.

Both decode modes mask the specials outright and mask EOS until the
requested number of demonstrations has been emitted, which is what lets a
model trained on 2-shot targets produce 4- or 8-shot sequences.  Logits
are renormalized over the allowed tokens, greedy takes the argmax, and
beam search ranks partial sequences by summed log-probability with ties
falling to the lexicographically smallest id tuple.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import ConfigError, SchemaError
from .model import ModelParams, SupportFeatures, forward, log_softmax
from .records import (
    FORMAT_VERSION,
    GENERATION_FORMAT,
    Example,
    ICDSequence,
    QuerySample,
    _read_header,
    _write_lines,
    canonical_json,
    make_example,
)


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "beam"  # "greedy" or "beam"
    width: int = 3
    no_repeat: bool = True


class GoldenMethod(Enum):
    NULL_QUERY = "null_query"
    MODE_OVER_ANCHORS = "mode_over_anchors"


def _masked_logprobs(params, logits_row, used: tuple[int, ...], no_repeat: bool) -> np.ndarray:
    vocab = params.vocab
    masked = logits_row.copy()
    masked[vocab.bos] = -np.inf
    masked[vocab.query] = -np.inf
    masked[vocab.eos] = -np.inf  # callers stop at k emissions, EOS never competes
    if no_repeat:
        for tok in used:
            masked[tok] = -np.inf
    if not np.isfinite(masked).any():
        raise ConfigError("no unmasked token remains; k exceeds the usable vocabulary")
    return log_softmax(masked)


def generate(
    params: ModelParams,
    support: SupportFeatures,
    query: QuerySample,
    k: int,
    decode: DecodeConfig = DecodeConfig(),
    mode: str | None = None,
) -> ICDSequence:
    """Decode exactly k demonstration ids for a query.

    The sequence score is the sum of the chosen tokens' log-probabilities
    under the masking policy above.  Width-1 beam and greedy coincide.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if decode.no_repeat and k > support.n:
        raise ConfigError(f"k={k} exceeds the {support.n}-example supporting set")
    if k > params.config.k_max:
        raise ConfigError(f"k={k} exceeds model k_max={params.config.k_max}")
    vocab = params.vocab
    prefix = [vocab.bos, vocab.query]

    if decode.mode == "greedy" or (decode.mode == "beam" and decode.width == 1):
        ids: tuple[int, ...] = ()
        score = 0.0
        for _ in range(k):
            logits = forward(params, support, np.asarray(prefix + list(ids)), query, mode)
            logp = _masked_logprobs(params, logits[-1], ids, decode.no_repeat)
            tok = int(np.argmax(logp))
            score += float(logp[tok])
            ids = ids + (tok,)
        return ICDSequence(icds=ids, score=score)

    if decode.mode != "beam":
        raise ConfigError(f"unknown decode mode {decode.mode!r}")
    if decode.width < 1:
        raise ConfigError(f"beam width must be >= 1, got {decode.width}")

    beams: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    for _ in range(k):
        rows = np.asarray([prefix + list(ids) for ids, _ in beams], dtype=np.int64)
        queries = [query] * len(beams)
        logits = forward(params, support, rows, queries, mode)
        ranked = []
        for (ids, acc), row_logits in zip(beams, logits):
            logp = _masked_logprobs(params, row_logits[-1], ids, decode.no_repeat)
            for tok in np.flatnonzero(np.isfinite(logp)):
                ranked.append((-(acc + float(logp[tok])), ids + (int(tok),)))
        ranked.sort(key=lambda item: (item[0], item[1]))
        beams = [(ids, -neg) for neg, ids in ranked[: decode.width]]
    best_ids, best_score = beams[0]
    return ICDSequence(icds=best_ids, score=best_score)


def truncate_sequence(seq: ICDSequence, k: int) -> ICDSequence:
    """First k demonstrations, order kept.  The stale score is carried over;
    this helper exists for ablations, not for shot-by-shot evaluation."""
    if not 0 <= k <= len(seq.icds):
        raise ValueError(f"cannot truncate a {len(seq.icds)}-ICD sequence to {k}")
    return ICDSequence(icds=seq.icds[:k], score=seq.score)


def null_query(feature_dim: int, with_txt: bool = True) -> QuerySample:
    """The all-zero query used for query-free (golden) extraction."""
    zeros = np.zeros(feature_dim)
    return make_example(-1, zeros, zeros if with_txt else None, (0,), -1)


def golden_extract(
    params: ModelParams,
    support: SupportFeatures,
    k: int,
    method: GoldenMethod = GoldenMethod.NULL_QUERY,
    anchors: Sequence[QuerySample] | None = None,
    decode: DecodeConfig = DecodeConfig(),
    mode: str | None = None,
) -> ICDSequence:
    """A single query-independent sequence distilled from the model.

    NULL_QUERY decodes once with zero feature vectors.  MODE_OVER_ANCHORS
    decodes per anchor and returns the most frequent id tuple (ties ->
    lexicographically smallest), scored by the best model score that
    produced it.
    """
    if method is GoldenMethod.NULL_QUERY:
        return generate(params, support, null_query(params.feature_dim), k, decode, mode)
    if anchors is None or len(anchors) == 0:
        raise ValueError("mode_over_anchors needs a non-empty anchor list")
    seqs = [generate(params, support, a, k, decode, mode) for a in anchors]
    counts = Counter(s.icds for s in seqs)
    top = max(counts.values())
    winner = min(ids for ids, c in counts.items() if c == top)
    best_score = max(s.score for s in seqs if s.icds == winner)
    return ICDSequence(icds=winner, score=best_score)


# ---------------------------------------------------------------------------
# generation file


def write_generation(
    rows: Sequence[tuple[int, int, ICDSequence]], path, meta=None
) -> None:
    """Rows are (query_id, shots, sequence)."""
    header: dict = {
        "format": GENERATION_FORMAT,
        "version": FORMAT_VERSION,
        "count": len(rows),
    }
    if meta:
        header.update(meta)
    lines = [canonical_json(header)]
    for query_id, shots, seq in rows:
        lines.append(
            canonical_json(
                {
                    "query_id": int(query_id),
                    "shots": int(shots),
                    "icds": list(seq.icds),
                    "log_score": float(seq.score),
                }
            )
        )
    _write_lines(path, lines)


def read_generation(path) -> tuple[list[tuple[int, int, ICDSequence]], dict]:
    header, rows = _read_header(path, GENERATION_FORMAT)
    out = []
    for lineno, obj in rows:
        missing = {"query_id", "shots", "icds", "log_score"} - set(obj)
        if missing:
            raise SchemaError(f"{path}: line {lineno}: missing field(s) {sorted(missing)}")
        out.append(
            (
                int(obj["query_id"]),
                int(obj["shots"]),
                ICDSequence(
                    icds=tuple(int(i) for i in obj["icds"]), score=float(obj["log_score"])
                ),
            )
        )
    if header.get("count") != len(out):
        raise SchemaError(f"{path}: header count {header.get('count')} != {len(out)} rows")
    return out, header
