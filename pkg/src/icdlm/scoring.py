"""Sequence quality under the oracle: confidence, accuracy, and greedy gain.

Confidence is the sum of log-probabilities the oracle assigns to the
query's label tokens given the demonstration sequence; its exponential is
the product form of the same quantity.  The accuracy scorer is 0/1 and
breaks its ties by confidence.  Both ship through one ordering key so the
greedy chain and the beam builder agree on every comparison.
"""

from __future__ import annotations

from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError
from .records import Example, QuerySample
from .world import SynthWorld, _class_of, oracle_accuracy, oracle_predict


class ScorerKind(Enum):
    CONFIDENCE = "confidence"
    ACCURACY = "accuracy"


def confidence(world: SynthWorld, icds: Sequence[Example], anchor: QuerySample) -> float:
    """Log-domain confidence: sum over label tokens of log P(token | S, x').

    Label tokens are conditionally independent given the mixture, so every
    factor reads the same predictive vector.  An empty label sums to 0.0.
    """
    if not anchor.label:
        return 0.0
    p = oracle_predict(world, icds, anchor.img_feat)
    with np.errstate(divide="ignore"):
        logs = np.log(p)
    return float(sum(logs[t] for t in anchor.label))


def sequence_score(
    world: SynthWorld, icds: Sequence[Example], anchor: QuerySample, kind: ScorerKind
) -> float:
    """The scalar stored on a scored sequence: confidence, or 0/1 accuracy."""
    if kind is ScorerKind.CONFIDENCE:
        return confidence(world, icds, anchor)
    return float(oracle_accuracy(world, icds, anchor))


def score_key(
    world: SynthWorld, icds: Sequence[Example], anchor: QuerySample, kind: ScorerKind
) -> tuple[float, ...]:
    """Ordering key, larger is better.  Accuracy ties break by confidence."""
    if kind is ScorerKind.CONFIDENCE:
        return (confidence(world, icds, anchor),)
    return (float(oracle_accuracy(world, icds, anchor)), confidence(world, icds, anchor))


ScoreFn = Callable[[Sequence[Example], QuerySample], float]


def gain(
    world: SynthWorld,
    partial: Sequence[Example],
    candidate: Example,
    anchor: QuerySample,
    kind: ScorerKind = ScorerKind.CONFIDENCE,
    score_fn: ScoreFn | None = None,
) -> float:
    """Score of the sequence extended at the end minus the score unextended.

    ``score_fn`` swaps in a custom scorer (tests use a constant stub); the
    default is the kind's sequence score.
    """
    if any(icd.id == candidate.id for icd in partial):
        raise ValueError(f"candidate {candidate.id} already appears in the sequence")
    if score_fn is None:
        score_fn = lambda icds, a: sequence_score(world, icds, a, kind)
    extended = list(partial) + [candidate]
    return score_fn(extended, anchor) - score_fn(partial, anchor)


def select_best(
    world: SynthWorld,
    partial: Sequence[Example],
    candidates: Sequence[Example],
    anchor: QuerySample,
    kind: ScorerKind = ScorerKind.CONFIDENCE,
) -> Example:
    """The candidate whose extension scores highest.

    Equivalent to maximizing gain (the unextended score is a shared
    constant).  Ties fall to the lowest candidate id; the accuracy kind
    first tries to break them by confidence.
    """
    if not candidates:
        raise ValueError("select_best needs a non-empty candidate list")
    used = {icd.id for icd in partial}
    best = None
    best_rank = None
    for cand in candidates:
        if cand.id in used:
            raise ValueError(f"candidate {cand.id} already appears in the sequence")
        key = score_key(world, list(partial) + [cand], anchor, kind)
        rank = (tuple(-v for v in key), cand.id)
        if best_rank is None or rank < best_rank:
            best, best_rank = cand, rank
    return best
