"""Training-free retrieval baselines over the supporting set.

RS samples uniformly without replacement.  The similarity family ranks by
cosine between a query-side and a demonstration-side feature vector (image
to image, image to text, text to text), keeps the top k, and lays them out
in ascending similarity so the most similar demonstration sits last, i.e.
closest to the query in the prompt.
"""

from __future__ import annotations

from enum import Enum
from typing import Sequence

import numpy as np

from .errors import CapabilityError, ConfigError
from .records import Example, ICDSequence, QuerySample


class BaselineKind(Enum):
    RS = "rs"
    SIIR = "siir"
    SITR = "sitr"
    STTR = "sttr"


def cosine(u, v) -> float:
    """Cosine similarity in [-1, 1]; zero-norm inputs are undefined."""
    a = np.asarray(u, dtype=np.float64)
    b = np.asarray(v, dtype=np.float64)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(float(a @ b) / (na * nb), -1.0, 1.0))


def _feature_pair(kind: BaselineKind, query: QuerySample, ex: Example):
    if kind is BaselineKind.SIIR:
        return query.img_feat, ex.img_feat
    if kind is BaselineKind.SITR:
        if ex.txt_feat is None:
            raise CapabilityError(f"example {ex.id} has no txt_feat for {kind.value}")
        return query.img_feat, ex.txt_feat
    if kind is BaselineKind.STTR:
        if query.txt_feat is None:
            raise CapabilityError(f"query {query.id} has no txt_feat for {kind.value}")
        if ex.txt_feat is None:
            raise CapabilityError(f"example {ex.id} has no txt_feat for {kind.value}")
        return query.txt_feat, ex.txt_feat
    raise ConfigError(f"{kind} is not a similarity baseline")


def retrieve(
    kind: BaselineKind,
    query: QuerySample,
    d_s: Sequence[Example],
    k: int,
    seed=0,
) -> ICDSequence:
    """Pick k demonstrations for a query under the given baseline.

    RS returns its sampled order.  Similarity baselines return ascending
    similarity (most similar rightmost); ties prefer the lowest id, both
    for inclusion and for earlier placement.  Retrieved sequences carry a
    score of 0.0: no scorer has looked at them.
    """
    if not 1 <= k <= len(d_s):
        raise ConfigError(f"k={k} must lie in [1, {len(d_s)}]")
    if kind is BaselineKind.RS:
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(d_s), size=k, replace=False)
        ids = tuple(d_s[int(i)].id for i in idx)
        return ICDSequence(icds=ids, score=0.0)
    scored = [(cosine(*_feature_pair(kind, query, ex)), ex.id) for ex in d_s]
    top = sorted(scored, key=lambda p: (-p[0], p[1]))[:k]
    ordered = sorted(top, key=lambda p: (p[0], p[1]))
    return ICDSequence(icds=tuple(i for _, i in ordered), score=0.0)
