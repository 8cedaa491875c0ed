"""Building the training corpus: anchors, sub-supports, and beam search.

Each anchor (a held-out query) gets a small candidate pool drawn from the
supporting set, and a beam search over ordered, repeat-free sequences keeps
the b best under the chosen scorer.  Anchor order never matters: every
anchor's randomness is seeded by (run seed, anchor id), so a thread pool
and a plain loop write identical files.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from typing import Sequence

import numpy as np

from .baselines import cosine
from .errors import CapabilityError, ConfigError
from .records import (
    ConstructionConfig,
    ConstructionRecord,
    Example,
    ICDSequence,
    QuerySample,
    make_example,
)
from .scoring import ScorerKind, score_key
from .world import SynthWorld


class SubSupportStrategy(Enum):
    RANDOM = "random"
    SIM_IMAGE = "sim_image"
    SIM_TEXT = "sim_text"


def split_anchor_set(
    d_r: Sequence[Example], n: int, seed
) -> tuple[list[QuerySample], list[Example]]:
    """Split a pool into n anchors and the complementary supporting set.

    Both halves are re-indexed with consecutive ids from zero; supporting-set
    ids double as model vocabulary tokens.  The split is a uniform seeded
    sample, and the two halves partition the pool.
    """
    if not 1 <= n < len(d_r):
        raise ConfigError(f"anchor count {n} must lie in [1, {len(d_r) - 1}]")
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(len(d_r), size=n, replace=False).tolist())
    anchors, support = [], []
    for i, ex in enumerate(d_r):
        bucket = anchors if i in chosen else support
        bucket.append(
            make_example(len(bucket), ex.img_feat, ex.txt_feat, ex.label, ex.task)
        )
    return anchors, support


def sample_sub_support(
    anchor: QuerySample,
    d_s: Sequence[Example],
    strategy: SubSupportStrategy,
    m: int,
    seed,
) -> list[Example]:
    """Pick the anchor's m-example candidate pool from the supporting set.

    Random draws uniformly without replacement.  The similarity strategies
    keep the top m by cosine (ties -> lowest id), most similar first.
    """
    if not 1 <= m <= len(d_s):
        raise ConfigError(f"sub-support size {m} must lie in [1, {len(d_s)}]")
    if strategy is SubSupportStrategy.RANDOM:
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(d_s), size=m, replace=False)
        return [d_s[int(i)] for i in idx]
    if strategy is SubSupportStrategy.SIM_IMAGE:
        sims = [(cosine(anchor.img_feat, ex.img_feat), ex) for ex in d_s]
    else:
        if anchor.txt_feat is None:
            raise CapabilityError(f"anchor {anchor.id} has no txt_feat for sim_text")
        for ex in d_s:
            if ex.txt_feat is None:
                raise CapabilityError(f"example {ex.id} has no txt_feat for sim_text")
        sims = [(cosine(anchor.txt_feat, ex.txt_feat), ex) for ex in d_s]
    sims.sort(key=lambda pair: (-pair[0], pair[1].id))
    return [ex for _, ex in sims[:m]]


def beam_build(
    world: SynthWorld,
    anchor: QuerySample,
    sub_support: Sequence[Example],
    k: int,
    b: int,
    kind: ScorerKind = ScorerKind.CONFIDENCE,
) -> ConstructionRecord:
    """Beam-search the best ordered, repeat-free length-k sequences.

    Every partial sequence is re-scored from scratch on extension (new
    demonstrations append at the end).  The beam keeps the b best by score,
    breaking ties toward the lexicographically smallest id tuple, so width
    one reproduces the greedy chain exactly.  If fewer than b ordered
    sequences exist, all of them are returned.
    """
    if k < 1:
        raise ConfigError(f"sequence length k must be >= 1, got {k}")
    if b < 1:
        raise ConfigError(f"beam width b must be >= 1, got {b}")
    if k > len(sub_support):
        raise ConfigError(f"k={k} exceeds the {len(sub_support)}-example sub-support")
    by_id = {ex.id: ex for ex in sub_support}
    if len(by_id) != len(sub_support):
        raise ConfigError("sub-support contains duplicate ids")

    # Each beam entry: (ids tuple, ordering key of the scored sequence).
    beams: list[tuple[tuple[int, ...], tuple[float, ...]]] = [((), ())]
    for _ in range(k):
        ranked = []
        for ids, _key in beams:
            used = set(ids)
            for cand_id in by_id:
                if cand_id in used:
                    continue
                ext = ids + (cand_id,)
                key = score_key(world, [by_id[i] for i in ext], anchor, kind)
                ranked.append((tuple(-v for v in key), ext, key))
        ranked.sort(key=lambda item: (item[0], item[1]))
        beams = [(ext, key) for _neg, ext, key in ranked[:b]]

    sequences = tuple(ICDSequence(icds=ids, score=key[0]) for ids, key in beams)
    return ConstructionRecord(anchor_id=anchor.id, sequences=sequences)


def build_dataset(
    world: SynthWorld,
    anchors: Sequence[QuerySample],
    d_s: Sequence[Example],
    config: ConstructionConfig,
    threads: int = 1,
) -> list[ConstructionRecord]:
    """Construct one record per anchor, in anchor-id order.

    Per-anchor sub-support sampling is seeded by (config seed, anchor id),
    which makes the output independent of scheduling and thread count.
    """
    strategy = SubSupportStrategy(config.strategy)
    kind = ScorerKind(config.scorer)

    def one(anchor: QuerySample) -> ConstructionRecord:
        pool = sample_sub_support(anchor, d_s, strategy, config.m, [config.seed, anchor.id])
        return beam_build(world, anchor, pool, config.k, config.b, kind)

    if threads <= 1:
        records = [one(a) for a in anchors]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool_:
            records = list(pool_.map(one, anchors))
    return sorted(records, key=lambda r: r.anchor_id)
