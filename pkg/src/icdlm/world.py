"""Synthetic task-mixture worlds and the closed-form oracle predictor.

A world holds T tasks, each with C class prototypes in R^F.  Examples are
prototypes plus isotropic Gaussian noise.  The oracle is a Bayesian
classifier over the task mixture: demonstrations move its posterior over
tasks, and later demonstrations count more when the recency factor gamma
is below one.  Everything is computed in double precision, posterior math
in the log domain.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import ConfigError, ParseError, SchemaError
from .records import (
    FORMAT_VERSION,
    WORLD_FORMAT,
    Example,
    WorldConfig,
    _read_doc,
    _write_doc,
    make_example,
    world_digest_of,
)


@dataclass(frozen=True, eq=False)
class SynthWorld:
    """Frozen world tensors plus the parameters that generated them."""

    t: int
    c: int
    f: int
    sigma: float
    gamma: float
    seed: int
    mu: np.ndarray  # (T, C, F) class prototypes
    label_emb: np.ndarray  # (C, F) text-side class embeddings

    @property
    def config(self) -> WorldConfig:
        return WorldConfig(
            t=self.t, c=self.c, f=self.f, sigma=self.sigma, gamma=self.gamma, seed=self.seed
        )

    @property
    def digest(self) -> str:
        return world_digest_of(self.config)


def world_generate(
    t: int = 8,
    c: int = 4,
    f: int = 16,
    sigma: float = 0.9,
    gamma: float = 0.85,
    seed: int = 0,
) -> SynthWorld:
    """Draw a world's prototypes and label embeddings from a seeded RNG.

    ``sigma`` may be zero (the noiseless limit used by a few sanity checks);
    end-to-end run configs demand a strictly positive value.  ``gamma``
    outside (0, 1] is rejected: 1 means order-free evidence, smaller values
    weight recent demonstrations more.
    """
    if t < 1 or c < 1 or f < 1:
        raise ConfigError(f"world dims must be >= 1, got t={t} c={c} f={f}")
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    if not 0 < gamma <= 1:
        raise ConfigError(f"gamma must lie in (0, 1], got {gamma}")
    rng = np.random.default_rng(seed)
    mu = rng.standard_normal((t, c, f))
    label_emb = rng.standard_normal((c, f))
    mu.setflags(write=False)
    label_emb.setflags(write=False)
    return SynthWorld(
        t=int(t), c=int(c), f=int(f), sigma=float(sigma), gamma=float(gamma), seed=int(seed),
        mu=mu, label_emb=label_emb,
    )


def world_from_config(cfg: WorldConfig) -> SynthWorld:
    return world_generate(cfg.t, cfg.c, cfg.f, cfg.sigma, cfg.gamma, cfg.seed)


def sample_examples(world: SynthWorld, count: int, seed) -> list[Example]:
    """Sample ``count`` examples: uniform task, uniform class, Gaussian noise.

    Ids are consecutive from zero.  txt_feat is the class's label embedding,
    so text similarity identifies class but not task.
    """
    if count < 0:
        raise ConfigError(f"count must be >= 0, got {count}")
    rng = np.random.default_rng(seed)
    tasks = rng.integers(0, world.t, size=count)
    classes = rng.integers(0, world.c, size=count)
    noise = rng.standard_normal((count, world.f))
    out = []
    for i in range(count):
        t, c = int(tasks[i]), int(classes[i])
        img = world.mu[t, c] + world.sigma * noise[i]
        out.append(make_example(i, img, world.label_emb[c], (c,), t))
    return out


def _class_of(label) -> int:
    """The class index an ICD's evidence is keyed on (labels lead with it)."""
    if isinstance(label, (int, np.integer)):
        return int(label)
    return int(label[0])


def _icd_pairs(icds) -> list[tuple[np.ndarray, int]]:
    pairs = []
    for icd in icds:
        if isinstance(icd, Example):
            pairs.append((icd.img_feat, _class_of(icd.label)))
        else:
            x, y = icd
            pairs.append((np.asarray(x, dtype=np.float64), _class_of(y)))
    return pairs


def oracle_log_evidence(world: SynthWorld, icds) -> np.ndarray:
    """Recency-weighted log evidence per task, before normalization.

    For demonstration k of K (1-based), evidence is the Gaussian
    log-likelihood of its features under each task's prototype for its
    label, weighted by gamma^(K-k) so the final demonstration carries
    weight one.
    """
    pairs = _icd_pairs(icds)
    k_total = len(pairs)
    log_ev = np.zeros(world.t, dtype=np.float64)
    denom = 2.0 * world.sigma**2
    for k, (x, y) in enumerate(pairs):
        if not 0 <= y < world.c:
            raise ConfigError(f"ICD label {y} outside [0, {world.c})")
        d2 = ((world.mu[:, y, :] - x[None, :]) ** 2).sum(axis=1)
        log_ev += world.gamma ** (k_total - 1 - k) * (-d2 / denom)
    return log_ev


def oracle_posterior(world: SynthWorld, icds) -> np.ndarray:
    """Posterior over tasks given a demonstration sequence (uniform prior).

    ``icds`` is a sequence of Examples or (img_feat, label) pairs.  Empty
    input returns the uniform prior.  The result sums to one within 1e-12.
    """
    log_ev = oracle_log_evidence(world, icds)
    return np.exp(log_ev - logsumexp(log_ev))


def oracle_predict(world: SynthWorld, icds, query_img_feat) -> np.ndarray:
    """Predictive class distribution for a query under the task posterior.

    Mixes, over tasks, the softmax of (negative scaled squared distance)
    between the query and each class prototype.
    """
    x = np.asarray(query_img_feat, dtype=np.float64)
    if x.shape != (world.f,):
        raise ConfigError(f"query feature shape {x.shape} != ({world.f},)")
    q = oracle_posterior(world, icds)
    d2 = ((world.mu - x[None, None, :]) ** 2).sum(axis=2)  # (T, C)
    per_task = softmax(-d2 / (2.0 * world.sigma**2), axis=1)
    return q @ per_task


def oracle_accuracy(world: SynthWorld, icds, query: Example) -> int:
    """1 if the oracle's argmax class matches the query label, else 0.

    Ties resolve to the lowest class index (argmax convention).
    """
    p = oracle_predict(world, icds, query.img_feat)
    return int(int(np.argmax(p)) == _class_of(query.label))


# ---------------------------------------------------------------------------
# world file


def world_save(world: SynthWorld, path) -> None:
    doc = {
        "format": WORLD_FORMAT,
        "version": FORMAT_VERSION,
        "t": world.t,
        "c": world.c,
        "f": world.f,
        "sigma": world.sigma,
        "gamma": world.gamma,
        "seed": world.seed,
        "digest": world.digest,
        "mu": [float(v) for v in world.mu.ravel()],
        "label_emb": [float(v) for v in world.label_emb.ravel()],
    }
    _write_doc(path, doc)


def world_load(path) -> SynthWorld:
    doc = _read_doc(path, WORLD_FORMAT)
    t, c, f = int(doc["t"]), int(doc["c"]), int(doc["f"])
    mu = np.asarray(doc["mu"], dtype=np.float64)
    emb = np.asarray(doc["label_emb"], dtype=np.float64)
    if mu.size != t * c * f:
        raise SchemaError(f"{path}: mu has {mu.size} values, wants {t * c * f}")
    if emb.size != c * f:
        raise SchemaError(f"{path}: label_emb has {emb.size} values, wants {c * f}")
    mu = mu.reshape(t, c, f)
    emb = emb.reshape(c, f)
    mu.setflags(write=False)
    emb.setflags(write=False)
    return SynthWorld(
        t=t, c=c, f=f, sigma=float(doc["sigma"]), gamma=float(doc["gamma"]),
        seed=int(doc["seed"]), mu=mu, label_emb=emb,
    )
