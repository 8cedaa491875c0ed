"""Training loop, AdamW, warmup-plus-cosine schedule, and gradient checks.

The optimizer is decoupled AdamW: weight decay multiplies parameters by
(1 - lr * wd) before the moment update, and frozen tensors are never
touched.  Shuffling is the only randomness and comes from one seeded
generator, so a seed pins the final checkpoint bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericError, SchemaError
from .model import (
    ModelParams,
    SupportFeatures,
    Vocabulary,
    batch_loss,
    batch_loss_and_grads,
    init_params,
)
from .records import (
    ConstructionRecord,
    Example,
    LOSS_HISTORY_FORMAT,
    FORMAT_VERSION,
    ModelConfig,
    TrainingConfig,
    _read_header,
    _write_lines,
    canonical_json,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainState:
    """Optimizer moments plus bookkeeping carried across steps."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    best_loss: float = math.inf


def lr_at(step: int, total_steps: int, base_lr: float, warmup_fraction: float) -> float:
    """Linear warmup from 0 to base_lr, then cosine decay to 0.

    Warmup spans ceil(warmup_fraction * total_steps) steps; the schedule
    value at the warmup boundary is exactly base_lr, at ``total_steps``
    exactly 0, and halfway through the decay exactly base_lr / 2.
    """
    if total_steps < 1:
        raise ConfigError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    warmup = math.ceil(warmup_fraction * total_steps)
    if step < warmup:
        return base_lr * step / warmup
    if total_steps == warmup:
        return base_lr if step < total_steps else 0.0
    progress = (step - warmup) / (total_steps - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def optimizer_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: TrainState,
    lr: float,
    weight_decay: float,
) -> None:
    """One AdamW update in place; frozen tensors are left untouched.

    Decay is decoupled and scaled by the current lr.  With zero gradients
    and zero decay the parameters come back unchanged (the step counter
    still advances).
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    frozen = params.frozen_names()
    for name in sorted(params.tensors):
        if name in frozen:
            continue
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p = params.tensors[name]
        if weight_decay != 0.0:
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


@dataclass(eq=False)
class TrainBatchData:
    """Flattened training rows: one row per kept sequence of every record."""

    tokens: np.ndarray  # (S, K+3)
    q_img: np.ndarray  # (S, F)
    q_txt: np.ndarray | None  # (S, F)


def build_training_rows(
    records: Sequence[ConstructionRecord],
    anchors_by_id: dict[int, Example],
    vocab: Vocabulary,
    mode: str,
) -> TrainBatchData:
    """Turn construction records into [BOS, QUERY, d_1..d_K, EOS] rows.

    All sequences must share one K; rows are ordered by (anchor id,
    sequence rank) so the layout is reproducible.
    """
    rows = []
    imgs = []
    txts: list[np.ndarray] | None = [] if mode == "vqa" else None
    k_seen: int | None = None
    for rec in sorted(records, key=lambda r: r.anchor_id):
        if rec.anchor_id not in anchors_by_id:
            raise SchemaError(f"record anchor {rec.anchor_id} missing from the anchor set")
        anchor = anchors_by_id[rec.anchor_id]
        for seq in rec.sequences:
            k = len(seq.icds)
            if k_seen is None:
                k_seen = k
            elif k != k_seen:
                raise SchemaError(
                    f"mixed sequence lengths in training data: {k_seen} and {k}"
                )
            rows.append([vocab.bos, vocab.query, *seq.icds, vocab.eos])
            imgs.append(np.asarray(anchor.img_feat, dtype=np.float64))
            if txts is not None:
                if anchor.txt_feat is None:
                    txts = None
                else:
                    txts.append(np.asarray(anchor.txt_feat, dtype=np.float64))
    if not rows:
        raise SchemaError("no training rows: the construction record list is empty")
    return TrainBatchData(
        tokens=np.asarray(rows, dtype=np.int64),
        q_img=np.stack(imgs),
        q_txt=np.stack(txts) if txts else None,
    )


def _check_finite(loss: float, grads: dict[str, np.ndarray], step: int) -> None:
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss at step {step}")
    for name in sorted(grads):
        if not np.all(np.isfinite(grads[name])):
            raise NumericError(f"non-finite gradient in tensor {name!r} at step {step}")


def train(
    model_config: ModelConfig,
    records: Sequence[ConstructionRecord],
    anchors: Sequence[Example],
    support: Sequence[Example] | SupportFeatures,
    train_config: TrainingConfig,
    init_seed: int | None = None,
) -> tuple[ModelParams, list[tuple[int, float, float]], TrainState]:
    """Train a composer on construction records; returns (params, history, state).

    History rows are (step, lr, loss) with the loss measured before the
    update.  The parameter init is seeded separately from the shuffle so
    the two can be varied independently; by default both derive from
    ``train_config.seed``.
    """
    if isinstance(support, SupportFeatures):
        feats = support
    else:
        feats = SupportFeatures.from_examples(support)
    vocab = Vocabulary(feats.n)
    anchors_by_id = {a.id: a for a in anchors}
    data = build_training_rows(records, anchors_by_id, vocab, model_config.task_mode)
    n_rows = data.tokens.shape[0]

    params = init_params(
        model_config,
        vocab,
        feats.feature_dim,
        [train_config.seed, 0] if init_seed is None else init_seed,
    )
    state = TrainState()
    rng = np.random.default_rng([train_config.seed, 1])

    steps_per_epoch = math.ceil(n_rows / train_config.batch_size)
    total_steps = steps_per_epoch * train_config.epochs
    history: list[tuple[int, float, float]] = []
    for _epoch in range(train_config.epochs):
        order = rng.permutation(n_rows)
        for lo in range(0, n_rows, train_config.batch_size):
            idx = order[lo : lo + train_config.batch_size]
            lr = lr_at(state.step, total_steps, train_config.lr, train_config.warmup_fraction)
            loss, grads = batch_loss_and_grads(
                params,
                feats,
                data.tokens[idx],
                data.q_img[idx],
                None if data.q_txt is None else data.q_txt[idx],
                model_config.task_mode,
            )
            _check_finite(loss, grads, state.step)
            optimizer_step(params, grads, state, lr, train_config.weight_decay)
            state.best_loss = min(state.best_loss, loss)
            history.append((state.step, lr, loss))
    return params, history, state


# ---------------------------------------------------------------------------
# loss history file


def write_loss_history(history: Sequence[tuple[int, float, float]], path, meta=None) -> None:
    header: dict = {
        "format": LOSS_HISTORY_FORMAT,
        "version": FORMAT_VERSION,
        "count": len(history),
    }
    if meta:
        header.update(meta)
    lines = [canonical_json(header)]
    for step, lr, loss in history:
        lines.append(canonical_json({"step": int(step), "lr": float(lr), "loss": float(loss)}))
    _write_lines(path, lines)


def read_loss_history(path) -> tuple[list[tuple[int, float, float]], dict]:
    header, rows = _read_header(path, LOSS_HISTORY_FORMAT)
    out = [(int(o["step"]), float(o["lr"]), float(o["loss"])) for _ln, o in rows]
    if header.get("count") != len(out):
        raise SchemaError(f"{path}: header count {header.get('count')} != {len(out)} rows")
    return out, header


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def gradient_check(
    params: ModelParams,
    support: SupportFeatures,
    tokens: np.ndarray,
    q_img: np.ndarray,
    q_txt: np.ndarray | None = None,
    n_coords: int = 200,
    step: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples ``n_coords`` coordinates uniformly across trainable tensors.
    The relative error denominator is floored at 1e-6 so near-zero
    coordinates compare absolutely.
    """
    mode = params.config.task_mode
    _, grads = batch_loss_and_grads(params, support, tokens, q_img, q_txt, mode)
    names = params.trainable_names()
    sizes = np.asarray([params.tensors[n].size for n in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, total, size=n_coords)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for pick in picks:
        ti = int(np.searchsorted(bounds, pick, side="right"))
        flat_idx = int(pick - (bounds[ti - 1] if ti else 0))
        name = names[ti]
        arr = params.tensors[name]
        idx = np.unravel_index(flat_idx, arr.shape)
        orig = arr[idx]
        arr[idx] = orig + step
        up = batch_loss(params, support, tokens, q_img, q_txt, mode)
        arr[idx] = orig - step
        down = batch_loss(params, support, tokens, q_img, q_txt, mode)
        arr[idx] = orig
        numeric = (up - down) / (2.0 * step)
        analytic = grads[name][idx]
        denom = max(abs(numeric), abs(analytic), 1e-6)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst
