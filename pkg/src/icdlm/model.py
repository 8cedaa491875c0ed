"""The composer model: a tiny decoder whose vocabulary is the supporting set.

Token i (i < N) embeds as projected image features plus projected text
features plus a learned row r_i; the three specials BOS, EOS, and QUERY
embed as their learned rows alone, and the query's own features are added
at QUERY positions.  The projection P is bias-free and the optional
feature adapter (a two-layer bias-free GELU MLP) maps zero features to
zero, so those sums hold exactly.

Two interchangeable bodies sit on top of the embeddings: a pre-LN causal
transformer with learned positional rows, and a stacked LSTM (order comes
from the recurrence, so no positional rows).  Everything runs in float64
and the reverse-mode gradients are hand-written and finite-difference
checked; forward passes are deterministic down to the bit.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import erf, expit, logsumexp

from .errors import ConfigError, SchemaError
from .records import (
    Example,
    ModelConfig,
    checkpoint_load,
    checkpoint_save,
)

LN_EPS = 1e-5
INIT_STD = 0.02
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def _softmax_last(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    return z - logsumexp(z, axis=axis, keepdims=True)


@dataclass(frozen=True)
class Vocabulary:
    """Supporting-set ids occupy [0, n); then BOS, EOS, QUERY."""

    n: int

    @property
    def bos(self) -> int:
        return self.n

    @property
    def eos(self) -> int:
        return self.n + 1

    @property
    def query(self) -> int:
        return self.n + 2

    @property
    def size(self) -> int:
        return self.n + 3

    def is_special(self, token: int) -> bool:
        return token >= self.n


@dataclass(eq=False)
class SupportFeatures:
    """Dense feature matrices for the supporting set, id-aligned by row."""

    img: np.ndarray  # (N, F)
    txt: np.ndarray  # (N, F), zero rows where absent
    txt_mask: np.ndarray  # (N,) 1.0 where txt_feat present
    feature_dim: int

    @property
    def n(self) -> int:
        return self.img.shape[0]

    @staticmethod
    def from_examples(examples: Sequence[Example]) -> "SupportFeatures":
        if not examples:
            raise ConfigError("supporting set is empty")
        ids = [ex.id for ex in examples]
        if ids != list(range(len(examples))):
            raise SchemaError(
                "supporting-set ids must be consecutive from 0 (they double as tokens)"
            )
        fdim = len(examples[0].img_feat)
        img = np.zeros((len(examples), fdim))
        txt = np.zeros((len(examples), fdim))
        mask = np.zeros(len(examples))
        for i, ex in enumerate(examples):
            if len(ex.img_feat) != fdim:
                raise SchemaError(f"example {ex.id}: img_feat dim {len(ex.img_feat)} != {fdim}")
            img[i] = ex.img_feat
            if ex.txt_feat is not None:
                if len(ex.txt_feat) != fdim:
                    raise SchemaError(f"example {ex.id}: txt_feat dim {len(ex.txt_feat)} != {fdim}")
                txt[i] = ex.txt_feat
                mask[i] = 1.0
        return SupportFeatures(img=img, txt=txt, txt_mask=mask, feature_dim=fdim)


@dataclass(eq=False)
class ModelParams:
    config: ModelConfig
    vocab: Vocabulary
    feature_dim: int
    tensors: dict[str, np.ndarray]

    def frozen_names(self) -> set[str]:
        if self.config.encoder_trainable:
            return set()
        return {n for n in ("proj", "adapter.w1", "adapter.w2") if n in self.tensors}

    def trainable_names(self) -> list[str]:
        frozen = self.frozen_names()
        return [n for n in sorted(self.tensors) if n not in frozen]

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            vocab=self.vocab,
            feature_dim=self.feature_dim,
            tensors={k: v.copy() for k, v in self.tensors.items()},
        )


def tensor_shapes(config: ModelConfig, vocab: Vocabulary, feature_dim: int) -> dict[str, tuple]:
    d = config.d_model
    shapes: dict[str, tuple] = {
        "tok": (vocab.size, d),
        "proj": (feature_dim, d),
        "head": (d, vocab.size),
    }
    if config.adapter:
        shapes["adapter.w1"] = (feature_dim, feature_dim)
        shapes["adapter.w2"] = (feature_dim, feature_dim)
    if config.arch == "transformer":
        shapes["pos"] = (config.k_max + 3, d)
        ff = config.ffn_mult * d
        for i in range(config.layers):
            p = f"layers.{i}"
            shapes[f"{p}.ln1.g"] = (d,)
            shapes[f"{p}.ln1.b"] = (d,)
            for nm in ("wq", "wk", "wv", "wo"):
                shapes[f"{p}.attn.{nm}"] = (d, d)
            for nm in ("bq", "bk", "bv", "bo"):
                shapes[f"{p}.attn.{nm}"] = (d,)
            shapes[f"{p}.ln2.g"] = (d,)
            shapes[f"{p}.ln2.b"] = (d,)
            shapes[f"{p}.ffn.w1"] = (d, ff)
            shapes[f"{p}.ffn.b1"] = (ff,)
            shapes[f"{p}.ffn.w2"] = (ff, d)
            shapes[f"{p}.ffn.b2"] = (d,)
    elif config.arch == "lstm":
        for i in range(config.layers):
            p = f"layers.{i}"
            shapes[f"{p}.w_ih"] = (d, 4 * d)
            shapes[f"{p}.w_hh"] = (d, 4 * d)
            shapes[f"{p}.b"] = (4 * d,)
    else:
        raise ConfigError(f"unknown arch {config.arch!r}")
    return shapes


def _last_part(name: str) -> str:
    return name.rsplit(".", 1)[-1]


def init_params(
    config: ModelConfig, vocab: Vocabulary, feature_dim: int, seed
) -> ModelParams:
    """Initialize parameters: std-0.02 normals for embedding-like tensors
    (token rows, positions, the feature projection, the head), fan-in-scaled
    normals for the body weights, ones for LN gains, zeros for biases."""
    if config.d_model % config.heads != 0:
        raise ConfigError(f"d_model {config.d_model} not divisible by heads {config.heads}")
    if config.layers < 1:
        raise ConfigError(f"layers must be >= 1, got {config.layers}")
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in sorted(tensor_shapes(config, vocab, feature_dim).items()):
        last = _last_part(name)
        if last == "g":
            tensors[name] = np.ones(shape)
        elif last.startswith("b"):
            tensors[name] = np.zeros(shape)
        elif name in ("tok", "pos", "proj", "head"):
            tensors[name] = rng.normal(0.0, INIT_STD, size=shape)
        else:
            tensors[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
    return ModelParams(config=config, vocab=vocab, feature_dim=feature_dim, tensors=tensors)


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.tensors.items()}


# ---------------------------------------------------------------------------
# feature encoding (adapter + projection)


def _encode(tensors: Mapping[str, np.ndarray], feats: np.ndarray, adapter: bool):
    """feats (..., F) -> embeddings (..., d) through optional adapter and P."""
    if adapter:
        a1 = feats @ tensors["adapter.w1"]
        ga = gelu(a1)
        out = ga @ tensors["adapter.w2"] @ tensors["proj"]
        cache = (feats, a1, ga)
    else:
        out = feats @ tensors["proj"]
        cache = (feats, None, None)
    return out, cache


def _encode_backward(tensors, grads, cache, d_out, adapter: bool) -> None:
    feats, a1, ga = cache
    flat = lambda a: a.reshape(-1, a.shape[-1])
    if adapter:
        proj_in = ga @ tensors["adapter.w2"]
        grads["proj"] += flat(proj_in).T @ flat(d_out)
        d_proj_in = d_out @ tensors["proj"].T
        grads["adapter.w2"] += flat(ga).T @ flat(d_proj_in)
        d_ga = d_proj_in @ tensors["adapter.w2"].T
        d_a1 = d_ga * gelu_grad(a1)
        grads["adapter.w1"] += flat(feats).T @ flat(d_a1)
    else:
        grads["proj"] += flat(feats).T @ flat(d_out)


def embed_token(
    params: ModelParams, support: SupportFeatures, token_id: int
) -> np.ndarray:
    """Embedding of one vocabulary entry (no positional term).

    Supporting-set tokens are the exact sum of projected image features,
    projected text features (omitted when absent), and the learned row;
    specials are their learned row alone.
    """
    vocab = params.vocab
    if not 0 <= token_id < vocab.size:
        raise IndexError(f"token {token_id} outside vocabulary of size {vocab.size}")
    t = params.tensors
    e = t["tok"][token_id].copy()
    if token_id < vocab.n:
        img_emb, _ = _encode(t, support.img[token_id], params.config.adapter)
        e += img_emb
        if support.txt_mask[token_id]:
            txt_emb, _ = _encode(t, support.txt[token_id], params.config.adapter)
            e += txt_emb
    return e


def embed_query(params: ModelParams, query: Example, mode: str | None = None) -> np.ndarray:
    """QUERY-row embedding plus the query's projected features.

    IC mode embeds the image only; the VQA-analog mode adds the text term
    (omitted if the query has no text features).
    """
    mode = mode or params.config.task_mode
    t = params.tensors
    e = t["tok"][params.vocab.query].copy()
    img_emb, _ = _encode(t, np.asarray(query.img_feat, dtype=np.float64), params.config.adapter)
    e += img_emb
    if mode == "vqa" and query.txt_feat is not None:
        txt_emb, _ = _encode(t, np.asarray(query.txt_feat, dtype=np.float64), params.config.adapter)
        e += txt_emb
    return e


# ---------------------------------------------------------------------------
# transformer body


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def _ln_backward(dy, cache):
    xhat, inv, g = cache
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    lead = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=lead), dy.sum(axis=lead)


def _split_heads(x, heads):
    b, l, d = x.shape
    return x.reshape(b, l, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, l, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * dh)


def _transformer_forward(params: ModelParams, x: np.ndarray):
    cfg = params.config
    t = params.tensors
    b_, l_, d = x.shape
    mask = np.triu(np.full((l_, l_), -np.inf), k=1)
    scale = 1.0 / math.sqrt(d // cfg.heads)
    caches = []
    for i in range(cfg.layers):
        p = f"layers.{i}"
        a, ln1_cache = _ln_forward(x, t[f"{p}.ln1.g"], t[f"{p}.ln1.b"])
        q = a @ t[f"{p}.attn.wq"] + t[f"{p}.attn.bq"]
        k = a @ t[f"{p}.attn.wk"] + t[f"{p}.attn.bk"]
        v = a @ t[f"{p}.attn.wv"] + t[f"{p}.attn.bv"]
        qh, kh, vh = (_split_heads(z, cfg.heads) for z in (q, k, v))
        scores = qh @ kh.swapaxes(-1, -2) * scale + mask
        probs = _softmax_last(scores)
        ctx = _merge_heads(probs @ vh)
        attn_out = ctx @ t[f"{p}.attn.wo"] + t[f"{p}.attn.bo"]
        x1 = x + attn_out
        a2, ln2_cache = _ln_forward(x1, t[f"{p}.ln2.g"], t[f"{p}.ln2.b"])
        f1 = a2 @ t[f"{p}.ffn.w1"] + t[f"{p}.ffn.b1"]
        gf = gelu(f1)
        ffn_out = gf @ t[f"{p}.ffn.w2"] + t[f"{p}.ffn.b2"]
        x2 = x1 + ffn_out
        caches.append((a, ln1_cache, qh, kh, vh, probs, ctx, x1, a2, ln2_cache, f1, gf))
        x = x2
    return x, (caches, scale)


def _transformer_backward(params: ModelParams, fwd_cache, dx, grads):
    cfg = params.config
    t = params.tensors
    caches, scale = fwd_cache
    flat = lambda z: z.reshape(-1, z.shape[-1])
    for i in reversed(range(cfg.layers)):
        p = f"layers.{i}"
        a, ln1_cache, qh, kh, vh, probs, ctx, x1, a2, ln2_cache, f1, gf = caches[i]
        # FFN sublayer: x2 = x1 + ffn(ln2(x1))
        d_ffn = dx
        grads[f"{p}.ffn.b2"] += flat(d_ffn).sum(axis=0)
        grads[f"{p}.ffn.w2"] += flat(gf).T @ flat(d_ffn)
        d_gf = d_ffn @ t[f"{p}.ffn.w2"].T
        d_f1 = d_gf * gelu_grad(f1)
        grads[f"{p}.ffn.b1"] += flat(d_f1).sum(axis=0)
        grads[f"{p}.ffn.w1"] += flat(a2).T @ flat(d_f1)
        d_a2 = d_f1 @ t[f"{p}.ffn.w1"].T
        d_x1_ln, dg2, db2 = _ln_backward(d_a2, ln2_cache)
        grads[f"{p}.ln2.g"] += dg2
        grads[f"{p}.ln2.b"] += db2
        d_x1 = dx + d_x1_ln
        # attention sublayer: x1 = x + attn(ln1(x))
        d_attn_out = d_x1
        grads[f"{p}.attn.bo"] += flat(d_attn_out).sum(axis=0)
        grads[f"{p}.attn.wo"] += flat(ctx).T @ flat(d_attn_out)
        d_ctx = d_attn_out @ t[f"{p}.attn.wo"].T
        d_ctxh = _split_heads(d_ctx, cfg.heads)
        d_probs = d_ctxh @ vh.swapaxes(-1, -2)
        d_vh = probs.swapaxes(-1, -2) @ d_ctxh
        d_scores = probs * (d_probs - (d_probs * probs).sum(axis=-1, keepdims=True))
        d_raw = d_scores * scale
        d_qh = d_raw @ kh
        d_kh = d_raw.swapaxes(-1, -2) @ qh
        d_q, d_k, d_v = (_merge_heads(z) for z in (d_qh, d_kh, d_vh))
        for nm, dz in (("q", d_q), ("k", d_k), ("v", d_v)):
            grads[f"{p}.attn.b{nm}"] += flat(dz).sum(axis=0)
            grads[f"{p}.attn.w{nm}"] += flat(a).T @ flat(dz)
        d_a = (
            d_q @ t[f"{p}.attn.wq"].T
            + d_k @ t[f"{p}.attn.wk"].T
            + d_v @ t[f"{p}.attn.wv"].T
        )
        d_x_ln, dg1, db1 = _ln_backward(d_a, ln1_cache)
        grads[f"{p}.ln1.g"] += dg1
        grads[f"{p}.ln1.b"] += db1
        dx = d_x1 + d_x_ln
    return dx


# ---------------------------------------------------------------------------
# LSTM body


def _lstm_forward(params: ModelParams, x: np.ndarray):
    cfg = params.config
    t = params.tensors
    b_, l_, d = x.shape
    all_caches = []
    for i in range(cfg.layers):
        p = f"layers.{i}"
        w_ih, w_hh, bias = t[f"{p}.w_ih"], t[f"{p}.w_hh"], t[f"{p}.b"]
        h = np.zeros((b_, d))
        c = np.zeros((b_, d))
        hs = np.empty((b_, l_, d))
        steps = []
        for s in range(l_):
            z = x[:, s] @ w_ih + h @ w_hh + bias
            gi = expit(z[:, :d])
            gf = expit(z[:, d : 2 * d])
            gg = np.tanh(z[:, 2 * d : 3 * d])
            go = expit(z[:, 3 * d :])
            c_new = gf * c + gi * gg
            tc = np.tanh(c_new)
            steps.append((x[:, s], h, c, gi, gf, gg, go, tc))
            h = go * tc
            c = c_new
            hs[:, s] = h
        all_caches.append(steps)
        x = hs
    return x, all_caches


def _lstm_backward(params: ModelParams, all_caches, dx, grads):
    cfg = params.config
    t = params.tensors
    b_, l_, d = dx.shape
    for i in reversed(range(cfg.layers)):
        p = f"layers.{i}"
        w_ih, w_hh = t[f"{p}.w_ih"], t[f"{p}.w_hh"]
        steps = all_caches[i]
        d_in = np.zeros((b_, l_, d))
        dh_next = np.zeros((b_, d))
        dc_next = np.zeros((b_, d))
        for s in reversed(range(l_)):
            x_s, h_prev, c_prev, gi, gf, gg, go, tc = steps[s]
            dh = dx[:, s] + dh_next
            d_go = dh * tc
            dc = dc_next + dh * go * (1.0 - tc * tc)
            d_gi = dc * gg
            d_gf = dc * c_prev
            d_gg = dc * gi
            dz = np.concatenate(
                [
                    d_gi * gi * (1.0 - gi),
                    d_gf * gf * (1.0 - gf),
                    d_gg * (1.0 - gg * gg),
                    d_go * go * (1.0 - go),
                ],
                axis=1,
            )
            grads[f"{p}.w_ih"] += x_s.T @ dz
            grads[f"{p}.w_hh"] += h_prev.T @ dz
            grads[f"{p}.b"] += dz.sum(axis=0)
            d_in[:, s] = dz @ w_ih.T
            dh_next = dz @ w_hh.T
            dc_next = dc * gf
        dx = d_in
    return dx


# ---------------------------------------------------------------------------
# full forward / loss / backward


def _embed_forward(params, support, tokens, q_img, q_txt, mode):
    cfg = params.config
    t = params.tensors
    vocab = params.vocab
    b_, l_ = tokens.shape

    img_emb, img_cache = _encode(t, support.img, cfg.adapter)
    txt_emb, txt_cache = _encode(t, support.txt, cfg.adapter)
    table = t["tok"].copy()
    table[: vocab.n] += img_emb + support.txt_mask[:, None] * txt_emb

    qmask = tokens == vocab.query
    q_caches = None
    q_emb = None
    if qmask.any():
        if q_img is None:
            raise ConfigError("input contains QUERY tokens but no query features were given")
        qi_emb, qi_cache = _encode(t, q_img, cfg.adapter)
        q_emb = qi_emb
        qt_cache = None
        if mode == "vqa" and q_txt is not None:
            qt_emb, qt_cache = _encode(t, q_txt, cfg.adapter)
            q_emb = q_emb + qt_emb
        q_caches = (qi_cache, qt_cache)

    x = table[tokens]
    if q_emb is not None:
        x = x + qmask[..., None] * q_emb[:, None, :]
    if cfg.arch == "transformer":
        x = x + t["pos"][:l_][None, :, :]
    cache = (tokens, qmask, img_cache, txt_cache, q_caches, support)
    return x, cache


def _embed_backward(params, cache, dx, grads):
    cfg = params.config
    vocab = params.vocab
    tokens, qmask, img_cache, txt_cache, q_caches, support = cache
    b_, l_, d = dx.shape
    if cfg.arch == "transformer":
        grads["pos"][:l_] += dx.sum(axis=0)
    if q_caches is not None:
        d_q_emb = (qmask[..., None] * dx).sum(axis=1)
        qi_cache, qt_cache = q_caches
        _encode_backward(params.tensors, grads, qi_cache, d_q_emb, cfg.adapter)
        if qt_cache is not None:
            _encode_backward(params.tensors, grads, qt_cache, d_q_emb, cfg.adapter)
    d_table = np.zeros((vocab.size, d))
    np.add.at(d_table, tokens.reshape(-1), dx.reshape(-1, d))
    grads["tok"] += d_table
    d_img = d_table[: vocab.n]
    d_txt = d_table[: vocab.n] * support.txt_mask[:, None]
    _encode_backward(params.tensors, grads, img_cache, d_img, cfg.adapter)
    _encode_backward(params.tensors, grads, txt_cache, d_txt, cfg.adapter)


def _validate_tokens(params: ModelParams, tokens: np.ndarray) -> None:
    cfg = params.config
    if tokens.ndim != 2:
        raise ConfigError(f"tokens must be a (batch, length) array, got ndim {tokens.ndim}")
    if tokens.shape[1] < 1:
        raise ConfigError("token rows must hold at least one position")
    if tokens.shape[1] > cfg.k_max + 3:
        raise ConfigError(
            f"sequence length {tokens.shape[1]} exceeds k_max + 3 = {cfg.k_max + 3}"
        )
    if tokens.size and (tokens.min() < 0 or tokens.max() >= params.vocab.size):
        bad = int(tokens.min()) if tokens.min() < 0 else int(tokens.max())
        raise IndexError(f"token id {bad} outside vocabulary of size {params.vocab.size}")


def _forward_internal(params, support, tokens, q_img, q_txt, mode):
    x, emb_cache = _embed_forward(params, support, tokens, q_img, q_txt, mode)
    if params.config.arch == "transformer":
        h, body_cache = _transformer_forward(params, x)
    else:
        h, body_cache = _lstm_forward(params, x)
    logits = h @ params.tensors["head"]
    return logits, (emb_cache, body_cache, h)


def forward(
    params: ModelParams,
    support: SupportFeatures,
    tokens,
    query: Example | Sequence[Example] | None = None,
    mode: str | None = None,
) -> np.ndarray:
    """Logits for a token row (L,) -> (L, V) or a batch (B, L) -> (B, L, V).

    ``query`` supplies the features added at QUERY positions: one Example
    for a single row, a sequence of Examples for a batch.
    """
    mode = mode or params.config.task_mode
    arr = np.asarray(tokens, dtype=np.int64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    _validate_tokens(params, arr)
    q_img = q_txt = None
    if query is not None:
        qs = [query] if isinstance(query, Example) else list(query)
        if len(qs) != arr.shape[0]:
            raise ConfigError(f"{len(qs)} queries for a batch of {arr.shape[0]} rows")
        q_img = np.stack([np.asarray(q.img_feat, dtype=np.float64) for q in qs])
        if mode == "vqa" and all(q.txt_feat is not None for q in qs):
            q_txt = np.stack([np.asarray(q.txt_feat, dtype=np.float64) for q in qs])
    logits, _ = _forward_internal(params, support, arr, q_img, q_txt, mode)
    return logits[0] if single else logits


def _loss_from_logits(logits: np.ndarray, tokens: np.ndarray):
    b_, l_, v = logits.shape
    if l_ < 3:
        raise ConfigError("loss needs rows of at least 3 positions (BOS, QUERY, target)")
    pred = logits[:, 1 : l_ - 1, :]
    targets = tokens[:, 2:]
    logp = log_softmax(pred, axis=-1)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    return float(-picked.mean()), pred, targets


def batch_loss(params, support, tokens, q_img, q_txt=None, mode: str | None = None) -> float:
    """Mean next-token cross-entropy over the K+1 targets of each row.

    Rows look like [BOS, QUERY, d_1 .. d_K, EOS]; targets start at d_1
    (predicted from the QUERY position) and end at EOS.  Nothing is
    predicted from BOS.
    """
    mode = mode or params.config.task_mode
    arr = np.asarray(tokens, dtype=np.int64)
    _validate_tokens(params, arr)
    if arr.shape[0] == 0:
        return 0.0
    logits, _ = _forward_internal(params, support, arr, q_img, q_txt, mode)
    loss, _, _ = _loss_from_logits(logits, arr)
    return loss


def batch_loss_and_grads(
    params, support, tokens, q_img, q_txt=None, mode: str | None = None
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss plus exact reverse-mode gradients for every tensor.

    Tensors frozen by ``encoder_trainable=False`` (the projection and the
    adapter) come back as zero arrays.
    """
    mode = mode or params.config.task_mode
    arr = np.asarray(tokens, dtype=np.int64)
    _validate_tokens(params, arr)
    grads = zero_grads(params)
    if arr.shape[0] == 0:
        return 0.0, grads
    logits, (emb_cache, body_cache, h) = _forward_internal(
        params, support, arr, q_img, q_txt, mode
    )
    loss, pred, targets = _loss_from_logits(logits, arr)
    b_, l_, v = logits.shape
    count = targets.size
    d_pred = _softmax_last(pred)
    rows = np.arange(b_)[:, None]
    cols = np.arange(l_ - 2)[None, :]
    d_pred[rows, cols, targets] -= 1.0
    d_pred /= count
    d_logits = np.zeros_like(logits)
    d_logits[:, 1 : l_ - 1, :] = d_pred

    flat = lambda z: z.reshape(-1, z.shape[-1])
    grads["head"] += flat(h).T @ flat(d_logits)
    dh = d_logits @ params.tensors["head"].T
    if params.config.arch == "transformer":
        dx = _transformer_backward(params, body_cache, dh, grads)
    else:
        dx = _lstm_backward(params, body_cache, dh, grads)
    _embed_backward(params, emb_cache, dx, grads)
    for name in params.frozen_names():
        grads[name][:] = 0.0
    return loss, grads


def sequence_loss(
    params: ModelParams,
    support: SupportFeatures,
    anchor: Example,
    icd_ids: Sequence[int],
    mode: str | None = None,
) -> float:
    """Loss of one training row built from an anchor and its ICD ids."""
    vocab = params.vocab
    row = np.asarray([vocab.bos, vocab.query, *icd_ids, vocab.eos], dtype=np.int64)[None, :]
    q_img = np.asarray(anchor.img_feat, dtype=np.float64)[None, :]
    q_txt = None
    if anchor.txt_feat is not None:
        q_txt = np.asarray(anchor.txt_feat, dtype=np.float64)[None, :]
    return batch_loss(params, support, row, q_img, q_txt, mode)


# ---------------------------------------------------------------------------
# checkpoints


def save_model(params: ModelParams, path, meta_extra: Mapping | None = None) -> None:
    meta = {
        "model": dataclasses.asdict(params.config),
        "vocab_n": params.vocab.n,
        "feature_dim": params.feature_dim,
    }
    if meta_extra:
        meta.update(meta_extra)
    checkpoint_save(params.tensors, meta, path)


def load_model(path) -> tuple[ModelParams, dict]:
    tensors, meta = checkpoint_load(path)
    try:
        config = ModelConfig(**meta["model"])
        vocab = Vocabulary(int(meta["vocab_n"]))
        feature_dim = int(meta["feature_dim"])
    except (KeyError, TypeError) as e:
        raise SchemaError(f"{path}: incomplete checkpoint meta: {e}") from e
    expected = tensor_shapes(config, vocab, feature_dim)
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise SchemaError(f"{path}: checkpoint is missing tensor(s) {missing}")
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise SchemaError(f"{path}: checkpoint has unexpected tensor(s) {extra}")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise SchemaError(
                f"{path}: tensor {name!r} has shape {tensors[name].shape}, wants {shape}"
            )
    return ModelParams(config=config, vocab=vocab, feature_dim=feature_dim, tensors=tensors), meta
