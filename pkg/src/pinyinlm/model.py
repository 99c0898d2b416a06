"""Desk-scale transformer encoder with four-way summed embeddings and exact
hand-written gradients.

Token representations are the sum of character, pinyin (per component),
position, and segment embeddings; the encoder stack is a standard
post-layer-norm transformer (self-attention with a padding mask, GELU FFN,
dropout on both sublayer outputs). Two output heads recover corrupted
inputs: a character head, and one pinyin head per component when the
pretraining scheme trains pinyin recovery.

Everything runs on plain numpy arrays. ``*_forward_backward`` functions
return analytic gradients for every parameter tensor; gradients are checked
against central finite differences in the test suite, so any change to a
forward formula needs its matching backward change.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .masking import IGNORE_INDEX, MaskedInstance, MaskingScheme
from .pinyin import P_PAD, PinyinMode
from .vocab import PAD, TokenSequence

CHECKPOINT_FORMAT_VERSION = 1
LN_EPS = 1e-5
ATTN_NEG = -1e9

# Sub-stream tags for deriving independent RNG streams from one seed.
_INIT_STREAM = 3


class NumericOverflowError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    char_vocab_size: int
    layers: int = 2
    heads: int = 4
    hidden: int = 64
    ffn: int = 256
    max_len: int = 128
    pinyin_mode: PinyinMode = PinyinMode.PLAIN
    pinyin_table_sizes: tuple[int, ...] = ()
    dropout: float = 0.1
    scheme: MaskingScheme = MaskingScheme.PARALLEL_OUT

    def violations(self) -> list[str]:
        problems = []
        if self.hidden % self.heads != 0:
            problems.append(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        for name in ("char_vocab_size", "layers", "heads", "hidden", "ffn", "max_len"):
            if getattr(self, name) < 1 and not (name == "layers" and self.layers == 0):
                problems.append(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            problems.append(f"dropout must be in [0, 1), got {self.dropout}")
        if len(self.pinyin_table_sizes) != self.pinyin_mode.n_components:
            problems.append(
                f"pinyin_table_sizes has {len(self.pinyin_table_sizes)} entries, "
                f"mode {self.pinyin_mode.value} needs {self.pinyin_mode.n_components}"
            )
        if self.scheme is MaskingScheme.CONFUSION_ONLY and self.pinyin_mode is not PinyinMode.NONE:
            problems.append("scheme confusion_only requires pinyin mode none")
        return problems

    def validated(self) -> "ModelConfig":
        problems = self.violations()
        if problems:
            raise ValueError("; ".join(problems))
        return self

    @property
    def has_pinyin_heads(self) -> bool:
        return self.scheme is MaskingScheme.PARALLEL_OUT and self.pinyin_mode is not PinyinMode.NONE

    def to_dict(self) -> dict:
        return {
            "char_vocab_size": self.char_vocab_size,
            "layers": self.layers,
            "heads": self.heads,
            "hidden": self.hidden,
            "ffn": self.ffn,
            "max_len": self.max_len,
            "pinyin_mode": self.pinyin_mode.value,
            "pinyin_table_sizes": list(self.pinyin_table_sizes),
            "dropout": self.dropout,
            "scheme": self.scheme.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            char_vocab_size=int(d["char_vocab_size"]),
            layers=int(d["layers"]),
            heads=int(d["heads"]),
            hidden=int(d["hidden"]),
            ffn=int(d["ffn"]),
            max_len=int(d["max_len"]),
            pinyin_mode=PinyinMode(d["pinyin_mode"]),
            pinyin_table_sizes=tuple(int(x) for x in d["pinyin_table_sizes"]),
            dropout=float(d["dropout"]),
            scheme=MaskingScheme(d["scheme"]),
        )


@dataclass
class ModelParams:
    """Named parameter tensors; fine-tuning heads join the same dict."""

    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: v.astype(dtype) for k, v in self.tensors.items()})


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) truncated to two standard deviations, by resampling."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(dtype)


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    cfg.validated()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(_INIT_STREAM,)))
    std = 0.02
    t: dict[str, np.ndarray] = {}
    h = cfg.hidden
    t["char_embed"] = _trunc_normal(rng, (cfg.char_vocab_size, h), std, dtype)
    for c, size in enumerate(cfg.pinyin_table_sizes):
        t[f"pinyin_embed_{c}"] = _trunc_normal(rng, (size, h), std, dtype)
    t["pos_embed"] = _trunc_normal(rng, (cfg.max_len, h), std, dtype)
    t["seg_embed"] = _trunc_normal(rng, (2, h), std, dtype)
    for i in range(cfg.layers):
        p = f"layer{i}."
        for proj in ("wq", "wk", "wv", "wo"):
            t[p + "attn_" + proj] = _trunc_normal(rng, (h, h), std, dtype)
            t[p + "attn_b" + proj[-1]] = np.zeros(h, dtype=dtype)
        t[p + "ln1_g"] = np.ones(h, dtype=dtype)
        t[p + "ln1_b"] = np.zeros(h, dtype=dtype)
        t[p + "ffn_w1"] = _trunc_normal(rng, (h, cfg.ffn), std, dtype)
        t[p + "ffn_b1"] = np.zeros(cfg.ffn, dtype=dtype)
        t[p + "ffn_w2"] = _trunc_normal(rng, (cfg.ffn, h), std, dtype)
        t[p + "ffn_b2"] = np.zeros(h, dtype=dtype)
        t[p + "ln2_g"] = np.ones(h, dtype=dtype)
        t[p + "ln2_b"] = np.zeros(h, dtype=dtype)
    t["token_head_w"] = _trunc_normal(rng, (h, cfg.char_vocab_size), std, dtype)
    t["token_head_b"] = np.zeros(cfg.char_vocab_size, dtype=dtype)
    if cfg.has_pinyin_heads:
        for c, size in enumerate(cfg.pinyin_table_sizes):
            t[f"pinyin_head_w_{c}"] = _trunc_normal(rng, (h, size), std, dtype)
            t[f"pinyin_head_b_{c}"] = np.zeros(size, dtype=dtype)
    return ModelParams(t)


def add_classifier_head(params: ModelParams, cfg: ModelConfig, n_labels: int, seed: int,
                        name: str = "cls") -> None:
    dtype = params["char_embed"].dtype
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(_INIT_STREAM, 1)))
    params.tensors[f"{name}_head_w"] = _trunc_normal(rng, (cfg.hidden, n_labels), 0.02, dtype)
    params.tensors[f"{name}_head_b"] = np.zeros(n_labels, dtype=dtype)


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


# ---------------------------------------------------------------------------
# Batching


@dataclass
class Batch:
    """Padded id arrays for a batch; labels are optional (absent when encoding
    clean text for fine-tuning or prediction)."""

    char_ids: np.ndarray        # (B, L)
    pinyin_ids: np.ndarray      # (B, L, C)
    segment_ids: np.ndarray     # (B, L)
    lengths: np.ndarray         # (B,)
    token_labels: np.ndarray | None = None   # (B, L)
    pinyin_labels: np.ndarray | None = None  # (B, L, C)

    @property
    def size(self) -> int:
        return int(self.char_ids.shape[0])

    @property
    def max_len(self) -> int:
        return int(self.char_ids.shape[1])


def collate_masked(instances: list[MaskedInstance]) -> Batch:
    lengths = np.array([inst.length for inst in instances], dtype=np.int64)
    max_len = int(lengths.max())
    n = len(instances)
    n_comp = int(instances[0].input_pinyin_ids.shape[1])
    char_ids = np.full((n, max_len), PAD, dtype=np.int64)
    pin_ids = np.full((n, max_len, n_comp), P_PAD, dtype=np.int64)
    seg_ids = np.zeros((n, max_len), dtype=np.int64)
    tok_lab = np.full((n, max_len), IGNORE_INDEX, dtype=np.int64)
    pin_lab = np.full((n, max_len, n_comp), IGNORE_INDEX, dtype=np.int64)
    for b, inst in enumerate(instances):
        sl = slice(0, inst.length)
        char_ids[b, sl] = inst.input_char_ids
        pin_ids[b, sl] = inst.input_pinyin_ids
        seg_ids[b, sl] = inst.segment_ids
        tok_lab[b, sl] = inst.token_labels
        pin_lab[b, sl] = inst.pinyin_labels
    return Batch(char_ids, pin_ids, seg_ids, lengths, tok_lab, pin_lab)


def collate_sequences(seqs: list[TokenSequence]) -> Batch:
    lengths = np.array([s.length for s in seqs], dtype=np.int64)
    max_len = int(lengths.max())
    n = len(seqs)
    n_comp = seqs[0].n_components
    char_ids = np.full((n, max_len), PAD, dtype=np.int64)
    pin_ids = np.full((n, max_len, n_comp), P_PAD, dtype=np.int64)
    seg_ids = np.zeros((n, max_len), dtype=np.int64)
    for b, s in enumerate(seqs):
        sl = slice(0, s.length)
        char_ids[b, sl] = s.char_ids
        pin_ids[b, sl] = s.pinyin_ids
        seg_ids[b, sl] = s.segment_ids
    return Batch(char_ids, pin_ids, seg_ids, lengths)


# ---------------------------------------------------------------------------
# Forward pieces


def embed(params: ModelParams, cfg: ModelConfig, char_ids, pinyin_ids, segment_ids) -> np.ndarray:
    """Sum of character + pinyin components + position + segment embeddings.

    Accepts (L,)/(L, C) single instances or (B, L)/(B, L, C) batches.
    """
    char_ids = np.asarray(char_ids)
    single = char_ids.ndim == 1
    if single:
        char_ids = char_ids[None]
        pinyin_ids = np.asarray(pinyin_ids)[None]
        segment_ids = np.asarray(segment_ids)[None]
    length = char_ids.shape[1]
    if length > cfg.max_len:
        raise ValueError(f"sequence length {length} exceeds max_len {cfg.max_len}")
    x = params["char_embed"][char_ids]
    for c in range(cfg.pinyin_mode.n_components):
        x = x + params[f"pinyin_embed_{c}"][pinyin_ids[:, :, c]]
    x = x + params["pos_embed"][:length][None]
    x = x + params["seg_embed"][segment_ids]
    return x[0] if single else x


def embed_instance(inst: MaskedInstance, params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    return embed(params, cfg, inst.input_char_ids, inst.input_pinyin_ids, inst.segment_ids)


def _layernorm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def _layernorm_backward(dy: np.ndarray, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dg, db


_GELU_K = np.sqrt(2.0 / np.pi)


def _gelu(x: np.ndarray):
    inner = _GELU_K * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), t


def _gelu_backward(dy: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    dinner = _GELU_K * (1.0 + 3 * 0.044715 * x ** 2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def _dropout(x: np.ndarray, p: float, train: bool, rng: np.random.Generator | None):
    if not train or p == 0.0:
        return x, None
    if rng is None:
        raise ValueError("training forward pass needs an RNG for dropout")
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    scale = 1.0 / (1.0 - p)
    return x * keep * scale, keep * scale


def encode(
    params: ModelParams,
    cfg: ModelConfig,
    h: np.ndarray,
    lengths: np.ndarray | None = None,
    train: bool = False,
    rng: np.random.Generator | None = None,
    return_cache: bool = False,
):
    """Run the encoder stack over embedded inputs ``h`` of shape (B, L, H).

    ``lengths`` marks real (non-padded) positions per instance; padded keys
    are masked out of every attention row. Raises ``NumericOverflowError``
    naming the layer if activations stop being finite.
    """
    single = h.ndim == 2
    if single:
        h = h[None]
    bsz, length, hidden = h.shape
    heads, dh = cfg.heads, cfg.hidden // cfg.heads
    scale = 1.0 / np.sqrt(dh)
    if lengths is None:
        lengths = np.full(bsz, length, dtype=np.int64)
    valid = np.arange(length)[None, :] < np.asarray(lengths)[:, None]
    key_bias = np.where(valid, 0.0, ATTN_NEG).astype(h.dtype)[:, None, None, :]

    x = h
    layer_caches = []
    for i in range(cfg.layers):
        p = f"layer{i}."
        q = x @ params[p + "attn_wq"] + params[p + "attn_bq"]
        k = x @ params[p + "attn_wk"] + params[p + "attn_bk"]
        v = x @ params[p + "attn_wv"] + params[p + "attn_bv"]
        qh = q.reshape(bsz, length, heads, dh).transpose(0, 2, 1, 3)
        kh = k.reshape(bsz, length, heads, dh).transpose(0, 2, 1, 3)
        vh = v.reshape(bsz, length, heads, dh).transpose(0, 2, 1, 3)
        scores = qh @ kh.transpose(0, 1, 3, 2) * scale + key_bias
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        ctx_h = probs @ vh
        ctx = ctx_h.transpose(0, 2, 1, 3).reshape(bsz, length, hidden)
        attn = ctx @ params[p + "attn_wo"] + params[p + "attn_bo"]
        attn_d, drop1 = _dropout(attn, cfg.dropout, train, rng)
        r1 = x + attn_d
        y1, ln1 = _layernorm(r1, params[p + "ln1_g"], params[p + "ln1_b"])
        u = y1 @ params[p + "ffn_w1"] + params[p + "ffn_b1"]
        g, tanh_u = _gelu(u)
        f2 = g @ params[p + "ffn_w2"] + params[p + "ffn_b2"]
        f2_d, drop2 = _dropout(f2, cfg.dropout, train, rng)
        r2 = y1 + f2_d
        y2, ln2 = _layernorm(r2, params[p + "ln2_g"], params[p + "ln2_b"])
        if not np.isfinite(y2).all():
            raise NumericOverflowError(f"non-finite activation in encoder layer {i}")
        layer_caches.append({
            "x": x, "qh": qh, "kh": kh, "vh": vh, "probs": probs, "ctx": ctx,
            "drop1": drop1, "ln1": ln1, "y1": y1, "u": u, "tanh_u": tanh_u,
            "g": g, "drop2": drop2, "ln2": ln2,
        })
        x = y2

    out = x[0] if single else x
    if return_cache:
        return out, {"layers": layer_caches, "valid": valid, "scale": scale}
    return out


def _encode_backward(params: ModelParams, cfg: ModelConfig, cache, d_out: np.ndarray,
                     grads: dict[str, np.ndarray]) -> np.ndarray:
    bsz, length, hidden = d_out.shape
    heads, dh = cfg.heads, cfg.hidden // cfg.heads
    scale = cache["scale"]
    dx = d_out
    for i in reversed(range(cfg.layers)):
        p = f"layer{i}."
        c = cache["layers"][i]
        dr2, dg2, db2 = _layernorm_backward(dx, c["ln2"])
        grads[p + "ln2_g"] += dg2
        grads[p + "ln2_b"] += db2
        dy1 = dr2.copy()
        df2 = dr2 if c["drop2"] is None else dr2 * c["drop2"]
        grads[p + "ffn_w2"] += np.einsum("blf,blh->fh", c["g"], df2)
        grads[p + "ffn_b2"] += df2.sum(axis=(0, 1))
        dg = df2 @ params[p + "ffn_w2"].T
        du = _gelu_backward(dg, c["u"], c["tanh_u"])
        grads[p + "ffn_w1"] += np.einsum("blh,blf->hf", c["y1"], du)
        grads[p + "ffn_b1"] += du.sum(axis=(0, 1))
        dy1 += du @ params[p + "ffn_w1"].T
        dr1, dg1, db1 = _layernorm_backward(dy1, c["ln1"])
        grads[p + "ln1_g"] += dg1
        grads[p + "ln1_b"] += db1
        dx = dr1.copy()
        dattn = dr1 if c["drop1"] is None else dr1 * c["drop1"]
        grads[p + "attn_wo"] += np.einsum("blh,blk->hk", c["ctx"], dattn)
        grads[p + "attn_bo"] += dattn.sum(axis=(0, 1))
        dctx = dattn @ params[p + "attn_wo"].T
        dctx_h = dctx.reshape(bsz, length, heads, dh).transpose(0, 2, 1, 3)
        dprobs = dctx_h @ c["vh"].transpose(0, 1, 3, 2)
        dvh = c["probs"].transpose(0, 1, 3, 2) @ dctx_h
        dscores = c["probs"] * (dprobs - (dprobs * c["probs"]).sum(axis=-1, keepdims=True))
        dqh = dscores @ c["kh"] * scale
        dkh = dscores.transpose(0, 1, 3, 2) @ c["qh"] * scale
        dq = dqh.transpose(0, 2, 1, 3).reshape(bsz, length, hidden)
        dk = dkh.transpose(0, 2, 1, 3).reshape(bsz, length, hidden)
        dv = dvh.transpose(0, 2, 1, 3).reshape(bsz, length, hidden)
        x = c["x"]
        grads[p + "attn_wq"] += np.einsum("blh,blk->hk", x, dq)
        grads[p + "attn_bq"] += dq.sum(axis=(0, 1))
        grads[p + "attn_wk"] += np.einsum("blh,blk->hk", x, dk)
        grads[p + "attn_bk"] += dk.sum(axis=(0, 1))
        grads[p + "attn_wv"] += np.einsum("blh,blk->hk", x, dv)
        grads[p + "attn_bv"] += dv.sum(axis=(0, 1))
        dx += dq @ params[p + "attn_wq"].T
        dx += dk @ params[p + "attn_wk"].T
        dx += dv @ params[p + "attn_wv"].T
    return dx


def _embed_backward(params: ModelParams, cfg: ModelConfig, batch: Batch, dx0: np.ndarray,
                    grads: dict[str, np.ndarray]) -> None:
    hidden = dx0.shape[-1]
    flat = dx0.reshape(-1, hidden)
    np.add.at(grads["char_embed"], batch.char_ids.reshape(-1), flat)
    for c in range(cfg.pinyin_mode.n_components):
        np.add.at(grads[f"pinyin_embed_{c}"], batch.pinyin_ids[:, :, c].reshape(-1), flat)
    grads["pos_embed"][: dx0.shape[1]] += dx0.sum(axis=0)
    np.add.at(grads["seg_embed"], batch.segment_ids.reshape(-1), flat)


# ---------------------------------------------------------------------------
# Losses


def _masked_ce(logits: np.ndarray, labels: np.ndarray):
    """Cross entropy averaged per instance, then over instances with labels.

    Returns (loss, dlogits, n_instances_counted). Instances without labeled
    positions contribute nothing and are excluded from the outer mean.
    """
    bsz = logits.shape[0]
    labeled = labels != IGNORE_INDEX
    per_inst = labeled.sum(axis=tuple(range(1, labels.ndim)))
    counted = int((per_inst > 0).sum())
    dlogits = np.zeros_like(logits)
    if counted == 0:
        return 0.0, dlogits, 0
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    probs = np.exp(logp)

    safe_labels = np.where(labeled, labels, 0)
    picked = np.take_along_axis(logp, safe_labels[..., None], axis=-1)[..., 0]
    weights = np.zeros(labels.shape, dtype=logits.dtype)
    inst_w = np.zeros(bsz, dtype=logits.dtype)
    inst_w[per_inst > 0] = 1.0 / (per_inst[per_inst > 0] * counted)
    weights[labeled] = np.broadcast_to(
        inst_w.reshape((bsz,) + (1,) * (labels.ndim - 1)), labels.shape
    )[labeled]
    loss = float(-(picked * weights).sum())

    dlogits = probs * weights[..., None]
    grid = tuple(np.indices(labels.shape))
    dlogits[grid + (safe_labels,)] -= weights
    return loss, dlogits, counted


def mlm_logits(params: ModelParams, cfg: ModelConfig, ctx: np.ndarray):
    token = ctx @ params["token_head_w"] + params["token_head_b"]
    pinyin = []
    if cfg.has_pinyin_heads:
        for c in range(cfg.pinyin_mode.n_components):
            pinyin.append(ctx @ params[f"pinyin_head_w_{c}"] + params[f"pinyin_head_b_{c}"])
    return token, pinyin


def mlm_loss(ctx: np.ndarray, batch: Batch, params: ModelParams, cfg: ModelConfig):
    """Recovery loss over encoder output ``ctx``: token head cross entropy,
    plus each pinyin head's cross entropy when the scheme trains them.

    Returns (total, breakdown dict)."""
    token_logits, pinyin_logits = mlm_logits(params, cfg, ctx)
    token_loss, _, _ = _masked_ce(token_logits, batch.token_labels)
    breakdown = {"token": token_loss}
    total = token_loss
    for c, logits in enumerate(pinyin_logits):
        ploss, _, _ = _masked_ce(logits, batch.pinyin_labels[:, :, c])
        breakdown[f"pinyin_{c}"] = ploss
        total += ploss
    breakdown["total"] = total
    return total, breakdown


def mlm_forward_backward(
    params: ModelParams,
    cfg: ModelConfig,
    batch: Batch,
    train: bool = False,
    rng: np.random.Generator | None = None,
):
    """Full forward + exact backward for the pretraining objective.

    Returns (loss, breakdown, grads) with a gradient array for every
    parameter tensor (exactly zero for tensors off the loss path).
    """
    x0 = embed(params, cfg, batch.char_ids, batch.pinyin_ids, batch.segment_ids)
    ctx, cache = encode(params, cfg, x0, batch.lengths, train=train, rng=rng, return_cache=True)
    grads = zero_grads(params)

    token_logits, pinyin_logits = mlm_logits(params, cfg, ctx)
    token_loss, dtok, _ = _masked_ce(token_logits, batch.token_labels)
    breakdown = {"token": token_loss}
    total = token_loss
    flat_ctx = ctx.reshape(-1, cfg.hidden)
    grads["token_head_w"] += flat_ctx.T @ dtok.reshape(-1, dtok.shape[-1])
    grads["token_head_b"] += dtok.sum(axis=(0, 1))
    dctx = dtok @ params["token_head_w"].T
    for c, logits in enumerate(pinyin_logits):
        ploss, dp, _ = _masked_ce(logits, batch.pinyin_labels[:, :, c])
        breakdown[f"pinyin_{c}"] = ploss
        total += ploss
        grads[f"pinyin_head_w_{c}"] += flat_ctx.T @ dp.reshape(-1, dp.shape[-1])
        grads[f"pinyin_head_b_{c}"] += dp.sum(axis=(0, 1))
        dctx += dp @ params[f"pinyin_head_w_{c}"].T
    breakdown["total"] = total

    dx0 = _encode_backward(params, cfg, cache, dctx, grads)
    _embed_backward(params, cfg, batch, dx0, grads)
    return total, breakdown, grads


def backward(
    inst: MaskedInstance,
    params: ModelParams,
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
    train: bool = False,
):
    """Single-instance convenience wrapper around ``mlm_forward_backward``."""
    batch = collate_masked([inst])
    return mlm_forward_backward(params, cfg, batch, train=train, rng=rng)


def classify_logits(params: ModelParams, cfg: ModelConfig, batch: Batch,
                    head: str = "cls") -> np.ndarray:
    x0 = embed(params, cfg, batch.char_ids, batch.pinyin_ids, batch.segment_ids)
    ctx = encode(params, cfg, x0, batch.lengths)
    return ctx[:, 0, :] @ params[f"{head}_head_w"] + params[f"{head}_head_b"]


def classify_forward_backward(
    params: ModelParams,
    cfg: ModelConfig,
    batch: Batch,
    labels: np.ndarray,
    train: bool = True,
    rng: np.random.Generator | None = None,
    head: str = "cls",
):
    """Sequence classification on the [CLS] vector; returns (loss, logits, grads)."""
    x0 = embed(params, cfg, batch.char_ids, batch.pinyin_ids, batch.segment_ids)
    ctx, cache = encode(params, cfg, x0, batch.lengths, train=train, rng=rng, return_cache=True)
    grads = zero_grads(params)
    cls_vec = ctx[:, 0, :]
    logits = cls_vec @ params[f"{head}_head_w"] + params[f"{head}_head_b"]
    loss, dlogits, _ = _masked_ce(logits, np.asarray(labels))
    grads[f"{head}_head_w"] += cls_vec.T @ dlogits
    grads[f"{head}_head_b"] += dlogits.sum(axis=0)
    dctx = np.zeros_like(ctx)
    dctx[:, 0, :] = dlogits @ params[f"{head}_head_w"].T
    dx0 = _encode_backward(params, cfg, cache, dctx, grads)
    _embed_backward(params, cfg, batch, dx0, grads)
    return loss, logits, grads


def tag_logits(params: ModelParams, cfg: ModelConfig, batch: Batch,
               head: str = "tag") -> np.ndarray:
    x0 = embed(params, cfg, batch.char_ids, batch.pinyin_ids, batch.segment_ids)
    ctx = encode(params, cfg, x0, batch.lengths)
    return ctx @ params[f"{head}_head_w"] + params[f"{head}_head_b"]


def tag_forward_backward(
    params: ModelParams,
    cfg: ModelConfig,
    batch: Batch,
    tag_labels: np.ndarray,
    train: bool = True,
    rng: np.random.Generator | None = None,
    head: str = "tag",
):
    """Per-position tagging loss; labels are IGNORE_INDEX at specials/padding."""
    x0 = embed(params, cfg, batch.char_ids, batch.pinyin_ids, batch.segment_ids)
    ctx, cache = encode(params, cfg, x0, batch.lengths, train=train, rng=rng, return_cache=True)
    grads = zero_grads(params)
    logits = ctx @ params[f"{head}_head_w"] + params[f"{head}_head_b"]
    loss, dlogits, _ = _masked_ce(logits, np.asarray(tag_labels))
    flat_ctx = ctx.reshape(-1, cfg.hidden)
    grads[f"{head}_head_w"] += flat_ctx.T @ dlogits.reshape(-1, dlogits.shape[-1])
    grads[f"{head}_head_b"] += dlogits.sum(axis=(0, 1))
    dctx = dlogits @ params[f"{head}_head_w"].T
    dx0 = _encode_backward(params, cfg, cache, dctx, grads)
    _embed_backward(params, cfg, batch, dx0, grads)
    return loss, logits, grads


def token_logits(params: ModelParams, cfg: ModelConfig, batch: Batch) -> np.ndarray:
    x0 = embed(params, cfg, batch.char_ids, batch.pinyin_ids, batch.segment_ids)
    ctx = encode(params, cfg, x0, batch.lengths)
    return ctx @ params["token_head_w"] + params["token_head_b"]


# ---------------------------------------------------------------------------
# Checkpoint format: one line of JSON followed by raw little-endian float32
# tensor data, concatenated in header order.


def save_checkpoint(params: ModelParams, cfg: ModelConfig, path, extra: dict | None = None) -> None:
    names = params.names()
    tensors = []
    offset = 0
    for name in names:
        arr = params[name]
        nbytes = arr.size * 4
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += nbytes
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": cfg.to_dict(),
        "extra": extra or {},
        "tensors": tensors,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for name in names:
            fh.write(np.ascontiguousarray(params[name], dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32):
    """Returns (params, config, extra)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        header = json.loads(header_line.decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format: {header.get('format_version')}")
        blob = fh.read()
    cfg = ModelConfig.from_dict(header["config"])
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=start).reshape(shape)
        tensors[entry["name"]] = arr.astype(dtype)
    return ModelParams(tensors), cfg, header.get("extra", {})
