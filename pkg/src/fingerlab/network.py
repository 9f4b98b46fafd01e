"""Probe network: note encoder, causal Transformer over onset groups, two heads.

Forward and backward passes are written out by hand on numpy arrays; the
analytic gradients are validated against central finite differences by
grad_check. Training runs in single precision, gradient checks in double.

Architecture per window (a sequence of onset groups):
  note embedding   = features @ enc_w + enc_b + rule_emb[rule_label]
  group token      = mean of member note embeddings + positional embedding
  context          = pre-norm causal Transformer encoder over group tokens
  head input       = note embedding + its group's context vector
  class head       -> softmax over the 11 finger classes
  correction head  -> sigmoid probability that the rule label is wrong
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .features import FEATURE_DIM

NUM_CLASSES = 11
_LN_EPS = 1e-5
_MASK_VALUE = -1e30

RULE_EMBEDDING_MODES = ("active", "zeroed_frozen")


@dataclass(frozen=True)
class ProbeConfig:
    layers: int = 1
    d: int = 64
    heads: int = 4
    ff_multiplier: int = 4
    context_window: int = 64
    rule_embedding_mode: str = "zeroed_frozen"
    seed: int = 0
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 8

    def __post_init__(self) -> None:
        if self.layers < 0:
            raise ValidationError("layers must be nonnegative")
        if self.d < 1 or self.d % self.heads != 0:
            raise ValidationError("d must be a positive multiple of heads")
        if self.context_window < 1:
            raise ValidationError("context_window must be at least 1")
        if self.rule_embedding_mode not in RULE_EMBEDDING_MODES:
            raise ValidationError(
                f"rule_embedding_mode must be one of {RULE_EMBEDDING_MODES}"
            )
        if self.ff_multiplier < 1:
            raise ValidationError("ff_multiplier must be at least 1")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be at least 1")

    @property
    def frozen_rule_embedding(self) -> bool:
        return self.rule_embedding_mode == "zeroed_frozen"


def param_shapes(cfg: ProbeConfig) -> dict[str, tuple[int, ...]]:
    """Named parameter tensors and their shapes, in a fixed order."""
    d, ff = cfg.d, cfg.d * cfg.ff_multiplier
    shapes: dict[str, tuple[int, ...]] = {
        "enc_w": (FEATURE_DIM, d),
        "enc_b": (d,),
        "rule_emb": (NUM_CLASSES, d),
        "pos_emb": (cfg.context_window, d),
    }
    for layer in range(cfg.layers):
        p = f"l{layer}."
        shapes[p + "ln1_g"] = (d,)
        shapes[p + "ln1_b"] = (d,)
        shapes[p + "attn_wq"] = (d, d)
        shapes[p + "attn_bq"] = (d,)
        shapes[p + "attn_wk"] = (d, d)
        shapes[p + "attn_bk"] = (d,)
        shapes[p + "attn_wv"] = (d, d)
        shapes[p + "attn_bv"] = (d,)
        shapes[p + "attn_wo"] = (d, d)
        shapes[p + "attn_bo"] = (d,)
        shapes[p + "ln2_g"] = (d,)
        shapes[p + "ln2_b"] = (d,)
        shapes[p + "ff_w1"] = (d, ff)
        shapes[p + "ff_b1"] = (ff,)
        shapes[p + "ff_w2"] = (ff, d)
        shapes[p + "ff_b2"] = (d,)
    shapes["cls_w"] = (d, NUM_CLASSES)
    shapes["cls_b"] = (NUM_CLASSES,)
    shapes["cor_w"] = (d,)
    shapes["cor_b"] = (1,)
    return shapes


def param_count(cfg: ProbeConfig) -> int:
    return sum(int(np.prod(shape)) for shape in param_shapes(cfg).values())


@dataclass
class ProbeModel:
    config: ProbeConfig
    params: dict[str, np.ndarray]

    @property
    def dtype(self) -> np.dtype:
        return self.params["enc_w"].dtype

    def astype(self, dtype) -> "ProbeModel":
        return ProbeModel(
            config=self.config,
            params={k: v.astype(dtype) for k, v in self.params.items()},
        )

    def copy(self) -> "ProbeModel":
        return ProbeModel(config=self.config, params={k: v.copy() for k, v in self.params.items()})


def init_model(cfg: ProbeConfig, dtype=np.float32) -> ProbeModel:
    """Seeded random initialization; the frozen rule embedding starts all-zero."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    d, ff = cfg.d, cfg.d * cfg.ff_multiplier
    scales = {
        "enc_w": 1.0 / math.sqrt(FEATURE_DIM),
        "cls_w": 1.0 / math.sqrt(d),
        "cor_w": 1.0 / math.sqrt(d),
        "pos_emb": 0.02,
        "rule_emb": 0.0 if cfg.frozen_rule_embedding else 0.02,
    }
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(("ln1_g", "ln2_g")):
            params[name] = np.ones(shape)
        elif name.endswith("_b") or name.endswith(("bq", "bk", "bv", "bo", "ff_b1", "ff_b2")):
            params[name] = np.zeros(shape)
        elif name.endswith("ff_w1"):
            params[name] = rng.normal(0.0, 1.0 / math.sqrt(d), shape)
        elif name.endswith("ff_w2"):
            params[name] = rng.normal(0.0, 1.0 / math.sqrt(ff), shape)
        elif ".attn_w" in name:
            params[name] = rng.normal(0.0, 1.0 / math.sqrt(d), shape)
        elif name in scales:
            scale = scales[name]
            params[name] = rng.normal(0.0, scale, shape) if scale > 0 else np.zeros(shape)
        else:
            raise AssertionError(f"unhandled parameter {name}")
    return ProbeModel(config=cfg, params={k: v.astype(dtype) for k, v in params.items()})


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def _layernorm_forward(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    x_hat = (x - mu) * inv
    return gain * x_hat + bias, (x_hat, inv)


def _layernorm_backward(dy, cache, gain):
    x_hat, inv = cache
    dgain = (dy * x_hat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dx_hat = dy * gain
    dx = inv * (
        dx_hat
        - dx_hat.mean(axis=-1, keepdims=True)
        - x_hat * (dx_hat * x_hat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def _split_heads(x, heads):
    g, d = x.shape
    return x.reshape(g, heads, d // heads).transpose(1, 0, 2)  # (h, G, dh)


def _merge_heads(x):
    h, g, dh = x.shape
    return x.transpose(1, 0, 2).reshape(g, h * dh)


def _layer_forward(x, p, prefix, heads):
    cache: dict = {"x": x}
    a, cache["ln1"] = _layernorm_forward(x, p[prefix + "ln1_g"], p[prefix + "ln1_b"])
    cache["a"] = a
    q = a @ p[prefix + "attn_wq"] + p[prefix + "attn_bq"]
    k = a @ p[prefix + "attn_wk"] + p[prefix + "attn_bk"]
    v = a @ p[prefix + "attn_wv"] + p[prefix + "attn_bv"]
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    dh = qh.shape[-1]
    scores = qh @ kh.transpose(0, 2, 1) / math.sqrt(dh)
    g = x.shape[0]
    mask = np.triu(np.ones((g, g), dtype=bool), k=1)
    scores = np.where(mask, x.dtype.type(_MASK_VALUE), scores)
    scores -= scores.max(axis=-1, keepdims=True)
    attn = np.exp(scores)
    attn /= attn.sum(axis=-1, keepdims=True)
    oh = attn @ vh
    o = _merge_heads(oh)
    attn_out = o @ p[prefix + "attn_wo"] + p[prefix + "attn_bo"]
    x1 = x + attn_out
    cache.update(qh=qh, kh=kh, vh=vh, attn=attn, o=o, x1=x1)
    b, cache["ln2"] = _layernorm_forward(x1, p[prefix + "ln2_g"], p[prefix + "ln2_b"])
    cache["b"] = b
    pre = b @ p[prefix + "ff_w1"] + p[prefix + "ff_b1"]
    hidden = np.maximum(pre, 0.0)
    cache["pre"] = pre
    cache["hidden"] = hidden
    out = x1 + hidden @ p[prefix + "ff_w2"] + p[prefix + "ff_b2"]
    return out, cache


def _layer_backward(dout, p, prefix, heads, cache, grads):
    # feed-forward block
    dx1 = dout.copy()
    dhidden = dout @ p[prefix + "ff_w2"].T
    grads[prefix + "ff_w2"] += cache["hidden"].T @ dout
    grads[prefix + "ff_b2"] += dout.sum(axis=0)
    dpre = dhidden * (cache["pre"] > 0)
    grads[prefix + "ff_w1"] += cache["b"].T @ dpre
    grads[prefix + "ff_b1"] += dpre.sum(axis=0)
    db = dpre @ p[prefix + "ff_w1"].T
    dx1_ln, dg2, db2 = _layernorm_backward(db, cache["ln2"], p[prefix + "ln2_g"])
    grads[prefix + "ln2_g"] += dg2
    grads[prefix + "ln2_b"] += db2
    dx1 += dx1_ln

    # attention block
    dx = dx1.copy()
    dattn_out = dx1
    grads[prefix + "attn_wo"] += cache["o"].T @ dattn_out
    grads[prefix + "attn_bo"] += dattn_out.sum(axis=0)
    do = dattn_out @ p[prefix + "attn_wo"].T
    doh = _split_heads(do, heads)
    attn, vh, qh, kh = cache["attn"], cache["vh"], cache["qh"], cache["kh"]
    dattn = doh @ vh.transpose(0, 2, 1)
    dvh = attn.transpose(0, 2, 1) @ doh
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dh = qh.shape[-1]
    dqh = dscores @ kh / math.sqrt(dh)
    dkh = dscores.transpose(0, 2, 1) @ qh / math.sqrt(dh)
    dq, dk, dv = (_merge_heads(t) for t in (dqh, dkh, dvh))
    a = cache["a"]
    da = np.zeros_like(a)
    for mat, dmat in (("attn_wq", dq), ("attn_wk", dk), ("attn_wv", dv)):
        grads[prefix + mat] += a.T @ dmat
        grads[prefix + mat.replace("w", "b")] += dmat.sum(axis=0)
        da += dmat @ p[prefix + mat].T
    dx_ln, dg1, db1 = _layernorm_backward(da, cache["ln1"], p[prefix + "ln1_g"])
    grads[prefix + "ln1_g"] += dg1
    grads[prefix + "ln1_b"] += db1
    return dx + dx_ln


def _pool_matrix(groups: Sequence[Sequence[int]], n_notes: int, dtype) -> np.ndarray:
    pool = np.zeros((len(groups), n_notes), dtype=dtype)
    for j, members in enumerate(groups):
        pool[j, members] = 1.0 / len(members)
    return pool


def _group_index(groups: Sequence[Sequence[int]], n_notes: int) -> np.ndarray:
    sel = np.empty(n_notes, dtype=np.int64)
    for j, members in enumerate(groups):
        sel[members] = j
    return sel


@dataclass
class ForwardResult:
    class_probs: np.ndarray  # (n_notes, 11), rows sum to 1
    correction_probs: np.ndarray  # (n_notes,)
    cache: dict | None = field(default=None, repr=False)


def forward(
    model: ProbeModel,
    feats: np.ndarray,
    rule_labels: np.ndarray,
    groups: Sequence[Sequence[int]],
    want_cache: bool = False,
) -> ForwardResult:
    """Run one window (at most context_window onset groups) through the probe."""
    cfg = model.config
    if len(groups) > cfg.context_window:
        raise ValidationError(
            f"window of {len(groups)} groups exceeds context_window {cfg.context_window}"
        )
    p = model.params
    dtype = model.dtype
    feats = np.asarray(feats, dtype=dtype)
    rule_labels = np.asarray(rule_labels, dtype=np.int64)
    n = feats.shape[0]
    if feats.shape != (n, FEATURE_DIM):
        raise ValidationError(f"features must have shape (n, {FEATURE_DIM})")
    if sorted(i for g in groups for i in g) != list(range(n)):
        raise ValidationError("groups must partition the window's notes")

    note_emb = feats @ p["enc_w"] + p["enc_b"] + p["rule_emb"][rule_labels]
    pool = _pool_matrix(groups, n, dtype)
    x = pool @ note_emb + p["pos_emb"][: len(groups)]
    layer_caches = []
    for layer in range(cfg.layers):
        x, cache = _layer_forward(x, p, f"l{layer}.", cfg.heads)
        layer_caches.append(cache)
    sel = _group_index(groups, n)
    z = note_emb + x[sel]

    cls_logits = z @ p["cls_w"] + p["cls_b"]
    shifted = cls_logits - cls_logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=-1, keepdims=True)
    cor_logits = z @ p["cor_w"] + p["cor_b"][0]
    cor_probs = 1.0 / (1.0 + np.exp(-cor_logits))

    cache = None
    if want_cache:
        cache = {
            "feats": feats,
            "rule_labels": rule_labels,
            "note_emb": note_emb,
            "pool": pool,
            "sel": sel,
            "z": z,
            "probs": probs,
            "cls_logits": cls_logits,
            "cor_logits": cor_logits,
            "layer_caches": layer_caches,
            "n_groups": len(groups),
        }
    return ForwardResult(class_probs=probs, correction_probs=cor_probs, cache=cache)


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------


def _bce_with_logits(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    return np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))


@dataclass
class WindowLoss:
    ce_sum: float
    bce_sum: float
    n_notes: int
    grads: dict[str, np.ndarray] | None = field(default=None, repr=False)

    @property
    def total_sum(self) -> float:
        return self.ce_sum + self.bce_sum

    @property
    def mean(self) -> float:
        return self.total_sum / self.n_notes


def window_loss(
    model: ProbeModel,
    feats: np.ndarray,
    rule_labels: np.ndarray,
    targets: np.ndarray,
    corrections: np.ndarray,
    groups: Sequence[Sequence[int]],
) -> WindowLoss:
    """Summed CE + BCE over one window, no gradients."""
    out = forward(model, feats, rule_labels, groups, want_cache=True)
    targets = np.asarray(targets, dtype=np.int64)
    corrections = np.asarray(corrections, dtype=model.dtype)
    n = len(targets)
    log_probs = np.log(np.maximum(out.class_probs[np.arange(n), targets], 1e-300))
    ce = float(-log_probs.sum())
    bce = float(_bce_with_logits(out.cache["cor_logits"], corrections).sum())
    return WindowLoss(ce_sum=ce, bce_sum=bce, n_notes=n)


def window_loss_and_grads(
    model: ProbeModel,
    feats: np.ndarray,
    rule_labels: np.ndarray,
    targets: np.ndarray,
    corrections: np.ndarray,
    groups: Sequence[Sequence[int]],
) -> WindowLoss:
    """Summed loss over one window plus analytic gradients of that sum.

    In zeroed_frozen mode the rule-embedding gradient is reported as exactly
    zero; the table never trains.
    """
    cfg = model.config
    p = model.params
    out = forward(model, feats, rule_labels, groups, want_cache=True)
    cache = out.cache
    targets = np.asarray(targets, dtype=np.int64)
    corrections = np.asarray(corrections, dtype=model.dtype)
    n = len(targets)

    probs = cache["probs"]
    log_probs = np.log(np.maximum(probs[np.arange(n), targets], 1e-300))
    ce = float(-log_probs.sum())
    bce = float(_bce_with_logits(cache["cor_logits"], corrections).sum())

    grads = {name: np.zeros_like(arr) for name, arr in p.items()}

    dcls = probs.copy()
    dcls[np.arange(n), targets] -= 1.0
    dcor = out.correction_probs - corrections

    z = cache["z"]
    grads["cls_w"] += z.T @ dcls
    grads["cls_b"] += dcls.sum(axis=0)
    grads["cor_w"] += z.T @ dcor
    grads["cor_b"] += np.array([dcor.sum()], dtype=model.dtype)

    dz = dcls @ p["cls_w"].T + np.outer(dcor, p["cor_w"])
    dnote = dz.copy()
    n_groups = cache["n_groups"]
    dcontext = np.zeros((n_groups, cfg.d), dtype=model.dtype)
    np.add.at(dcontext, cache["sel"], dz)

    dx = dcontext
    for layer in reversed(range(cfg.layers)):
        dx = _layer_backward(dx, p, f"l{layer}.", cfg.heads, cache["layer_caches"][layer], grads)

    grads["pos_emb"][:n_groups] += dx
    dnote += cache["pool"].T @ dx

    grads["enc_w"] += cache["feats"].T @ dnote
    grads["enc_b"] += dnote.sum(axis=0)
    if cfg.frozen_rule_embedding:
        grads["rule_emb"][:] = 0.0
    else:
        np.add.at(grads["rule_emb"], cache["rule_labels"], dnote)

    return WindowLoss(ce_sum=ce, bce_sum=bce, n_notes=n, grads=grads)


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------


def grad_check(
    model: ProbeModel,
    feats: np.ndarray,
    rule_labels: np.ndarray,
    targets: np.ndarray,
    corrections: np.ndarray,
    groups: Sequence[Sequence[int]],
    samples_per_tensor: int = 20,
    step: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between analytic gradients and central differences.

    Runs in double precision on the mean per-note loss. Every trainable
    tensor is sampled at `samples_per_tensor` coordinates (all of them for
    small tensors). The error measure is |a - n| / max(1, |a|, |n|). A frozen
    rule embedding is excluded: its reported gradient is zero by contract.
    """
    work = model.astype(np.float64)
    n = len(targets)
    analytic = window_loss_and_grads(work, feats, rule_labels, targets, corrections, groups)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, arr in work.params.items():
        if name == "rule_emb" and work.config.frozen_rule_embedding:
            continue
        if arr.size <= samples_per_tensor:
            coords = np.arange(arr.size)
        else:
            coords = rng.choice(arr.size, size=samples_per_tensor, replace=False)
        for idx in coords:
            original = arr.flat[idx]
            arr.flat[idx] = original + step
            plus = window_loss(work, feats, rule_labels, targets, corrections, groups).total_sum
            arr.flat[idx] = original - step
            minus = window_loss(work, feats, rule_labels, targets, corrections, groups).total_sum
            arr.flat[idx] = original
            numeric = (plus - minus) / (2.0 * step) / n
            a = analytic.grads[name].reshape(-1)[idx] / n
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
