# src/model.py
"""
Decoder-only transformer in numpy (Llama/Mistral shape).

Pre-norm RMS normalization, rotary position embedding, grouped-query attention
and a SiLU-gated MLP. Provides forward passes with activation taps, an analytic
backward pass for cross-entropy and forward-KL loss heads, and sequence scoring.

Tensor naming scheme (shared by checkpoints and trimming):

    embed.tok                       (vocab, hidden)
    layer.{i}.attn.q                (query_heads * head_dim, hidden)
    layer.{i}.attn.k / attn.v       (attention_groups * head_dim, hidden)
    layer.{i}.attn.o                (hidden, query_heads * head_dim)
    layer.{i}.mlp.gate / mlp.up     (mlp_hidden, hidden)
    layer.{i}.mlp.down              (hidden, mlp_hidden)
    layer.{i}.norm.attn / norm.mlp  (hidden,)
    final.norm                      (hidden,)
    head.out                        (vocab, hidden)   absent when embeddings are tied
"""

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from scipy import special

from src.data import BOS_ID
from src.errors import (ConfigError, DivergenceError, SequenceTooLongError,
                        ShapeError, TokenRangeError)

logger = logging.getLogger(__name__)

ROPE_BASE = 10000.0
INIT_STD = 0.02
KL_ROUNDING = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    depth: int
    hidden: int
    mlp_hidden: int
    query_heads: int
    attention_groups: int
    head_dim: int
    vocab: int = 258
    context: int = 256
    norm_eps: float = 1e-5
    tie_embeddings: bool = False

    @property
    def group_size(self) -> int:
        return self.query_heads // max(self.attention_groups, 1)

    @property
    def attn_inner(self) -> int:
        return self.query_heads * self.head_dim

    @property
    def kv_inner(self) -> int:
        return self.attention_groups * self.head_dim

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown ModelConfig keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"incomplete ModelConfig: {exc}") from exc


def validate_config(cfg: ModelConfig) -> List[str]:
    """Return every violated invariant; an empty list means the config is valid."""
    violations = []
    for name, minimum in (("depth", 1), ("hidden", 1), ("mlp_hidden", 1), ("query_heads", 1),
                          ("attention_groups", 1), ("head_dim", 1), ("vocab", 2), ("context", 1)):
        value = getattr(cfg, name)
        if not isinstance(value, (int, np.integer)) or value < minimum:
            violations.append(f"{name} must be an integer >= {minimum} (got {value})")
    if cfg.attention_groups >= 1 and cfg.query_heads % cfg.attention_groups != 0:
        violations.append(
            f"query_heads mod groups must be 0 ({cfg.query_heads} mod {cfg.attention_groups})")
    if cfg.head_dim % 2 != 0:
        violations.append(f"head_dim must be even for rotary embedding (got {cfg.head_dim})")
    if not cfg.norm_eps > 0:
        violations.append(f"norm_eps must be positive (got {cfg.norm_eps})")
    return violations


def require_valid(cfg: ModelConfig) -> ModelConfig:
    violations = validate_config(cfg)
    if violations:
        raise ConfigError("invalid ModelConfig: " + "; ".join(violations))
    return cfg


def param_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Canonical, ordered name -> shape map for a config."""
    shapes = {"embed.tok": (cfg.vocab, cfg.hidden)}
    for i in range(cfg.depth):
        prefix = f"layer.{i}"
        shapes[f"{prefix}.attn.q"] = (cfg.attn_inner, cfg.hidden)
        shapes[f"{prefix}.attn.k"] = (cfg.kv_inner, cfg.hidden)
        shapes[f"{prefix}.attn.v"] = (cfg.kv_inner, cfg.hidden)
        shapes[f"{prefix}.attn.o"] = (cfg.hidden, cfg.attn_inner)
        shapes[f"{prefix}.mlp.gate"] = (cfg.mlp_hidden, cfg.hidden)
        shapes[f"{prefix}.mlp.up"] = (cfg.mlp_hidden, cfg.hidden)
        shapes[f"{prefix}.mlp.down"] = (cfg.hidden, cfg.mlp_hidden)
        shapes[f"{prefix}.norm.attn"] = (cfg.hidden,)
        shapes[f"{prefix}.norm.mlp"] = (cfg.hidden,)
    shapes["final.norm"] = (cfg.hidden,)
    if not cfg.tie_embeddings:
        shapes["head.out"] = (cfg.vocab, cfg.hidden)
    return shapes


def count_params(cfg: ModelConfig) -> Tuple[int, int]:
    """(total, non_embedding); non_embedding excludes the input embedding and output head."""
    shapes = param_shapes(require_valid(cfg))
    total = sum(int(np.prod(shape)) for shape in shapes.values())
    embedding = cfg.vocab * cfg.hidden * (1 if cfg.tie_embeddings else 2)
    return total, total - embedding


def is_norm(name: str) -> bool:
    return name == "final.norm" or ".norm." in name


@dataclass(eq=False)
class ParamSet:
    config: ModelConfig
    tensors: Dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def dtype(self) -> np.dtype:
        return self.tensors["embed.tok"].dtype

    def copy(self) -> "ParamSet":
        return ParamSet(self.config, {k: v.copy() for k, v in self.tensors.items()}, dict(self.meta))


@dataclass(eq=False)
class GradSet:
    tensors: Dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def global_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64)))
                             for g in self.tensors.values()))

    def scale(self, factor: float) -> None:
        for g in self.tensors.values():
            g *= factor


def params_equal(a: ParamSet, b: ParamSet) -> bool:
    """Bit-exact comparison of configs, names, dtypes and values."""
    if a.config != b.config or list(a.tensors) != list(b.tensors):
        return False
    return all(a[k].dtype == b[k].dtype and a[k].shape == b[k].shape
               and np.array_equal(a[k], b[k]) for k in a.tensors)


def init_params(cfg: ModelConfig, seed: int) -> ParamSet:
    """normal(0, 0.02) weights, output projections scaled by 1/sqrt(2*depth), unit norm gains."""
    require_valid(cfg)
    rng = np.random.default_rng(seed)
    out_scale = 1.0 / math.sqrt(2.0 * cfg.depth)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if is_norm(name):
            tensors[name] = np.ones(shape, dtype=np.float32)
            continue
        weight = rng.normal(0.0, INIT_STD, size=shape)
        if name.endswith(("attn.o", "mlp.down")):
            weight *= out_scale
        tensors[name] = weight.astype(np.float32)
    return ParamSet(cfg, tensors, {"init_seed": int(seed)})


def zeros_params(cfg: ModelConfig) -> ParamSet:
    require_valid(cfg)
    return ParamSet(cfg, {name: np.zeros(shape, dtype=np.float32)
                          for name, shape in param_shapes(cfg).items()})


@dataclass(frozen=True)
class TapSpec:
    """Which activation sites to capture.

    With ``aggregate`` set, each site stores the per-sample mean over sequence
    positions of the unit magnitudes, shape (batch, units), instead of the full
    tensor. ``norm_gain`` picks the post-gain or pre-gain RMS-norm output.
    Residual streams are always captured in full.
    """
    mlp: bool = False
    heads: bool = False
    norms: bool = False
    residual: bool = False
    aggregate: bool = False
    norm_gain: str = "post"

    @property
    def any(self) -> bool:
        return self.mlp or self.heads or self.norms or self.residual


@dataclass
class ForwardTrace:
    mlp: Dict[int, np.ndarray] = field(default_factory=dict)
    heads: Dict[int, np.ndarray] = field(default_factory=dict)
    norms: Dict[str, np.ndarray] = field(default_factory=dict)
    residual_in: Dict[int, np.ndarray] = field(default_factory=dict)
    residual_out: Dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class UnitMasks:
    """Multiplicative masks over MLP neurons / query heads, keyed by layer."""
    neurons: Dict[int, np.ndarray] = field(default_factory=dict)
    heads: Dict[int, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class LossSpec:
    kind: str
    targets: Optional[np.ndarray] = None
    teacher_logits: Optional[np.ndarray] = None
    ce_weight: float = 0.0

    @classmethod
    def ce(cls, targets: np.ndarray) -> "LossSpec":
        return cls("ce", targets=np.asarray(targets))

    @classmethod
    def kl(cls, teacher_logits: np.ndarray, targets: np.ndarray = None,
           ce_weight: float = 0.0) -> "LossSpec":
        if ce_weight and targets is None:
            raise ConfigError("ce_weight > 0 requires targets")
        return cls("kl", targets=None if targets is None else np.asarray(targets),
                   teacher_logits=teacher_logits, ce_weight=float(ce_weight))


# ---------------------------------------------------------------------------
# building blocks

def rope_tables(seq_len: int, head_dim: int, dtype) -> Tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = ROPE_BASE ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    angles = np.outer(np.arange(seq_len, dtype=np.float64), inv_freq)
    angles = np.concatenate([angles, angles], axis=-1)
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def _rotate_half(x: np.ndarray) -> np.ndarray:
    x1, x2 = np.split(x, 2, axis=-1)
    return np.concatenate([-x2, x1], axis=-1)


def _rotate_half_transpose(x: np.ndarray) -> np.ndarray:
    x1, x2 = np.split(x, 2, axis=-1)
    return np.concatenate([x2, -x1], axis=-1)


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    return x * cos + _rotate_half(x) * sin


def _rope_backward(dy: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    return dy * cos + _rotate_half_transpose(dy * sin)


def _rms_norm(x, gain, eps, identity):
    if identity:
        inv = np.ones(x.shape[:-1] + (1,), dtype=x.dtype)
    else:
        inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    xhat = x * inv
    return xhat * gain, xhat, inv


def _rms_norm_backward(dn, xhat, inv, gain, identity):
    dgain = _flat(dn * xhat).sum(axis=0)
    dxhat = dn * gain
    if identity:
        return dxhat, dgain
    dx = inv * (dxhat - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    return dx, dgain


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def _output_matrix(params: ParamSet) -> np.ndarray:
    return params["embed.tok"] if params.config.tie_embeddings else params["head.out"]


def _check_tokens(tokens, cfg: ModelConfig) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] == 0:
        raise ShapeError(f"tokens must be a non-empty (batch, seq) array, got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ShapeError(f"tokens must be integers, got {tokens.dtype}")
    if tokens.shape[1] > cfg.context:
        raise SequenceTooLongError(
            f"sequence length {tokens.shape[1]} exceeds context {cfg.context}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise TokenRangeError(
            f"token ids must lie in [0, {cfg.vocab}), got [{tokens.min()}, {tokens.max()}]")
    return tokens.astype(np.int64, copy=False)


def _tap(store, key, full, magnitude, taps: TapSpec):
    if taps.aggregate:
        store[key] = magnitude().mean(axis=1, dtype=np.float64)
    else:
        store[key] = np.array(full, copy=True)


def _norm_tap(trace, site, n, xhat, taps):
    out = n if taps.norm_gain == "post" else xhat
    _tap(trace.norms, site, out, lambda: np.abs(out), taps)


# ---------------------------------------------------------------------------
# forward

def _layer_forward(params, i, x, cos, sin, causal, taps, trace, masks, norm_identity, keep_cache):
    cfg = params.config
    w = lambda name: params.tensors[f"layer.{i}.{name}"]
    B, T, _ = x.shape
    QH, G, D = cfg.query_heads, cfg.attention_groups, cfg.head_dim
    rep = cfg.group_size

    n1, xhat1, inv1 = _rms_norm(x, w("norm.attn"), cfg.norm_eps, norm_identity)
    if taps.norms:
        _norm_tap(trace, f"layer.{i}.norm.attn", n1, xhat1, taps)
    q = (n1 @ w("attn.q").T).reshape(B, T, QH, D).transpose(0, 2, 1, 3)
    k = (n1 @ w("attn.k").T).reshape(B, T, G, D).transpose(0, 2, 1, 3)
    v = (n1 @ w("attn.v").T).reshape(B, T, G, D).transpose(0, 2, 1, 3)
    qr = apply_rope(q, cos, sin)
    kr = apply_rope(k, cos, sin)
    kx = np.repeat(kr, rep, axis=1)
    vx = np.repeat(v, rep, axis=1)

    scale = 1.0 / math.sqrt(D)
    scores = (qr @ kx.transpose(0, 1, 3, 2)) * scale
    scores = np.where(causal, scores, -np.inf)
    probs = special.softmax(scores, axis=-1)
    heads_out = (probs @ vx).transpose(0, 2, 1, 3)
    if masks is not None and i in masks.heads:
        heads_out = heads_out * np.asarray(masks.heads[i], dtype=x.dtype)[None, None, :, None]
    if taps.heads:
        _tap(trace.heads, i, heads_out, lambda: np.linalg.norm(heads_out, axis=-1), taps)
    concat = heads_out.reshape(B, T, QH * D)
    x_mid = x + concat @ w("attn.o").T

    n2, xhat2, inv2 = _rms_norm(x_mid, w("norm.mlp"), cfg.norm_eps, norm_identity)
    if taps.norms:
        _norm_tap(trace, f"layer.{i}.norm.mlp", n2, xhat2, taps)
    gate = n2 @ w("mlp.gate").T
    up = n2 @ w("mlp.up").T
    sig = special.expit(gate)
    silu = gate * sig
    act = silu * up
    if masks is not None and i in masks.neurons:
        act = act * np.asarray(masks.neurons[i], dtype=x.dtype)
    if taps.mlp:
        _tap(trace.mlp, i, act, lambda: np.abs(act), taps)
    out = x_mid + act @ w("mlp.down").T

    cache = None
    if keep_cache:
        cache = dict(n1=n1, xhat1=xhat1, inv1=inv1, qr=qr, kx=kx, vx=vx, probs=probs,
                     concat=concat, n2=n2, xhat2=xhat2, inv2=inv2, gate=gate, up=up,
                     sig=sig, silu=silu, act=act)
    return out, cache


def _forward(params, tokens, taps, skip_layers, masks, norm_identity, keep_cache):
    cfg = params.config
    tokens = _check_tokens(tokens, cfg)
    T = tokens.shape[1]
    cos, sin = rope_tables(T, cfg.head_dim, params.dtype)
    causal = np.tril(np.ones((T, T), dtype=bool))
    skip = {int(i) for i in skip_layers}
    trace = ForwardTrace()

    x = params["embed.tok"][tokens]
    layer_caches = []
    for i in range(cfg.depth):
        if taps.residual:
            trace.residual_in[i] = x
        if i in skip:
            layer_caches.append(None)
        else:
            x, cache = _layer_forward(params, i, x, cos, sin, causal, taps, trace, masks,
                                      norm_identity, keep_cache)
            layer_caches.append(cache)
        if taps.residual:
            trace.residual_out[i] = x

    xf, xhat_f, inv_f = _rms_norm(x, params["final.norm"], cfg.norm_eps, norm_identity)
    if taps.norms:
        _norm_tap(trace, "final.norm", xf, xhat_f, taps)
    logits = xf @ _output_matrix(params).T

    cache = None
    if keep_cache:
        cache = dict(tokens=tokens, layers=layer_caches, xf=xf, xhat_f=xhat_f, inv_f=inv_f,
                     cos=cos, sin=sin)
    return logits, trace, cache


def forward(params: ParamSet, tokens, taps: TapSpec = None, *, skip_layers: Iterable[int] = (),
            unit_masks: UnitMasks = None, norm_identity: bool = False
            ) -> Tuple[np.ndarray, ForwardTrace]:
    """Logits of shape (batch, seq, vocab) plus the trace requested by ``taps``.

    ``skip_layers`` passes the residual stream through the listed layers unchanged.
    ``norm_identity`` disables RMS scaling (gains still apply), the test mode used
    by the masking oracles.
    """
    logits, trace, _ = _forward(params, tokens, taps or TapSpec(), skip_layers, unit_masks,
                                norm_identity, keep_cache=False)
    return logits, trace


# ---------------------------------------------------------------------------
# losses

def lm_loss(logits: np.ndarray, targets) -> float:
    """Mean next-token cross-entropy in nats/token."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not match targets {targets.shape}")
    logp = special.log_softmax(logits.astype(np.float64), axis=-1)
    picked = np.take_along_axis(logp, targets[..., None].astype(np.int64), axis=-1)
    return float(-picked.mean())


def forward_kl(teacher_logits: np.ndarray, student_logits: np.ndarray) -> float:
    """Mean over positions of KL(p_teacher || p_student), temperature 1."""
    if teacher_logits.shape != student_logits.shape:
        raise ShapeError(
            f"teacher logits {teacher_logits.shape} do not match student {student_logits.shape}")
    log_t = special.log_softmax(np.asarray(teacher_logits, dtype=np.float64), axis=-1)
    log_s = special.log_softmax(np.asarray(student_logits, dtype=np.float64), axis=-1)
    per_token = np.sum(np.exp(log_t) * (log_t - log_s), axis=-1)
    worst = float(per_token.min(initial=0.0))
    if worst < -KL_ROUNDING:
        raise DivergenceError(f"forward KL of {worst:.3e} is negative beyond rounding")
    return float(np.maximum(per_token, 0.0).mean())


def _ce_head(z64, targets):
    if z64.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {z64.shape} do not match targets {targets.shape}")
    n = targets.size
    logp = special.log_softmax(z64, axis=-1)
    idx = targets[..., None].astype(np.int64)
    loss = -np.take_along_axis(logp, idx, axis=-1).mean()
    grad = np.exp(logp)
    np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=-1) - 1.0, axis=-1)
    return loss, grad / n


def _loss_head(logits, spec: LossSpec):
    z64 = logits.astype(np.float64)
    if spec.kind == "ce":
        if spec.targets is None:
            raise ConfigError("ce loss requires targets")
        loss, grad = _ce_head(z64, spec.targets)
    elif spec.kind == "kl":
        teacher = np.asarray(spec.teacher_logits)
        if teacher.shape != logits.shape:
            raise ShapeError(f"teacher logits {teacher.shape} do not match student {logits.shape}")
        n = logits.shape[0] * logits.shape[1]
        loss = forward_kl(teacher, z64)
        grad = (special.softmax(z64, axis=-1)
                - special.softmax(teacher.astype(np.float64), axis=-1)) / n
        if spec.ce_weight:
            ce_loss, ce_grad = _ce_head(z64, spec.targets)
            loss = loss + spec.ce_weight * ce_loss
            grad = grad + spec.ce_weight * ce_grad
    else:
        raise ConfigError(f"unknown loss kind {spec.kind!r}")
    return float(loss), grad.astype(logits.dtype)


# ---------------------------------------------------------------------------
# backward

def _layer_backward(params, i, dout, c, cos, sin, grads, norm_identity):
    cfg = params.config
    w = lambda name: params.tensors[f"layer.{i}.{name}"]
    B, T, H = dout.shape
    QH, G, D = cfg.query_heads, cfg.attention_groups, cfg.head_dim
    rep = cfg.group_size
    name = lambda suffix: f"layer.{i}.{suffix}"

    # gated MLP
    grads[name("mlp.down")] = _flat(dout).T @ _flat(c["act"])
    d_act = dout @ w("mlp.down")
    d_up = d_act * c["silu"]
    sig, gate = c["sig"], c["gate"]
    d_gate = d_act * c["up"] * (sig * (1.0 + gate * (1.0 - sig)))
    grads[name("mlp.up")] = _flat(d_up).T @ _flat(c["n2"])
    grads[name("mlp.gate")] = _flat(d_gate).T @ _flat(c["n2"])
    dn2 = d_gate @ w("mlp.gate") + d_up @ w("mlp.up")
    dx_norm, grads[name("norm.mlp")] = _rms_norm_backward(
        dn2, c["xhat2"], c["inv2"], w("norm.mlp"), norm_identity)
    d_mid = dout + dx_norm

    # attention
    grads[name("attn.o")] = _flat(d_mid).T @ _flat(c["concat"])
    d_heads = (d_mid @ w("attn.o")).reshape(B, T, QH, D).transpose(0, 2, 1, 3)
    probs, vx, kx, qr = c["probs"], c["vx"], c["kx"], c["qr"]
    d_probs = d_heads @ vx.transpose(0, 1, 3, 2)
    d_vx = probs.transpose(0, 1, 3, 2) @ d_heads
    d_scores = probs * (d_probs - np.sum(d_probs * probs, axis=-1, keepdims=True))
    d_scores *= 1.0 / math.sqrt(D)
    d_qr = d_scores @ kx
    d_kx = d_scores.transpose(0, 1, 3, 2) @ qr
    d_kr = d_kx.reshape(B, G, rep, T, D).sum(axis=2)
    d_v = d_vx.reshape(B, G, rep, T, D).sum(axis=2)
    d_q = _rope_backward(d_qr, cos, sin)
    d_k = _rope_backward(d_kr, cos, sin)

    n1 = _flat(c["n1"])
    d_q = d_q.transpose(0, 2, 1, 3).reshape(B * T, QH * D)
    d_k = d_k.transpose(0, 2, 1, 3).reshape(B * T, G * D)
    d_v = d_v.transpose(0, 2, 1, 3).reshape(B * T, G * D)
    grads[name("attn.q")] = d_q.T @ n1
    grads[name("attn.k")] = d_k.T @ n1
    grads[name("attn.v")] = d_v.T @ n1
    dn1 = (d_q @ w("attn.q") + d_k @ w("attn.k") + d_v @ w("attn.v")).reshape(B, T, H)
    dx_norm, grads[name("norm.attn")] = _rms_norm_backward(
        dn1, c["xhat1"], c["inv1"], w("norm.attn"), norm_identity)
    return d_mid + dx_norm


def backward(params: ParamSet, tokens, loss_spec: LossSpec, *, norm_identity: bool = False,
             step: int = None) -> Tuple[float, GradSet]:
    """Loss and gradients for every parameter under a CE or forward-KL head."""
    cfg = params.config
    logits, _, cache = _forward(params, tokens, TapSpec(), (), None, norm_identity,
                                keep_cache=True)
    loss, d_logits = _loss_head(logits, loss_spec)
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}", step)

    grads = {}
    d_out = _flat(d_logits).T @ _flat(cache["xf"])
    dxf = d_logits @ _output_matrix(params)
    dx, grads["final.norm"] = _rms_norm_backward(
        dxf, cache["xhat_f"], cache["inv_f"], params["final.norm"], norm_identity)

    for i in reversed(range(cfg.depth)):
        layer_cache = cache["layers"][i]
        if layer_cache is not None:
            dx = _layer_backward(params, i, dx, layer_cache, cache["cos"], cache["sin"], grads,
                                 norm_identity)

    d_embed = np.zeros_like(params["embed.tok"])
    np.add.at(d_embed, cache["tokens"].reshape(-1), _flat(dx))
    if cfg.tie_embeddings:
        d_embed += d_out
    else:
        grads["head.out"] = d_out
    grads["embed.tok"] = d_embed

    ordered = {k: grads[k].astype(params[k].dtype, copy=False) for k in params.tensors}
    return loss, GradSet(ordered)


# ---------------------------------------------------------------------------
# scoring

def score_continuation(params: ParamSet, prefix, continuation, *,
                       skip_layers: Iterable[int] = ()) -> float:
    """Total log-likelihood of ``continuation`` given ``prefix`` (natural log).

    An empty prefix is read as a lone BOS.
    """
    prefix = np.asarray(prefix, dtype=np.int64).reshape(-1)
    continuation = np.asarray(continuation, dtype=np.int64).reshape(-1)
    if continuation.size == 0:
        return 0.0
    if prefix.size == 0:
        prefix = np.array([BOS_ID], dtype=np.int64)
    sequence = np.concatenate([prefix, continuation])
    if sequence.size > params.config.context:
        raise SequenceTooLongError(
            f"prefix + continuation length {sequence.size} exceeds context {params.config.context}")
    logits, _ = forward(params, sequence[None, :], skip_layers=skip_layers)
    logp = special.log_softmax(logits[0].astype(np.float64), axis=-1)
    positions = np.arange(prefix.size - 1, sequence.size - 1)
    return float(logp[positions, continuation].sum())
