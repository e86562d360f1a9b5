"""Small transformer encoder in plain numpy (fp64) with exact analytic
gradients and a finite-difference verification harness.

Forward passes cache every intermediate needed by the backward pass, so
encoder_backward is exact reverse mode, not an approximation. All shapes are
batch-first: (B, Seq, D).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DataError, NumericError

LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass
class EncoderConfig:
    depth: int = 5
    heads: int = 8
    model_dim: int = 256
    mlp_ratio: float = 1.0
    activation: str = "gelu"
    dropout: float = 0.0
    norm_placement: str = "pre"

    def __post_init__(self) -> None:
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        if self.heads < 1 or self.model_dim % self.heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} must be divisible by heads {self.heads}"
            )
        if self.activation != "gelu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if not (0 <= self.dropout < 1):
            raise ConfigError("dropout must be in [0, 1)")
        if self.norm_placement not in ("pre", "post"):
            raise ConfigError("norm_placement must be 'pre' or 'post'")
        if self.mlp_hidden < 1:
            raise ConfigError("mlp_ratio too small: hidden dim would be < 1")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.model_dim))


LAYER_PARAM_KEYS = (
    "ln1.gamma", "ln1.beta",
    "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
    "attn.wo", "attn.bo",
    "ln2.gamma", "ln2.beta",
    "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
)


def init_encoder_params(config: EncoderConfig, seed: int = 0) -> list[dict[str, np.ndarray]]:
    """Per-layer parameter dicts: LN scales 1 / offsets 0, linear weights
    ~ N(0, 0.02^2), biases 0."""
    rng = np.random.default_rng(seed)
    D, H = config.model_dim, config.mlp_hidden
    layers = []
    for _ in range(config.depth):
        layers.append(
            {
                "ln1.gamma": np.ones(D),
                "ln1.beta": np.zeros(D),
                "attn.wq": rng.normal(0.0, 0.02, size=(D, D)),
                "attn.bq": np.zeros(D),
                "attn.wk": rng.normal(0.0, 0.02, size=(D, D)),
                "attn.bk": np.zeros(D),
                "attn.wv": rng.normal(0.0, 0.02, size=(D, D)),
                "attn.bv": np.zeros(D),
                "attn.wo": rng.normal(0.0, 0.02, size=(D, D)),
                "attn.bo": np.zeros(D),
                "ln2.gamma": np.ones(D),
                "ln2.beta": np.zeros(D),
                "mlp.w1": rng.normal(0.0, 0.02, size=(D, H)),
                "mlp.b1": np.zeros(H),
                "mlp.w2": rng.normal(0.0, 0.02, size=(H, D)),
                "mlp.b2": np.zeros(D),
            }
        )
    return layers


# ---------------------------------------------------------------------------
# Primitive ops, each returning (value, cache)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact erf formulation: x * Phi(x)."""
    return x * 0.5 * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    phi = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * phi


def layernorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = centered * inv
    return gamma * xhat + beta, (xhat, inv, gamma)


def layernorm_backward(d_out: np.ndarray, cache):
    xhat, inv, gamma = cache
    d_gamma = (d_out * xhat).sum(axis=tuple(range(d_out.ndim - 1)))
    d_beta = d_out.sum(axis=tuple(range(d_out.ndim - 1)))
    d_xhat = d_out * gamma
    mean_dxhat = d_xhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (d_xhat * xhat).mean(axis=-1, keepdims=True)
    d_x = inv * (d_xhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return d_x, d_gamma, d_beta


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    B, S, D = x.shape
    return x.reshape(B, S, heads, D // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    B, h, S, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, S, h * dh)


def attention_forward(
    x: np.ndarray,
    params: dict[str, np.ndarray],
    config: EncoderConfig,
    attn_mask: np.ndarray | None = None,
):
    """softmax(Q K^T / sqrt(d_head)) V per head, merged and output-projected.
    `attn_mask`, if given, is added to the scores (broadcast to (B,h,S,S))."""
    q = _split_heads(x @ params["attn.wq"] + params["attn.bq"], config.heads)
    k = _split_heads(x @ params["attn.wk"] + params["attn.bk"], config.heads)
    v = _split_heads(x @ params["attn.wv"] + params["attn.bv"], config.heads)
    scale = 1.0 / np.sqrt(config.head_dim)
    scores = np.einsum("bhsd,bhtd->bhst", q, k) * scale
    if attn_mask is not None:
        scores = scores + attn_mask
    weights = softmax(scores)
    context = np.einsum("bhst,bhtd->bhsd", weights, v)
    merged = _merge_heads(context)
    out = merged @ params["attn.wo"] + params["attn.bo"]
    cache = (x, q, k, v, weights, merged, scale)
    return out, cache


def attention_backward(d_out: np.ndarray, cache, params: dict[str, np.ndarray], config: EncoderConfig):
    x, q, k, v, weights, merged, scale = cache
    grads = {}
    grads["attn.wo"] = np.einsum("bsd,bse->de", merged, d_out)
    grads["attn.bo"] = d_out.sum(axis=(0, 1))
    d_merged = d_out @ params["attn.wo"].T
    d_context = _split_heads(d_merged, config.heads)
    d_weights = np.einsum("bhsd,bhtd->bhst", d_context, v)
    d_v = np.einsum("bhst,bhsd->bhtd", weights, d_context)
    # softmax jacobian: dS = A * (dA - sum_j dA_j A_j)
    inner = (d_weights * weights).sum(axis=-1, keepdims=True)
    d_scores = weights * (d_weights - inner)
    d_q = np.einsum("bhst,bhtd->bhsd", d_scores, k) * scale
    d_k = np.einsum("bhst,bhsd->bhtd", d_scores, q) * scale

    d_x = np.zeros_like(x)
    for name, dh in (("q", d_q), ("k", d_k), ("v", d_v)):
        flat = _merge_heads(dh)
        w = params[f"attn.w{name}"]
        grads[f"attn.w{name}"] = np.einsum("bsd,bse->de", x, flat)
        grads[f"attn.b{name}"] = flat.sum(axis=(0, 1))
        d_x += flat @ w.T
    return d_x, grads


def mlp_forward(x: np.ndarray, params: dict[str, np.ndarray]):
    pre = x @ params["mlp.w1"] + params["mlp.b1"]
    act = gelu(pre)
    out = act @ params["mlp.w2"] + params["mlp.b2"]
    return out, (x, pre, act)


def mlp_backward(d_out: np.ndarray, cache, params: dict[str, np.ndarray]):
    x, pre, act = cache
    grads = {
        "mlp.w2": np.einsum("bsh,bsd->hd", act, d_out),
        "mlp.b2": d_out.sum(axis=(0, 1)),
    }
    d_act = d_out @ params["mlp.w2"].T
    d_pre = d_act * gelu_grad(pre)
    grads["mlp.w1"] = np.einsum("bsd,bsh->dh", x, d_pre)
    grads["mlp.b1"] = d_pre.sum(axis=(0, 1))
    d_x = d_pre @ params["mlp.w1"].T
    return d_x, grads


def _dropout_forward(x: np.ndarray, rate: float, rng: np.random.Generator | None):
    if rate == 0.0 or rng is None:
        return x, None
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    return x * keep * scale, (keep, scale)


def _dropout_backward(d_out: np.ndarray, cache):
    if cache is None:
        return d_out
    keep, scale = cache
    return d_out * keep * scale


# ---------------------------------------------------------------------------
# Full encoder


@dataclass
class EncoderCache:
    config: EncoderConfig
    layers: list = field(default_factory=list)


def encoder_forward(
    x: np.ndarray,
    layers: list[dict[str, np.ndarray]],
    config: EncoderConfig,
    attn_mask: np.ndarray | None = None,
    dropout_rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, EncoderCache]:
    """Run `depth` residual blocks. Pre-norm: x + Attn(LN1(x)) then
    + MLP(LN2(.)), with no final normalization, so depth 0 is the identity.
    Post-norm: LN1(x + Attn(x)) then LN2(. + MLP(.)).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != config.model_dim:
        raise DataError(f"encoder input must be (B, Seq, {config.model_dim})")
    if len(layers) != config.depth:
        raise ConfigError(f"{len(layers)} layer params for depth {config.depth}")
    rng = dropout_rng if config.dropout > 0 else None
    cache = EncoderCache(config)
    for i, params in enumerate(layers):
        if config.norm_placement == "pre":
            normed1, ln1_cache = layernorm_forward(x, params["ln1.gamma"], params["ln1.beta"])
            attn_out, attn_cache = attention_forward(normed1, params, config, attn_mask)
            attn_out, drop1 = _dropout_forward(attn_out, config.dropout, rng)
            mid = x + attn_out
            normed2, ln2_cache = layernorm_forward(mid, params["ln2.gamma"], params["ln2.beta"])
            mlp_out, mlp_cache = mlp_forward(normed2, params)
            mlp_out, drop2 = _dropout_forward(mlp_out, config.dropout, rng)
            out = mid + mlp_out
        else:
            attn_out, attn_cache = attention_forward(x, params, config, attn_mask)
            attn_out, drop1 = _dropout_forward(attn_out, config.dropout, rng)
            normed1, ln1_cache = layernorm_forward(x + attn_out, params["ln1.gamma"], params["ln1.beta"])
            mlp_out, mlp_cache = mlp_forward(normed1, params)
            mlp_out, drop2 = _dropout_forward(mlp_out, config.dropout, rng)
            normed2, ln2_cache = layernorm_forward(normed1 + mlp_out, params["ln2.gamma"], params["ln2.beta"])
            out = normed2
        if not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite activations after encoder layer {i}")
        cache.layers.append((ln1_cache, attn_cache, drop1, ln2_cache, mlp_cache, drop2))
        x = out
    return x, cache


def encoder_backward(
    d_out: np.ndarray,
    cache: EncoderCache,
    layers: list[dict[str, np.ndarray]],
) -> tuple[np.ndarray, list[dict[str, np.ndarray]]]:
    """Exact reverse-mode pass; returns (d_input, per-layer grads)."""
    if len(cache.layers) != len(layers):
        raise DataError("cache does not match layer stack")
    config = cache.config
    d_x = np.asarray(d_out, dtype=np.float64)
    all_grads: list[dict[str, np.ndarray]] = [dict() for _ in layers]
    for i in range(len(layers) - 1, -1, -1):
        params = layers[i]
        ln1_cache, attn_cache, drop1, ln2_cache, mlp_cache, drop2 = cache.layers[i]
        grads = all_grads[i]
        if config.norm_placement == "pre":
            # out = mid + mlp(ln2(mid))
            d_mlp_out = _dropout_backward(d_x, drop2)
            d_normed2, mlp_grads = mlp_backward(d_mlp_out, mlp_cache, params)
            grads.update(mlp_grads)
            d_mid, d_g2, d_b2 = layernorm_backward(d_normed2, ln2_cache)
            d_mid = d_mid + d_x
            grads["ln2.gamma"], grads["ln2.beta"] = d_g2, d_b2
            # mid = x + attn(ln1(x))
            d_attn_out = _dropout_backward(d_mid, drop1)
            d_normed1, attn_grads = attention_backward(d_attn_out, attn_cache, params, config)
            grads.update(attn_grads)
            d_x_from_ln1, d_g1, d_b1 = layernorm_backward(d_normed1, ln1_cache)
            grads["ln1.gamma"], grads["ln1.beta"] = d_g1, d_b1
            d_x = d_mid + d_x_from_ln1
        else:
            # out = ln2(normed1 + mlp(normed1))
            d_sum2, d_g2, d_b2 = layernorm_backward(d_x, ln2_cache)
            grads["ln2.gamma"], grads["ln2.beta"] = d_g2, d_b2
            d_mlp_out = _dropout_backward(d_sum2, drop2)
            d_normed1, mlp_grads = mlp_backward(d_mlp_out, mlp_cache, params)
            grads.update(mlp_grads)
            d_normed1 = d_normed1 + d_sum2
            # normed1 = ln1(x + attn(x))
            d_sum1, d_g1, d_b1 = layernorm_backward(d_normed1, ln1_cache)
            grads["ln1.gamma"], grads["ln1.beta"] = d_g1, d_b1
            d_attn_out = _dropout_backward(d_sum1, drop1)
            d_x_attn, attn_grads = attention_backward(d_attn_out, attn_cache, params, config)
            grads.update(attn_grads)
            d_x = d_sum1 + d_x_attn
    return d_x, all_grads


# ---------------------------------------------------------------------------
# Finite-difference harness


@dataclass
class GradCheckEntry:
    name: str
    coordinate: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: GradCheckEntry | None
    entries: list[GradCheckEntry]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _relative_error(a: float, n: float) -> float:
    # the 1e-3 floor turns the quotient into an absolute error for vanishing
    # gradients, keeping finite-difference noise from reading as failure
    return abs(a - n) / max(abs(a) + abs(n), 1e-3)


def grad_check(
    fn,
    point: dict[str, np.ndarray],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_coords_per_tensor: int | None = 200,
    seed: int = 0,
) -> GradCheckReport:
    """Compare fn's analytic gradients against central differences.

    fn(point) must return (scalar value, gradient dict matching point).
    Large tensors are subsampled to `max_coords_per_tensor` coordinates with
    a seeded rng; the report carries the worst coordinate found.
    """
    _, analytic = fn(point)
    missing = set(point) - set(analytic)
    if missing:
        raise DataError(f"fn returned no gradient for: {sorted(missing)}")
    rng = np.random.default_rng(seed)
    entries: list[GradCheckEntry] = []
    for name in sorted(point):
        tensor = point[name]
        size = tensor.size
        if size == 0:
            continue
        if max_coords_per_tensor is not None and size > max_coords_per_tensor:
            flat_ids = rng.choice(size, size=max_coords_per_tensor, replace=False)
        else:
            flat_ids = np.arange(size)
        grad_flat = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        for flat in flat_ids:
            coord = np.unravel_index(int(flat), tensor.shape)
            original = tensor[coord]
            tensor[coord] = original + step
            plus = fn(point)[0]
            tensor[coord] = original - step
            minus = fn(point)[0]
            tensor[coord] = original
            numeric = (plus - minus) / (2.0 * step)
            entries.append(
                GradCheckEntry(
                    name=name,
                    coordinate=coord,
                    analytic=float(grad_flat[flat]),
                    numeric=float(numeric),
                    rel_err=_relative_error(float(grad_flat[flat]), float(numeric)),
                )
            )
    if not entries:
        raise DataError("nothing to check: empty point")
    worst = max(entries, key=lambda e: e.rel_err)
    return GradCheckReport(worst.rel_err, worst, entries, tolerance)
