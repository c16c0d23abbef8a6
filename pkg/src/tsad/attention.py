"""Sparse attention layer with a learnable Gaussian prior association.

Two row-stochastic association maps come out of every layer:

* the prior association, a Gaussian kernel over temporal distance |i-j|
  with a learnable per-head, per-position scale (kept dense), and
* the series association, scaled dot-product attention normalized only
  over the local window around each query and exactly zero outside it.

Their per-position divergence is the discrepancy signal the trainer and
the anomaly criterion consume.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ParameterError, ShapeError

SIGMA_FLOOR = 1e-4


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    block_size: int
    dropout: float = 0.0
    scale_by_d_model: bool = True  # divide scores by sqrt(d_model), not sqrt(d_head)

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ShapeError("d_model must be divisible by n_heads")
        if self.block_size < 1:
            raise ShapeError("block_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ShapeError("dropout must lie in [0, 1)")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class AttentionMaps:
    prior: ad.Tensor  # ... x heads x N x N, rows sum to 1
    series: ad.Tensor  # ... x heads x N x N, zero outside the local window
    sigma: ad.Tensor  # ... x heads x N, strictly positive


@dataclass
class AttentionParams:
    wq: ad.Tensor
    bq: ad.Tensor
    wk: ad.Tensor
    bk: ad.Tensor
    wv: ad.Tensor
    bv: ad.Tensor
    wo: ad.Tensor
    bo: ad.Tensor
    w_sigma: ad.Tensor
    b_sigma: ad.Tensor
    ln_gamma: ad.Tensor
    ln_beta: ad.Tensor

    def named(self, prefix: str):
        for field in (
            "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
            "w_sigma", "b_sigma", "ln_gamma", "ln_beta",
        ):
            yield f"{prefix}.{field}", getattr(self, field)


def init_attention_params(cfg: AttentionConfig, rng: np.random.Generator) -> AttentionParams:
    dm = cfg.d_model

    def uniform(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return ad.Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    zeros = lambda shape: ad.Tensor(np.zeros(shape), requires_grad=True)
    return AttentionParams(
        wq=uniform(dm, (dm, dm)), bq=zeros(dm),
        wk=uniform(dm, (dm, dm)), bk=zeros(dm),
        wv=uniform(dm, (dm, dm)), bv=zeros(dm),
        wo=uniform(dm, (dm, dm)), bo=zeros(dm),
        w_sigma=uniform(dm, (dm, cfg.n_heads)), b_sigma=zeros(cfg.n_heads),
        ln_gamma=ad.Tensor(np.ones(dm), requires_grad=True),
        ln_beta=zeros(dm),
    )


def local_window(i: int, n: int, block_size: int) -> list:
    """Key indices each query may attend to: |j - i| <= block_size / 2."""
    if not 0 <= i < n:
        raise ShapeError(f"position {i} outside [0, {n})")
    half = block_size / 2.0
    return [j for j in range(n) if abs(j - i) <= half]


def local_window_mask(n: int, block_size: int) -> np.ndarray:
    idx = np.arange(n)
    return np.abs(idx[None, :] - idx[:, None]) <= block_size / 2.0


def prior_association(sigma: ad.Tensor, n: int) -> ad.Tensor:
    """Row-normalized Gaussian kernel over |i - j|, one scale per row.

    ``sigma`` has shape (..., n); the result appends an axis of keys,
    (..., n, n). Rows sum to 1 exactly up to float rounding because the
    diagonal contributes exp(0) = 1 to every denominator.
    """
    if (np.asarray(sigma.data) <= 0).any():
        raise ParameterError("prior association requires strictly positive sigma")
    if sigma.data.shape[-1] != n:
        raise ShapeError("sigma must provide one scale per position")
    idx = np.arange(n, dtype=np.float64)
    dist2 = (idx[:, None] - idx[None, :]) ** 2  # constant, no gradient
    s = ad.reshape(sigma, sigma.data.shape + (1,))
    kernel = ad.exp(ad.neg(ad.div(dist2, ad.mul(2.0, ad.mul(s, s)))))
    return ad.div(kernel, ad.tsum(kernel, axis=-1, keepdims=True))


def sparse_series_association(
    q: ad.Tensor, k: ad.Tensor, block_size: int, scale_dim: int
) -> ad.Tensor:
    """Scaled dot-product attention normalized over the local window only.

    Entries outside the window are exactly zero. ``scale_dim`` is the
    dimension whose square root divides the scores (the model dimension
    by default, switchable to the per-head dimension).
    """
    if q.data.shape != k.data.shape:
        raise ShapeError("query and key shapes must agree")
    n = q.data.shape[-2]
    scores = ad.mul(
        ad.matmul(q, ad.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))),
        1.0 / np.sqrt(scale_dim),
    )
    return ad.softmax_rows(scores, mask=local_window_mask(n, block_size))


def anomaly_sparse_attention(
    x: ad.Tensor,
    cfg: AttentionConfig,
    params: AttentionParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
):
    """Full layer: sparse attention, value mixing, residual, layer norm.

    Returns the transformed sequence and the maps (prior, series, sigma)
    the discrepancy computation needs. Shapes: x is B x N x d_model, the
    maps are B x heads x N x N.
    """
    b, n, dm = x.data.shape
    if dm != cfg.d_model:
        raise ShapeError(f"input width {dm} does not match d_model {cfg.d_model}")
    h, dh = cfg.n_heads, cfg.d_head

    def heads(t):
        return ad.transpose(ad.reshape(t, (b, n, h, dh)), (0, 2, 1, 3))

    q = heads(ad.add(ad.matmul(x, params.wq), params.bq))
    k = heads(ad.add(ad.matmul(x, params.wk), params.bk))
    v = heads(ad.add(ad.matmul(x, params.wv), params.bv))

    scale_dim = cfg.d_model if cfg.scale_by_d_model else dh
    series = sparse_series_association(q, k, cfg.block_size, scale_dim)

    # one learnable scale per head per position, softplus keeps it positive
    sigma = ad.add(
        ad.softplus(ad.add(ad.matmul(x, params.w_sigma), params.b_sigma)),
        SIGMA_FLOOR,
    )  # B x N x heads
    sigma = ad.transpose(sigma, (0, 2, 1))  # B x heads x N
    prior = prior_association(sigma, n)

    ctx = ad.matmul(series, v)  # B x h x N x dh
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, n, dm))
    ctx = ad.add(ad.matmul(ctx, params.wo), params.bo)
    if training and cfg.dropout > 0.0:
        if rng is None:
            raise ParameterError("dropout in training mode needs a generator")
        keep = (rng.random(ctx.data.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
        ctx = ad.mul(ctx, ad.Tensor(keep))
    out = ad.layer_norm(ad.add(x, ctx), params.ln_gamma, params.ln_beta)
    return out, AttentionMaps(prior=prior, series=series, sigma=sigma)
