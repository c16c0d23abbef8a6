"""Selective state-space block for the skip path.

A discretized linear recurrence with input-dependent step size and
projections: per step, h_t = Abar_t * h_{t-1} + Bbar_t * u_t and
y_t = C_t . h_t + D * u_t, wrapped in the usual pipeline of input
projection, causal depthwise convolution, smooth nonlinearity, the scan,
a multiplicative gate from a parallel projection branch, and an output
projection. The state matrix is parameterized as -softplus(raw) so the
continuous-time system is always stable, and the recurrence is strictly
causal by construction.

The scan itself is a single tape primitive: the forward loop stores the
state trajectory and the backward rule replays it in reverse, which
keeps the tape small and the training loop fast. Its correctness oracle
is an independent naive per-step recurrence in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ParameterError, ShapeError


@dataclass(frozen=True)
class SsmConfig:
    d_model: int
    d_state: int = 16
    d_conv: int = 4
    expand: int = 2

    def __post_init__(self):
        for name in ("d_model", "d_state", "d_conv", "expand"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be >= 1")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model


@dataclass
class SsmParams:
    w_in: Tensor  # d_model -> d_inner, main branch
    b_in: Tensor
    w_gate: Tensor  # d_model -> d_inner, multiplicative branch
    b_gate: Tensor
    conv_w: Tensor  # d_inner x d_conv, depthwise causal kernel
    conv_b: Tensor
    w_delta: Tensor  # d_inner -> d_inner, step-size projection
    b_delta: Tensor
    w_b: Tensor  # d_inner -> d_state
    w_c: Tensor  # d_inner -> d_state
    a_raw: Tensor  # d_inner x d_state; A = -softplus(a_raw) < 0
    d_skip: Tensor  # d_inner
    w_out: Tensor  # d_inner -> d_model
    b_out: Tensor

    def named(self, prefix: str):
        for field in (
            "w_in", "b_in", "w_gate", "b_gate", "conv_w", "conv_b",
            "w_delta", "b_delta", "w_b", "w_c", "a_raw", "d_skip",
            "w_out", "b_out",
        ):
            yield f"{prefix}.{field}", getattr(self, field)


def init_ssm_params(cfg: SsmConfig, rng: np.random.Generator) -> SsmParams:
    dm, di, ds = cfg.d_model, cfg.d_inner, cfg.d_state

    def uniform(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    zeros = lambda shape: Tensor(np.zeros(shape), requires_grad=True)

    # A starts near -(1..d_state) per inner channel; raw = softplus^-1(k)
    ladder = np.arange(1, ds + 1, dtype=np.float64)
    a_raw = np.broadcast_to(np.log(np.expm1(ladder)), (di, ds)).copy()

    # step sizes start log-uniform in [1e-3, 1e-1] through the softplus
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=di))
    b_delta = np.log(np.expm1(dt))

    return SsmParams(
        w_in=uniform(dm, (dm, di)), b_in=zeros(di),
        w_gate=uniform(dm, (dm, di)), b_gate=zeros(di),
        conv_w=uniform(cfg.d_conv, (di, cfg.d_conv)), conv_b=zeros(di),
        w_delta=uniform(di, (di, di)),
        b_delta=Tensor(b_delta, requires_grad=True),
        w_b=uniform(di, (di, ds)), w_c=uniform(di, (di, ds)),
        a_raw=Tensor(a_raw, requires_grad=True),
        d_skip=Tensor(np.ones(di), requires_grad=True),
        w_out=uniform(di, (di, dm)), b_out=zeros(dm),
    )


def discretize(a, b, delta):
    """Zero-order-hold step: Abar = exp(delta * A), Bbar = delta * B.

    Shapes broadcast; the caller aligns axes. ``delta`` must be strictly
    positive (it is a step size).
    """
    a, b, delta = ad.as_tensor(a), ad.as_tensor(b), ad.as_tensor(delta)
    if (delta.data <= 0).any():
        raise ParameterError("discretize requires delta > 0")
    abar = ad.exp(ad.mul(delta, a))
    bbar = ad.mul(delta, b)
    return abar, bbar


def scan_recurrence(abar: Tensor, bu: Tensor, c: Tensor) -> Tensor:
    """Run h_t = abar_t * h_{t-1} + bu_t, y_t = sum_s c_t[s] * h_t[:, s].

    ``abar`` and ``bu`` are B x L x d_inner x d_state, ``c`` is
    B x L x d_state; the output is B x L x d_inner. Recorded as one tape
    node; the backward rule walks the stored state trajectory in reverse.
    """
    ab, bud, cd = abar.data, bu.data, c.data
    if ab.shape != bud.shape or ab.ndim != 4:
        raise ShapeError("abar and bu must share a B x L x d_inner x d_state shape")
    bsz, length, d_inner, d_state = ab.shape
    if cd.shape != (bsz, length, d_state):
        raise ShapeError("c must be B x L x d_state")

    states = np.empty_like(ab)
    h = np.zeros((bsz, d_inner, d_state))
    for t in range(length):
        h = ab[:, t] * h + bud[:, t]
        states[:, t] = h
    y = np.einsum("blcs,bls->blc", states, cd)
    out = Tensor(y)

    def backward(g):
        g_abar = np.zeros_like(ab) if abar.requires_grad else None
        g_bu = np.zeros_like(bud) if bu.requires_grad else None
        g_c = np.zeros_like(cd) if c.requires_grad else None
        gh = np.zeros((bsz, d_inner, d_state))
        for t in range(length - 1, -1, -1):
            gh = gh + g[:, t, :, None] * cd[:, t, None, :]
            if g_c is not None:
                g_c[:, t] = np.einsum("bc,bcs->bs", g[:, t], states[:, t])
            if g_abar is not None:
                h_prev = states[:, t - 1] if t > 0 else 0.0
                g_abar[:, t] = gh * h_prev
            if g_bu is not None:
                g_bu[:, t] = gh
            gh = gh * ab[:, t]
        if g_abar is not None:
            ad.accumulate(abar, g_abar)
        if g_bu is not None:
            ad.accumulate(bu, g_bu)
        if g_c is not None:
            ad.accumulate(c, g_c)

    return ad.record(out, (abar, bu, c), backward)


def selective_scan(u: Tensor, params: SsmParams) -> Tensor:
    """Input-dependent state-space recurrence over a B x L x d_inner signal.

    Step size, input map and output map are projections of ``u`` itself;
    the state matrix comes from the negative parameterization.
    """
    if u.ndim != 3:
        raise ShapeError("selective_scan expects B x L x d_inner input")
    bsz, length, d_inner = u.data.shape

    delta = ad.softplus(ad.add(ad.matmul(u, params.w_delta), params.b_delta))
    b_t = ad.matmul(u, params.w_b)  # B x L x d_state
    c_t = ad.matmul(u, params.w_c)  # B x L x d_state
    a = ad.neg(ad.softplus(params.a_raw))  # d_inner x d_state, strictly negative

    delta4 = ad.reshape(delta, (bsz, length, d_inner, 1))
    abar, bbar = discretize(a, ad.reshape(b_t, (bsz, length, 1, -1)), delta4)
    bu = ad.mul(bbar, ad.reshape(u, (bsz, length, d_inner, 1)))
    y = scan_recurrence(abar, bu, c_t)
    return ad.add(y, ad.mul(u, params.d_skip))


def causal_depthwise_conv(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Per-channel causal convolution; output at t sees inputs <= t only."""
    bsz, length, channels = x.data.shape
    width = kernel.data.shape[1]
    padded = ad.concat([ad.Tensor(np.zeros((bsz, width - 1, channels))), x], axis=1)
    total = None
    for k in range(width):
        # kernel tap k multiplies the input shifted right by (width-1-k)
        tap = ad.reshape(ad.slice_axis(kernel, 1, k, k + 1), (channels,))
        piece = ad.mul(ad.slice_axis(padded, 1, k, k + length), tap)
        total = piece if total is None else ad.add(total, piece)
    return ad.add(total, bias)


def mamba_block(x: Tensor, cfg: SsmConfig, params: SsmParams) -> Tensor:
    """Projection, causal conv, scan, gate, projection back to d_model."""
    if x.ndim != 3 or x.data.shape[-1] != cfg.d_model:
        raise ShapeError(
            f"mamba_block expects B x L x {cfg.d_model}, got {x.data.shape}"
        )
    u = ad.add(ad.matmul(x, params.w_in), params.b_in)
    u = ad.silu(causal_depthwise_conv(u, params.conv_w, params.conv_b))
    y = selective_scan(u, params)
    gate = ad.silu(ad.add(ad.matmul(x, params.w_gate), params.b_gate))
    return ad.add(ad.matmul(ad.mul(y, gate), params.w_out), params.b_out)
