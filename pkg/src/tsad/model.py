"""Stacked reconstruction model with an adaptive gated skip path.

Each block runs sparse attention, feeds the result through the
state-space skip path, renormalizes the skip sum against the block's
original input, and blends the two routes with a sigmoid gate:

    x_att            = attention layer (residual + layer norm inside)
    x_mamba          = state-space block over x_att
    x_skip           = LayerNorm(x_mamba + x_orig)
    g                = sigmoid(W [x_att ; x_skip] + b)
    x_adapt          = g * x_skip + (1 - g) * x_att
    block output     = LayerNorm(x_adapt + FFN(x_adapt))

The block output becomes both the next block's input and its x_orig.
The stack is framed by a linear embedding with fixed sinusoidal position
codes, an optional final layer norm, and a linear head back to the input
width. Association maps from every layer are returned for scoring.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import attention as attn
from . import ssm
from .autodiff import Tensor
from .errors import ContractError, ShapeError

CHECKPOINT_MAGIC = b"TSADCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    window: int
    input_dim: int
    d_model: int = 64
    n_heads: int = 4
    e_layers: int = 2
    block_size: int = 20
    d_state: int = 16
    d_conv: int = 4
    expand: int = 2
    dropout: float = 0.0
    seed: int = 0
    scale_by_d_model: bool = True
    final_norm: bool = True

    def __post_init__(self):
        if self.e_layers < 1:
            raise ShapeError("e_layers must be >= 1")
        for name in ("window", "input_dim", "d_model", "n_heads", "block_size"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be >= 1")

    def attention_config(self) -> attn.AttentionConfig:
        return attn.AttentionConfig(
            d_model=self.d_model,
            n_heads=self.n_heads,
            block_size=self.block_size,
            dropout=self.dropout,
            scale_by_d_model=self.scale_by_d_model,
        )

    def ssm_config(self) -> ssm.SsmConfig:
        return ssm.SsmConfig(
            d_model=self.d_model,
            d_state=self.d_state,
            d_conv=self.d_conv,
            expand=self.expand,
        )


@dataclass
class GateParams:
    w: Tensor  # 2*d_model -> d_model
    b: Tensor

    def named(self, prefix):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


@dataclass
class FfnParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor

    def named(self, prefix):
        for f in ("w1", "b1", "w2", "b2", "ln_gamma", "ln_beta"):
            yield f"{prefix}.{f}", getattr(self, f)


@dataclass
class LayerParams:
    attention: attn.AttentionParams
    state_space: ssm.SsmParams
    skip_gamma: Tensor  # layer norm after the skip residual
    skip_beta: Tensor
    gate: GateParams
    ffn: FfnParams

    def named(self, prefix):
        yield from self.attention.named(f"{prefix}.attn")
        yield from self.state_space.named(f"{prefix}.ssm")
        yield f"{prefix}.skip_gamma", self.skip_gamma
        yield f"{prefix}.skip_beta", self.skip_beta
        yield from self.gate.named(f"{prefix}.gate")
        yield from self.ffn.named(f"{prefix}.ffn")


@dataclass
class ModelParams:
    embed_w: Tensor
    embed_b: Tensor
    layers: list
    final_gamma: Tensor
    final_beta: Tensor
    out_w: Tensor
    out_b: Tensor

    def named(self):
        yield "embed.w", self.embed_w
        yield "embed.b", self.embed_b
        for i, layer in enumerate(self.layers):
            yield from layer.named(f"layers.{i}")
        yield "final.gamma", self.final_gamma
        yield "final.beta", self.final_beta
        yield "out.w", self.out_w
        yield "out.b", self.out_b

    def zero_grads(self):
        for _, t in self.named():
            t.grad = None

    def clone(self) -> "ModelParams":
        """Deep copy of all parameter values (gradients not carried)."""
        import copy

        def dup(t):
            return Tensor(np.array(t.data, copy=True), requires_grad=t.requires_grad)

        new = copy.copy(self)
        new.embed_w, new.embed_b = dup(self.embed_w), dup(self.embed_b)
        new.final_gamma, new.final_beta = dup(self.final_gamma), dup(self.final_beta)
        new.out_w, new.out_b = dup(self.out_w), dup(self.out_b)
        new.layers = []
        for layer in self.layers:
            nl = copy.copy(layer)
            nl.attention = copy.copy(layer.attention)
            nl.state_space = copy.copy(layer.state_space)
            nl.gate = copy.copy(layer.gate)
            nl.ffn = copy.copy(layer.ffn)
            for obj in (nl.attention, nl.state_space, nl.gate, nl.ffn):
                for f in obj.__dataclass_fields__:
                    setattr(obj, f, dup(getattr(obj, f)))
            nl.skip_gamma, nl.skip_beta = dup(layer.skip_gamma), dup(layer.skip_beta)
            new.layers.append(nl)
        return new


@dataclass
class ForwardOutput:
    recon: Tensor  # B x W x d, the adaptively fused reconstruction
    series_list: list = field(default_factory=list)
    prior_list: list = field(default_factory=list)
    sigma_list: list = field(default_factory=list)


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Fixed sinusoidal position codes."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(angle[:, 0::2])
    pe[:, 1::2] = np.cos(angle[:, 1::2])
    return pe


def init_model_params(cfg: ModelConfig) -> ModelParams:
    rng = np.random.default_rng(cfg.seed)
    dm, d = cfg.d_model, cfg.input_dim

    def uniform(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    zeros = lambda shape: Tensor(np.zeros(shape), requires_grad=True)
    ones = lambda shape: Tensor(np.ones(shape), requires_grad=True)

    layers = []
    for _ in range(cfg.e_layers):
        layers.append(
            LayerParams(
                attention=attn.init_attention_params(cfg.attention_config(), rng),
                state_space=ssm.init_ssm_params(cfg.ssm_config(), rng),
                skip_gamma=ones(dm),
                skip_beta=zeros(dm),
                # gate bias starts at zero so the blend opens at 1/2
                gate=GateParams(w=uniform(2 * dm, (2 * dm, dm)), b=zeros(dm)),
                ffn=FfnParams(
                    w1=uniform(dm, (dm, 4 * dm)),
                    b1=zeros(4 * dm),
                    w2=uniform(4 * dm, (4 * dm, dm)),
                    b2=zeros(dm),
                    ln_gamma=ones(dm),
                    ln_beta=zeros(dm),
                ),
            )
        )
    return ModelParams(
        embed_w=uniform(d, (d, dm)),
        embed_b=zeros(dm),
        layers=layers,
        final_gamma=ones(dm),
        final_beta=zeros(dm),
        out_w=uniform(dm, (dm, d)),
        out_b=zeros(d),
    )


def gate(x: Tensor, x_skip: Tensor, gate_params: GateParams):
    """Elementwise blend x_adapt = g * x_skip + (1 - g) * x.

    The gating factor g = sigmoid(W [x ; x_skip] + b) lies in (0, 1);
    near 1 the skip path dominates, near 0 the main path passes through.
    """
    if x.data.shape != x_skip.data.shape:
        raise ShapeError("gate inputs must share a shape")
    g = ad.sigmoid(
        ad.add(ad.matmul(ad.concat([x, x_skip], axis=-1), gate_params.w), gate_params.b)
    )
    one_minus = ad.sub(1.0, g)
    x_adapt = ad.add(ad.mul(g, x_skip), ad.mul(one_minus, x))
    return x_adapt, g


def adaptive_block(
    x: Tensor,
    x_orig: Tensor,
    layer: LayerParams,
    cfg: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
):
    """One stacked block; returns (next x, maps). next x is also next x_orig."""
    if x.data.shape != x_orig.data.shape:
        raise ShapeError("block inputs must share a shape")
    x_att, maps = attn.anomaly_sparse_attention(
        x, cfg.attention_config(), layer.attention, training=training, rng=rng
    )
    x_mamba = ssm.mamba_block(x_att, cfg.ssm_config(), layer.state_space)
    x_skip = ad.layer_norm(ad.add(x_mamba, x_orig), layer.skip_gamma, layer.skip_beta)
    x_adapt, _ = gate(x_att, x_skip, layer.gate)
    hidden = ad.silu(ad.add(ad.matmul(x_adapt, layer.ffn.w1), layer.ffn.b1))
    ff = ad.add(ad.matmul(hidden, layer.ffn.w2), layer.ffn.b2)
    out = ad.layer_norm(ad.add(x_adapt, ff), layer.ffn.ln_gamma, layer.ffn.ln_beta)
    return out, maps


def forward(
    x: Tensor,
    cfg: ModelConfig,
    params: ModelParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> ForwardOutput:
    """Embed, run every block collecting maps, normalize, project back."""
    if x.ndim != 3:
        raise ShapeError("model input must be B x W x d")
    b, w, d = x.data.shape
    if w != cfg.window or d != cfg.input_dim:
        raise ShapeError(
            f"input {w} x {d} does not match configured {cfg.window} x {cfg.input_dim}"
        )
    pe = positional_encoding(w, cfg.d_model)
    h = ad.add(ad.add(ad.matmul(x, params.embed_w), params.embed_b), ad.Tensor(pe))
    x_orig = h
    out = ForwardOutput(recon=None)
    for layer in params.layers:
        h, maps = adaptive_block(h, x_orig, layer, cfg, training=training, rng=rng)
        x_orig = h
        out.series_list.append(maps.series)
        out.prior_list.append(maps.prior)
        out.sigma_list.append(maps.sigma)
    if cfg.final_norm:
        h = ad.layer_norm(h, params.final_gamma, params.final_beta)
    out.recon = ad.add(ad.matmul(h, params.out_w), params.out_b)
    ad._ensure_finite(out.recon.data, "model reconstruction")
    return out


# ---------------------------------------------------------------------------
# checkpoint container: magic, version, JSON header, little-endian float64


def save_checkpoint(path, cfg: ModelConfig, params: ModelParams, extra: dict | None = None):
    """Self-describing binary container; byte order fixed little-endian."""
    names, shapes, blobs = [], [], []
    for name, t in params.named():
        names.append(name)
        shapes.append(list(t.data.shape))
        blobs.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    header = {
        "format": "tsad-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": {
            "window": cfg.window,
            "input_dim": cfg.input_dim,
            "d_model": cfg.d_model,
            "n_heads": cfg.n_heads,
            "e_layers": cfg.e_layers,
            "block_size": cfg.block_size,
            "d_state": cfg.d_state,
            "d_conv": cfg.d_conv,
            "expand": cfg.expand,
            "dropout": cfg.dropout,
            "seed": cfg.seed,
            "scale_by_d_model": cfg.scale_by_d_model,
            "final_norm": cfg.final_norm,
        },
        "extra": extra or {},
        "params": [{"name": n, "shape": s} for n, s in zip(names, shapes)],
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Returns (ModelConfig, ModelParams, extra dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ContractError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ContractError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        cfg = ModelConfig(**header["config"])
        params = init_model_params(cfg)
        stored = {p["name"]: p["shape"] for p in header["params"]}
        for name, t in params.named():
            shape = tuple(stored.get(name, ()))
            if shape != t.data.shape:
                raise ContractError(f"{path}: parameter {name} has shape {shape}")
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            t.data = np.frombuffer(raw, dtype="<f8").reshape(t.data.shape).copy()
    return cfg, params, header.get("extra", {})
