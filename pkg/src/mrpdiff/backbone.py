"""The frozen-at-distillation-time denoiser: a bidirectional pre-norm
RMSNorm transformer with block-causal attention, learned absolute
positions, and a bias-free LM head.

The LM head has no bias so the logit residual of the correction head is
exactly its hidden residual times the head matrix (one matmul, no affine
seam). Embedding and head are untied to keep freezing semantics simple.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .errors import InvalidConfigError, InvalidShapeError
from .numerics import tensor as T
from .numerics.tensor import Tensor


@dataclass
class BackboneConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    vocab_size: int = 44
    block_size: int = 8
    max_len: int = 128
    norm_eps: float = 1e-6
    mlp_mult: int = 4

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise InvalidConfigError("d_model must be divisible by n_heads")
        if self.max_len % self.block_size:
            raise InvalidConfigError("block_size must divide max_len")
        if self.n_layers < 1 or self.vocab_size < 5:
            raise InvalidConfigError("need n_layers >= 1 and vocab_size >= 5")


@dataclass
class LayerParams:
    attn_norm: Tensor
    w_qkv: Tensor
    w_attn_out: Tensor
    mlp_norm: Tensor
    w_up: Tensor
    w_down: Tensor

    def named(self, prefix: str):
        return [
            (f"{prefix}.attn_norm", self.attn_norm),
            (f"{prefix}.w_qkv", self.w_qkv),
            (f"{prefix}.w_attn_out", self.w_attn_out),
            (f"{prefix}.mlp_norm", self.mlp_norm),
            (f"{prefix}.w_up", self.w_up),
            (f"{prefix}.w_down", self.w_down),
        ]


@dataclass
class BackboneParams:
    config: BackboneConfig
    embed: Tensor       # V x d token embedding table (houses the MASK row)
    pos: Tensor         # max_len x d learned absolute positions
    layers: list = field(default_factory=list)
    final_norm: Tensor = None
    w_lm: Tensor = None  # d x V, no bias

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = [("backbone.embed", self.embed), ("backbone.pos", self.pos)]
        for i, layer in enumerate(self.layers):
            out.extend(layer.named(f"backbone.layers.{i}"))
        out.append(("backbone.final_norm", self.final_norm))
        out.append(("backbone.w_lm", self.w_lm))
        return out

    def set_requires_grad(self, flag: bool) -> None:
        for _, t in self.named_tensors():
            t.requires_grad = flag

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors()}


def _layer_init(cfg: BackboneConfig, rng: np.random.Generator, std: float) -> LayerParams:
    d = cfg.d_model
    hidden = cfg.mlp_mult * d
    return LayerParams(
        attn_norm=T.param(np.ones(d)),
        w_qkv=T.param(rng.normal(0.0, std, (d, 3 * d))),
        w_attn_out=T.param(rng.normal(0.0, std, (d, d))),
        mlp_norm=T.param(np.ones(d)),
        w_up=T.param(rng.normal(0.0, std, (d, hidden))),
        w_down=T.param(rng.normal(0.0, std, (hidden, d))),
    )


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator, std: float = 0.02) -> BackboneParams:
    cfg.validate()
    d = cfg.d_model
    return BackboneParams(
        config=cfg,
        embed=T.param(rng.normal(0.0, std, (cfg.vocab_size, d))),
        pos=T.param(rng.normal(0.0, std, (cfg.max_len, d))),
        layers=[_layer_init(cfg, rng, std) for _ in range(cfg.n_layers)],
        final_norm=T.param(np.ones(d)),
        w_lm=T.param(rng.normal(0.0, std, (d, cfg.vocab_size))),
    )


# ---------------------------------------------------------------------------
# block-causal attention mask
# ---------------------------------------------------------------------------


def block_index(positions, block_size: int, prompt_len: int):
    """Block id per position: the prompt is leading block 0, then the
    response is gridded in blocks of block_size."""
    pos = np.asarray(positions)
    return np.where(pos < prompt_len, 0, 1 + (pos - prompt_len) // block_size)


def attention_mask(L: int, block_size: int, prompt_len: int = 0) -> np.ndarray:
    """Boolean LxL matrix: query q may attend key k iff block(k) <= block(q)
    (all preceding blocks plus full bidirectional attention within a block)."""
    if (L - prompt_len) % block_size:
        raise InvalidConfigError(
            f"response region of length {L - prompt_len} is not a multiple of "
            f"block_size {block_size}"
        )
    blocks = block_index(np.arange(L), block_size, prompt_len)
    return blocks[None, :] <= blocks[:, None]


_MASK_CACHE: dict[tuple, np.ndarray] = {}


def additive_mask(L: int, block_size: int, prompt_len: int) -> np.ndarray:
    """0 where attention is allowed, -1e30 where blocked (kept finite so no
    intermediate is ever inf/NaN)."""
    key = (L, block_size, prompt_len)
    cached = _MASK_CACHE.get(key)
    if cached is None:
        cached = np.where(attention_mask(L, block_size, prompt_len), 0.0, -1e30)
        _MASK_CACHE[key] = cached
    return cached


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def transformer_layer(stream: Tensor, layer: LayerParams, addmask: np.ndarray,
                      n_heads: int, eps: float) -> Tensor:
    """One pre-norm block: masked self-attention + MLP, both residual."""
    L, d = stream.shape
    dh = d // n_heads
    a = T.rmsnorm(stream, layer.attn_norm, eps)
    qkv = T.matmul(a, layer.w_qkv)
    q = T.transpose(T.reshape(T.slice_last(qkv, 0, d), (L, n_heads, dh)), (1, 0, 2))
    k = T.transpose(T.reshape(T.slice_last(qkv, d, 2 * d), (L, n_heads, dh)), (1, 0, 2))
    v = T.transpose(T.reshape(T.slice_last(qkv, 2 * d, 3 * d), (L, n_heads, dh)), (1, 0, 2))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    probs = T.softmax_rows(T.add(scores, addmask))
    ctx = T.reshape(T.transpose(T.matmul(probs, v), (1, 0, 2)), (L, d))
    stream = T.add(stream, T.matmul(ctx, layer.w_attn_out))
    m = T.rmsnorm(stream, layer.mlp_norm, eps)
    return T.add(stream, T.matmul(T.silu(T.matmul(m, layer.w_up)), layer.w_down))


def input_embedding(params: BackboneParams, ids: np.ndarray) -> Tensor:
    """Token embedding plus learned absolute position rows."""
    return T.add(T.embed(params.embed, ids), T.slice_rows(params.pos, len(ids)))


def forward(x, params: BackboneParams, window: int | None = None) -> tuple[Tensor, Tensor]:
    """Run the denoiser on sequence state `x` (ids, prompt_len, block_size).

    Returns (h, logits): h is the final post-norm hidden state (the tensor
    that multiplies the LM head), logits = h @ w_lm. `window` truncates the
    computation to the first `window` positions; block-causality makes the
    retained rows bit-identical to a full-length forward.
    """
    cfg = params.config
    ids = np.asarray(x.ids, dtype=np.int64)
    if window is not None:
        ids = ids[:window]
    L = len(ids)
    if L > cfg.max_len:
        raise InvalidShapeError(f"sequence length {L} exceeds max_len {cfg.max_len}")
    if np.any(ids >= cfg.vocab_size) or np.any(ids < 0):
        raise InvalidShapeError("token id out of vocabulary range")
    addmask = additive_mask(L, x.block_size, x.prompt_len)

    stream = input_embedding(params, ids)
    for layer in params.layers:
        stream = transformer_layer(stream, layer, addmask, cfg.n_heads, cfg.norm_eps)
    h = T.rmsnorm(stream, params.final_norm, cfg.norm_eps)
    logits = T.matmul(h, params.w_lm)
    return h, logits


def perturbation_norm(x_a, x_b, params: BackboneParams) -> float:
    """Frobenius norm of the token-embedding difference between two states
    (the per-transition perturbation size entering the contraction bound)."""
    ids_a = np.asarray(x_a.ids, dtype=np.int64)
    ids_b = np.asarray(x_b.ids, dtype=np.int64)
    if ids_a.shape != ids_b.shape:
        raise InvalidShapeError("sequences of different length")
    diff = ids_a != ids_b
    if not np.any(diff):
        return 0.0
    rows_a = params.embed.data[ids_a[diff]]
    rows_b = params.embed.data[ids_b[diff]]
    return float(np.sqrt(np.sum((rows_b - rows_a) ** 2)))


def embedding_distance(params: BackboneParams, token_id: int, ref_id: int) -> float:
    """L2 distance between two embedding rows (token vs MASK in practice)."""
    e = params.embed.data
    return float(np.linalg.norm(e[token_id] - e[ref_id]))


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

_CONFIG_FIELDS = [
    "d_model", "n_heads", "n_layers", "vocab_size", "block_size", "max_len",
    "norm_eps", "mlp_mult",
]


def save_backbone(path: str, params: BackboneParams) -> None:
    named = [
        (f"backbone.config.{f}", np.asarray([getattr(params.config, f)]))
        for f in _CONFIG_FIELDS
    ]
    named += [(name, t.data) for name, t in params.named_tensors()]
    checkpoint.save_tensors(path, named)


def load_backbone(path: str) -> BackboneParams:
    blob = checkpoint.load_tensors(path)
    kwargs = {}
    for f in _CONFIG_FIELDS:
        val = blob[f"backbone.config.{f}"][0]
        # config scalars are stored as f32 records; snap floats to 6
        # significant digits so values like 1e-6 round-trip exactly
        kwargs[f] = float(f"{val:.6g}") if f == "norm_eps" else int(val)
    cfg = BackboneConfig(**kwargs)
    cfg.validate()
    layers = []
    for i in range(cfg.n_layers):
        p = f"backbone.layers.{i}"
        layers.append(
            LayerParams(
                attn_norm=T.param(blob[f"{p}.attn_norm"]),
                w_qkv=T.param(blob[f"{p}.w_qkv"]),
                w_attn_out=T.param(blob[f"{p}.w_attn_out"]),
                mlp_norm=T.param(blob[f"{p}.mlp_norm"]),
                w_up=T.param(blob[f"{p}.w_up"]),
                w_down=T.param(blob[f"{p}.w_down"]),
            )
        )
    return BackboneParams(
        config=cfg,
        embed=T.param(blob["backbone.embed"]),
        pos=T.param(blob["backbone.pos"]),
        layers=layers,
        final_norm=T.param(blob["backbone.final_norm"]),
        w_lm=T.param(blob["backbone.w_lm"]),
    )
