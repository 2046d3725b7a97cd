"""The residual correction head.

Fuses the backbone's hidden states with embeddings of the revealed
sequence (concat then learned projection), runs a small stack of
transformer layers under the same block-causal mask, and emits a hidden
residual through a zero-initialized output projection. The logit residual
is that hidden residual pushed through the backbone's own (bias-free) LM
head, so accumulating hiddens and logits in parallel stays exactly
consistent: delta_logits == delta_h @ w_lm by construction.

The zero output projection makes a freshly initialized head the identity
correction (zero residual), which is the right starting point when the
target itself is a small correction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .backbone import (
    BackboneConfig,
    BackboneParams,
    LayerParams,
    additive_mask,
    input_embedding,
    transformer_layer,
)
from .errors import InvalidConfigError, InvalidShapeError
from .numerics import tensor as T
from .numerics.tensor import Tensor

OBJECTIVES = ("residual", "direct")


@dataclass
class MrpConfig:
    depth: int = 3            # trunk transformer layers
    sigma_init: float = 0.2
    unroll: int = 2           # training unroll steps per backward
    reveal_k: int = 1         # ground-truth tokens revealed per block per step
    objective: str = "residual"

    def validate(self) -> None:
        if self.depth < 1:
            raise InvalidConfigError("mrp depth must be >= 1")
        if self.sigma_init <= 0:
            raise InvalidConfigError("sigma_init must be > 0")
        if self.reveal_k < 1 or self.unroll < 1:
            raise InvalidConfigError("reveal_k and unroll must be >= 1")
        if self.objective not in OBJECTIVES:
            raise InvalidConfigError(f"objective must be one of {OBJECTIVES}")


@dataclass
class MrpParams:
    config: MrpConfig
    w_fuse: Tensor            # 2d x d
    b_fuse: Tensor            # d
    layers: list = field(default_factory=list)
    out_norm: Tensor = None
    w_out: Tensor = None      # d x d, zero-initialized

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = [("mrp.w_fuse", self.w_fuse), ("mrp.b_fuse", self.b_fuse)]
        for i, layer in enumerate(self.layers):
            out.extend(layer.named(f"mrp.layers.{i}"))
        out.append(("mrp.out_norm", self.out_norm))
        out.append(("mrp.w_out", self.w_out))
        return out

    def set_requires_grad(self, flag: bool) -> None:
        for _, t in self.named_tensors():
            t.requires_grad = flag

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors()}


def init_mrp(cfg: MrpConfig, bb_cfg: BackboneConfig, rng: np.random.Generator) -> MrpParams:
    cfg.validate()
    d = bb_cfg.d_model
    hidden = bb_cfg.mlp_mult * d
    std = cfg.sigma_init
    layers = []
    for _ in range(cfg.depth):
        layers.append(
            LayerParams(
                attn_norm=T.param(np.ones(d)),
                w_qkv=T.param(rng.normal(0.0, std, (d, 3 * d))),
                w_attn_out=T.param(rng.normal(0.0, std, (d, d))),
                mlp_norm=T.param(np.ones(d)),
                w_up=T.param(rng.normal(0.0, std, (d, hidden))),
                w_down=T.param(rng.normal(0.0, std, (hidden, d))),
            )
        )
    return MrpParams(
        config=cfg,
        w_fuse=T.param(rng.normal(0.0, std, (2 * d, d))),
        b_fuse=T.param(np.zeros(d)),
        layers=layers,
        out_norm=T.param(np.ones(d)),
        w_out=T.param(np.zeros((d, d))),
    )


def mrp_forward(x, h: Tensor, params: MrpParams, bb_params: BackboneParams) -> tuple[Tensor, Tensor]:
    """Predict (hidden residual, logit residual) for the post-reveal state x.

    `h` is the running hidden state, row-aligned with x (possibly a
    truncated window). The trunk reuses the backbone's token/positional
    embeddings and LM head; only the fusion, trunk layers, output norm and
    output projection are its own.
    """
    cfg = bb_params.config
    L = h.shape[0]
    ids = np.asarray(x.ids, dtype=np.int64)[:L]
    if len(ids) != L or h.shape[1] != cfg.d_model:
        raise InvalidShapeError(
            f"hidden state shape {h.shape} does not align with sequence"
        )
    addmask = additive_mask(L, x.block_size, x.prompt_len)
    fused = T.add(T.matmul(T.concat_last(input_embedding(bb_params, ids), h),
                           params.w_fuse), params.b_fuse)
    stream = fused
    for layer in params.layers:
        stream = transformer_layer(stream, layer, addmask, cfg.n_heads, cfg.norm_eps)
    delta_h = T.matmul(T.rmsnorm(stream, params.out_norm, cfg.norm_eps), params.w_out)
    delta_logits = T.matmul(delta_h, bb_params.w_lm)
    return delta_h, delta_logits


def accumulate(run_h: Tensor, run_logits: Tensor, out: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
    """Element-wise accumulation of one correction into the running state."""
    delta_h, delta_logits = out
    return T.add(run_h, delta_h), T.add(run_logits, delta_logits)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

_CONFIG_FIELDS = ["depth", "sigma_init", "unroll", "reveal_k"]


def save_mrp(path: str, params: MrpParams) -> None:
    named = [
        (f"mrp.config.{f}", np.asarray([getattr(params.config, f)]))
        for f in _CONFIG_FIELDS
    ]
    named.append(("mrp.config.objective",
                  np.asarray([float(OBJECTIVES.index(params.config.objective))])))
    named += [(name, t.data) for name, t in params.named_tensors()]
    checkpoint.save_tensors(path, named)


def load_mrp(path: str) -> MrpParams:
    blob = checkpoint.load_tensors(path)
    cfg = MrpConfig(
        depth=int(blob["mrp.config.depth"][0]),
        sigma_init=float(f"{blob['mrp.config.sigma_init'][0]:.6g}"),
        unroll=int(blob["mrp.config.unroll"][0]),
        reveal_k=int(blob["mrp.config.reveal_k"][0]),
        objective=OBJECTIVES[int(blob["mrp.config.objective"][0])],
    )
    cfg.validate()
    layers = []
    for i in range(cfg.depth):
        p = f"mrp.layers.{i}"
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
    return MrpParams(
        config=cfg,
        w_fuse=T.param(blob["mrp.w_fuse"]),
        b_fuse=T.param(blob["mrp.b_fuse"]),
        layers=layers,
        out_norm=T.param(blob["mrp.out_norm"]),
        w_out=T.param(blob["mrp.w_out"]),
    )
