"""Pre-norm transformer block built from :mod:`fimaq.ops` primitives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import ShapeError, Tensor, as_tensor

BLOCK_LINEARS = ("qkv", "proj", "fc1", "fc2")
BLOCK_ACTS = ("qkv_in", "q", "k", "v", "attn", "proj_in", "fc1_in", "fc2_in")


@dataclass(frozen=True)
class BlockSpec:
    tokens: int
    dim: int
    heads: int
    mlp_ratio: float = 4.0
    index: int = 0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"embed dim {self.dim} not divisible by {self.heads} heads")
        if self.tokens < 1 or self.dim < 1 or self.mlp_ratio <= 0:
            raise ValueError("invalid block spec")

    @property
    def hidden(self) -> int:
        return int(round(self.dim * self.mlp_ratio))

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def flat_size(self) -> int:
        return self.tokens * self.dim

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        d, h = self.dim, self.hidden
        return {
            "ln1_g": (d,), "ln1_b": (d,),
            "qkv_w": (3 * d, d), "qkv_b": (3 * d,),
            "proj_w": (d, d), "proj_b": (d,),
            "ln2_g": (d,), "ln2_b": (d,),
            "fc1_w": (h, d), "fc1_b": (h,),
            "fc2_w": (d, h), "fc2_b": (d,),
        }


class Passthrough:
    """Quantization hook that leaves weights and activations untouched."""

    def weight(self, name: str, w):
        return as_tensor(w)

    def act(self, name: str, x: Tensor) -> Tensor:
        return x


PASSTHROUGH = Passthrough()


def init_block_weights(spec: BlockSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    out = {}
    for name, shape in spec.weight_shapes().items():
        if name.endswith("_g"):
            out[name] = np.ones(shape)
        elif name.endswith("_b"):
            out[name] = np.zeros(shape)
        else:
            out[name] = rng.normal(0.0, shape[1] ** -0.5, size=shape)
    return out


def check_block_weights(spec: BlockSpec, weights) -> None:
    for name, shape in spec.weight_shapes().items():
        if name not in weights:
            raise ShapeError(f"block weights missing {name!r}")
        got = np.shape(weights[name].data if isinstance(weights[name], Tensor) else weights[name])
        if tuple(got) != shape:
            raise ShapeError(f"block weight {name!r} has shape {tuple(got)}, expected {shape}")


def attention(spec: BlockSpec, weights, h: Tensor, quant=PASSTHROUGH) -> Tensor:
    n, t, d = h.shape
    nh, hd = spec.heads, spec.head_dim
    h = quant.act("qkv_in", h)
    qkv = ops.linear(h, quant.weight("qkv", weights["qkv_w"]), weights["qkv_b"])
    qkv = ops.transpose(ops.reshape(qkv, (n, t, 3, nh, hd)), (2, 0, 3, 1, 4))
    q = quant.act("q", ops.take(qkv, 0, axis=0))
    k = quant.act("k", ops.take(qkv, 1, axis=0))
    v = quant.act("v", ops.take(qkv, 2, axis=0))
    scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), hd**-0.5)
    attn = quant.act("attn", ops.softmax(scores))
    ctx = ops.reshape(ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3)), (n, t, d))
    ctx = quant.act("proj_in", ctx)
    return ops.linear(ctx, quant.weight("proj", weights["proj_w"]), weights["proj_b"])


def mlp(spec: BlockSpec, weights, h: Tensor, quant=PASSTHROUGH) -> Tensor:
    h = quant.act("fc1_in", h)
    h = ops.linear(h, quant.weight("fc1", weights["fc1_w"]), weights["fc1_b"])
    h = quant.act("fc2_in", ops.gelu(h))
    return ops.linear(h, quant.weight("fc2", weights["fc2_w"]), weights["fc2_b"])


def forward_block(spec: BlockSpec, weights, x, quant=PASSTHROUGH) -> Tensor:
    """Run one block on ``x`` of shape (T, D) or (N, T, D)."""
    x = as_tensor(x)
    squeeze = x.data.ndim == 2
    if squeeze:
        x = ops.reshape(x, (1,) + x.shape)
    if x.data.ndim != 3 or x.shape[1:] != (spec.tokens, spec.dim):
        raise ShapeError(f"block input shape {x.shape} does not match (N, {spec.tokens}, {spec.dim})")
    check_block_weights(spec, weights)

    h = ops.layer_norm(x, weights["ln1_g"], weights["ln1_b"])
    x = ops.add(x, attention(spec, weights, h, quant))
    h = ops.layer_norm(x, weights["ln2_g"], weights["ln2_b"])
    x = ops.add(x, mlp(spec, weights, h, quant))
    if squeeze:
        x = ops.reshape(x, x.shape[1:])
    return x
