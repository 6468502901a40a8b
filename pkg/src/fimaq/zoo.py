"""Toy ViT classifier, synthetic clustered data, pre-training, evaluation and
the checkpoint container."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .autodiff import Tape, Tensor, as_tensor
from .layers import PASSTHROUGH, BlockSpec, forward_block, init_block_weights
from .optim import Adam

log = logging.getLogger(__name__)

CKPT_MAGIC = b"FIMQCKPT"


@dataclass(frozen=True)
class ToyViTConfig:
    blocks: int = 2
    tokens: int = 9
    dim: int = 32
    heads: int = 4
    mlp_ratio: float = 4.0
    classes: int = 10
    patch_dim: int = 16

    def __post_init__(self):
        if self.blocks < 1 or self.classes < 2 or self.tokens < 2:
            raise ValueError("need blocks >= 1, classes >= 2, tokens >= 2")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")

    @property
    def patches(self) -> int:
        return self.tokens - 1

    @property
    def flat_size(self) -> int:
        return self.tokens * self.dim

    def block_spec(self, index: int) -> BlockSpec:
        return BlockSpec(self.tokens, self.dim, self.heads, self.mlp_ratio, index)


@dataclass(frozen=True)
class SyntheticDataSpec:
    classes: int = 10
    patches: int = 8
    patch_dim: int = 16
    n_train: int = 2000
    n_val: int = 1000
    n_calib: int = 128
    gap: float = 6.0
    noise: float = 1.0
    seed: int = 0


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray | None = None

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class Dataset:
    train: Split
    val: Split
    calib: Split
    centers: np.ndarray


def gen_dataset(spec: SyntheticDataSpec) -> Dataset:
    """Gaussian class clusters.

    Each class owns one prototype patch (prototypes mutually orthogonal);
    its center repeats that prototype in every patch slot, scaled so that
    class centers sit exactly ``gap`` apart. Samples add isotropic noise.
    Calibration samples come without labels.
    """
    if spec.classes > spec.patch_dim:
        raise ValueError("need classes <= patch_dim for orthogonal prototypes")
    rng = np.random.default_rng(spec.seed)
    proto, _ = np.linalg.qr(rng.normal(size=(spec.patch_dim, spec.classes)))
    centers = np.tile(proto.T, (1, spec.patches)) * (spec.gap / np.sqrt(2.0 * spec.patches))
    sizes = (spec.n_train, spec.n_val, spec.n_calib)
    total = sum(sizes)
    labels = rng.permutation(np.arange(total) % spec.classes)
    x = centers[labels] + spec.noise * rng.normal(size=(total, centers.shape[1]))
    x = x.reshape(total, spec.patches, spec.patch_dim)
    a, b = sizes[0], sizes[0] + sizes[1]
    return Dataset(
        train=Split(x[:a], labels[:a]),
        val=Split(x[a:b], labels[a:b]),
        calib=Split(x[b:]),
        centers=centers,
    )


class ToyViT:
    """Patch-embedding stem, pre-norm blocks, final norm and a class-token head.

    Parameters live in ``params`` as plain arrays. Quantization hooks with
    ``weight(name, w)`` / ``act(name, x)`` may be supplied per stage.
    """

    def __init__(self, config: ToyViTConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ToyViTConfig, seed: int) -> "ToyViT":
        rng = np.random.default_rng(seed)
        d = config.dim
        p = {
            "stem_w": rng.normal(0, config.patch_dim**-0.5, (d, config.patch_dim)),
            "stem_b": np.zeros(d),
            "cls": rng.normal(0, 0.02, (d,)),
            "pos": rng.normal(0, 0.02, (config.tokens, d)),
        }
        for i in range(config.blocks):
            for k, v in init_block_weights(config.block_spec(i), rng).items():
                p[f"blocks.{i}.{k}"] = v
        p["norm_g"] = np.ones(d)
        p["norm_b"] = np.zeros(d)
        p["head_w"] = rng.normal(0, d**-0.5, (config.classes, d))
        p["head_b"] = np.zeros(config.classes)
        return cls(config, p)

    def block_weights(self, i: int, source=None) -> dict:
        src = self.params if source is None else source
        prefix = f"blocks.{i}."
        return {k[len(prefix):]: v for k, v in src.items() if k.startswith(prefix)}

    def embed(self, x, quant=PASSTHROUGH, params=None) -> Tensor:
        p = self.params if params is None else params
        x = as_tensor(x)
        n = x.shape[0]
        h = ops.linear(x, quant.weight("stem", p["stem_w"]), p["stem_b"])
        cls_tok = ops.add(ops.reshape(p["cls"], (1, 1, -1)), np.zeros((n, 1, self.config.dim)))
        h = ops.concat([cls_tok, h], axis=1)
        return ops.add(h, p["pos"])

    def block(self, i: int, h, quant=PASSTHROUGH, params=None) -> Tensor:
        return forward_block(self.config.block_spec(i), self.block_weights(i, params), h, quant)

    def head(self, z, quant=PASSTHROUGH, params=None) -> Tensor:
        p = self.params if params is None else params
        h = ops.layer_norm(as_tensor(z), p["norm_g"], p["norm_b"])
        h = quant.act("head_in", ops.take(h, 0, axis=1))
        return ops.linear(h, quant.weight("head", p["head_w"]), p["head_b"])

    def forward(self, x, params=None) -> Tensor:
        h = self.embed(x, params=params)
        for i in range(self.config.blocks):
            h = self.block(i, h, params=params)
        return self.head(h, params=params)

    def block_input(self, x, index: int) -> np.ndarray:
        h = self.embed(x)
        for i in range(index):
            h = self.block(i, h)
        return h.data

    def tail(self, index: int):
        """Full-precision map from the output of block ``index`` to logits."""

        def run(z):
            h = as_tensor(z)
            for i in range(index + 1, self.config.blocks):
                h = self.block(i, h)
            return self.head(h)

        return run

    def flat_tail(self, index: int):
        """Like :meth:`tail` but on flattened (n, T*D) inputs."""
        inner = self.tail(index)
        shape = (self.config.tokens, self.config.dim)

        def run(z):
            z = as_tensor(z)
            return inner(ops.reshape(z, (z.shape[0],) + shape))

        return run

    def predict(self, x, batch: int = 512) -> np.ndarray:
        return np.concatenate([self.forward(x[i:i + batch]).data for i in range(0, len(x), batch)])


@dataclass
class Checkpoint:
    config: ToyViTConfig
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def model(self) -> ToyViT:
        return ToyViT(self.config, {k: v.copy() for k, v in self.params.items()})


def evaluate_top1(model, split: Split, batch: int = 512) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest index."""
    if split.y is None:
        raise ValueError("split has no labels")
    if len(split) == 0:
        raise ValueError("empty split")
    logits = model.predict(split.x, batch) if hasattr(model, "predict") else model(split.x)
    return float(np.mean(np.argmax(logits, axis=1) == split.y))


def pretrain(config: ToyViTConfig, data: Dataset, epochs: int = 30, seed: int = 0,
             lr: float = 2e-3, batch_size: int = 64) -> Checkpoint:
    model = ToyViT.init(config, seed)
    rng = np.random.default_rng(seed + 1)
    opt = Adam(model.params, lr=lr)
    n = len(data.train)
    loss = float("nan")
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            tape = Tape()
            leaves = {k: tape.variable(v) for k, v in model.params.items()}
            obj = ops.cross_entropy(model.forward(data.train.x[idx], params=leaves), data.train.y[idx])
            loss = float(obj.data)
            if not np.isfinite(loss):
                raise FloatingPointError(f"pretraining diverged at epoch {epoch} (loss={loss})")
            grads = tape.backward(obj)
            opt.step({k: grads[t] for k, t in leaves.items()})
        log.debug("epoch %d loss %.4f", epoch, loss)
    meta = {"epochs": epochs, "seed": seed, "final_loss": loss}
    if data.val.y is not None and len(data.val):
        meta["val_top1"] = evaluate_top1(model, data.val)
    return Checkpoint(config, model.params, meta)


# -- checkpoint container ----------------------------------------------------
# layout: 8-byte magic, u64 LE header length, UTF-8 JSON header,
# then raw little-endian float64 tensors back to back in manifest order.

def save_checkpoint(ckpt: Checkpoint, path) -> None:
    manifest, offset, blobs = [], 0, []
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
        blobs.append(arr.tobytes())
    header = json.dumps(
        {"config": asdict(ckpt.config), "tensors": manifest, "meta": ckpt.meta}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    body = raw[16 + hlen:]
    params = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=entry["offset"])
        params[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return Checkpoint(ToyViTConfig(**header["config"]), params, header["meta"])
