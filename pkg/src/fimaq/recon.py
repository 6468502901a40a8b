"""Block-wise reconstruction: capture block I/O, probe the KL geometry through
the full-precision tail, grow the perturbation bank on schedule and tune
AdaRound variables plus activation steps under the selected loss."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import fim, ops
from .autodiff import Tape, Tensor, as_tensor
from .layers import BLOCK_ACTS, BLOCK_LINEARS, PASSTHROUGH, BlockSpec, forward_block
from .optim import Adam
from .quant import (
    ACTIVATION,
    SCALE_FLOOR,
    WEIGHT,
    ActQuantState,
    CalibrationReport,
    QuantSpec,
    WeightQuantState,
    calibrate,
    qdrop_mix,
    quantize_activation,
    quantize_weight,
    rounding_regularizer,
)
from .zoo import ToyViT

log = logging.getLogger(__name__)

FIM_LOSSES = ("brecq", "diag", "rank1", "rankk", "dplr")
BANK_LOSSES = ("rankk", "dplr")


class ReconstructionError(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(f"{message}: {snapshot}")
        self.snapshot = snapshot


@dataclass
class QuantConfig:
    w_bits: int = 4
    a_bits: int = 4
    edge_bits: int | None = None  # stem and head; calibrated, never reconstructed
    calib_method: str = "mse"

    def __post_init__(self):
        for b in (self.w_bits, self.a_bits, self.edge):
            QuantSpec(b)
        if self.calib_method not in ("mse", "minmax"):
            raise ValueError(f"calib_method must be 'mse' or 'minmax', got {self.calib_method!r}")

    @property
    def edge(self) -> int:
        """Edge-layer width; unset means 8 bits, never coarser than the blocks."""
        if self.edge_bits is not None:
            return self.edge_bits
        return max(8, self.w_bits, self.a_bits)


@dataclass
class ReconConfig:
    loss_kind: str = "dplr"
    rank: int = 15
    interval: int = 25
    max_iter: int = 500
    batch_size: int = 32
    p_drop: float = 0.5
    lr_v: float = 1e-3
    lr_scale: float = 1e-4
    alpha: float = 0.5
    seed: int = 0
    reg_weight: float = 0.01
    beta_start: float = 20.0
    beta_end: float = 2.0
    warmup: float = 0.2
    probe_samples: int = 0  # 0 = every calibration sample
    recon_samples: int = 0

    def __post_init__(self):
        if self.loss_kind not in fim.LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {fim.LOSS_KINDS}, got {self.loss_kind!r}")
        if self.max_iter < 0 or self.interval < 1 or self.rank < 1 or self.batch_size < 1:
            raise ValueError("need max_iter >= 0, interval >= 1, rank >= 1, batch_size >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError("p_drop must lie in [0, 1]")

    def effective_rank(self, flat_size: int) -> int:
        return max(1, min(self.rank, flat_size // 4))

    def beta(self, it: int) -> float | None:
        """Rounding-regularizer exponent; None during warm-up."""
        start = int(self.warmup * self.max_iter)
        if it < start:
            return None
        frac = (it - start) / max(1, self.max_iter - start)
        return self.beta_end + 0.5 * (self.beta_start - self.beta_end) * (1.0 + math.cos(math.pi * frac))


# -- quantizer hooks ---------------------------------------------------------

class BlockQuantizer:
    """Quantization hook for one block (or for the stem/head edge layers)."""

    def __init__(self, weight_specs: dict[str, QuantSpec], act_specs: dict[str, QuantSpec]):
        self.weight_specs = weight_specs
        self.act_specs = act_specs
        self.weights: dict[str, WeightQuantState] = {}
        self.acts: dict[str, ActQuantState] = {}
        self.soft = False
        self.v_vars: dict[str, Tensor] = {}
        self.scale_vars: dict[str, Tensor] = {}
        self.drop_p = 0.0
        self.drop_rng: np.random.Generator | None = None

    def weight(self, name, w):
        state = self.weights.get(name)
        if state is None:
            return as_tensor(w)
        return quantize_weight(w, state, self.weight_specs[name], soft=self.soft, v=self.v_vars.get(name))

    def act(self, name, x):
        state = self.acts.get(name)
        if state is None:
            return x
        xq = quantize_activation(x, state, self.act_specs[name], scale=self.scale_vars.get(name))
        if self.drop_p > 0.0 and self.drop_rng is not None:
            return qdrop_mix(x, xq, self.drop_p, self.drop_rng)
        return xq

    def copy_states(self) -> tuple[dict, dict]:
        return ({k: s.copy() for k, s in self.weights.items()}, {k: s.copy() for k, s in self.acts.items()})


class _Recorder:
    """Hook that applies hard weight quantization and records activation inputs."""

    def __init__(self, quantizer: BlockQuantizer):
        self.q = quantizer
        self.seen: dict[str, list[np.ndarray]] = {}

    def weight(self, name, w):
        return self.q.weight(name, w)

    def act(self, name, x):
        self.seen.setdefault(name, []).append(x.data)
        return x


def block_quantizer(qcfg: QuantConfig) -> BlockQuantizer:
    return BlockQuantizer(
        {n: QuantSpec(qcfg.w_bits, WEIGHT) for n in BLOCK_LINEARS},
        {n: QuantSpec(qcfg.a_bits, ACTIVATION) for n in BLOCK_ACTS},
    )


def edge_quantizer(qcfg: QuantConfig) -> BlockQuantizer:
    return BlockQuantizer(
        {"stem": QuantSpec(qcfg.edge, WEIGHT), "head": QuantSpec(qcfg.edge, WEIGHT)},
        {"head_in": QuantSpec(qcfg.edge, ACTIVATION)},
    )


class QuantViT:
    """A ToyViT plus per-block quantizers; blocks without one run in full precision."""

    def __init__(self, model: ToyViT, qcfg: QuantConfig):
        self.model = model
        self.qcfg = qcfg
        self.edge = edge_quantizer(qcfg)
        self.blocks: list[BlockQuantizer | None] = [None] * model.config.blocks
        self.report = CalibrationReport()

    def calibrate_edges(self, calib_x: np.ndarray) -> None:
        p = self.model.params
        for name in ("stem", "head"):
            self.edge.weights[name] = calibrate(
                self.edge.weight_specs[name], p[f"{name}_w"], self.qcfg.calib_method, name, self.report
            )

    def calibrate_head_input(self, calib_x: np.ndarray) -> None:
        h = self.block_input(calib_x, self.model.config.blocks)
        feats = ops.take(ops.layer_norm(h, self.model.params["norm_g"], self.model.params["norm_b"]), 0, axis=1)
        self.edge.acts["head_in"] = calibrate(
            self.edge.act_specs["head_in"], feats.data, self.qcfg.calib_method, "head_in", self.report
        )

    def block_input(self, x, index: int) -> np.ndarray:
        h = self.model.embed(x, quant=self.edge)
        for i in range(index):
            h = self.model.block(i, h, quant=self.blocks[i] or PASSTHROUGH)
        return h.data

    def forward(self, x) -> Tensor:
        h = self.block_input(x, self.model.config.blocks)
        return self.model.head(h, quant=self.edge)

    def predict(self, x, batch: int = 512) -> np.ndarray:
        return np.concatenate([self.forward(x[i:i + batch]).data for i in range(0, len(x), batch)])


# -- per-block state ---------------------------------------------------------

@dataclass
class BlockReconState:
    index: int
    spec: BlockSpec
    weights: dict[str, np.ndarray]
    x_raw: np.ndarray
    x_quant: np.ndarray
    z: np.ndarray
    quantizer: BlockQuantizer
    bank: fim.PerturbationBank | None = None
    estimate: fim.FimEstimate | None = None
    iteration: int = 0
    trace: list[float] = field(default_factory=list)
    append_log: list[tuple[int, bool, str]] = field(default_factory=list)
    loss_kind_used: str = ""


def capture_block_io(qmodel: QuantViT, index: int, calib_x: np.ndarray) -> BlockReconState:
    """Cache X_raw, X_quant and full-precision targets; calibrate the block's quantizers."""
    model = qmodel.model
    if not 0 <= index < model.config.blocks:
        raise IndexError(f"block index {index} outside 0..{model.config.blocks - 1}")
    if len(calib_x) == 0:
        raise ValueError("empty calibration data")
    spec = model.config.block_spec(index)
    weights = {k: np.array(v) for k, v in model.block_weights(index).items()}
    x_raw = model.block_input(calib_x, index)
    x_quant = qmodel.block_input(calib_x, index)
    z = forward_block(spec, weights, x_raw).data

    qz = block_quantizer(qmodel.qcfg)
    for name in BLOCK_LINEARS:
        qz.weights[name] = calibrate(
            qz.weight_specs[name], weights[f"{name}_w"], qmodel.qcfg.calib_method, f"b{index}.{name}", qmodel.report
        )
    rec = _Recorder(qz)
    forward_block(spec, weights, x_quant, rec)
    for name in BLOCK_ACTS:
        qz.acts[name] = calibrate(
            qz.act_specs[name], np.concatenate([a.reshape(-1) for a in rec.seen[name]]),
            qmodel.qcfg.calib_method, f"b{index}.{name}", qmodel.report,
        )
    for arr in (x_raw, x_quant, z):
        arr.setflags(write=False)
    return BlockReconState(index, spec, weights, x_raw, x_quant, z, qz)


# -- probing -----------------------------------------------------------------

@dataclass
class Probe:
    avg_dz: np.ndarray
    avg_grad: np.ndarray
    dz: np.ndarray  # per sample, flattened
    grads: np.ndarray


def fim_probe(state: BlockReconState, model_tail, sample_idx=None) -> Probe | None:
    """Averaged block-output perturbation and KL gradient on X_raw.

    Both branches run on the raw input; the quantized branch uses the
    current hardened quantizers. Returns None when the perturbation is
    identically zero (nothing to estimate).
    """
    idx = np.arange(len(state.x_raw)) if sample_idx is None else np.asarray(sample_idx)
    qz = state.quantizer
    soft, drop = qz.soft, qz.drop_p
    qz.soft, qz.drop_p = False, 0.0
    try:
        zq = forward_block(state.spec, state.weights, state.x_raw[idx], qz).data
    finally:
        qz.soft, qz.drop_p = soft, drop
    z = state.z[idx]
    dz = zq - z
    if not np.any(dz):
        return None
    _, grads = fim.kl_grads(model_tail, z, dz)
    n = len(idx)
    dz2, g2 = dz.reshape(n, -1), grads.reshape(n, -1)
    return Probe(dz2.mean(axis=0), g2.mean(axis=0), dz2, g2)


# -- objective ---------------------------------------------------------------

class _Objective:
    def __init__(self, kind: str, estimate: fim.FimEstimate | None, bank, alpha: float, brecq_grads=None):
        self.kind = kind
        self.estimate = estimate
        self.bank = bank
        self.alpha = alpha
        self.brecq_grads = brecq_grads
        self.norm = 1.0

    def per_sample(self, dz_flat, idx) -> Tensor:
        k = self.kind
        if k == "mse":
            return fim.loss_mse(dz_flat)
        if k == "brecq":
            return fim.loss_brecq(dz_flat, self.brecq_grads[idx])
        if k == "diag":
            return fim.loss_diag(dz_flat, self.estimate.diag)
        if k == "rank1":
            return fim.loss_rank1(dz_flat, self.estimate.u)
        if k == "rankk":
            return fim.loss_rankk(dz_flat, self.bank)
        return fim.loss_dplr(dz_flat, self.bank, self.estimate.diag, self.alpha)

    def __call__(self, dz_flat, idx) -> Tensor:
        return ops.scale(ops.mean(self.per_sample(dz_flat, idx)), self.norm)


def _build_objective(state: BlockReconState, cfg: ReconConfig, model_tail, probe_idx, recon_idx) -> _Objective:
    kind = cfg.loss_kind
    if kind == "mse":
        return _Objective("mse", None, None, cfg.alpha)
    probe = fim_probe(state, model_tail, probe_idx)
    if probe is None:
        log.info("block %d: zero perturbation, falling back to mse", state.index)
        return _Objective("mse", None, None, cfg.alpha)
    if kind == "brecq":
        full = probe if np.array_equal(probe_idx, recon_idx) else fim_probe(state, model_tail, recon_idx)
        grads = np.zeros((len(state.x_raw), full.grads.shape[1]))
        grads[recon_idx] = full.grads
        state.estimate = fim.FimEstimate("brecq_diag", diag=(full.grads**2).mean(axis=0))
        obj = _Objective("brecq", state.estimate, None, cfg.alpha, brecq_grads=grads)
    else:
        est = fim.estimate_diag(probe.avg_dz, probe.avg_grad)
        est.alpha = cfg.alpha
        if kind == "rank1":
            try:
                est = fim.FimEstimate("rank1", u=fim.rank1_factor(probe.avg_dz, probe.avg_grad))
            except fim.FallbackToDiag as exc:
                log.warning("block %d: %s; using the diagonal estimate", state.index, exc)
                kind = "diag"
        if kind in BANK_LOSSES:
            state.bank = fim.PerturbationBank(probe.avg_dz.size, cfg.effective_rank(probe.avg_dz.size))
            res = state.bank.append(probe.avg_dz, probe.avg_grad)
            state.append_log.append((0, res.accepted, res.reason))
            est = fim.FimEstimate("dplr" if kind == "dplr" else "rankk", diag=est.diag, bank=state.bank,
                                  alpha=cfg.alpha, clamp_fraction=est.clamp_fraction)
        state.estimate = est
        obj = _Objective(kind, est, state.bank, cfg.alpha)

    # match the initial magnitude of the squared-error objective so the
    # rounding regularizer keeps the same relative weight for every loss
    pdz = probe.dz
    ref = float(fim.loss_mse(pdz).data.mean())
    if obj.kind == "brecq":
        val = float(fim.loss_brecq(pdz, probe.grads).data.mean())
    else:
        val = abs(float(obj.per_sample(pdz, None).data.mean()))
    obj.norm = ref / val if val > 0 and ref > 0 else 1.0
    return obj


def _subset(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    if k <= 0 or k >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=k, replace=False))


def reconstruct_block(state: BlockReconState, cfg: ReconConfig, model_tail) -> dict:
    """Optimize the block's rounding variables and activation steps.

    Returns the per-block report; quantizer states are updated in place
    and left in hardened (inference) mode.
    """
    t0 = time.perf_counter()
    qz = state.quantizer
    rng = np.random.default_rng([cfg.seed, state.index])
    n = len(state.x_raw)
    probe_idx = _subset(n, cfg.probe_samples, np.random.default_rng([cfg.seed, state.index, 1]))
    recon_idx = _subset(n, cfg.recon_samples, np.random.default_rng([cfg.seed, state.index, 2]))

    report = {"block": state.index, "loss_kind": cfg.loss_kind, "init_loss": float("nan"),
              "final_loss": float("nan"), "rank_reached": 0, "clamp_fraction": 0.0, "seconds": 0.0}
    if cfg.max_iter == 0:
        report.update(seconds=time.perf_counter() - t0, loss_used="none", append_iterations=[])
        return report

    obj = _build_objective(state, cfg, model_tail, probe_idx, recon_idx)
    state.loss_kind_used = obj.kind

    params = {f"v.{k}": s.v.copy() for k, s in qz.weights.items() if not qz.weight_specs[k].passthrough}
    params.update({f"s.{k}": np.array(s.scale, dtype=np.float64) for k, s in qz.acts.items()
                   if not qz.act_specs[k].passthrough})
    lrs = {k: (cfg.lr_v if k.startswith("v.") else cfg.lr_scale) for k in params}
    opt = Adam(params, lr=lrs)
    next_append = cfg.interval

    qz.drop_rng = rng
    try:
        for it in range(cfg.max_iter):
            if obj.bank is not None and obj.bank.rank < obj.bank.target_rank and it == next_append:
                _sync(qz, params)
                probe = fim_probe(state, model_tail, probe_idx)
                res = obj.bank.append(probe.avg_dz, probe.avg_grad) if probe is not None else fim.AppendResult(False, "zero")
                state.append_log.append((it, res.accepted, res.reason))
                next_append += cfg.interval

            idx = np.sort(rng.choice(recon_idx, size=min(cfg.batch_size, len(recon_idx)), replace=False))
            tape = Tape()
            leaves = {k: tape.variable(v) for k, v in params.items()}
            qz.v_vars = {k[2:]: t for k, t in leaves.items() if k.startswith("v.")}
            qz.scale_vars = {k[2:]: t for k, t in leaves.items() if k.startswith("s.")}
            qz.soft, qz.drop_p = True, cfg.p_drop
            x_in = qdrop_mix(state.x_raw[idx], state.x_quant[idx], cfg.p_drop, rng)
            out = forward_block(state.spec, state.weights, x_in, qz)
            dz = ops.reshape(ops.sub(out, state.z[idx]), (len(idx), -1))
            rec = obj(dz, idx)
            total = rec
            beta = cfg.beta(it)
            if beta is not None and cfg.reg_weight > 0:
                for t in qz.v_vars.values():
                    total = ops.add(total, ops.scale(rounding_regularizer(t, beta), cfg.reg_weight))
            val = float(rec.data)
            if not np.isfinite(float(total.data)):
                raise ReconstructionError("non-finite reconstruction loss", {
                    "block": state.index, "iteration": it, "loss": float(total.data),
                    "params": {k: (float(np.min(v)), float(np.max(v))) for k, v in params.items()},
                })
            if leaves:  # all-passthrough blocks have nothing to tune
                grads = tape.backward(total)
                opt.step({k: grads[t] for k, t in leaves.items()})
            qz.v_vars, qz.scale_vars = {}, {}
            for k in params:
                if k.startswith("s."):
                    np.maximum(params[k], SCALE_FLOOR, out=params[k])
            state.trace.append(val)
            state.iteration = it + 1
    finally:
        qz.v_vars, qz.scale_vars = {}, {}
        qz.soft, qz.drop_p, qz.drop_rng = False, 0.0, None
    _sync(qz, params)

    tail = state.trace[-max(1, len(state.trace) // 10):]
    report.update(
        init_loss=state.trace[0],
        final_loss=float(np.mean(tail)),
        rank_reached=obj.bank.rank if obj.bank is not None else (1 if obj.kind in ("rank1",) else 0),
        clamp_fraction=state.estimate.clamp_fraction if state.estimate is not None else 0.0,
        seconds=time.perf_counter() - t0,
        loss_used=obj.kind,
        append_iterations=[it for it, _, _ in state.append_log if it > 0],
    )
    return report


def _sync(qz: BlockQuantizer, params: dict[str, np.ndarray]) -> None:
    for k, v in params.items():
        name = k[2:]
        if k.startswith("v."):
            qz.weights[name].v = v.copy()
        else:
            qz.acts[name].scale = float(v)


# -- whole model -------------------------------------------------------------

def quantize_model(model: ToyViT, calib_x: np.ndarray, qcfg: QuantConfig, cfg: ReconConfig,
                   keep_states: bool = False):
    """Quantize every block in order; returns (QuantViT, per-block reports).

    With ``keep_states`` the captured BlockReconState objects are attached
    to the returned model as ``states``.
    """
    qmodel = QuantViT(model, qcfg)
    qmodel.calibrate_edges(calib_x)
    reports, states = [], []
    for b in range(model.config.blocks):
        state = capture_block_io(qmodel, b, calib_x)
        qmodel.blocks[b] = state.quantizer
        report = reconstruct_block(state, cfg, model.tail(b))
        reports.append(report)
        if keep_states:
            states.append(state)
        log.info("block %d %s: loss %.4g -> %.4g, rank %d", b, cfg.loss_kind,
                 report["init_loss"], report["final_loss"], report["rank_reached"])
    qmodel.calibrate_head_input(calib_x)
    if keep_states:
        qmodel.states = states
    return qmodel, reports


def config_dict(cfg) -> dict:
    return asdict(cfg)
