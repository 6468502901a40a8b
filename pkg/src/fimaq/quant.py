"""Uniform quantizers: per-channel symmetric weights with AdaRound rounding
variables, per-tensor affine activations with a learnable step, and QDrop
mixing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, as_tensor, record

log = logging.getLogger(__name__)

WEIGHT = "weight_symmetric_per_channel"
ACTIVATION = "activation_affine_per_tensor"

ZETA = 1.1
GAMMA = -0.1
SCALE_FLOOR = 1e-8
N_GRID = 100
GRID_LO = 0.5


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    mode: str = WEIGHT
    channel_axis: int = 0

    def __post_init__(self):
        if self.bits != 32 and not 2 <= self.bits <= 8:
            raise ValueError(f"bits must be in 2..8 or 32, got {self.bits}")
        if self.mode not in (WEIGHT, ACTIVATION):
            raise ValueError(f"unknown quantizer mode {self.mode!r}")

    @property
    def passthrough(self) -> bool:
        return self.bits == 32

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1) - 1) if self.mode == WEIGHT else 0

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.mode == WEIGHT else 2**self.bits - 1


@dataclass
class WeightQuantState:
    scale: np.ndarray  # one entry per output channel
    v: np.ndarray  # AdaRound logits, same shape as the weight
    zero_input: bool = False

    def copy(self) -> "WeightQuantState":
        return WeightQuantState(self.scale.copy(), self.v.copy(), self.zero_input)


@dataclass
class ActQuantState:
    scale: float
    zero_point: int
    zero_input: bool = False

    def copy(self) -> "ActQuantState":
        return ActQuantState(float(self.scale), int(self.zero_point), self.zero_input)


@dataclass
class CalibrationReport:
    flagged: list[str] = field(default_factory=list)

    def flag(self, name: str) -> None:
        self.flagged.append(name)


# -- AdaRound ----------------------------------------------------------------

def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def rectified_sigmoid(v) -> np.ndarray:
    return np.clip(_sigmoid(np.asarray(v, dtype=np.float64)) * (ZETA - GAMMA) + GAMMA, 0.0, 1.0)


def init_rounding(w: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Logits whose rectified sigmoid equals the fractional part of w/scale."""
    ws = w / scale
    frac = ws - np.floor(ws)
    p = (frac - GAMMA) / (ZETA - GAMMA)
    return np.log(p) - np.log1p(-p)


def _channel_view(scale: np.ndarray, ndim: int, axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = -1
    return np.asarray(scale).reshape(shape)


def quantize_weight(w, state: WeightQuantState, spec: QuantSpec, soft: bool = False, v=None) -> Tensor:
    """Fake-quantize a weight: s * clamp(floor(w/s) + h(v), qmin, qmax).

    ``v`` may be a tracked Tensor to get gradients through the soft path;
    otherwise ``state.v`` is used. The weight itself is treated as constant.
    """
    w = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64)
    if spec.passthrough:
        return Tensor(w)
    if state.v.shape != w.shape:
        raise ValueError(f"rounding variables {state.v.shape} do not match weight {w.shape}")
    v = as_tensor(state.v if v is None else v)
    s = _channel_view(state.scale, w.ndim, spec.channel_axis)
    base = np.floor(w / s)
    if soft:
        sig = _sigmoid(v.data)
        raw = sig * (ZETA - GAMMA) + GAMMA
        h = np.clip(raw, 0.0, 1.0)
    else:
        h = (rectified_sigmoid(v.data) >= 0.5).astype(np.float64)
    q = base + h
    inside = (q >= spec.qmin) & (q <= spec.qmax)
    out = s * np.clip(q, spec.qmin, spec.qmax)

    if not soft:
        return record(out, (v,), lambda g: (None,))

    def back(g):
        dh = sig * (1.0 - sig) * (ZETA - GAMMA) * ((raw > 0.0) & (raw < 1.0))
        return (g * s * dh * inside,)

    return record(out, (v,), back)


def rounding_regularizer(v, beta: float) -> Tensor:
    """sum(1 - |2 h(v) - 1|^beta); pushes h(v) toward {0, 1}."""
    v = as_tensor(v)
    sig = _sigmoid(v.data)
    raw = sig * (ZETA - GAMMA) + GAMMA
    h = np.clip(raw, 0.0, 1.0)
    c = 2.0 * h - 1.0
    a = np.abs(c)
    out = np.sum(1.0 - a**beta)

    def back(g):
        dh = sig * (1.0 - sig) * (ZETA - GAMMA) * ((raw > 0.0) & (raw < 1.0))
        da = -beta * np.where(a > 0, a ** (beta - 1.0), 0.0) * np.sign(c) * 2.0
        return (g * da * dh,)

    return record(np.asarray(out), (v,), back)


# -- activations -------------------------------------------------------------

def quantize_activation(x, state: ActQuantState, spec: QuantSpec, scale=None) -> Tensor:
    """s * (clamp(round(x/s) + zp, 0, 2^b - 1) - zp) with a straight-through
    round; ``scale`` may be a tracked scalar Tensor for step learning."""
    x = as_tensor(x)
    if spec.passthrough:
        return x
    s_t = as_tensor(state.scale if scale is None else scale)
    s = float(s_t.data)
    zp = state.zero_point
    xs = x.data / s
    r = np.round(xs)
    q = np.clip(r + zp, spec.qmin, spec.qmax)
    out = s * (q - zp)
    inside = (r + zp >= spec.qmin) & (r + zp <= spec.qmax)

    def back(g):
        ds = np.where(inside, r - xs, q - zp)
        return g * inside, np.asarray(np.sum(g * ds))

    return record(out, (x, s_t), back)


def qdrop_mix(x_fp, x_q, p_drop: float, rng: np.random.Generator) -> Tensor:
    """Elementwise: full-precision value with probability ``p_drop``."""
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError("p_drop must lie in [0, 1]")
    a, b = as_tensor(x_fp), as_tensor(x_q)
    if a.shape != b.shape:
        raise ValueError(f"qdrop_mix shapes differ: {a.shape} vs {b.shape}")
    keep_fp = rng.random(a.shape, dtype=np.float32) < p_drop
    return record(np.where(keep_fp, a.data, b.data), (a, b), lambda g: (g * keep_fp, g * ~keep_fp))


# -- calibration -------------------------------------------------------------

def _grid(method: str) -> np.ndarray:
    if method == "minmax":
        return np.array([1.0])
    if method == "mse":
        return np.linspace(GRID_LO, 1.0, N_GRID)
    raise ValueError(f"unknown calibration method {method!r}")


def _weight_scales(w: np.ndarray, spec: QuantSpec, method: str) -> tuple[np.ndarray, bool]:
    axis = spec.channel_axis
    w2 = np.moveaxis(w, axis, 0).reshape(w.shape[axis], -1)
    maxabs = np.abs(w2).max(axis=1)
    zero = bool(np.all(maxabs == 0))
    maxabs = np.maximum(maxabs, SCALE_FLOOR * spec.qmax)
    ratios = _grid(method)
    scales = ratios[:, None] * maxabs[None, :] / spec.qmax  # (R, C)
    s = scales[:, :, None]
    wq = s * np.clip(np.round(w2[None] / s), spec.qmin, spec.qmax)
    err = ((wq - w2[None]) ** 2).sum(axis=2)  # (R, C)
    best = scales[np.argmin(err, axis=0), np.arange(w2.shape[0])]
    return np.maximum(best, SCALE_FLOOR), zero


def _act_params(x: np.ndarray, spec: QuantSpec, method: str) -> tuple[float, int, bool]:
    lo, hi = min(float(x.min()), 0.0), max(float(x.max()), 0.0)
    zero = hi - lo == 0.0
    if zero:
        return SCALE_FLOOR, 0, True
    best = None
    for r in _grid(method):
        s = max(r * (hi - lo) / spec.qmax, SCALE_FLOOR)
        zp = int(np.clip(np.round(-r * lo / s), spec.qmin, spec.qmax))
        xq = s * (np.clip(np.round(x / s) + zp, spec.qmin, spec.qmax) - zp)
        err = float(((xq - x) ** 2).sum())
        if best is None or err < best[0]:
            best = (err, s, zp)
    return best[1], best[2], False


def calibrate(spec: QuantSpec, samples, method: str = "mse", name: str = "", report: CalibrationReport | None = None):
    """Choose quantizer parameters from data.

    Weights get per-channel scales (max-abs * ratio / qmax) and AdaRound
    logits initialised so the hardened output equals round-to-nearest.
    Activations get a per-tensor (scale, zero_point) from the min/max range
    shrunk by the best ratio. ``method='minmax'`` skips the ratio search.
    """
    x = np.asarray(samples.data if isinstance(samples, Tensor) else samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("calibration samples are empty")
    if not np.all(np.isfinite(x)):
        raise ValueError("calibration samples contain non-finite values")
    if spec.mode == WEIGHT:
        if spec.passthrough:
            return WeightQuantState(np.ones(x.shape[spec.channel_axis]), np.zeros_like(x))
        scale, zero = _weight_scales(x, spec, method)
        state = WeightQuantState(scale, init_rounding(x, _channel_view(scale, x.ndim, spec.channel_axis)), zero)
    else:
        if spec.passthrough:
            return ActQuantState(1.0, 0)
        s, zp, zero = _act_params(x, spec, method)
        state = ActQuantState(s, zp, zero)
    if state.zero_input:
        log.warning("calibration input %r is all zeros; scale floored to %g", name, SCALE_FLOOR)
        if report is not None:
            report.flag(name)
    return state
