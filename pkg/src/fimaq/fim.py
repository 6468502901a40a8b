"""Fisher-information machinery at a block output.

The exact categorical FIM is obtained by enumerating every class; the cheap
estimators only ever see averaged perturbations ``dz`` and averaged KL
gradients ``grad`` and rely on ``grad ~= F @ dz``.

Loss evaluators take ``sample_dz`` of shape (a,) or (n, a) and return a
Tensor of shape () or (n,). FIM factors are constants: gradients flow only
into ``sample_dz``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import ops
from .autodiff import Tape, Tensor, as_tensor

LOSS_KINDS = ("mse", "brecq", "diag", "rank1", "rankk", "dplr")
FIM_KINDS = ("diag", "rank1", "rankk", "dplr", "brecq_diag")

DEPENDENCE_TOL = 1e-6
COND_LIMIT = 1e10
EPS_POS = 1e-12


class FallbackToDiag(ArithmeticError):
    """Rank-one factor undefined because grad . dz is not positive."""


@dataclass
class ScoreSample:
    label: int
    weight: float
    score: np.ndarray


# -- exact oracle ------------------------------------------------------------

def class_scores(model_tail: Callable[[Tensor], Tensor], z) -> list[ScoreSample]:
    """Score vectors d log p(y; z) / dz for every class y, with p(y; z)."""
    z = np.asarray(z, dtype=np.float64)
    logits0 = model_tail(Tensor(z[None])).data[0]
    if not np.all(np.isfinite(logits0)):
        raise FloatingPointError("model tail produced non-finite logits")
    n_cls = logits0.shape[-1]
    if n_cls > 100:
        raise ValueError(f"{n_cls} classes is too many to enumerate")
    tape = Tape()
    zs = tape.variable(np.broadcast_to(z, (n_cls,) + z.shape))
    lp = ops.log_softmax(model_tail(zs))
    picked = ops.sum(ops.mul(lp, np.eye(n_cls)))
    g = tape.backward(picked)[zs].reshape(n_cls, -1)
    lp0 = lp.data[0]
    p = np.exp(lp0 - lp0.max())
    p /= p.sum()
    return [ScoreSample(y, float(p[y]), g[y]) for y in range(n_cls)]


def exact_fim(model_tail, z) -> np.ndarray:
    """F = sum_y p(y) g_y g_y^T by class enumeration (a x a, a = z.size)."""
    samples = class_scores(model_tail, z)
    g = np.stack([s.score for s in samples])
    p = np.array([s.weight for s in samples])
    f = g.T @ (p[:, None] * g)
    return 0.5 * (f + f.T)


def score_expectation(model_tail, z) -> np.ndarray:
    samples = class_scores(model_tail, z)
    return sum(s.weight * s.score for s in samples)


def identity_tail(z: Tensor) -> Tensor:
    return z


# -- probes ------------------------------------------------------------------

def kl_grads(model_tail, z, dz) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample KL(p(z) || p(z + dz)) and its gradient w.r.t. dz.

    ``z`` and ``dz`` are batched along axis 0.
    """
    z = np.asarray(z, dtype=np.float64)
    dz = np.asarray(dz, dtype=np.float64)
    ref = model_tail(Tensor(z))
    tape = Tape()
    d = tape.variable(dz)
    kl = ops.kl_divergence(ref, model_tail(ops.add(z, d)))
    total = ops.sum(kl)
    return kl.data.copy(), tape.backward(total)[d]


def collect_perturbation(model_tail, z, dz_batch) -> tuple[np.ndarray, np.ndarray]:
    """Mean perturbation and mean per-sample KL gradient, both flattened."""
    dz_batch = np.asarray(dz_batch, dtype=np.float64)
    if dz_batch.shape[0] == 0:
        raise ValueError("empty perturbation batch")
    z = np.broadcast_to(np.asarray(z, dtype=np.float64), dz_batch.shape)
    _, grads = kl_grads(model_tail, z, dz_batch)
    n = dz_batch.shape[0]
    return dz_batch.reshape(n, -1).mean(axis=0), grads.reshape(n, -1).mean(axis=0)


# -- estimates ---------------------------------------------------------------

@dataclass
class FimEstimate:
    kind: str
    diag: np.ndarray | None = None
    u: np.ndarray | None = None
    bank: "PerturbationBank | None" = None
    alpha: float = 0.5
    clamp_fraction: float = 0.0

    def __post_init__(self):
        if self.kind not in FIM_KINDS:
            raise ValueError(f"unknown FIM estimate kind {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    def matrix(self) -> np.ndarray:
        """Dense a x a form; only for inspection at small a."""
        if self.kind in ("diag", "brecq_diag"):
            return np.diag(self.diag)
        if self.kind == "rank1":
            return np.outer(self.u, self.u)
        if self.kind == "rankk":
            return self.bank.matrix()
        return self.alpha * self.bank.matrix() + (1.0 - self.alpha) * np.diag(self.diag)


def estimate_diag(avg_dz, avg_grad, eps_rel: float = 1e-8) -> FimEstimate:
    dz = np.asarray(avg_dz, dtype=np.float64).reshape(-1)
    g = np.asarray(avg_grad, dtype=np.float64).reshape(-1)
    if dz.shape != g.shape:
        raise ValueError("avg_dz and avg_grad lengths differ")
    eps = eps_rel * np.abs(dz).max() if dz.size else 0.0
    ok = np.abs(dz) >= max(eps, np.finfo(float).tiny)
    ratio = np.zeros_like(dz)
    ratio[ok] = g[ok] / dz[ok]
    neg = ratio < 0
    ratio[neg] = 0.0
    return FimEstimate("diag", diag=ratio, clamp_fraction=float(neg.mean()) if dz.size else 0.0)


def rank1_factor(avg_dz, avg_grad, eps_pos: float = EPS_POS) -> np.ndarray:
    dz = np.asarray(avg_dz, dtype=np.float64).reshape(-1)
    g = np.asarray(avg_grad, dtype=np.float64).reshape(-1)
    inner = float(g @ dz)
    if not inner > eps_pos:
        raise FallbackToDiag(f"grad . dz = {inner:.3e} is not positive")
    return g / np.sqrt(inner)


# -- perturbation bank -------------------------------------------------------

def gram_inverse(dz: np.ndarray) -> np.ndarray:
    gram = dz.T @ dz
    k = gram.shape[0]
    if np.linalg.cond(gram) > COND_LIMIT:
        gram = gram + 1e-10 * np.trace(gram) / k * np.eye(k)
    return np.linalg.solve(gram, np.eye(k))


@dataclass
class AppendResult:
    accepted: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.accepted


@dataclass
class PerturbationBank:
    """Columns of averaged perturbations and gradients, plus (dz^T dz)^-1."""

    size: int
    target_rank: int
    dz: np.ndarray = field(init=False)
    grad: np.ndarray = field(init=False)
    gram_inv: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.target_rank < 1:
            raise ValueError("target rank must be >= 1")
        self.dz = np.zeros((self.size, 0))
        self.grad = np.zeros((self.size, 0))
        self.gram_inv = np.zeros((0, 0))

    @property
    def rank(self) -> int:
        return self.dz.shape[1]

    def append(self, avg_dz, avg_grad) -> AppendResult:
        if self.rank >= self.target_rank:
            return AppendResult(False, "full")
        d = np.asarray(avg_dz, dtype=np.float64).reshape(-1)
        g = np.asarray(avg_grad, dtype=np.float64).reshape(-1)
        if d.shape != (self.size,) or g.shape != (self.size,):
            raise ValueError(f"bank expects vectors of length {self.size}")
        norm = np.linalg.norm(d)
        if norm == 0.0 or not np.all(np.isfinite(d)) or not np.all(np.isfinite(g)):
            return AppendResult(False, "degenerate")
        if self.rank:
            coef, *_ = np.linalg.lstsq(self.dz, d, rcond=None)
            resid = np.linalg.norm(d - self.dz @ coef)
            if resid < DEPENDENCE_TOL * norm:
                return AppendResult(False, "near-dependence")
        dz = np.column_stack([self.dz, d])
        if np.linalg.cond(dz.T @ dz) > COND_LIMIT:
            return AppendResult(False, "ill-conditioned")
        self.dz = dz
        self.grad = np.column_stack([self.grad, g])
        self.gram_inv = gram_inverse(dz)
        return AppendResult(True)

    def matrix(self) -> np.ndarray:
        """F_rank-k = grad (dz^T dz)^-1 dz^T."""
        return self.grad @ self.gram_inv @ self.dz.T

    def asymmetry(self) -> float:
        m = self.dz.T @ self.grad
        return float(np.abs(m - m.T).max()) if m.size else 0.0

    def snapshot(self) -> tuple[bytes, bytes, bytes]:
        return self.dz.tobytes(), self.grad.tobytes(), self.gram_inv.tobytes()


# -- losses ------------------------------------------------------------------

def _rows(sample_dz) -> tuple[Tensor, bool]:
    t = as_tensor(sample_dz)
    if t.data.ndim == 1:
        return ops.reshape(t, (1, -1)), True
    if t.data.ndim != 2:
        return ops.reshape(t, (t.shape[0], -1)), False
    return t, False


def _finish(x: Tensor, single: bool) -> Tensor:
    return ops.reshape(x, ()) if single else x


def loss_mse(sample_dz) -> Tensor:
    dz, single = _rows(sample_dz)
    return _finish(ops.sum(ops.square(dz), axis=-1), single)


def loss_diag(sample_dz, diag_vec) -> Tensor:
    dz, single = _rows(sample_dz)
    return _finish(ops.sum(ops.mul(ops.square(dz), np.asarray(diag_vec)), axis=-1), single)


def loss_rank1(sample_dz, u) -> Tensor:
    dz, single = _rows(sample_dz)
    proj = ops.matmul(dz, np.asarray(u, dtype=np.float64).reshape(-1, 1))
    return _finish(ops.reshape(ops.square(proj), (dz.shape[0],)), single)


def loss_rankk(sample_dz, bank: PerturbationBank) -> Tensor:
    """(sample_dz^T grad) B (dz^T sample_dz) per sample, O(a k)."""
    if bank.rank < 1:
        raise ValueError("rank-k loss needs a non-empty bank")
    dz, single = _rows(sample_dz)
    a = ops.matmul(dz, bank.grad)
    c = ops.matmul(dz, bank.dz)
    return _finish(ops.sum(ops.mul(ops.matmul(a, bank.gram_inv), c), axis=-1), single)


def loss_dplr(sample_dz, bank: PerturbationBank, diag_vec, alpha: float) -> Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return ops.add(
        ops.scale(loss_rankk(sample_dz, bank), alpha),
        ops.scale(loss_diag(sample_dz, diag_vec), 1.0 - alpha),
    )


def loss_brecq(sample_dz, sample_grad) -> Tensor:
    dz, single = _rows(sample_dz)
    g = np.asarray(sample_grad, dtype=np.float64).reshape(dz.shape)
    return _finish(ops.sum(ops.mul(ops.square(dz), g * g), axis=-1), single)


# -- heatmaps ----------------------------------------------------------------

def class_token_fim_heatmap(fim, tokens: int, dim: int, class_token: int | None = 0) -> np.ndarray:
    """D x D block of an (T*D) x (T*D) FIM at the class-token coordinates."""
    if class_token is None:
        raise ValueError("token layout has no class token")
    mat = fim.matrix() if isinstance(fim, FimEstimate) else np.asarray(fim, dtype=np.float64)
    if mat.shape != (tokens * dim, tokens * dim):
        raise ValueError(f"matrix shape {mat.shape} does not match layout T={tokens}, D={dim}")
    if not 0 <= class_token < tokens:
        raise ValueError(f"class token index {class_token} outside 0..{tokens - 1}")
    sl = slice(class_token * dim, (class_token + 1) * dim)
    return mat[sl, sl].copy()


def write_heatmap_csv(path, mat: np.ndarray) -> None:
    mat = np.asarray(mat, dtype=np.float64)
    rows, cols = mat.shape
    with open(path, "w", newline="") as fh:
        fh.write(f"# rows={rows} cols={cols} token=class\n")
        w = csv.writer(fh)
        for row in mat:
            w.writerow([repr(float(v)) for v in row])


def read_heatmap_csv(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# rows="):
        raise ValueError(f"{path}: missing heatmap header")
    head = dict(kv.split("=") for kv in lines[0][2:].split())
    mat = np.array([[float(v) for v in row] for row in csv.reader(lines[1:])])
    if mat.shape != (int(head["rows"]), int(head["cols"])):
        raise ValueError(f"{path}: header says {head['rows']}x{head['cols']}, body is {mat.shape}")
    return mat
