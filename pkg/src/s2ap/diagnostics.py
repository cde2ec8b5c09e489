"""Score-space sharpness and mask-stability measurements."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .losses import LossKind, loss_graph
from .model import Network

log = logging.getLogger(__name__)

RHO_GRID = (0.001, 0.0025, 0.005, 0.0075, 0.01)


def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    if not arrays:
        return np.zeros(0)
    return np.concatenate([np.ravel(a) for a in arrays])


def unflatten(vec: np.ndarray, like: Sequence[np.ndarray]) -> list[np.ndarray]:
    out, pos = [], 0
    for a in like:
        n = np.size(a)
        out.append(vec[pos:pos + n].reshape(np.shape(a)))
        pos += n
    return out


# -- mask stability ----------------------------------------------------------


@dataclass
class MaskTrace:
    """Bit-packed per-epoch masks plus the reference mask they are compared to."""
    length: int
    reference: np.ndarray
    masks: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def start(cls, reference_masks: Sequence[np.ndarray]) -> "MaskTrace":
        flat = flatten(reference_masks).astype(bool)
        return cls(flat.size, np.packbits(flat))

    def append(self, masks: Sequence[np.ndarray]) -> None:
        flat = flatten(masks).astype(bool)
        if flat.size != self.length:
            raise ValueError(f"mask length {flat.size} != trace length {self.length}")
        self.masks.append(np.packbits(flat))

    def unpack(self, packed: np.ndarray) -> np.ndarray:
        return np.unpackbits(packed, count=self.length).astype(bool)

    def __len__(self) -> int:
        return 1 + len(self.masks)


def hamming(a, b) -> float:
    a = np.asarray(a, dtype=bool).ravel()
    b = np.asarray(b, dtype=bool).ravel()
    if a.size != b.size:
        raise ValueError(f"mask length mismatch: {a.size} vs {b.size}")
    return float(np.count_nonzero(a ^ b)) / a.size


def hamming_trace(trace: MaskTrace, other: MaskTrace | None = None):
    """Distances h_t of each epoch mask from the reference mask, t = 1..T.

    With a second trace, returns ``(h_self, h_other, h_self - h_other)``; pass the
    original method first so that positive differences mean the second is more stable.
    """
    if len(trace) < 2:
        raise ValueError("a mask trace needs a reference and at least one epoch mask")
    ref = trace.unpack(trace.reference)
    h = [hamming(ref, trace.unpack(m)) for m in trace.masks]
    if other is None:
        return h
    if len(other) != len(trace) or other.length != trace.length:
        raise ValueError("mask traces differ in length")
    h_other = hamming_trace(other)
    return h, h_other, [a - b for a, b in zip(h, h_other)]


# -- curvature ---------------------------------------------------------------

GradFn = Callable[[np.ndarray], np.ndarray]


def hvp(grad_fn: GradFn, scores: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Hessian-vector product by central differences of ``grad_fn``."""
    s = np.asarray(scores, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    vn = np.linalg.norm(v)
    if vn == 0:
        raise ValueError("hvp direction must be nonzero")
    sn = np.linalg.norm(s)
    h = 1e-4 * (sn if sn > 0 else 1.0) / vn
    return (grad_fn(s + h * v) - grad_fn(s - h * v)) / (2 * h)


@dataclass
class PowerResult:
    value: float
    flat: bool = False
    vector: np.ndarray | None = None


def lambda_max(grad_fn: GradFn, scores: np.ndarray, iterations: int = 10,
               seed: int = 0, v0: np.ndarray | None = None) -> PowerResult:
    """Dominant Hessian eigenvalue via power iteration and a final Rayleigh quotient."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    s = np.asarray(scores, dtype=np.float64)
    v = np.random.default_rng(seed).standard_normal(s.size) if v0 is None else np.array(v0, dtype=np.float64)
    v = v / np.linalg.norm(v)
    for _ in range(iterations):
        hv = hvp(grad_fn, s, v)
        n = np.linalg.norm(hv)
        if n < 1e-12:
            return PowerResult(0.0, flat=True, vector=v)
        v = hv / n
    hv = hvp(grad_fn, s, v)
    if np.linalg.norm(hv) < 1e-12:
        return PowerResult(0.0, flat=True, vector=v)
    return PowerResult(float(v @ hv), vector=v)


def score_grad_fn(net: Network, x, y, x_adv, loss_kind: LossKind) -> tuple[GradFn, np.ndarray]:
    """Gradient of the objective in score space with the mask frozen at the current scores.

    Returns the gradient function over flattened scores and the reference point.
    The frozen-mask surrogate reproduces the straight-through gradient at the
    reference and has the curvature w * H_eff * w away from it.
    """
    ref = net.scores()

    def grad_fn(flat: np.ndarray) -> np.ndarray:
        lg = loss_graph(net, x, y, x_adv, loss_kind, "surrogate", grad_scores=True,
                        scores=unflatten(flat, ref), surrogate_ref=ref)
        grads = lg.backward()
        return flatten([grads[s] for s in lg.bound.s_leaves if s is not None])

    return grad_fn, flatten(ref)


# -- loss-difference sharpness -------------------------------------------------


def _search_loss(net, x, y, x_adv, loss_kind, scores, grad=False):
    lg = loss_graph(net, x, y, x_adv, loss_kind, "search", grad_scores=grad, scores=scores)
    if not grad:
        return lg.value, None
    grads = lg.backward()
    return lg.value, [grads[s] for s in lg.bound.s_leaves if s is not None]


@dataclass
class LossDiffResult:
    value: float
    nu: list[np.ndarray]


def loss_diff_sharpness(net: Network, x, y, x_adv, loss_kind: LossKind, rho: float,
                        steps: int = 20, restarts: int = 2, seed: int = 0,
                        warm_start: list[np.ndarray] | None = None) -> LossDiffResult:
    """Largest loss increase over score perturbations with |nu_i| <= rho * c_i.

    ``c = |s| + 1e-12``.  The adversarial batch ``x_adv`` stays fixed, masks
    follow ``s + nu``.  The maximum runs over every visited iterate including
    ``nu = 0`` and ``warm_start``, so the result is never negative.
    """
    s = net.scores()
    c = [np.abs(a) + 1e-12 for a in s]
    base, _ = _search_loss(net, x, y, x_adv, loss_kind, s)
    best_val, best_nu = 0.0, [np.zeros_like(a) for a in s]
    if rho <= 0:
        return LossDiffResult(0.0, best_nu)

    def evaluate(nu, grad):
        return _search_loss(net, x, y, x_adv, loss_kind, [a + b for a, b in zip(s, nu)], grad)

    if warm_start is not None:
        nu_w = [np.clip(a, -rho * ci, rho * ci) for a, ci in zip(warm_start, c)]
        val, _ = evaluate(nu_w, False)
        if val - base > best_val:
            best_val, best_nu = val - base, nu_w
    starts = [best_nu]
    rng = np.random.default_rng(seed)
    for _ in range(restarts - 1):
        starts.append([rng.uniform(-rho, rho, size=ci.shape) * ci for ci in c])

    step = rho / 4
    for start in starts:
        nu = [a.copy() for a in start]
        for _ in range(steps):
            val, g = evaluate(nu, True)
            if val - base > best_val:
                best_val, best_nu = val - base, [a.copy() for a in nu]
            nu = [np.clip(a + step * ci * np.sign(gi), -rho * ci, rho * ci)
                  for a, gi, ci in zip(nu, g, c)]
        val, _ = evaluate(nu, False)
        if val - base > best_val:
            best_val, best_nu = val - base, nu
    return LossDiffResult(best_val, best_nu)


def loss_diff_grid(net: Network, x, y, x_adv, loss_kind: LossKind, rhos=RHO_GRID,
                   steps: int = 20, restarts: int = 2, seed: int = 0) -> dict[float, float]:
    """Sharpness over an ascending rho grid, each radius warm-started from the previous optimum."""
    out, warm = {}, None
    for rho in sorted(rhos):
        res = loss_diff_sharpness(net, x, y, x_adv, loss_kind, rho, steps, restarts, seed, warm)
        out[float(rho)] = res.value
        warm = res.nu
    return out


@dataclass
class SharpnessReport:
    lambda_max: list[float] = field(default_factory=list)
    loss_diff: dict[float, float] = field(default_factory=dict)
    maximizer: str = "pgd"

    def to_dict(self) -> dict:
        return {"lambda_max": list(self.lambda_max),
                "loss_diff": {repr(k): v for k, v in sorted(self.loss_diff.items())},
                "maximizer": self.maximizer}
