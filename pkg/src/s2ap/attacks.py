"""l-inf projected gradient attacks on a prunable network."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Tensor
from .model import Network

# TRADES-style start for the KL maximiser: the KL gradient vanishes at x' == x.
KL_START_SCALE = 1e-3


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.08
    alpha: float = 0.02
    steps: int = 10
    random_start: bool = True
    clamp_lo: float = 0.0
    clamp_hi: float = 1.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.epsilon > 0 and not 0 < self.alpha <= self.epsilon:
            raise ValueError(f"need 0 < alpha <= epsilon, got alpha={self.alpha}, epsilon={self.epsilon}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.clamp_lo < self.clamp_hi:
            raise ValueError("clamp_lo must be < clamp_hi")


def _project(x_adv, x, cfg: AttackConfig):
    x_adv = np.clip(x_adv, x - cfg.epsilon, x + cfg.epsilon)
    return np.clip(x_adv, cfg.clamp_lo, cfg.clamp_hi)


def input_gradient(net: Network, x_adv: np.ndarray, y, objective: str, mode: str,
                   clean_logp: np.ndarray | None = None, **bind_kw) -> np.ndarray:
    g = Graph()
    xt = Tensor(x_adv, requires_grad=True)
    logits = net.forward(g, xt, net.bind(g, mode, **bind_kw))
    logp = g.log_softmax(logits)
    if objective == "ce":
        loss = g.sum(g.nll(logp, y))
    else:
        loss = g.sum(g.kl(Tensor(clean_logp), logp))
    return g.backward(loss)[xt]


def pgd_attack(net: Network, x: np.ndarray, y, cfg: AttackConfig, objective: str = "ce",
               rng: np.random.Generator | None = None, mode: str = "mask",
               trace: list | None = None, **bind_kw) -> np.ndarray:
    """Maximise the per-sample objective inside the eps-ball intersected with the box.

    objective is ``ce`` (cross-entropy against ``y``) or ``kl`` (KL from the
    clean prediction, TRADES inner problem).  Every iterate is appended to
    ``trace`` when given.
    """
    x = np.asarray(x, dtype=np.float64)
    if cfg.random_start:
        if rng is None:
            raise ValueError("random_start requires an rng")
        x_adv = x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)
    elif objective == "kl":
        if rng is None:
            raise ValueError("the kl objective needs an rng for its start point")
        x_adv = x + KL_START_SCALE * rng.standard_normal(x.shape)
    else:
        x_adv = x.copy()
    x_adv = _project(x_adv, x, cfg)
    if trace is not None:
        trace.append(x_adv.copy())

    clean_logp = None
    if objective == "kl":
        g = Graph()
        clean_logp = g.log_softmax(net.forward(g, Tensor(x), net.bind(g, mode, **bind_kw))).data
    elif objective != "ce":
        raise ValueError(f"unknown attack objective {objective!r}")

    for _ in range(cfg.steps):
        grad = input_gradient(net, x_adv, y, objective, mode, clean_logp, **bind_kw)
        x_adv = _project(x_adv + cfg.alpha * np.sign(grad), x, cfg)
        if trace is not None:
            trace.append(x_adv.copy())
    return x_adv


def robust_accuracy(net: Network, x: np.ndarray, y, cfg: AttackConfig, restarts: int = 2,
                    rng: np.random.Generator | None = None, mode: str = "mask", **bind_kw) -> float:
    """Percentage of samples classified correctly on x and after every restart."""
    y = np.asarray(y)
    ok = net.predict(x, mode) == y
    for _ in range(restarts):
        x_adv = pgd_attack(net, x, y, cfg, "ce", rng, mode, **bind_kw)
        ok &= net.predict(x_adv, mode) == y
    return 100.0 * float(ok.mean())


def clean_accuracy(net: Network, x: np.ndarray, y, mode: str = "mask") -> float:
    return 100.0 * float((net.predict(x, mode) == np.asarray(y)).mean())
