"""Clean, PGD-adversarial and TRADES objectives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attacks import AttackConfig, pgd_attack
from .autodiff import Graph, Tensor
from .model import Bound, Network

LOSS_KINDS = ("clean_ce", "pgd_at", "trades")


@dataclass(frozen=True)
class LossKind:
    kind: str = "trades"
    beta: float = 6.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


def craft(net: Network, x, y, loss_kind: LossKind, attack: AttackConfig,
          rng: np.random.Generator | None, mode: str = "search", **bind_kw):
    """Adversarial inputs for the given objective, or None for clean training."""
    if loss_kind.kind == "clean_ce":
        return None
    objective = "ce" if loss_kind.kind == "pgd_at" else "kl"
    return pgd_attack(net, x, y, attack, objective, rng, mode, **bind_kw)


@dataclass
class LossGraph:
    graph: Graph
    loss: Tensor
    bound: Bound

    @property
    def value(self) -> float:
        return self.loss.item()

    def backward(self):
        return self.graph.backward(self.loss)


def loss_graph(net: Network, x, y, x_adv, loss_kind: LossKind, mode: str = "search",
               **bind_kw) -> LossGraph:
    """Record the objective for a fixed adversarial batch ``x_adv``."""
    g = Graph()
    bound = net.bind(g, mode, **bind_kw)
    if loss_kind.kind == "clean_ce":
        loss = g.mean(g.nll(g.log_softmax(net.forward(g, Tensor(x), bound)), y))
    elif loss_kind.kind == "pgd_at":
        loss = g.mean(g.nll(g.log_softmax(net.forward(g, Tensor(x_adv), bound)), y))
    else:
        logp_clean = g.log_softmax(net.forward(g, Tensor(x), bound))
        ce = g.mean(g.nll(logp_clean, y))
        if loss_kind.beta == 0.0:
            loss = ce
        else:
            logp_adv = g.log_softmax(net.forward(g, Tensor(x_adv), bound))
            loss = g.add(ce, g.scale(g.mean(g.kl(logp_clean, logp_adv)), loss_kind.beta))
    return LossGraph(g, loss, bound)


def robust_loss(net: Network, x, y, loss_kind: LossKind, attack: AttackConfig,
                rng: np.random.Generator | None = None, mode: str = "search", **bind_kw) -> float:
    """Mean objective on a batch after running its inner maximisation."""
    x_adv = craft(net, x, y, loss_kind, attack, rng, mode, **bind_kw)
    return loss_graph(net, x, y, x_adv, loss_kind, mode, **bind_kw).value
