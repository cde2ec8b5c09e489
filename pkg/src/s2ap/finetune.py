"""Weight training: dense robust pretraining and masked finetuning (plain or AWP)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig
from .losses import LossKind, craft, loss_graph
from .model import Network
from .pruner import _batches, global_norm, project_layerwise

log = logging.getLogger(__name__)

FINETUNE_MODES = ("standard", "s2ap_awp")


@dataclass
class FinetuneConfig:
    epochs: int = 30
    eta: float = 0.02
    gamma: float = 0.001
    mode: str = "s2ap_awp"
    loss_kind: LossKind = field(default_factory=LossKind)
    seed: int = 0
    batch_size: int = 64
    # scale eta by 0.1 from epoch epochs // 2 onward
    lr_decay: bool = False

    def __post_init__(self):
        if self.mode not in FINETUNE_MODES:
            raise ValueError(f"unknown finetune mode {self.mode!r}; expected one of {FINETUNE_MODES}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.mode == "s2ap_awp" and self.gamma <= 0:
            raise ValueError("gamma must be positive for s2ap_awp finetuning")


@dataclass
class FinetuneLog:
    epoch_loss: list[float] = field(default_factory=list)
    iteration_loss: list[float] = field(default_factory=list)
    weight_history: list[list[np.ndarray]] = field(default_factory=list)
    events: list[str] = field(default_factory=list)
    max_restore_error: float = 0.0
    pruned_unchanged: bool = True


def _param_grads(net: Network, x, y, x_adv, loss_kind: LossKind):
    lg = loss_graph(net, x, y, x_adv, loss_kind, "mask", grad_weights=True, grad_biases=True)
    g = lg.backward()
    gw = [g[t] for t in lg.bound.w_leaves]
    gb = [None if t is None else g[t] for t in lg.bound.b_leaves]
    return lg.value, gw, gb


def finetune(net: Network, x, y, cfg: FinetuneConfig, attack: AttackConfig,
             record_weights: bool = False) -> FinetuneLog:
    """Train the surviving weights under the stored mask; pruned entries stay frozen."""
    rng = np.random.default_rng([cfg.seed, 4])
    keep = [l.m if l.prunable else np.ones_like(l.w) for l in net.layers]
    frozen = [l.w[k == 0].copy() for l, k in zip(net.layers, keep)]
    flog = FinetuneLog()
    for epoch in range(cfg.epochs):
        eta = cfg.eta * (0.1 if cfg.lr_decay and epoch >= cfg.epochs // 2 else 1.0)
        losses = []
        for it, idx in enumerate(_batches(rng, len(y), cfg.batch_size)):
            xb, yb = x[idx], y[idx]
            x_adv = craft(net, xb, yb, cfg.loss_kind, attack, rng, "mask")
            loss, gw, gb = _param_grads(net, xb, yb, x_adv, cfg.loss_kind)
            losses.append(loss)
            w_entry = [l.w.copy() for l in net.layers]
            nu = None
            if cfg.mode == "s2ap_awp":
                gw_kept = [g * k for g, k in zip(gw, keep)]
                n = global_norm(gw_kept)
                if n == 0:
                    flog.events.append(f"epoch {epoch} iter {it}: zero weight gradient, nu = 0")
                else:
                    nu = project_layerwise([eta * g / n for g in gw_kept],
                                           [l.w for l in net.layers], cfg.gamma)
                    nu = [v * k for v, k in zip(nu, keep)]
                    for l, v in zip(net.layers, nu):
                        l.nu = v
                        l.w = l.w + v
                    _, gw, gb = _param_grads(net, xb, yb, x_adv, cfg.loss_kind)

            gw = [g * k for g, k in zip(gw, keep)]
            n = global_norm(gw + [g for g in gb if g is not None])
            if n == 0:
                flog.events.append(f"epoch {epoch} iter {it}: zero gradient, no step")
                n = np.inf
            steps = [eta * g / n * k for g, k in zip(gw, keep)]
            for l, st, g in zip(net.layers, steps, gb):
                l.w = l.w - st
                if g is not None:
                    l.bias = l.bias - eta * g / n
            if nu is not None:
                for l, v in zip(net.layers, nu):
                    l.w = l.w - v
                    l.nu = np.zeros_like(l.w)
                err = max(float(np.max(np.abs(l.w - (w0 - st)))) for l, w0, st in
                          zip(net.layers, w_entry, steps))
                flog.max_restore_error = max(flog.max_restore_error, err)
            flog.iteration_loss.append(loss)
            if record_weights:
                flog.weight_history.append([l.w.copy() for l in net.layers])
        flog.epoch_loss.append(float(np.mean(losses)))
    flog.pruned_unchanged = all(np.array_equal(l.w[k == 0], f)
                                for l, k, f in zip(net.layers, keep, frozen))
    return flog


def s2ap_finetune(net: Network, x, y, cfg: FinetuneConfig, attack: AttackConfig, **kw) -> FinetuneLog:
    if cfg.mode != "s2ap_awp":
        cfg = FinetuneConfig(**{**cfg.__dict__, "mode": "s2ap_awp"})
    return finetune(net, x, y, cfg, attack, **kw)


def standard_finetune(net: Network, x, y, cfg: FinetuneConfig, attack: AttackConfig, **kw) -> FinetuneLog:
    if cfg.mode != "standard":
        cfg = FinetuneConfig(**{**cfg.__dict__, "mode": "standard"})
    return finetune(net, x, y, cfg, attack, **kw)


@dataclass
class PretrainConfig:
    epochs: int = 30
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    loss_kind: LossKind = field(default_factory=LossKind)
    seed: int = 0


def pretrain(net: Network, x, y, cfg: PretrainConfig, attack: AttackConfig) -> list[float]:
    """Dense robust training with SGD + momentum; returns per-epoch mean loss."""
    rng = np.random.default_rng([cfg.seed, 2])
    vel_w = [np.zeros_like(l.w) for l in net.layers]
    vel_b = [None if l.bias is None else np.zeros_like(l.bias) for l in net.layers]
    history = []
    for _ in range(cfg.epochs):
        losses = []
        for idx in _batches(rng, len(y), cfg.batch_size):
            xb, yb = x[idx], y[idx]
            x_adv = craft(net, xb, yb, cfg.loss_kind, attack, rng, "dense")
            lg = loss_graph(net, xb, yb, x_adv, cfg.loss_kind, "dense", grad_weights=True, grad_biases=True)
            g = lg.backward()
            losses.append(lg.value)
            for i, l in enumerate(net.layers):
                vel_w[i] = cfg.momentum * vel_w[i] + g[lg.bound.w_leaves[i]]
                l.w = l.w - cfg.lr * vel_w[i]
                if l.bias is not None:
                    vel_b[i] = cfg.momentum * vel_b[i] + g[lg.bound.b_leaves[i]]
                    l.bias = l.bias - cfg.lr * vel_b[i]
        history.append(float(np.mean(losses)))
    return history
