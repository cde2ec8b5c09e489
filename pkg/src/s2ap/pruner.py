"""Score-based mask search: plain, score-perturbed (S2AP) and weight-perturbed."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig
from .diagnostics import MaskTrace, flatten, lambda_max, score_grad_fn
from .losses import LossKind, craft, loss_graph
from .model import Network

log = logging.getLogger(__name__)

PRUNE_MODES = ("baseline", "s2ap", "awp_prune")
GAMMA_GRID = (0.00075, 0.001, 0.0025, 0.005, 0.0075, 0.01)


@dataclass
class PruneConfig:
    sparsity: float = 0.9
    gamma: float = 0.001
    eta: float = 0.05
    epochs: int = 20
    warmup_epochs: int = 5
    mode: str = "s2ap"
    best_tracking: str = "epoch"
    rlth: bool = False
    loss_kind: LossKind = field(default_factory=LossKind)
    seed: int = 0
    batch_size: int = 64
    # lambda_max probes per epoch during search; 0 disables
    lambda_samples: int = 0
    lambda_iters: int = 10
    record_scores: bool = False

    def __post_init__(self):
        if self.mode not in PRUNE_MODES:
            raise ValueError(f"unknown prune mode {self.mode!r}; expected one of {PRUNE_MODES}")
        if self.best_tracking not in ("epoch", "iteration"):
            raise ValueError(f"best_tracking must be 'epoch' or 'iteration', got {self.best_tracking!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        # warmup == epochs is allowed: the search then never perturbs
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("need 0 <= warmup_epochs <= epochs")
        if self.mode != "baseline" and self.gamma <= 0:
            raise ValueError("gamma must be positive for perturbed search")
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError("sparsity must lie in [0, 1)")
        if self.eta <= 0:
            raise ValueError("eta must be positive")


@dataclass
class PruneLog:
    trace: MaskTrace
    iteration_loss: list[float] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)
    lambda_max: list[float] = field(default_factory=list)
    best_loss: float = float("inf")
    best_epoch: int = -1
    events: list[str] = field(default_factory=list)
    score_history: list[np.ndarray] = field(default_factory=list)
    max_restore_error: float = 0.0
    weights_unchanged: bool = True


@dataclass
class PruneResult:
    masks: list[np.ndarray]
    scores: list[np.ndarray]
    log: PruneLog


def global_norm(arrays) -> float:
    return float(np.sqrt(sum(float(np.sum(a * a)) for a in arrays)))


def project_layerwise(pert, refs, gamma: float):
    """Rescale each layer's perturbation into the ball of radius gamma * ||ref_l||."""
    out = []
    for p, r in zip(pert, refs):
        pn = np.linalg.norm(p)
        bound = gamma * np.linalg.norm(r)
        out.append(p * (bound / pn) if pn > bound else p)
    return out


def ascent_step(grads, refs, gamma: float, eta: float):
    """One normalised ascent step from zero followed by the layer-wise projection.

    Returns None when the gradient vanishes.
    """
    n = global_norm(grads)
    if n == 0:
        return None
    return project_layerwise([eta * g / n for g in grads], refs, gamma)


def perturb_scores(net: Network, x, y, gamma: float, eta: float, loss_kind: LossKind,
                   attack: AttackConfig | None = None, rng=None, x_adv=None, grads=None) -> bool:
    """Set each prunable layer's ``z`` to the projected worst-case score step.

    ``grads`` may carry the score gradient already computed at the unperturbed
    scores (z starts from zero, so it equals the gradient w.r.t. z).
    """
    layers = net.prunable
    for l in layers:
        l.z = np.zeros_like(l.s)
    if grads is None:
        if x_adv is None and loss_kind.kind != "clean_ce":
            x_adv = craft(net, x, y, loss_kind, attack, rng, "search")
        lg = loss_graph(net, x, y, x_adv, loss_kind, "search", grad_scores=True)
        g = lg.backward()
        grads = [g[s] for s in lg.bound.s_leaves if s is not None]
    z = ascent_step(grads, [l.s for l in layers], gamma, eta)
    if z is None:
        log.info("zero score gradient: perturbation left at zero")
        return False
    for l, zl in zip(layers, z):
        l.z = zl
    return True


def _score_grads(net, x, y, x_adv, loss_kind):
    lg = loss_graph(net, x, y, x_adv, loss_kind, "search", grad_scores=True)
    g = lg.backward()
    return lg.value, [g[s] for s in lg.bound.s_leaves if s is not None]


def _batches(rng, n, batch_size):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _probe_points(n_iters: int, samples: int) -> set[int]:
    if samples <= 0:
        return set()
    return {int(i) for i in np.linspace(0, n_iters - 1, min(samples, n_iters)).round()}


def search(net: Network, x, y, cfg: PruneConfig, attack: AttackConfig) -> PruneResult:
    """Run the mask search selected by ``cfg.mode`` and leave the best mask on ``net``.

    Scores must already be initialised.  Weights are never modified.
    """
    rng = np.random.default_rng([cfg.seed, 3])
    probe_rng = np.random.default_rng([cfg.seed, 7])
    net.set_sparsity(cfg.sparsity)
    layers = net.prunable
    w_before = [l.w.copy() for l in net.layers]
    b_before = [None if l.bias is None else l.bias.copy() for l in net.layers]

    plog = PruneLog(trace=MaskTrace.start(net.current_masks()))
    best_scores = net.scores()
    eta = cfg.eta
    n = len(y)

    for epoch in range(cfg.epochs):
        active = cfg.mode != "baseline" and epoch >= cfg.warmup_epochs
        batches = _batches(rng, n, cfg.batch_size)
        probes = _probe_points(len(batches), cfg.lambda_samples)
        epoch_losses, epoch_lambdas = [], []
        for it, idx in enumerate(batches):
            xb, yb = x[idx], y[idx]
            x_adv = craft(net, xb, yb, cfg.loss_kind, attack, rng, "search")
            loss, g = _score_grads(net, xb, yb, x_adv, cfg.loss_kind)
            plog.iteration_loss.append(loss)
            epoch_losses.append(loss)
            if it in probes:
                fn, s0 = score_grad_fn(net, xb, yb, x_adv, cfg.loss_kind)
                res = lambda_max(fn, s0, cfg.lambda_iters, seed=int(probe_rng.integers(2**31)))
                epoch_lambdas.append(res.value)
            if cfg.best_tracking == "iteration" and loss < plog.best_loss:
                plog.best_loss, plog.best_epoch = loss, epoch
                best_scores = net.scores()

            s_entry = net.scores()
            if active and cfg.mode == "s2ap":
                perturbed = perturb_scores(net, xb, yb, cfg.gamma, eta, cfg.loss_kind, grads=g)
                if not perturbed:
                    plog.events.append(f"epoch {epoch} iter {it}: zero gradient, z = 0")
                zs = [l.z for l in layers]
                for l, zl in zip(layers, zs):
                    l.s = l.s + zl
                _, g = _score_grads(net, xb, yb, x_adv, cfg.loss_kind)
            elif active and cfg.mode == "awp_prune":
                nu = _weight_perturbation(net, xb, yb, x_adv, cfg)
                if nu is None:
                    plog.events.append(f"epoch {epoch} iter {it}: zero weight gradient, nu = 0")
                else:
                    for l, v in zip(layers, nu):
                        l.nu = v
                        l.w = l.w + v
                    _, g = _score_grads(net, xb, yb, x_adv, cfg.loss_kind)
                for l, w0 in zip(net.layers, w_before):
                    l.w = w0.copy()
                    l.nu = np.zeros_like(l.w)

            gn = global_norm(g)
            if gn == 0:
                plog.events.append(f"epoch {epoch} iter {it}: zero score gradient, no step")
                step = [np.zeros_like(a) for a in g]
            else:
                step = [eta * a / gn for a in g]
            for l, st in zip(layers, step):
                l.s = l.s - st
            if active and cfg.mode == "s2ap":
                for l in layers:
                    l.s = l.s - l.z
                    l.z = np.zeros_like(l.s)
                expected = flatten([a - b for a, b in zip(s_entry, step)])
                err = float(np.max(np.abs(flatten(net.scores()) - expected), initial=0.0))
                plog.max_restore_error = max(plog.max_restore_error, err)
            if cfg.record_scores:
                plog.score_history.append(flatten(net.scores()))

        plog.trace.append(net.current_masks())
        mean_loss = float(np.mean(epoch_losses))
        plog.epoch_loss.append(mean_loss)
        if epoch_lambdas:
            plog.lambda_max.append(float(np.mean(epoch_lambdas)))
        if cfg.best_tracking == "epoch" and mean_loss < plog.best_loss:
            plog.best_loss, plog.best_epoch = mean_loss, epoch
            best_scores = net.scores()

    plog.weights_unchanged = all(
        np.array_equal(l.w, w0) for l, w0 in zip(net.layers, w_before)) and all(
        (b0 is None and l.bias is None) or np.array_equal(l.bias, b0)
        for l, b0 in zip(net.layers, b_before))
    net.set_scores(best_scores)
    net.update_masks()
    return PruneResult(net.masks(), net.scores(), plog)


def _weight_perturbation(net: Network, x, y, x_adv, cfg: PruneConfig):
    lg = loss_graph(net, x, y, x_adv, cfg.loss_kind, "search", grad_weights=True)
    g = lg.backward()
    layers = net.prunable
    grads = [g[wt] for wt, l in zip(lg.bound.w_leaves, net.layers) if l.prunable]
    return ascent_step(grads, [l.w for l in layers], cfg.gamma, cfg.eta)


def _run(net, x, y, cfg, attack, mode):
    if cfg.mode != mode:
        cfg = PruneConfig(**{**cfg.__dict__, "mode": mode})
    return search(net, x, y, cfg, attack)


def s2ap_prune(net: Network, x, y, cfg: PruneConfig, attack: AttackConfig) -> PruneResult:
    return _run(net, x, y, cfg, attack, "s2ap")


def baseline_prune(net: Network, x, y, cfg: PruneConfig, attack: AttackConfig) -> PruneResult:
    return _run(net, x, y, cfg, attack, "baseline")


def awp_prune(net: Network, x, y, cfg: PruneConfig, attack: AttackConfig) -> PruneResult:
    return _run(net, x, y, cfg, attack, "awp_prune")
