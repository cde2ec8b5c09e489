"""Pretrain -> prune -> evaluate -> finetune -> evaluate, plus gamma sweeps and paired runs."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import clean_accuracy, robust_accuracy
from .config import RunConfig, config_to_dict
from .data import Dataset, gen_two_moons, load_idx
from .diagnostics import hamming_trace, loss_diff_grid
from .finetune import finetune, pretrain
from .losses import craft
from .model import Network, save_checkpoint
from .pruner import GAMMA_GRID, PruneResult, search

log = logging.getLogger(__name__)

METRICS = ("clean_acc", "pgd50_acc", "mask_clean_acc", "mask_pgd50_acc")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class SeedResult:
    seed: int
    stages: list[str]
    clean_acc: float
    pgd50_acc: float
    mask_clean_acc: float
    mask_pgd50_acc: float
    lambda_max: list[float]
    loss_diff: dict[float, float]
    hamming: list[float]
    prune_epoch_loss: list[float]
    best_epoch: int

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss_diff"] = {repr(k): v for k, v in sorted(self.loss_diff.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SeedResult":
        d = dict(d)
        d["loss_diff"] = {float(k): v for k, v in d["loss_diff"].items()}
        return cls(**d)


@dataclass
class ExperimentResult:
    mode: str
    per_seed: list[SeedResult]
    summary: dict[str, dict[str, float]] = field(default_factory=dict)
    lambda_max: list[float] = field(default_factory=list)
    hamming: list[float] = field(default_factory=list)
    loss_diff: dict[float, float] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @classmethod
    def aggregate(cls, mode: str, per_seed: list[SeedResult], config: dict) -> "ExperimentResult":
        summary = {}
        for m in METRICS:
            vals = np.array([getattr(r, m) for r in per_seed])
            summary[m] = {"mean": float(vals.mean()), "std": float(vals.std())}
        return cls(mode, per_seed, summary,
                   _mean_series([r.lambda_max for r in per_seed]),
                   _mean_series([r.hamming for r in per_seed]),
                   {rho: float(np.mean([r.loss_diff[rho] for r in per_seed]))
                    for rho in per_seed[0].loss_diff},
                   config)

    def to_dict(self) -> dict:
        return {"mode": self.mode,
                "per_seed": [r.to_dict() for r in self.per_seed],
                "summary": self.summary,
                "lambda_max": self.lambda_max,
                "hamming": self.hamming,
                "loss_diff": {repr(k): v for k, v in sorted(self.loss_diff.items())},
                "config": self.config}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentResult":
        return cls(d["mode"], [SeedResult.from_dict(r) for r in d["per_seed"]], d["summary"],
                   d["lambda_max"], d["hamming"],
                   {float(k): v for k, v in d["loss_diff"].items()}, d["config"])


def _mean_series(series: list[list[float]]) -> list[float]:
    if not series or not series[0]:
        return []
    return [float(v) for v in np.mean(np.array(series), axis=0)]


def load_dataset(cfg: RunConfig, seed: int) -> Dataset:
    d = cfg.data
    if d.kind == "moons":
        return gen_two_moons(d.n, d.noise, seed, d.test_fraction)
    if d.kind == "idx":
        train = load_idx(d.images, d.labels)
        if d.limit:
            train = train.head(d.limit)
        if not d.test_images:
            return train
        test = load_idx(d.test_images, d.test_labels, train.num_classes)
        if d.limit:
            test = test.head(d.limit)
        return Dataset(np.concatenate([train.x, test.x]), np.concatenate([train.y, test.y]),
                       max(train.num_classes, test.num_classes),
                       np.concatenate([np.zeros(len(train), bool), np.ones(len(test), bool)]))
    raise ValueError(f"unknown data.kind {d.kind!r}")


def _test_split(ds: Dataset) -> Dataset:
    return ds.test if ds.is_test.any() else ds


class _Stages:
    """Runs named stages, logging wall-clock and tagging failures."""

    def __init__(self):
        self.names: list[str] = []
        self.seconds: dict[str, float] = {}

    def run(self, name, fn, *args, **kw):
        t0 = time.perf_counter()
        try:
            out = fn(*args, **kw)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        dt = time.perf_counter() - t0
        self.names.append(name)
        self.seconds[name] = self.seconds.get(name, 0.0) + dt
        log.info("stage %s: %.2fs", name, dt)
        return out


def base_network(cfg: RunConfig, ds: Dataset, seed: int, stages: _Stages, out: Path | None) -> Network:
    """Randomly initialised network, robustly pretrained unless running RLTH."""
    net = Network.mlp(cfg.arch.dims, np.random.default_rng([seed, 1]),
                      cfg.arch.exempt_first_last, cfg.arch.rank)
    if cfg.prune.rlth:
        return net
    run = cfg.with_seed(seed)
    tr = ds.train
    stages.run("pretrain", pretrain, net, tr.x, tr.y, run.pretrain, run.attack)
    if out is not None:
        save_checkpoint(net, out / "pretrained.chk", config_to_dict(run))
    return net


def prune_stage(net: Network, cfg: RunConfig, ds: Dataset, seed: int, mode: str) -> PruneResult:
    run = cfg.with_seed(seed)
    pcfg = dataclasses.replace(run.prune, mode=mode,
                               lambda_samples=cfg.diagnostics.lambda_samples,
                               lambda_iters=cfg.diagnostics.lambda_iters)
    net.init_scores()
    tr = ds.train
    return search(net, tr.x, tr.y, pcfg, run.attack)


def evaluate(net: Network, cfg: RunConfig, ds: Dataset, seed: int) -> tuple[float, float]:
    te = _test_split(ds)
    rng = np.random.default_rng([seed, 5])
    return (clean_accuracy(net, te.x, te.y, "mask"),
            robust_accuracy(net, te.x, te.y, cfg.eval_attack, cfg.eval_restarts, rng, "mask"))


def measure_loss_diff(net: Network, cfg: RunConfig, ds: Dataset, seed: int) -> dict[float, float]:
    tr = ds.train.head(cfg.diagnostics.lossdiff_batch)
    lk = cfg.prune_loss_kind()
    rng = np.random.default_rng([seed, 6])
    x_adv = craft(net, tr.x, tr.y, lk, cfg.attack, rng, "search")
    return loss_diff_grid(net, tr.x, tr.y, x_adv, lk, cfg.diagnostics.rho_grid,
                          cfg.diagnostics.lossdiff_steps, cfg.diagnostics.lossdiff_restarts, seed)


def _branch(net: Network, cfg: RunConfig, ds: Dataset, seed: int, mode: str, stages: _Stages,
            out: Path | None, do_finetune: bool = True) -> SeedResult:
    res = stages.run("prune", prune_stage, net, cfg, ds, seed, mode)
    if out is not None:
        save_checkpoint(net, out / f"pruned_{mode}.chk", config_to_dict(cfg.with_seed(seed)))

    def mask_eval():
        clean, rob = evaluate(net, cfg, ds, seed)
        return clean, rob, measure_loss_diff(net, cfg, ds, seed)

    mask_clean, mask_rob, ldiff = stages.run("evaluate", mask_eval)
    clean, rob = mask_clean, mask_rob
    if not cfg.prune.rlth and do_finetune:
        run = cfg.with_seed(seed)
        tr = ds.train
        stages.run("finetune", finetune, net, tr.x, tr.y, run.finetune, run.attack)
        if out is not None:
            save_checkpoint(net, out / f"final_{mode}.chk", config_to_dict(run))
        clean, rob = stages.run("final_evaluate", evaluate, net, cfg, ds, seed)
    return SeedResult(seed, list(stages.names), clean, rob, mask_clean, mask_rob,
                      list(res.log.lambda_max), ldiff, hamming_trace(res.log.trace),
                      list(res.log.epoch_loss), res.log.best_epoch)


def run_seed(cfg: RunConfig, seed: int, mode: str | None = None, out: Path | None = None,
             do_finetune: bool = True) -> SeedResult:
    mode = mode or cfg.prune.mode
    ds = load_dataset(cfg, seed)
    stages = _Stages()
    net = base_network(cfg, ds, seed, stages, out)
    return _branch(net, cfg, ds, seed, mode, stages, out, do_finetune)


def _write_results(results: dict[str, ExperimentResult], out: Path | None) -> None:
    if out is None:
        return
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.json").write_text(results_json(results), encoding="utf-8")


def results_json(results: dict[str, ExperimentResult]) -> str:
    return json.dumps({k: v.to_dict() for k, v in results.items()}, indent=2, sort_keys=True) + "\n"


def load_results(path) -> dict[str, ExperimentResult]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return {k: ExperimentResult.from_dict(v) for k, v in raw.items()}


def run_pipeline(cfg: RunConfig, out: str | Path | None = None) -> ExperimentResult:
    """Full pipeline for ``cfg.prune.mode`` over every configured seed."""
    out = Path(out) if out is not None else None
    mode = cfg.prune.mode
    per_seed = []
    for seed in cfg.seeds:
        seed_out = None if out is None else out / f"seed{seed}"
        per_seed.append(run_seed(cfg, seed, mode, seed_out))
    result = ExperimentResult.aggregate(mode, per_seed, config_to_dict(cfg))
    _write_results({mode: result}, out)
    return result


def run_paired(cfg: RunConfig, modes=("baseline", "s2ap"), out: str | Path | None = None,
               do_finetune: bool = True) -> dict[str, ExperimentResult]:
    """Same pretrained network per seed, branched into each pruning mode."""
    out = Path(out) if out is not None else None
    per_mode: dict[str, list[SeedResult]] = {m: [] for m in modes}
    for seed in cfg.seeds:
        ds = load_dataset(cfg, seed)
        seed_out = None if out is None else out / f"seed{seed}"
        base = base_network(cfg, ds, seed, _Stages(), seed_out)
        for mode in modes:
            stages = _Stages()
            if not cfg.prune.rlth:
                stages.names.append("pretrain")
            per_mode[mode].append(_branch(base.copy(), cfg, ds, seed, mode, stages, seed_out, do_finetune))
    results = {m: ExperimentResult.aggregate(m, per_mode[m], config_to_dict(cfg)) for m in modes}
    _write_results(results, out)
    return results


def pick_gamma(table: list[dict]) -> float:
    """Highest mask robust accuracy; ties go to the smaller gamma."""
    if not table:
        raise ValueError("gamma grid must be nonempty")
    return min(table, key=lambda r: (-r["mask_pgd50_acc"], r["gamma"]))["gamma"]


def sweep_gamma(cfg: RunConfig, grid=GAMMA_GRID, out: str | Path | None = None):
    """S2AP mask search per gamma; returns the best gamma and the per-gamma table."""
    if not grid:
        raise ValueError("gamma grid must be nonempty")
    accs: dict[float, list[float]] = {float(g): [] for g in grid}
    for seed in cfg.seeds:
        ds = load_dataset(cfg, seed)
        base = base_network(cfg, ds, seed, _Stages(), None)
        for gamma in accs:
            net = base.copy()
            gcfg = dataclasses.replace(cfg, prune=dataclasses.replace(cfg.prune, gamma=gamma),
                                       diagnostics=dataclasses.replace(cfg.diagnostics, lambda_samples=0))
            prune_stage(net, gcfg, ds, seed, "s2ap")
            accs[gamma].append(evaluate(net, gcfg, ds, seed)[1])
    table = [{"gamma": g, "mask_pgd50_acc": float(np.mean(v))} for g, v in accs.items()]
    best = pick_gamma(table)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["gamma,mask_pgd50_acc"] + [f"{r['gamma']!r},{r['mask_pgd50_acc']!r}" for r in table]
        (out / "gamma_sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return best, table
