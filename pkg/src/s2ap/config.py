"""Run configuration and its flat ``section.key = value`` text format.

Grammar (one entry per line, UTF-8)::

    line    := blank | comment | entry
    comment := '#' anything
    entry   := section '.' key '=' value [ '#' comment ]
    value   := bool | int | float | list | string
    bool    := 'true' | 'false'
    list    := item (',' item)+          # also a single trailing comma: "3,"

Unknown sections or keys are rejected.  See docs/config.md for every key.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import AttackConfig
from .finetune import FinetuneConfig, PretrainConfig
from .losses import LossKind
from .model import MOONS_ARCH
from .pruner import PruneConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    kind: str = "moons"
    n: int = 1000
    noise: float = 0.1
    test_fraction: float = 0.2
    images: str = ""
    labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    limit: int = 0


@dataclass
class ArchConfig:
    dims: tuple = MOONS_ARCH
    exempt_first_last: bool = False
    rank: str = "magnitude"


@dataclass
class DiagnosticsConfig:
    lambda_samples: int = 4
    lambda_iters: int = 10
    rho_grid: tuple = (0.001, 0.0025, 0.005, 0.0075, 0.01)
    lossdiff_steps: int = 20
    lossdiff_restarts: int = 2
    lossdiff_batch: int = 256


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    loss: LossKind = field(default_factory=LossKind)
    prune_loss: str = ""
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    eval_attack: AttackConfig = field(default_factory=lambda: AttackConfig(steps=50))
    eval_restarts: int = 2
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    seeds: tuple = (0,)
    out: str = "runs/default"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seed list must be nonempty")

    def prune_loss_kind(self) -> LossKind:
        return LossKind(self.prune_loss, self.loss.beta) if self.prune_loss else self.loss

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with every stage seeded from ``seed``."""
        lk = self.loss
        return dataclasses.replace(
            self, seeds=(seed,),
            pretrain=dataclasses.replace(self.pretrain, seed=seed, loss_kind=lk),
            prune=dataclasses.replace(self.prune, seed=seed, loss_kind=self.prune_loss_kind()),
            finetune=dataclasses.replace(self.finetune, seed=seed, loss_kind=lk))


# section -> (attribute on RunConfig, allowed keys); keys map onto dataclass fields
_SECTIONS = {
    "data": ("data", None),
    "arch": ("arch", None),
    "diagnostics": ("diagnostics", None),
    "pretrain": ("pretrain", ("epochs", "lr", "momentum", "batch_size")),
    "prune": ("prune", ("sparsity", "gamma", "eta", "epochs", "warmup_epochs", "mode",
                        "best_tracking", "rlth", "batch_size")),
    "finetune": ("finetune", ("epochs", "eta", "gamma", "mode", "batch_size", "lr_decay")),
    "attack": ("attack", None),
    "eval": ("eval_attack", None),
}
_TOP = {"loss.kind", "loss.beta", "prune.loss", "eval.restarts", "run.seeds", "run.out"}


def _parse_value(raw: str):
    raw = raw.strip()
    if "," in raw:
        return tuple(_parse_value(p) for p in raw.split(",") if p.strip())
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    for conv in (int, float):
        try:
            return conv(raw)
        except ValueError:
            pass
    return raw


def _coerce(value, current, key):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, tuple):
        return value if isinstance(value, tuple) else (value,)
    return str(value)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    entries: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        lhs, rhs = (p.strip() for p in line.split("=", 1))
        if lhs.count(".") != 1:
            raise ConfigError(f"line {lineno}: key {lhs!r} must look like section.key")
        entries[lhs] = _parse_value(rhs)

    cfg = base or RunConfig()
    updates: dict[str, dict] = {}
    top: dict[str, object] = {}
    for key, value in entries.items():
        if key in _TOP:
            top[key] = value
            continue
        section, name = key.split(".")
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section {section!r} in {key!r}")
        attr, allowed = _SECTIONS[section]
        current = getattr(cfg, attr)
        names = {f.name for f in dataclasses.fields(current)}
        if name not in names or (allowed is not None and name not in allowed):
            raise ConfigError(f"unknown key {key!r}")
        updates.setdefault(attr, {})[name] = _coerce(value, getattr(current, name), key)

    try:
        kwargs = {attr: dataclasses.replace(getattr(cfg, attr), **vals) for attr, vals in updates.items()}
        if "loss.kind" in top or "loss.beta" in top:
            kwargs["loss"] = LossKind(str(top.get("loss.kind", cfg.loss.kind)),
                                      float(top.get("loss.beta", cfg.loss.beta)))
        if "prune.loss" in top:
            kwargs["prune_loss"] = str(top["prune.loss"])
            LossKind(kwargs["prune_loss"])
        if "eval.restarts" in top:
            kwargs["eval_restarts"] = _coerce(top["eval.restarts"], 0, "eval.restarts")
        if "run.seeds" in top:
            seeds = top["run.seeds"]
            seeds = seeds if isinstance(seeds, tuple) else (seeds,)
            kwargs["seeds"] = tuple(_coerce(s, 0, "run.seeds") for s in seeds)
        if "run.out" in top:
            kwargs["out"] = str(top["run.out"])
        if "arch" in kwargs:
            kwargs["arch"].dims = tuple(int(d) for d in kwargs["arch"].dims)
        return dataclasses.replace(cfg, **kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def config_to_dict(cfg: RunConfig) -> dict:
    """Flat ``section.key -> value`` echo of the effective configuration."""
    out: dict[str, object] = {}
    for section, (attr, allowed) in _SECTIONS.items():
        obj = getattr(cfg, attr)
        for f in dataclasses.fields(obj):
            if allowed is not None and f.name not in allowed:
                continue
            v = getattr(obj, f.name)
            out[f"{section}.{f.name}"] = list(v) if isinstance(v, tuple) else v
    out["loss.kind"] = cfg.loss.kind
    out["loss.beta"] = cfg.loss.beta
    out["prune.loss"] = cfg.prune_loss or cfg.loss.kind
    out["eval.restarts"] = cfg.eval_restarts
    out["run.seeds"] = list(cfg.seeds)
    out["run.out"] = cfg.out
    return dict(sorted(out.items()))


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in config_to_dict(cfg).items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v) + ("," if len(v) == 1 else "")
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
