"""Command-line entry point.  Exit codes: 0 ok, 1 invalid input, 2 runtime failure."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, config_to_dict, load_config
from .data import IdxFormatError
from .diagnostics import MaskTrace, hamming_trace, lambda_max, score_grad_fn
from .finetune import finetune
from .losses import craft
from .model import load_checkpoint, save_checkpoint
from .report import emit_report
from .runner import (StageError, _Stages, base_network, evaluate, load_dataset,
                     measure_loss_diff, prune_stage, run_paired, run_pipeline, sweep_gamma)

log = logging.getLogger("s2ap")

MODE_ALIASES = {"baseline": "baseline", "s2ap": "s2ap", "awp": "awp_prune"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seeds=(args.seed,))
    return cfg


def _out(args, cfg) -> Path:
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _trace_to_json(trace: MaskTrace) -> dict:
    return {"length": trace.length, "reference": trace.reference.tobytes().hex(),
            "masks": [m.tobytes().hex() for m in trace.masks]}


def _trace_from_json(d: dict) -> MaskTrace:
    unhex = lambda s: np.frombuffer(bytes.fromhex(s), dtype=np.uint8)
    return MaskTrace(d["length"], unhex(d["reference"]), [unhex(m) for m in d["masks"]])


def cmd_pretrain(args, cfg):
    out = _out(args, cfg)
    seed = cfg.seeds[0]
    ds = load_dataset(cfg, seed)
    base_network(dataclasses.replace(cfg, prune=dataclasses.replace(cfg.prune, rlth=False)),
                 ds, seed, _Stages(), out)
    print(out / "pretrained.chk")


def cmd_prune(args, cfg):
    out = _out(args, cfg)
    seed = cfg.seeds[0]
    mode = MODE_ALIASES[args.mode] if args.mode else cfg.prune.mode
    ds = load_dataset(cfg, seed)
    chk = out / "pretrained.chk"
    if cfg.prune.rlth or not chk.exists():
        net = base_network(cfg, ds, seed, _Stages(), out)
    else:
        net, _ = load_checkpoint(chk)
    res = prune_stage(net, cfg, ds, seed, mode)
    save_checkpoint(net, out / f"pruned_{mode}.chk", config_to_dict(cfg.with_seed(seed)))
    clean, rob = evaluate(net, cfg, ds, seed)
    _dump(out / f"prune_{mode}.json", {
        "mode": mode, "seed": seed, "mask_clean_acc": clean, "mask_pgd50_acc": rob,
        "epoch_loss": res.log.epoch_loss, "lambda_max": res.log.lambda_max,
        "best_epoch": res.log.best_epoch, "trace": _trace_to_json(res.log.trace)})
    print(f"{mode}: mask clean {clean:.2f}%  mask pgd50 {rob:.2f}%")


def cmd_finetune(args, cfg):
    out = _out(args, cfg)
    seed = cfg.seeds[0]
    chk = Path(args.checkpoint) if args.checkpoint else out / f"pruned_{cfg.prune.mode}.chk"
    if not chk.exists():
        raise FileNotFoundError(f"no pruned checkpoint at {chk}; run 'prune' first")
    net, _ = load_checkpoint(chk)
    ds = load_dataset(cfg, seed)
    run = cfg.with_seed(seed)
    flog = finetune(net, ds.train.x, ds.train.y, run.finetune, run.attack)
    save_checkpoint(net, out / "finetuned.chk", config_to_dict(run))
    clean, rob = evaluate(net, cfg, ds, seed)
    _dump(out / "finetune.json", {"seed": seed, "clean_acc": clean, "pgd50_acc": rob,
                                  "epoch_loss": flog.epoch_loss})
    print(f"finetuned: clean {clean:.2f}%  pgd50 {rob:.2f}%")


def cmd_diagnose(args, cfg):
    out = _out(args, cfg)
    seed = cfg.seeds[0]
    if args.measure == "hamming":
        files = {m: out / f"prune_{m}.json" for m in ("baseline", "s2ap")}
        traces = {m: _trace_from_json(json.loads(p.read_text())["trace"])
                  for m, p in files.items() if p.exists()}
        if not traces:
            raise FileNotFoundError(f"no prune_<mode>.json in {out}; run 'prune' first")
        result = {m: hamming_trace(t) for m, t in traces.items()}
        if len(traces) == 2:
            result["diff"] = [a - b for a, b in zip(result["baseline"], result["s2ap"])]
    else:
        chk = Path(args.checkpoint) if args.checkpoint else out / f"pruned_{cfg.prune.mode}.chk"
        if not chk.exists():
            raise FileNotFoundError(f"no checkpoint at {chk}")
        net, _ = load_checkpoint(chk)
        ds = load_dataset(cfg, seed)
        if args.measure == "lambda":
            tr = ds.train.head(cfg.diagnostics.lossdiff_batch)
            lk = cfg.prune_loss_kind()
            x_adv = craft(net, tr.x, tr.y, lk, cfg.attack, np.random.default_rng([seed, 6]), "search")
            fn, s0 = score_grad_fn(net, tr.x, tr.y, x_adv, lk)
            res = lambda_max(fn, s0, cfg.diagnostics.lambda_iters, seed)
            result = {"lambda_max": res.value, "flat": res.flat}
        else:
            result = {"maximizer": "pgd",
                      "loss_diff": {repr(k): v for k, v in measure_loss_diff(net, cfg, ds, seed).items()}}
    _dump(out / f"diagnose_{args.measure}.json", result)
    print(json.dumps(result, sort_keys=True))


def cmd_sweep(args, cfg):
    out = _out(args, cfg)
    best, table = sweep_gamma(cfg, out=out)
    for row in table:
        print(f"gamma={row['gamma']:<8g} mask_pgd50={row['mask_pgd50_acc']:.2f}")
    print(f"best gamma: {best:g}")


def cmd_report(args, cfg):
    out = _out(args, cfg)
    results = run_paired(cfg, out=out)
    emit_report(results, out)
    for mode, res in results.items():
        s = res.summary
        print(f"{mode:9s} mask pgd50 {s['mask_pgd50_acc']['mean']:.2f}±{s['mask_pgd50_acc']['std']:.2f}  "
              f"final pgd50 {s['pgd50_acc']['mean']:.2f}±{s['pgd50_acc']['std']:.2f}")


def cmd_run(args, cfg):
    out = _out(args, cfg)
    if args.mode:
        cfg = dataclasses.replace(cfg, prune=dataclasses.replace(cfg.prune, mode=MODE_ALIASES[args.mode]))
    res = run_pipeline(cfg, out)
    emit_report({res.mode: res}, out)
    print(json.dumps(res.summary, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="s2ap", description="Sharpness-aware adversarial pruning in score space.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    cmds = {
        "pretrain": (cmd_pretrain, "robustly pretrain a dense network"),
        "prune": (cmd_prune, "search a mask from the pretrained network"),
        "finetune": (cmd_finetune, "finetune the surviving weights of a pruned network"),
        "diagnose": (cmd_diagnose, "measure sharpness or mask stability"),
        "sweep-gamma": (cmd_sweep, "pick the perturbation scale by mask robust accuracy"),
        "report": (cmd_report, "paired baseline vs s2ap runs with CSV/SVG report"),
        "run": (cmd_run, "full pipeline for one pruning mode"),
    }
    for name, (fn, help_) in cmds.items():
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="path to a section.key = value config file")
        sp.add_argument("--seed", type=int, help="override the configured seed list")
        sp.add_argument("--out", help="output directory (default: run.out)")
        if name in ("prune", "run"):
            sp.add_argument("--mode", choices=sorted(MODE_ALIASES))
        if name == "diagnose":
            sp.add_argument("--measure", choices=("lambda", "lossdiff", "hamming"), required=True)
        if name in ("finetune", "diagnose"):
            sp.add_argument("--checkpoint", help="checkpoint to load instead of the default")
        sp.set_defaults(fn=fn)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _config(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        args.fn(args, cfg)
    except (ConfigError, IdxFormatError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
