"""Command line entry points: train, eval, ablate, sweep-alpha, gen-synth, inspect.

Exit codes: 0 ok, 1 runtime failure, 2 usage/config error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .config import RunConfig, dump_config, load_config
from .data import gen_synth
from .engine import (Trainer, eval_loader, evaluate, fit, make_datasets, model_from_checkpoint,
                     seed_everything)
from .errors import ConfigError, DataError, IoError, SEMCError
from .model import SEMC

log = logging.getLogger("semc")

# (label, ace_on, samc_on, lmc_on)
ABLATION_ROWS = [
    ("baseline", False, False, False),
    ("+ACE", True, False, False),
    ("+ACE+SAMC", True, True, False),
    ("+ACE+L_mc", True, False, True),
    ("full", True, True, True),
]
ALPHA_MODES = ["fixed:0.01", "fixed:0.05", "fixed:0.1", "fixed:0.2", "fixed:0.5", "adaptive"]


def prepare_out(out: Path, force: bool) -> Path:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def resolve_config(args) -> RunConfig:
    overrides = list(args.overrides or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    return load_config(args.config, overrides)


def run_training(cfg: RunConfig, out: Path) -> dict:
    """Seeded fit into ``out``; returns the summary that is also written to summary.json."""
    seed_everything(cfg.train.seed, cfg.train.deterministic)
    (out / "config.resolved").write_text(dump_config(cfg))
    train_set, val_set, manifest = make_datasets(cfg)
    trainer = Trainer(SEMC(cfg), cfg)
    result = fit(trainer, train_set, val_set, out)
    summary = {
        "best_epoch": result.best_epoch,
        "val": result.best_metrics.as_dict(),
        "final_val_f1": result.history[-1]["val_f1"],
        "final_val_acc": result.history[-1]["val_acc"],
    }
    test_idx = manifest.indices("test", cfg.train.seed, cfg.data.split)
    if test_idx and cfg.data.eval_on != "test":
        best, _ = model_from_checkpoint(result.best_path)
        _, test_set, _ = make_datasets(_with(cfg, **{"data.eval_on": "test"}), manifest)
        summary["test"] = evaluate(best.model, eval_loader(test_set, 64)).as_dict()
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def _with(cfg: RunConfig, **overrides) -> RunConfig:
    new = copy.deepcopy(cfg)
    for k, v in overrides.items():
        new.set(k, v)
    return new.validate()


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    manifest = Path(cfg.data.root) / cfg.data.manifest
    if not manifest.is_file():
        raise IoError(f"manifest not found: {manifest}")
    out = prepare_out(Path(args.out), args.force)
    summary = run_training(cfg, out)
    print(f"best epoch {summary['best_epoch']}: val acc {summary['val']['accuracy']:.2f} "
          f"f1 {summary['val']['f1']:.2f} -> {out / 'best.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    trainer, blob = model_from_checkpoint(args.checkpoint)
    cfg = trainer.cfg
    if args.data_root:
        cfg.data.root = args.data_root
    cfg = _with(cfg, **{"data.eval_on": args.split})
    _, held, _ = make_datasets(cfg)
    report = evaluate(trainer.model, eval_loader(held, 64))
    text = json.dumps({"split": args.split, **report.as_dict()}, indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


def _run_one(job: tuple[dict, str]) -> dict:
    cfg_dict, out = job
    cfg = RunConfig.from_dict(cfg_dict).validate()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return run_training(cfg, out)


def _run_jobs(jobs: list[tuple[RunConfig, Path]], n_jobs: int) -> list[dict]:
    payload = [(cfg.to_dict(), str(out)) for cfg, out in jobs]
    if n_jobs <= 1:
        return [_run_one(j) for j in payload]
    torch.set_num_threads(1)
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(_run_one, payload))


def parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be a comma separated list of integers, got {text!r}") from None


def ablation_configs(cfg: RunConfig, seeds: Sequence[int]):
    for label, ace, samc, lmc in ABLATION_ROWS:
        for seed in seeds:
            yield label, seed, _with(cfg, **{"model.ace_on": ace, "model.samc_on": samc,
                                             "train.lmc_on": lmc, "train.seed": seed})


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    seeds = parse_seeds(args.seeds) if args.seeds else [cfg.train.seed]
    out = prepare_out(Path(args.out), args.force)
    (out / "config.resolved").write_text(dump_config(cfg))
    runs = list(ablation_configs(cfg, seeds))
    jobs = [(c, out / f"{label.replace('+', 'plus_')}_seed{seed}") for label, seed, c in runs]
    summaries = _run_jobs(jobs, args.jobs)
    rows = []
    for (label, ace, samc, lmc) in ABLATION_ROWS:
        sel = [s for (lab, _, _), s in zip(runs, summaries) if lab == label]
        rows.append({"config": label, "ace_on": ace, "samc_on": samc, "lmc_on": lmc, "seeds": len(sel),
                     "val_accuracy": float(np.mean([s["val"]["accuracy"] for s in sel])),
                     "val_f1": float(np.mean([s["val"]["f1"] for s in sel])),
                     "val_f1_std": float(np.std([s["val"]["f1"] for s in sel]))})
    write_table(out / "ablation.csv", rows)
    md = ["| ACE | SAMC | L_mc | Accuracy | F1-score |", "|:-:|:-:|:-:|:-:|:-:|"]
    mark = {True: "yes", False: "no"}
    for r in rows:
        md.append(f"| {mark[r['ace_on']]} | {mark[r['samc_on']]} | {mark[r['lmc_on']]} | "
                  f"{r['val_accuracy']:.2f} | {r['val_f1']:.2f} |")
    (out / "ablation.md").write_text("\n".join(md) + "\n")
    print("\n".join(md))
    return 0


def cmd_sweep_alpha(args) -> int:
    cfg = resolve_config(args)
    seeds = parse_seeds(args.seeds) if args.seeds else [cfg.train.seed]
    out = prepare_out(Path(args.out), args.force)
    (out / "config.resolved").write_text(dump_config(cfg))
    runs = [(mode, seed, _with(cfg, **{"train.alpha_mode": mode, "train.seed": seed}))
            for mode in ALPHA_MODES for seed in seeds]
    jobs = [(c, out / f"{mode.replace(':', '_')}_seed{seed}") for mode, seed, c in runs]
    summaries = _run_jobs(jobs, args.jobs)
    rows = []
    for mode in ALPHA_MODES:
        sel = [s for (m, _, _), s in zip(runs, summaries) if m == mode]
        rows.append({"alpha_mode": mode, "seeds": len(sel),
                     "val_accuracy": float(np.mean([s["val"]["accuracy"] for s in sel])),
                     "val_f1": float(np.mean([s["val"]["f1"] for s in sel]))})
    write_table(out / "sweep_alpha.csv", rows)
    plot_sweep(rows, out / "sweep_alpha.png")
    for r in rows:
        print(f"{r['alpha_mode']:>12}  acc {r['val_accuracy']:6.2f}  f1 {r['val_f1']:6.2f}")
    return 0


def write_table(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def plot_sweep(rows: list[dict], path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fixed = [r for r in rows if r["alpha_mode"] != "adaptive"]
    xs = [float(r["alpha_mode"].split(":")[1]) for r in fixed]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(xs, [r["val_accuracy"] for r in fixed], "o-", label="fixed alpha")
    for r in rows:
        if r["alpha_mode"] == "adaptive":
            ax.axhline(r["val_accuracy"], color="tab:red", ls="--", label="adaptive alpha")
    ax.set_xscale("log")
    ax.set_xlabel("alpha")
    ax.set_ylabel("val accuracy (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_gen_synth(args) -> int:
    out = prepare_out(Path(args.out), args.force)
    manifest = gen_synth(out, args.classes, args.per_class, args.size, args.seed, args.contrast, args.speckle)
    print(f"wrote {len(manifest)} images in {manifest.num_classes} classes to {out}")
    return 0


@torch.no_grad()
def inspect_report(trainer: Trainer, batch: Optional[torch.Tensor] = None) -> dict:
    model, cfg = trainer.model, trainer.cfg
    experts, shared = model.expert_parameter_groups()
    if batch is None:
        g = torch.Generator().manual_seed(0)
        s = cfg.backbone.input_size
        batch = torch.rand(8, cfg.backbone.in_channels, s, s, generator=g)
    model.eval()
    out = model(batch, project=False)
    weights = out.head.gate.weights
    shapes = {k: list(getattr(out.pyramid, k).shape[1:]) for k in ("F1", "F2", "F3")}
    shapes["D"] = list(out.pyramid.D[0].shape[1:])
    shapes["O"] = list(out.fused.O[0].shape[1:])
    counts, _ = np.histogram(weights.argmax(dim=1).numpy(), bins=np.arange(model.num_experts + 1))
    return {
        "config_hash": cfg.model_hash(),
        "epoch": trainer.epoch,
        "shapes": shapes,
        "parameters": {"shared": sum(p.numel() for p in shared),
                       "experts": [sum(p.numel() for p in g) for g in experts],
                       "total": sum(p.numel() for p in model.parameters())},
        "queue": {"occupancy": len(trainer.queue), "capacity": trainer.queue.capacity},
        "gate_weights": weights.tolist(),
        "gate_argmax_histogram": counts.tolist(),
    }


def cmd_inspect(args) -> int:
    trainer, _ = model_from_checkpoint(args.checkpoint)
    batch = None
    root = Path(args.data_root or trainer.cfg.data.root)
    if (root / trainer.cfg.data.manifest).is_file():
        cfg = _with(trainer.cfg, **{"data.root": str(root), "data.eval_on": "all"})
        _, held, _ = make_datasets(cfg)
        batch = next(iter(eval_loader(held, args.batch)))[0]
    report = inspect_report(trainer, batch)
    if args.json:
        print(json.dumps(report, indent=2))
        return 0
    print(f"config hash      {report['config_hash']}  (epoch {report['epoch']})")
    for k, v in report["shapes"].items():
        print(f"shape {k:<10} {' x '.join(map(str, v))}")
    p = report["parameters"]
    print(f"params shared    {p['shared']}")
    for i, n in enumerate(p["experts"], 1):
        print(f"params expert {i}  {n}")
    print(f"queue            {report['queue']['occupancy']} / {report['queue']['capacity']}")
    print("gate weights (rows = samples):")
    for row in report["gate_weights"]:
        print("  " + "  ".join(f"{w:.3f}" for w in row) + f"   sum={sum(row):.6f}")
    print(f"gate argmax histogram {report['gate_argmax_histogram']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_args(p, out_required=True):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        p.add_argument("overrides", nargs="*", metavar="KEY=VALUE")

    p = sub.add_parser("train", help="train one model")
    run_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--data-root")
    p.add_argument("--out", help="write metrics JSON here")
    p.set_defaults(func=cmd_eval)

    for name, func, help_ in (("ablate", cmd_ablate, "ACE / SAMC / L_mc ablation table"),
                              ("sweep-alpha", cmd_sweep_alpha, "fixed vs adaptive alpha sweep")):
        p = sub.add_parser(name, help=help_)
        run_args(p)
        p.add_argument("--seeds", help="comma separated seeds (default: train.seed)")
        p.add_argument("--jobs", type=int, default=1)
        p.set_defaults(func=func)

    p = sub.add_parser("gen-synth", help="write a synthetic ultrasound-like dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=7)
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--contrast", type=float, default=0.35)
    p.add_argument("--speckle", type=float, default=1.0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("inspect", help="summarise a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data-root")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, IoError, DataError) as e:
        print(f"semc {args.command}: error: {e}", file=sys.stderr)
        return 2
    except SEMCError as e:
        print(f"semc {args.command}: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"semc {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
