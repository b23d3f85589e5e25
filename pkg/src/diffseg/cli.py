"""``diffseg`` command line: gen-data, train, evaluate, ablate, report."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import config as config_mod
from .config import ExperimentConfig, config_hash


def _load_config(args) -> ExperimentConfig:
    cfg = config_mod.load(args.config) if args.config else ExperimentConfig()
    overrides = dict(kv.split("=", 1) for kv in (args.set or []))
    overrides = {k.strip(): v.strip() for k, v in overrides.items()}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    return config_mod.with_overrides(cfg, overrides) if overrides else cfg


def _say(msg: str) -> None:
    print(msg, flush=True)


def cmd_gen_data(args) -> int:
    from .experiment import gen_data
    cfg = _load_config(args)
    manifest = gen_data(cfg, args.out)
    _say(f"wrote {len(manifest['cases'])} cases to {args.out} (config {config_hash(cfg)})")
    return 0


def cmd_train(args) -> int:
    from .experiment import train
    cfg = _load_config(args)
    every = max(1, cfg.steps // 20)

    def progress(step, terms):
        if step % every == 0 or step == cfg.steps:
            _say(f"step {step}/{cfg.steps} " + " ".join(f"{k}={v:.4f}" for k, v in terms.items()))

    _say(f"config {config_hash(cfg)} -> {args.out}")
    res = train(cfg, args.data, args.out, resume=not args.restart, stop_after=args.stop_after,
                progress=progress)
    _say(f"{'finished' if res.finished else 'stopped'} at step {res.step} in {res.seconds:.1f} s")
    return 0 if res.finished or args.stop_after is not None else 1


def cmd_evaluate(args) -> int:
    from .experiment import evaluate
    s = evaluate(args.checkpoint, args.data, args.out, split=args.split, force=args.force)
    _say(f"{s.split}: Dice {s.mean_dice:.4f} ± {s.sd_dice:.4f}, "
         f"HD95 {s.mean_hd95:.3f} ± {s.sd_hd95:.3f} mm "
         f"({s.hd95_undefined} undefined), ROI-size Spearman {s.roi_size_spearman:.3f}")
    return 0


def _print_rows(rows) -> None:
    for r in rows:
        _say(f"{r['arm']:>14s} {r['status']:>7s} Dice {r['dice_mean']:.4f} ± {r['dice_sd']:.4f}  "
             f"HD95 {r['hd95_mean']:.3f} ± {r['hd95_sd']:.3f}  "
             f"delta {r['delta_dice_vs_reference']:+.4f}  p {r['p_value']:.3g}")


def cmd_ablate(args) -> int:
    from .experiment import ablate
    from .report import write_report
    cfg = _load_config(args)
    ok = ablate(cfg, args.data, args.out, seeds=args.seeds, arms=args.arms, log=_say)
    _print_rows(write_report(args.out, arms=args.arms or _all_arms(), seeds=args.seeds))
    return 0 if ok else 1


def _all_arms():
    from .experiment import ARMS
    return list(ARMS)


def cmd_report(args) -> int:
    from .report import write_report
    rows = write_report(args.out, arms=args.arms or _all_arms(), seeds=args.seeds)
    _print_rows(rows)
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def build_parser() -> argparse.ArgumentParser:
    from .experiment import ARMS

    parser = argparse.ArgumentParser(prog="diffseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", type=Path, help="key = value config file (defaults if omitted)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key; repeatable")
        if seed:
            p.add_argument("--seed", type=int, help="training seed override")

    p = sub.add_parser("gen-data", help="write the synthetic dataset")
    common(p, seed=False)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one configuration")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--restart", action="store_true", help="ignore existing checkpoints")
    p.add_argument("--stop-after", type=int, help="stop after this many steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="sample and score a split")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--force", action="store_true", help="accept a config-hash mismatch")
    p.set_defaults(func=cmd_evaluate)

    for name, fn, text in (("ablate", cmd_ablate, "train and compare ablation arms"),
                           ("report", cmd_report, "rebuild the report of an ablation directory")):
        p = sub.add_parser(name, help=text)
        if name == "ablate":
            common(p, seed=False)
            p.add_argument("--data", type=Path, required=True)
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
        p.add_argument("--arms", nargs="+", choices=list(ARMS))
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"diffseg {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
