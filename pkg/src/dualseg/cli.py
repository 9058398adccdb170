"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 numeric abort.  Failures print a
single ``error code=<CODE> detail=<json string>`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .ema import EmaConfig
from .gradcheck import sweep
from .losses import LOSS_COLUMNS
from .metrics import format_table, write_csv
from .pseudo import variance_study, write_variance_csv
from .synthdata import WeatherConfig, generate_scene, make_split, write_pgm, write_ppm
from .trainer import (
    EVAL_SEED_OFFSET,
    METRIC_COLUMNS,
    VARIANTS,
    NumericAbort,
    TrainConfig,
    Trainer,
)

log = logging.getLogger("dualseg")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2

# Benchmark used by `ablate`: label-scarce split over the three weather presets.
BENCHMARK = {"epochs": 30, "data": {"n_train": 128, "labeled_ratio": 0.0625, "betas": [0.2, 0.5, 0.7], "n_eval": 48}}
ABLATION_ORDER = ("COMPLETE", "DTC", "DTFW", "STFW")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2, which is reserved for numeric aborts
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _fail(code: str, detail: str, status: int) -> int:
    print(f"error code={code} detail={json.dumps(detail)}", file=sys.stderr)
    return status


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, args: dict, config: dict | None = None) -> None:
    manifest = {"command": command, "version": __version__, "args": args}
    if config is not None:
        manifest["config"] = config
        manifest["seed"] = config["seed"]
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _config_from_args(args, base: dict | None = None) -> TrainConfig:
    d = dict(base or {})
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        d = raw.get("config", {}) if "command" in raw else raw
    cfg = TrainConfig.from_dict(d)
    opt = lambda name: getattr(args, name, None)  # noqa: E731
    if opt("seed") is not None:
        cfg = replace(cfg, seed=args.seed)
    if opt("variant") is not None:
        cfg = replace(cfg, variant=args.variant)
    if opt("epochs") is not None:
        cfg = replace(cfg, epochs=args.epochs)
    if opt("tau") is not None:
        cfg = replace(cfg, tau=args.tau)
    if opt("alpha") is not None:
        cfg = replace(cfg, ema=EmaConfig(alpha=args.alpha))
    lams = {k: opt(k) for k in ("lambda1", "lambda2", "lambda3") if opt(k) is not None}
    if lams:
        cfg = replace(cfg, weights=replace(cfg.weights, **lams))
    return cfg


def _train_outputs(trainer: Trainer, out: Path) -> None:
    write_csv(out / "losses.csv", trainer.state.loss_rows, LOSS_COLUMNS)
    write_csv(out / "metrics.csv", trainer.state.history.rows, METRIC_COLUMNS)


# --- subcommands --------------------------------------------------------------


def cmd_train(args) -> int:
    out = _out_dir(args)
    if args.resume:
        trainer = Trainer.load(args.resume)
        cfg = trainer.cfg
    else:
        cfg = _config_from_args(args)
        trainer = Trainer(cfg)
    _write_manifest(out, "train", {"resume": args.resume}, cfg.to_dict())
    ckpts = out / "checkpoints"
    ckpts.mkdir(exist_ok=True)
    stop = trainer.total_steps if args.stop_after is None else args.stop_after
    spe = cfg.steps_per_epoch
    try:
        while trainer.state.step < stop:
            trainer.fit(until_step=min(stop, (trainer.state.step // spe + 1) * spe))
            trainer.save(ckpts / f"step_{trainer.state.step:06d}.ckpt")
    finally:
        _train_outputs(trainer, out)
    if trainer.state.history.rows:
        print(format_table(trainer.state.history.rows, ["epoch", "miou", "pixel_acc", "total", "mask_fraction"]))
    return EXIT_OK


def cmd_eval(args) -> int:
    out = _out_dir(args)
    trainer = Trainer.load(args.checkpoint)
    cfg = trainer.cfg
    seed = args.seed if args.seed is not None else cfg.seed + EVAL_SEED_OFFSET
    modes = [WeatherConfig(beta=b) for b in cfg.data.betas]
    split = make_split(args.n, 1.0, modes, seed, cfg.dims)
    metrics = {"checkpoint": str(args.checkpoint), "scene_seed": seed, "step": trainer.state.step, **trainer.evaluate(split)}
    _write_manifest(out, "eval", {"checkpoint": str(args.checkpoint), "seed": seed, "n": args.n})
    write_csv(out / "metrics.csv", [metrics])
    print(json.dumps(metrics, indent=2))
    return EXIT_OK


def cmd_ablate(args) -> int:
    out = _out_dir(args)
    base = dict(BENCHMARK)
    cfg0 = _config_from_args(args, base)
    first = args.seed or 0
    seeds = list(range(first, first + args.seeds))
    _write_manifest(out, "ablate", {"seed": first, "seeds": args.seeds}, cfg0.to_dict())
    rows = []
    for variant in VARIANTS:
        for seed in seeds:
            cfg = replace(cfg0, variant=variant, seed=seed)
            trainer = Trainer(cfg)
            hist = trainer.fit()
            last = hist.rows[-1]
            rows.append(
                {
                    "variant": variant,
                    "seed": seed,
                    "miou": last["miou"],
                    "pixel_acc": last["pixel_acc"],
                    "terminal_loss": last["total"],
                    "w_dev": last["w_dev"],
                }
            )
            log.info("%s seed=%d miou=%.4f", variant, seed, last["miou"])
    write_csv(out / "ablation.csv", rows)
    summary = ablation_summary(rows)
    write_csv(out / "ablation_summary.csv", summary)
    print(format_table(summary, ["variant", "mean_miou", "std_miou", "gain_vs_STFW"]))
    print(f"ordering {' >= '.join(ABLATION_ORDER)}: {'holds' if ordering_holds(summary) else 'violated'}")
    return EXIT_OK


def ablation_summary(rows: list[dict]) -> list[dict]:
    by = {}
    for r in rows:
        by.setdefault(r["variant"], []).append(r["miou"])
    ref = float(np.mean(by["STFW"])) if "STFW" in by else float("nan")
    return [
        {
            "variant": v,
            "n_seeds": len(xs),
            "mean_miou": float(np.mean(xs)),
            "std_miou": float(np.std(xs)),
            "gain_vs_STFW": float(np.mean(xs)) - ref,
        }
        for v, xs in by.items()
    ]


def ordering_holds(summary: list[dict]) -> bool:
    means = {r["variant"]: r["mean_miou"] for r in summary}
    chain = [means[v] for v in ABLATION_ORDER]
    return all(a >= b for a, b in zip(chain, chain[1:])) and means["COMPLETE"] - means["STFW"] > 0


def cmd_variance(args) -> int:
    out = _out_dir(args)
    rho = 0.0 if args.rho is None else args.rho
    params = {"rho": rho, "sigma": args.sigma, "trials": args.trials, "seed": args.seed or 0}
    _write_manifest(out, "variance-study", params)
    report = variance_study(sigma=args.sigma, rho=rho, trials=args.trials, seed=args.seed or 0)
    write_variance_csv([report], out / "variance.csv")
    print(format_table([report.row()], ["rho", "sigma", "trials", "var_single", "var_avg", "ratio", "cov"]))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    out = _out_dir(args)
    _write_manifest(out, "gradcheck", {"seed": args.seed or 0, "rtol": args.rtol})
    results = sweep(seed=args.seed or 0)
    rows = [
        {
            "name": r.name,
            "max_rel_err": r.max_rel_err,
            "max_abs_err": r.max_abs_err,
            "n_coords": r.n_coords,
            "passed": r.passed(args.rtol),
        }
        for r in results
    ]
    write_csv(out / "gradcheck.csv", rows)
    print(format_table(rows, ["name", "max_rel_err", "n_coords", "passed"]))
    failed = [r["name"] for r in rows if not r["passed"]]
    if failed:
        return _fail("GRADCHECK_FAILED", ", ".join(failed), EXIT_INVALID)
    return EXIT_OK


def cmd_dump_scenes(args) -> int:
    out = _out_dir(args)
    cfg = _config_from_args(args)
    beta = 0.0 if args.beta is None else args.beta
    _write_manifest(out, "dump-scenes", {"n": args.n, "beta": beta}, cfg.to_dict())
    scenes = out / "scenes"
    scenes.mkdir(exist_ok=True)
    rng = np.random.default_rng([cfg.seed, 0xD0])
    for i, s in enumerate(rng.integers(0, 2**62, size=args.n)):
        img, mask = generate_scene(cfg.dims, WeatherConfig(beta=beta), int(s))
        write_ppm(scenes / f"scene_{i:03d}.ppm", img)
        write_pgm(scenes / f"scene_{i:03d}.pgm", mask, cfg.dims.C)
    print(f"wrote {args.n} scenes to {scenes}")
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dualseg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_default):
        sp.add_argument("--config", type=str, default=None, help="TrainConfig JSON or a run manifest")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", type=str, default=out_default)

    def train_flags(sp):
        sp.add_argument("--variant", choices=VARIANTS, default=None)
        sp.add_argument("--epochs", type=int, default=None)
        sp.add_argument("--tau", type=float, default=None)
        sp.add_argument("--alpha", type=float, default=None)
        sp.add_argument("--lambda1", type=float, default=None)
        sp.add_argument("--lambda2", type=float, default=None)
        sp.add_argument("--lambda3", type=float, default=None)

    sp = sub.add_parser("train", help="train one configuration")
    common(sp, "runs/train")
    train_flags(sp)
    sp.add_argument("--resume", type=str, default=None, help="continue from a checkpoint")
    sp.add_argument("--stop-after", type=int, default=None, help="stop after this many total steps")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a seeded scene set")
    common(sp, "runs/eval")
    sp.add_argument("--checkpoint", type=str, required=True)
    sp.add_argument("--n", type=int, default=48)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="all variants x N seeds on the synthetic benchmark")
    common(sp, "runs/ablate")
    train_flags(sp)
    sp.add_argument("--seeds", type=int, default=5)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("variance-study", help="Monte-Carlo variance of one vs. two averaged teachers")
    common(sp, "runs/variance")
    sp.add_argument("--rho", type=float, default=None)
    sp.add_argument("--sigma", type=float, default=0.3)
    sp.add_argument("--trials", type=int, default=100_000)
    sp.set_defaults(func=cmd_variance)

    sp = sub.add_parser("gradcheck", help="finite-difference sweep over every differentiable op")
    common(sp, "runs/gradcheck")
    sp.add_argument("--rtol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("dump-scenes", help="write PPM images and PGM masks")
    common(sp, "runs/scenes")
    sp.add_argument("--n", type=int, default=8)
    sp.add_argument("--beta", type=float, default=None)
    sp.set_defaults(func=cmd_dump_scenes)
    return p


def _apply_manifest_args(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read config {args.config}: {exc}") from exc
        if isinstance(raw, dict) and raw.get("command") == args.command:
            given = {a.lstrip("-").split("=")[0].replace("-", "_") for a in argv if a.startswith("--")}
            for key, value in raw.get("args", {}).items():
                if key not in given and hasattr(args, key) and key != "config":
                    setattr(args, key, value)
    return args


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_manifest_args(parser, argv)
    except UsageError as exc:
        return _fail("USAGE", str(exc), EXIT_INVALID)
    except ValueError as exc:
        return _fail("CONFIG_INVALID", str(exc), EXIT_INVALID)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericAbort as exc:
        return _fail("NUMERIC_ABORT", f"{exc}; components={exc.dump}", EXIT_NUMERIC)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        return _fail("CONFIG_INVALID", str(exc), EXIT_INVALID)


if __name__ == "__main__":
    sys.exit(main())
