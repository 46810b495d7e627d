"""Command-line entry point: generate, train, eval, analyze, sweep.

Exit codes: 0 success, 1 other package error, 2 config error, 3 file error,
4 contract/dimension error, 5 sweep finished with failed cells.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from .errors import ConfigError, DynDistillError
from .experiment import (
    PRESETS,
    SweepSpec,
    build_config,
    cmd_analyze,
    cmd_eval,
    cmd_generate,
    cmd_train,
    format_table,
    load_config_file,
    parse_value,
    preset,
    run_sweep,
)

EXIT_FILE = 3
EXIT_SWEEP_FAILED = 5

log = logging.getLogger("dyndistill")


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # shared so the flags work before or after the subcommand
    default = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=default, help="JSON experiment config file")
    p.add_argument("--seed", type=int, default=default, help="global seed (data, init, batches, episodes)")
    p.add_argument("--out", default=default, help="output root directory (default: runs)")
    p.add_argument("--name", default=default, help="experiment name; run directory is <out>/<name>")
    p.add_argument("--jobs", type=int, default=argparse.SUPPRESS if suppress else 1, help="parallel sweep cells")
    p.add_argument("--log-level", default=argparse.SUPPRESS if suppress else "INFO",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p.add_argument("--set", dest="overrides", action="append", default=default, metavar="KEY=VALUE",
                   help="override a config value, e.g. train.tau=0.5 (repeatable)")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dyndistill", parents=[_global_flags(False)],
                                     description="Dynamic distillation few-shot experiments on synthetic domains.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _global_flags(True)

    sub.add_parser("generate", parents=[common], help="write base / unlabeled / target-eval dataset files")

    t = sub.add_parser("train", parents=[common], help="two-step pretraining; writes checkpoints and epoch logs")
    t.add_argument("--transfer-only", action="store_true", help="lambda = 0 throughout (Transfer baseline)")
    t.add_argument("--one-step", action="store_true", help="skip base-only pretraining")
    t.add_argument("--no-base", action="store_true", help="drop the supervised term in step 2")
    t.add_argument("--m", type=float, help="teacher momentum")
    t.add_argument("--tau", type=float, help="sharpening temperature")
    t.add_argument("--pairing", choices=["w-s", "w-w", "s-w", "s-s"], help="teacher-student augmentation pairing")
    t.add_argument("--hard-threshold", type=float, help="confidence cutoff for one-hot pseudo labels")
    t.add_argument("--epochs-step1", type=int)
    t.add_argument("--epochs-step2", type=int)

    e = sub.add_parser("eval", parents=[common], help="episodic few-shot evaluation of a checkpoint")
    e.add_argument("--checkpoint", help="default: <run>/final.ckpt")
    e.add_argument("--dataset", help="labeled target dataset (default: <run>/data/target_eval.ddset)")
    e.add_argument("--shots", type=int, nargs="+", help="e.g. --shots 1 5")
    e.add_argument("--episodes", type=int)
    e.add_argument("--report", help="report path (default: <run>/eval.json)")

    a = sub.add_parser("analyze", parents=[common], help="KMeans + V-measure on extracted features")
    a.add_argument("--checkpoint")
    a.add_argument("--dataset")

    s = sub.add_parser("sweep", parents=[common], help="ablation grid: train + eval + analyze per cell and seed")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=sorted(PRESETS))
    src.add_argument("--spec", help="JSON sweep spec: name, axis+values or cells, seeds, base")
    src.add_argument("--axis", help="dotted config key to vary, with --values")
    s.add_argument("--values", nargs="+", help="values for --axis (parsed as JSON where possible)")
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--sweep-name")
    return parser


def _train_overrides(args) -> list[str]:
    out = []
    for flag, key in (("transfer_only", "transfer_only"), ("one_step", "one_step"), ("no_base", "no_base")):
        if getattr(args, flag, False):
            out.append(f"train.{key}=true")
    for flag, key in (("m", "m"), ("tau", "tau"), ("hard_threshold", "hard_threshold"),
                      ("epochs_step1", "epochs_step1"), ("epochs_step2", "epochs_step2")):
        v = getattr(args, flag, None)
        if v is not None:
            out.append(f"train.{key}={json.dumps(v)}")
    if getattr(args, "pairing", None):
        out.append(f"train.augment_pairing={json.dumps(args.pairing)}")
    return out


def _config(args, extra=()):
    overrides = list(args.overrides or []) + list(extra)
    return build_config(args.config, overrides, seed=args.seed, out_dir=args.out, name=args.name)


def _sweep_spec(args):
    if args.preset:
        spec = preset(args.preset, args.seeds)
    elif args.spec:
        d = load_config_file(args.spec)
        if args.seeds:
            d["seeds"] = args.seeds
        spec = SweepSpec.from_dict(d)
    else:
        if not args.values:
            raise ConfigError("--axis needs --values")
        spec = SweepSpec(name="sweep", axis=args.axis, values=[parse_value(v) for v in args.values],
                         seeds=args.seeds or [0])
    if args.sweep_name:
        spec.name = args.sweep_name
    return spec


def run(args) -> int:
    if args.command == "generate":
        paths = cmd_generate(_config(args))
        for split, p in paths.items():
            print(f"{split}: {p}")
    elif args.command == "train":
        cfg = _config(args, _train_overrides(args))
        cmd_train(cfg)
        print(f"checkpoints in {cfg.run_dir}")
    elif args.command == "eval":
        extra = []
        if args.shots:
            extra.append(f"eval.shots={json.dumps(args.shots)}")
        if args.episodes:
            extra.append(f"eval.n_episodes={args.episodes}")
        doc = cmd_eval(_config(args, extra), args.checkpoint, args.dataset, args.report)
        for name, s in doc["sections"].items():
            print(f"{s['way']}-way {name}: {s['mean_accuracy']:.2f} +- {s['ci95']:.2f}")
    elif args.command == "analyze":
        doc = cmd_analyze(_config(args), args.checkpoint, args.dataset)
        c = doc["cluster"]
        print(f"V-measure {c['v_measure_percent']:.2f}% (homogeneity {c['homogeneity']:.4f}, "
              f"completeness {c['completeness']:.4f}, k={c['k']})")
    elif args.command == "sweep":
        spec = _sweep_spec(args)
        res = run_sweep(_config(args), spec, jobs=args.jobs)
        shots = sorted({int(k.split("shot")[0]) for k in res.rows[0] if k.endswith("shot_mean")}) if res.rows else []
        print(format_table(res.rows, shots))
        print(f"table: {res.table_path}")
        if res.failures:
            for f in res.failures:
                print(f"FAILED {f['cell']} seed {f['seed']}: {f['error']}", file=sys.stderr)
            return EXIT_SWEEP_FAILED
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except DynDistillError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_FILE
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
