"""Command-line entry point.

Exit codes: 0 success, 1 generic failure (including a failed gradient
check), 2 bad configuration, 3 bad or missing data, 4 bad or missing
checkpoint.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import pipeline as P
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, dump_config, load_config
from .synthdata import DatasetError, generate_dataset, read_dataset, write_dataset

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3, 4

STAGE_FOR_COMMAND = {"pretrain-global": "global", "pretrain-local": "local", "finetune": "finetune"}


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data(path) -> "P.Dataset":
    if not Path(path).exists():
        raise P.DataError(f"data file not found: {path}")
    return read_dataset(path)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out(args)
    train = generate_dataset(cfg.scene, cfg.num_samples, seed=cfg.seed)
    test = generate_dataset(cfg.scene, cfg.num_test, seed=cfg.seed + 1_000_003, labeled_fraction=1.0)
    write_dataset(train, out / "train.bin")
    write_dataset(test, out / "test.bin")
    dump_config(cfg, out / "config.yaml")
    print(f"wrote {len(train)} training and {len(test)} test scenes to {out}")
    return EXIT_OK


def cmd_stage(args) -> int:
    stage = STAGE_FOR_COMMAND[args.command]
    cfg = _config(args)
    out = _out(args)
    data = _data(args.data or out / "train.bin")
    scfg = cfg.stage(stage)
    ck = load_checkpoint(args.checkpoint) if args.checkpoint else None
    log_path = out / f"runlog_{stage}.csv"
    resume, runlog = None, None
    if ck is not None and ck.stage == stage and not ck.complete:
        resume = ck
        runlog = P.RunLog.from_csv(log_path) if log_path.exists() else P.RunLog()
        runlog = _typed(runlog)
    kw = dict(resume=resume, stop_after=args.stop_after, runlog=runlog)
    if stage == "global":
        if ck is not None and resume is None:
            raise CheckpointError("pretrain-global only accepts a partial global checkpoint to resume")
        ck, runlog = P.stage_global(scfg, data, cfg.model, init_seed=cfg.seed, **kw)
    elif stage == "local":
        ck, runlog = P.stage_local(scfg, ck, data, **kw)
    else:
        ck, runlog = P.stage_finetune(scfg, ck, data, **kw)
    save_checkpoint(ck, out / f"{stage}.ckpt")
    runlog.to_csv(log_path)
    state = "complete" if ck.complete else f"paused at step {ck.step}/{ck.total_steps}"
    print(f"{stage}: {state}; checkpoint {out / f'{stage}.ckpt'}")
    return EXIT_OK


def _typed(log: "P.RunLog") -> "P.RunLog":
    """Re-type step numbers read back from CSV so resumed logs stay comparable."""
    out = P.RunLog()
    for r in log.records:
        r = dict(r)
        for k in ("step", "epoch"):
            if r.get(k, "") != "":
                r[k] = int(r[k])
        out.extend(P.RunLog([r]))
    return out


def cmd_evaluate(args) -> int:
    from .plotting import plot_report

    if not args.checkpoint:
        raise CheckpointError("evaluate needs --checkpoint")
    ck = load_checkpoint(args.checkpoint)
    out = _out(args)
    data = _data(args.data or out / "test.bin")
    report = P.evaluate(ck, data)
    report.to_csv(out / "eval.csv")
    plot_report(report, out / "eval.png")
    cd = report.class_dice()
    print("dice " + " ".join(f"{c}:{v:.4f}" for c, v in cd.items()) + f" macro:{report.macro_dice:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import SUITES, run_suite

    ok = True
    for name in args.suite or SUITES:
        res = run_suite(name, instances=args.instances, seed=args.seed or 0)
        passed = res.passed(args.tol)
        ok &= passed
        print(f"{name:10s} {'PASS' if passed else 'FAIL'} max_rel_err={res.max_error:.3e} "
              f"instances={len(res.errors)} redraws={res.redraws}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_plot(args) -> int:
    from .plotting import plot_runlog

    path = Path(args.runlog)
    if not path.exists():
        raise P.DataError(f"run log not found: {path}")
    log = P.RunLog.from_csv(path)
    target = Path(args.output) if args.output else _out(args) / (path.stem + ".svg")
    drawn = plot_runlog(log.records, target)
    print(f"wrote {target} ({', '.join(drawn) or 'no series'})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="actionseg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out-dir", default=".", help="directory for outputs")
        return sp

    common(sub.add_parser("gen-data", help="generate synthetic train/test sets")).set_defaults(
        func=cmd_gen_data)
    for name in STAGE_FOR_COMMAND:
        sp = common(sub.add_parser(name, help=f"run the {STAGE_FOR_COMMAND[name]} stage"))
        sp.add_argument("--checkpoint", help="previous-stage checkpoint, or a partial one to resume")
        sp.add_argument("--data", help="training set (default OUT_DIR/train.bin)")
        sp.add_argument("--stop-after", type=int, help="pause after this many steps")
        sp.set_defaults(func=cmd_stage)
    sp = common(sub.add_parser("evaluate", help="score a checkpoint; writes eval.csv and eval.png"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--data", help="test set (default OUT_DIR/test.bin)")
    sp.set_defaults(func=cmd_evaluate)
    sp = common(sub.add_parser("gradcheck", help="finite-difference gradient suites"))
    sp.add_argument("--suite", action="append", help="suite name; repeatable")
    sp.add_argument("--instances", type=int, default=100)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)
    sp = common(sub.add_parser("plot", help="SVG curves from a run log CSV"))
    sp.add_argument("runlog")
    sp.add_argument("--output", help="SVG path (default OUT_DIR/<runlog>.svg)")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (P.DataError, DatasetError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except Exception as e:  # noqa: BLE001
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
