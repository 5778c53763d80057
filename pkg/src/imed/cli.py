"""Command line entry point: ``imed <command> [options]``.

Commands: gen-data, train-component, train-teacher, distill, eval, ablate, report.
Global flags (accepted before or after the command): --config, --out, --seed, --force.
Log verbosity comes from IMED_LOG_LEVEL (debug, info, warn).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from imed.errors import ConfigError, NonFiniteError

log = logging.getLogger("imed")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_EXISTS = 3
EXIT_NONFINITE = 4

LOG_LEVELS = {"debug": logging.DEBUG, "info": logging.INFO, "warn": logging.WARNING}


def setup_logging():
    name = os.environ.get("IMED_LOG_LEVEL", "info").strip().lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"IMED_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s", force=True)


def _global_flags(parser: argparse.ArgumentParser, suppress: bool):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=default, help="run config JSON")
    parser.add_argument("--out", type=Path, default=default, help="output directory")
    parser.add_argument("--seed", type=int, default=default, help="override the run seed")
    parser.add_argument(
        "--force", action="store_true", default=argparse.SUPPRESS if suppress else False, help="overwrite --out"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="imed", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help):
        p = sub.add_parser(name, help=help)
        _global_flags(p, suppress=True)
        return p

    p = command("gen-data", "write a synthetic dataset bundle")
    p.add_argument("--kind", choices=["moons", "blobs", "rings"], default="moons")
    p.add_argument("--shift", type=float, default=None, help="rotation degrees / mean shift / radial scale")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--noise", type=float, default=None)

    p = command("train-component", "pre-train the component models")
    p.add_argument("--data", type=Path, help="dataset bundle (overrides config.dataset)")

    p = command("train-teacher", "train the instance-aware ensemble teacher")
    p.add_argument("--data", type=Path)
    p.add_argument("--components", type=Path, help="components.ckpt from train-component")

    p = command("distill", "distill a teacher checkpoint into a student")
    p.add_argument("--data", type=Path)
    p.add_argument("--teacher", type=Path, required=True)

    p = command("eval", "evaluate a checkpoint")
    p.add_argument("--data", type=Path)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = command("ablate", "one-factor ablation sweep")
    p.add_argument("--plan", type=Path, help="plan JSON {base_config, axis, values}")
    p.add_argument("--axis", help="axis to vary (with --values)")
    p.add_argument("--values", help="comma separated values")
    p.add_argument("--in-process", action="store_true", help="run children in this process")

    p = command("report", "collect finished runs into summary.csv")
    p.add_argument("runs", nargs="+", type=Path, help="run directories")
    return parser


def _load_config(args):
    from imed.config import RunConfig

    config = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    if getattr(args, "data", None) is not None:
        config = config.replace(dataset={"path": str(args.data.resolve())})
    return config


def _require_out(args) -> Path:
    if args.out is None:
        raise ConfigError("--out is required for this command")
    from imed.data import prepare_output_dir

    prepare_output_dir(args.out, args.force)
    return args.out


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(args) -> int:
    from imed.data import generate, save_bundle

    out = _require_out(args)
    data = generate(args.kind, args.shift, args.n, 0 if args.seed is None else args.seed, args.noise)
    save_bundle(data, out, force=args.force)
    log.info("wrote %s bundle to %s", args.kind, out)
    return EXIT_OK


def cmd_train_component(args) -> int:
    from imed.data import atomic_write_dir, load_dataset
    from imed.harness import RunLog, build_components_for, evaluate, pretrain_components, save_components

    config = _load_config(args)
    out = _require_out(args)
    data = load_dataset(config.dataset)
    data.meta.setdefault("transfer_name", config.transfer_name)

    def write(tmp: Path):
        runlog = RunLog(tmp)
        comps = build_components_for(config, data.d_in, data.num_classes)
        pretrain_components(config, data, comps, runlog)
        for i, c in enumerate(comps):
            runlog.metric(evaluate(c, data, f"component{i}", "final"))
        config.dump(tmp / "config.json")
        save_components(tmp / "components.ckpt", comps, config)

    atomic_write_dir(out, write)
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    from imed.data import atomic_write_dir, load_dataset
    from imed.harness import RunLog, evaluate, load_checkpoint, save_teacher, train_teacher, write_params

    config = _load_config(args)
    out = _require_out(args)
    data = load_dataset(config.dataset)
    data.meta.setdefault("transfer_name", config.transfer_name)
    components = None
    if args.components is not None:
        components = load_checkpoint(args.components)
        if not isinstance(components, list):
            raise ConfigError(f"{args.components} is not a components checkpoint")

    def write(tmp: Path):
        runlog = RunLog(tmp)
        teacher = train_teacher(config, data, components, runlog)
        for i, c in enumerate(teacher.components):
            runlog.metric(evaluate(c, data, f"component{i}", "final"))
        runlog.metric(evaluate(teacher, data, "teacher", "final"))
        config.dump(tmp / "config.json")
        write_params(tmp / "params.json", teacher)
        save_teacher(tmp / "teacher.ckpt", teacher)

    atomic_write_dir(out, write)
    return EXIT_OK


def cmd_distill(args) -> int:
    from imed.data import atomic_write_dir, load_dataset
    from imed.harness import RunLog, Teacher, evaluate, load_checkpoint, save_student, train_student, write_params

    teacher = load_checkpoint(args.teacher)
    if not isinstance(teacher, Teacher):
        raise ConfigError(f"{args.teacher} is not a teacher checkpoint")
    config = _load_config(args) if args.config else teacher.config
    if args.config is None and args.seed is not None:
        config = config.replace(seed=args.seed)
    if args.data is not None:
        config = config.replace(dataset={"path": str(args.data.resolve())})
    out = _require_out(args)
    data = load_dataset(config.dataset)
    data.meta.setdefault("transfer_name", config.transfer_name)

    def write(tmp: Path):
        runlog = RunLog(tmp)
        student = train_student(config, teacher, data, runlog)
        runlog.metric(evaluate(teacher, data, "teacher", "final"))
        runlog.metric(evaluate(student, data, "student", "final"))
        config.dump(tmp / "config.json")
        write_params(tmp / "params.json", teacher, student)
        save_student(tmp / "student.ckpt", student, config)

    atomic_write_dir(out, write)
    return EXIT_OK


def cmd_eval(args) -> int:
    from imed.checkpoint import load_archive
    from imed.data import atomic_write_dir, load_dataset, prepare_output_dir
    from imed.harness import Teacher, evaluate, load_checkpoint

    model = load_checkpoint(args.checkpoint)
    if isinstance(model, list):
        named = [(f"component{i}", c) for i, c in enumerate(model)]
    else:
        named = [("teacher" if isinstance(model, Teacher) else "student", model)]
    # dataset: --data, else --config, else the config stored in the checkpoint
    _, meta = load_archive(args.checkpoint)
    dataset = meta["config"]["dataset"]
    if args.config is not None:
        dataset = _load_config(args).dataset
    if args.data is not None:
        dataset = {"path": str(args.data.resolve())}
    data = load_dataset(dataset)
    data.meta.setdefault("transfer_name", meta["config"]["transfer_name"])
    records = []
    for name, m in named:
        r = evaluate(m, data, name, "eval").to_dict()
        r.pop("wall_time")
        records.append(r)
    if args.out is not None:
        prepare_output_dir(args.out, args.force)
        atomic_write_dir(args.out, lambda tmp: _write_json(tmp / "eval.json", records))
    for r in records:
        print(json.dumps(r, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from imed.ablation import AblationPlan, plot_accuracy, run_plan, write_csv
    from imed.config import RunConfig
    from imed.data import atomic_write_dir

    if args.plan is not None:
        base = _load_config(args) if args.config else None
        plan = AblationPlan.load(args.plan, base)
        if args.seed is not None:
            plan.base = plan.base.replace(seed=args.seed)
    else:
        if not args.axis or args.values is None:
            raise ConfigError("ablate needs --plan or both --axis and --values")
        base = _load_config(args) if args.config else RunConfig()
        plan = AblationPlan(base, args.axis, [v.strip() for v in args.values.split(",") if v.strip()])
    out = _require_out(args)

    failures = []

    def write(tmp: Path):
        rows = run_plan(plan, tmp, processes=not args.in_process)
        write_csv(tmp / "ablation.csv", rows)
        plot_accuracy(rows, plan.axis, tmp / f"accuracy_{plan.axis}.png")
        _write_json(tmp / "plan.json", {"axis": plan.axis, "values": plan.values, "base": plan.base.to_dict()})
        failures.extend(r for r in rows if r["status"] != "ok")

    atomic_write_dir(out, write)
    for r in failures:
        log.error("%s=%s failed: %s", plan.axis, r["value"], r["error"])
    return EXIT_FAILED if failures else EXIT_OK


def cmd_report(args) -> int:
    from imed.ablation import SUMMARY_COLUMNS, summary_rows, write_csv
    from imed.data import atomic_write_dir

    rows = summary_rows(args.runs)
    out = _require_out(args)
    atomic_write_dir(out, lambda tmp: write_csv(tmp / "summary.csv", rows, SUMMARY_COLUMNS))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-component": cmd_train_component,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        setup_logging()
        return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"imed: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except FileExistsError as err:
        print(f"imed: {err}", file=sys.stderr)
        return EXIT_EXISTS
    except NonFiniteError as err:
        print(f"imed: training diverged: {err}", file=sys.stderr)
        print(json.dumps(err.snapshot, sort_keys=True, default=str), file=sys.stderr)
        return EXIT_NONFINITE


if __name__ == "__main__":
    sys.exit(main())
