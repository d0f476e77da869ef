"""Command-line entry point: synth, train-teacher, distill, wrap, evaluate.

Exit codes: 0 success, 2 usage error, 3 invalid configuration, 1 any other
failure. Failures print one JSON line to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .arch import load_checkpoint, save_checkpoint
from .data import load_dataset, save_dataset, synth_scenes
from .train import ConfigError, DistillPlan, TeacherPlan, evaluate, train_distill, train_teacher

EXIT_USAGE = 2
EXIT_CONFIG = 3
SUPERVISION_FLAGS = {"hard": "hard_only", "hard+soft": "hard_plus_soft"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(pairs):
    """``["a=1", "crop=[32,32]"]`` -> ``{"a": 1, "crop": [32, 32]}``."""
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {pair!r} is not key=value")
        out[key.strip()] = _value(value)
    return out


def resolve_plan(cls, args, flags, defaults=None):
    """Built-in defaults < config file < --set overrides < explicit flags."""
    values = dict(defaults or {})
    if getattr(args, "config", None):
        try:
            values.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from e
    values.update(parse_overrides(getattr(args, "set", None)))
    for name, value in flags.items():
        if value is not None:
            values[name] = value
    try:
        return cls.from_dict(values)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def _write_config(out_dir, config, name="resolved_config.json"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(json.dumps(config, indent=1, sort_keys=True))


def cmd_synth(args):
    root = Path(args.out)
    if (root / "manifest.json").exists() and not args.force:
        raise FileExistsError(f"{root / 'manifest.json'} exists; pass --force to overwrite")
    shape = tuple(args.shape)
    counts = tuple(args.counts)
    splits = {"train": synth_scenes(args.n, shape, counts, args.seed, "train", prefix="train")}
    if args.test_n:
        splits["test"] = synth_scenes(args.test_n, shape, counts, args.seed + 1, "test", prefix="test")
    save_dataset(root, splits, force=args.force)
    _write_config(root, {"command": "synth", "n": args.n, "test_n": args.test_n, "shape": list(shape),
                         "counts": list(counts), "seed": args.seed})
    return {"out": str(root), **{k: len(v) for k, v in splits.items()}}


def cmd_train_teacher(args):
    plan = resolve_plan(TeacherPlan, args, {"profile": args.profile, "epochs": args.epochs,
                                            "seed": args.seed, "deterministic": args.deterministic,
                                            "rounds": args.rounds})
    dataset = load_dataset(args.data_root, "train")
    _, report = train_teacher(plan.profile, dataset, plan=plan, out_dir=args.out)
    return {"checkpoint": report.checkpoint, "final": report.epochs[-1] if report.epochs else None}


def cmd_distill(args):
    supervision = SUPERVISION_FLAGS.get(args.supervision) if args.supervision else None
    flags = {"teacher_checkpoint": args.teacher_checkpoint, "epochs": args.epochs, "seed": args.seed,
             "deterministic": args.deterministic, "rounds": args.rounds, "cpr": args.cpr,
             "lambda1": args.lambda1, "lambda2": args.lambda2, "supervision": supervision}
    plan = resolve_plan(DistillPlan, args, flags)
    teacher = None
    if plan.teacher_checkpoint is not None:
        teacher = load_checkpoint(plan.teacher_checkpoint).network
        if teacher.profile.kind != plan.teacher:
            # the checkpoint decides the teacher kind unless the plan named one
            plan = resolve_plan(DistillPlan, args, flags, {"teacher": teacher.profile.kind})
    dataset = load_dataset(args.data_root, "train")
    _, report = train_distill(plan, dataset, teacher=teacher, out_dir=args.out)
    return {"checkpoint": report.checkpoint, "final": report.epochs[-1] if report.epochs else None}


def cmd_wrap(args):
    ck = load_checkpoint(args.checkpoint)
    if args.rounds < 0:
        raise ConfigError("--rounds must be >= 0")
    meta = dict(ck.meta, wrapped_from=str(args.checkpoint))
    out = save_checkpoint(args.out, ck.network, args.rounds, meta)
    config = {"command": "wrap", "checkpoint": str(args.checkpoint), "rounds": args.rounds, "out": str(out)}
    _write_config(out.parent, config, f"{out.stem}.resolved_config.json")
    return {"out": str(out), "review_rounds": args.rounds}


def _dump_maps(directory, dataset, preds):
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for scene, m in zip(dataset, preds):
        m = np.clip(m, 0, None)
        scaled = m / m.max() if m.max() > 0 else m
        Image.fromarray(np.rint(scaled * 255).astype(np.uint8), mode="L").save(directory / f"{scene.id}.png")


def cmd_evaluate(args):
    ck = load_checkpoint(args.checkpoint)
    rounds = ck.review_rounds if args.rounds is None else args.rounds
    if rounds < 0 or args.game_max_l < 0:
        raise ConfigError("--rounds and --game-max-l must be >= 0")
    dataset = load_dataset(args.data_root, args.split)
    result, preds = evaluate(ck.network, dataset, rounds=rounds, game_max_level=args.game_max_l)
    if args.dump_maps:
        _dump_maps(args.dump_maps, dataset, preds)
    if args.out:
        _write_config(args.out, {"command": "evaluate", "checkpoint": str(args.checkpoint),
                                 "data_root": str(args.data_root), "split": args.split,
                                 "rounds": rounds, "game_max_l": args.game_max_l})
        (Path(args.out) / "eval.json").write_text(json.dumps(result.to_dict(), indent=1))
    print(json.dumps(result.to_dict()))
    return None


def _common(p, out_required=True):
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)


def _plan_flags(p):
    p.add_argument("--config", help="JSON plan file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a plan field")
    p.add_argument("--data-root", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--rounds", type=int)


def build_parser():
    parser = _Parser(prog="crowdkd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset to disk")
    _common(p)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--test-n", type=int, default=20)
    p.add_argument("--shape", type=int, nargs=2, default=[64, 64], metavar=("H", "W"))
    p.add_argument("--counts", type=int, nargs=2, default=[5, 30], metavar=("LO", "HI"))
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth, seed=0)

    p = sub.add_parser("train-teacher", help="train a teacher from scratch")
    _common(p)
    _plan_flags(p)
    p.add_argument("--profile")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="distil a student from a trained teacher")
    _common(p)
    _plan_flags(p)
    p.add_argument("--teacher-checkpoint")
    p.add_argument("--cpr")
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--supervision", choices=sorted(SUPERVISION_FLAGS))
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("wrap", help="re-export a checkpoint with review rounds")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rounds", type=int, required=True)
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.set_defaults(func=cmd_wrap)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-root", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--rounds", type=int, help="defaults to the checkpoint's review rounds")
    p.add_argument("--game-max-l", type=int, default=3)
    p.add_argument("--dump-maps", help="directory for grayscale density maps")
    p.add_argument("--out", help="directory for eval.json and the resolved config")
    p.set_defaults(func=cmd_evaluate)
    return parser


def _fail(code, kind, message):
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def dispatch(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        return _fail(EXIT_USAGE, "usage", str(e))
    except SystemExit as e:  # --help
        return int(e.code or 0)
    try:
        summary = args.func(args)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, "config", str(e))
    except Exception as e:  # noqa: BLE001 - reported as one JSON line
        return _fail(1, type(e).__name__, str(e))
    if summary is not None:
        print(json.dumps(summary), file=sys.stderr)
    return 0


def main(argv=None):
    sys.exit(dispatch(argv))


if __name__ == "__main__":
    main()
