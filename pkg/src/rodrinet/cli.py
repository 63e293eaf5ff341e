"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 validation/format error,
3 numerical failure.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from ._accel import backend, set_threads, thread_count
from .errors import (
    ConfigError,
    DivergedError,
    FormatError,
    IKDidNotConverge,
    InvalidAxis,
    InvalidParameter,
    InvalidShape,
    InvalidTopology,
    RejectionBudgetExceeded,
    SchemaError,
    ShapeError,
)

DEGENERACY_TOL = 1e-10

_VALIDATION_ERRORS = (
    SchemaError,
    InvalidTopology,
    InvalidAxis,
    InvalidParameter,
    InvalidShape,
    ShapeError,
    ConfigError,
    FormatError,
    FileNotFoundError,
    IsADirectoryError,
    json.JSONDecodeError,
)
_NUMERICAL_ERRORS = (DivergedError, IKDidNotConverge, RejectionBudgetExceeded)


class _UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: {message}", file=sys.stderr)
        raise _UsageExit()


def _apply_threads(args) -> int:
    requested = getattr(args, "threads", None)
    if requested is None:
        env = os.environ.get("RODRI_THREADS")
        requested = int(env) if env else None
    return set_threads(requested) if requested else thread_count()


def _load_robot_arg(spec):
    from .kinematics import bundled_robot_names, parse_robot
    from .training import resolve_robot_text

    if spec not in bundled_robot_names() and not os.path.exists(spec):
        raise SchemaError(
            f"robot {spec!r} is neither a bundled name {bundled_robot_names()} nor a file"
        )
    text = resolve_robot_text(spec)
    return parse_robot(text), text


def _cmd_gen_fk_data(args):
    from .tasks import generate_fk_dataset, write_dataset

    tree, text = _load_robot_arg(args.robot)
    inputs, targets = generate_fk_dataset(tree, args.n, args.seed)
    write_dataset(args.out, "fk", tree, text, args.seed, inputs, targets)
    print(f"wrote {args.n} fk samples for {tree.name} (dof={tree.dof}) to {args.out}")
    return 0


def _cmd_gen_motion_data(args):
    from .tasks import generate_motion_dataset, write_dataset

    tree, text = _load_robot_arg(args.robot)
    inputs, targets = generate_motion_dataset(tree, args.n, args.seed)
    write_dataset(args.out, "motion", tree, text, args.seed, inputs, targets)
    print(f"wrote {args.n} motion trajectories for {tree.name} to {args.out}")
    return 0


def _cmd_train(args):
    from .training import TrainConfig, train

    with open(args.config, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    for flag in ("seed", "iterations", "out_dir", "batch_size", "learning_rate"):
        value = getattr(args, flag)
        if value is not None:
            doc[flag] = value
    threads = _apply_threads(args)
    cfg = TrainConfig.from_dict(doc)
    best, metrics = train(cfg, threads=threads)
    print(f"best checkpoint: {best}")
    print(f"metrics: {metrics}")
    return 0


def _cmd_eval(args):
    from .training import evaluate_checkpoint

    row = evaluate_checkpoint(args.checkpoint, args.data)
    ordered = ["step", "mse"] + [
        c for c in ("error_t_mm", "error_r_deg", "error_theta_deg") if c in row
    ]
    line = ",".join(ordered)
    values = ",".join(repr(float(row[c])) if c != "step" else str(row[c]) for c in ordered)
    print(line)
    print(values)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            fh.write(line + "\n" + values + "\n")
    return 0


def _cmd_fk(args):
    from .kinematics import Configuration, forward_kinematics

    tree, _ = _load_robot_arg(args.robot)
    angles = np.array([float(v) for v in args.angles.split(",")])
    if angles.shape != (tree.dof,):
        raise ConfigError(f"expected {tree.dof} angles, got {angles.size}")
    root = np.eye(4)
    if args.root is not None:
        values = np.array([float(v) for v in args.root.split(",")])
        if values.size != 12:
            raise ConfigError(f"--root needs 12 values (3 translation + 9 rotation), got {values.size}")
        root[:3, 3] = values[:3]
        root[:3, :3] = values[3:].reshape(3, 3)
    poses = forward_kinematics(tree, Configuration(root, angles))
    for name, pose in zip(tree.links, poses):
        t = pose[:3, 3]
        r = pose[:3, :3].reshape(-1)
        print(
            f"{name}: t=[{t[0]:.9f} {t[1]:.9f} {t[2]:.9f}] "
            f"r=[{' '.join(f'{v:.9f}' for v in r)}]"
        )
    return 0


def _cmd_degeneracy_check(args):
    from .rodrigues_op import degeneracy_max_deviation

    tree, _ = _load_robot_arg(args.robot)
    deviation = degeneracy_max_deviation(tree, trials=args.trials, seed=args.seed, quat=args.quat)
    form = "quaternion" if args.quat else "axis-angle"
    print(
        f"{tree.name}: {form} classical chain vs forward kinematics over "
        f"{args.trials} trials: max deviation {deviation:.3e} (tolerance {DEGENERACY_TOL:.0e})"
    )
    return 0 if deviation <= DEGENERACY_TOL else 3


def _cmd_bench_op(args):
    from .rodrigues_op import DEFAULT_BENCH_GRID, bench_operator

    _apply_threads(args)
    if args.grid == "default":
        configs = DEFAULT_BENCH_GRID
    else:
        configs = []
        for part in args.grid.split(";"):
            configs.append(tuple(int(v) for v in part.split(",")))
            if len(configs[-1]) != 4:
                raise ConfigError(
                    f"grid entries are batch,c_in,c_out,c_joint; got {part!r}"
                )
    rows = bench_operator(configs, repetitions=args.reps)
    header = "batch,c_in,c_out,c_joint,reference_ns,fused_ns,speedup,max_abs_diff"
    lines = [header]
    for r in rows:
        lines.append(
            f"{r['batch']},{r['c_in']},{r['c_out']},{r['c_joint']},"
            f"{r['reference_ns']:.0f},{r['fused_ns']:.0f},{r['speedup']:.3f},"
            f"{r['max_abs_diff']:.3e}"
        )
    text = "\n".join(lines)
    print(f"kernel backend: {backend()}")
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text + "\n")
    return 0


def _cmd_selftest(args):
    from .selftest import run_selftest

    _apply_threads(args)
    print(f"kernel backend: {backend()}")
    results = run_selftest()
    failed = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed += 0 if ok else 1
    print(f"{len(results) - failed}/{len(results)} properties passed")
    return 0 if failed == 0 else 3


def build_parser() -> _Parser:
    parser = _Parser(prog="rodrinet", description=__doc__)
    parser.add_argument("--version", action="version", version=f"rodrinet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-fk-data", help="generate a forward-kinematics dataset")
    p.add_argument("--robot", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen_fk_data)

    p = sub.add_parser("gen-motion-data", help="generate a motion-prediction dataset")
    p.add_argument("--robot", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen_motion_data)

    p = sub.add_parser("train", help="train a model from a JSON config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--threads", type=int)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--csv")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("fk", help="print link poses for one configuration")
    p.add_argument("--robot", required=True)
    p.add_argument("--angles", required=True, help="comma-separated joint angles (radians)")
    p.add_argument("--root", help="12 comma-separated values: translation then row-major rotation")
    p.set_defaults(fn=_cmd_fk)

    p = sub.add_parser(
        "degeneracy-check",
        help="verify the classically-initialized operator chain reproduces forward kinematics",
    )
    p.add_argument("--robot", required=True)
    p.add_argument("--quat", action="store_true", help="use the quaternion operator form")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_degeneracy_check)

    p = sub.add_parser("bench-op", help="benchmark reference vs fused operator evaluation")
    p.add_argument("--grid", default="default", help='"default" or "batch,ci,co,cj;..."')
    p.add_argument("--out")
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--threads", type=int)
    p.set_defaults(fn=_cmd_bench_op)

    p = sub.add_parser("selftest", help="run the embedded invariant suite")
    p.add_argument("--threads", type=int)
    p.set_defaults(fn=_cmd_selftest)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageExit:
        return 1
    try:
        return args.fn(args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
