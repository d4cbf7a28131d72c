"""``metamg`` command line: solve, train, bench, compare-smoothers, export-stencil.

Exit codes: 0 success, 1 solver did not converge, 2 usage or configuration error.

Training config files are INI (``configparser``) with a ``[train]`` section whose
keys are the :class:`~metamg.training.TrainConfig` fields; tuples are written
comma-separated, e.g. ``nu = 2,1,1,1`` or ``lg_inv_eps = 0,5``. Command-line
flags override file values.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import math
import sys

from . import bench
from .discretization import PdeSpec
from .grid import ContractError, format_stencil
from .mgnet import CheckpointError, PdeMgNet, learned_solve, load_checkpoint, save_checkpoint
from .multigrid import Hierarchy, MgConfig, SolverDiverged, solve
from .smoothers import SmootherSpec
from .training import TrainConfig, TrainingError, rhs_stream, train

EXIT_OK, EXIT_NOT_CONVERGED, EXIT_USAGE = 0, 1, 2
MODEL_ALIASES = {"mgnet": "pde_mgnet", "pde_mgnet": "pde_mgnet", "meta_sc": "meta_sc",
                 "meta_direct": "meta_direct"}

log = logging.getLogger("metamg")


class UsageError(ValueError):
    pass


def _floats(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _names(text):
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


def _pde_spec(args) -> PdeSpec:
    if args.pde == "aniso3d":
        return PdeSpec("aniso3d", (1.0, args.eps, args.eps2), args.n)
    return PdeSpec(args.pde, (args.eps, args.theta), args.n)


def _add_problem_flags(p, multi=False):
    p.add_argument("--pde", default="aniso2d", choices=("aniso2d", "aniso3d"))
    kind = _floats if multi else float
    p.add_argument("--eps", type=kind, default=[1.0] if multi else 1.0,
                   help="anisotropy eps in (0, 1] (eps1 for aniso3d)")
    p.add_argument("--theta", type=kind, default=[0.0] if multi else 0.0, help="angle in [0, pi]")
    p.add_argument("--eps2", type=kind, default=[1.0] if multi else 1.0, help="eps2 for aniso3d")
    p.add_argument("--n", type=int, default=64, help="mesh cells per axis (power of two)")
    p.add_argument("--levels", type=int, default=None)
    p.add_argument("--nu", type=_ints, default=None, help="smoothing steps per level, e.g. 2,1,1,1")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iters", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)


def _mg_config(args, smoother) -> MgConfig:
    levels = args.levels or bench.default_levels(args.n)
    nu = args.nu or bench.default_nu(levels)
    return MgConfig(levels=levels, nu=nu, smoother=smoother, tol=args.tol, max_iters=args.max_iters)


def cmd_solve(args) -> int:
    spec = _pde_spec(args)
    learned = args.smoother in bench.LEARNED_SOLVERS
    config = _mg_config(args, SmootherSpec("gs" if learned else args.smoother, omega=args.omega))
    model = None
    if learned:
        if args.model is None:
            raise UsageError(f"--smoother {args.smoother} needs --model <checkpoint>")
        model, _ = load_checkpoint(args.model)
        if model.kind != args.smoother:
            raise UsageError(f"checkpoint holds a {model.kind} model, not {args.smoother}")
    elif args.model is not None:
        raise UsageError("--model only applies to learned smoothers")
    levels = model.levels if isinstance(model, PdeMgNet) else config.levels
    hier = Hierarchy.from_pde(spec, levels)
    f = rhs_stream(args.seed, 0, 0).standard_normal((1,) + spec.extent)
    try:
        if model is None:
            _, report = solve(hier, f, config)
        else:
            _, report = learned_solve(model, hier, f, config)
    except SolverDiverged as err:
        report = err.report
        print(f"diverged: {err}")
    print(report)
    if args.history:
        with open(args.history, "w") as fh:
            fh.write("iteration,residual\n")
            fh.writelines(f"{t},{v:.6e}\n" for t, v in enumerate(report.history))
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


_TUPLE_FIELDS = {"nu": _ints, "lg_inv_eps": _floats, "theta": _floats}


def _read_train_config(path) -> dict:
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    if not parser.has_section("train"):
        raise UsageError(f"{path}: missing [train] section")
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values = {}
    for key, raw in parser.items("train"):
        if key not in fields:
            raise UsageError(f"{path}: unknown key {key!r}")
        if key in _TUPLE_FIELDS:
            values[key] = tuple(_TUPLE_FIELDS[key](raw))
        elif key in ("model", "family"):
            values[key] = raw.strip()
        elif key == "lr":
            values[key] = float(raw)
        else:
            values[key] = int(raw)
    return values


def train_config_from_args(args) -> TrainConfig:
    values = _read_train_config(args.config) if args.config else {}
    overrides = {"model": args.model, "family": args.pde, "n": args.n, "levels": args.levels,
                 "nu": args.nu, "lr": args.lr, "batch_size": args.batch_size, "epochs": args.epochs,
                 "tasks": args.tasks, "rhs_per_task": args.rhs_per_task, "seed": args.seed}
    values.update({k: v for k, v in overrides.items() if v is not None})
    if "model" in values:
        if values["model"] not in MODEL_ALIASES:
            raise UsageError(f"unknown model {values['model']!r}")
        values["model"] = MODEL_ALIASES[values["model"]]
    if args.lg_inv_eps is not None:
        values["lg_inv_eps"] = tuple(args.lg_inv_eps)
    if args.per_eta is not None:
        if not 0 < args.per_eta <= 1:
            raise UsageError("--per-eta must lie in (0, 1]")
        lg = -math.log10(args.per_eta)
        values["lg_inv_eps"] = (lg, lg)
    if args.theta is not None:
        values["theta"] = tuple(args.theta) * (2 if len(args.theta) == 1 else 1)
    if "levels" in values and "nu" not in values:
        values["nu"] = bench.default_nu(values["levels"])
    return TrainConfig(**values)


def cmd_train(args) -> int:
    config = train_config_from_args(args)
    history_path = args.history or f"{args.out}.loss.csv"
    model, history = train(None, config, history_path=history_path)
    extra = {f"train.{k}": (",".join(map(str, v)) if isinstance(v, tuple) else v)
             for k, v in dataclasses.asdict(config).items()}
    save_checkpoint(args.out, model, extra)
    epoch, loss = history[-1]
    print(f"epoch {epoch} mean loss {loss:.6e}; checkpoint {args.out}; history {history_path}")
    return EXIT_OK


def _checkpoints(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        name, sep, path = pair.partition("=")
        if not sep or name not in bench.LEARNED_SOLVERS:
            raise UsageError(f"--checkpoint expects <learned solver>=<path>, got {pair!r}")
        out[name] = path
    return out


def _bench_case(args, solvers) -> bench.BenchCase:
    if args.pde == "aniso3d":
        param_sets = [(e1, e2) for e1 in args.eps for e2 in args.eps2]
    else:
        param_sets = [(e, t) for e in args.eps for t in args.theta]
    levels = args.levels or bench.default_levels(args.n)
    return bench.BenchCase(family=args.pde, param_sets=param_sets, n=args.n, solvers=solvers, rhs_count=args.rhs,
                           seed=args.seed, levels=levels, nu=args.nu, omega=args.omega, tol=args.tol,
                           max_iters=args.max_iters)


def _emit(args, rows):
    if args.out:
        with open(args.out, "w", newline="") as fh:
            bench.write_csv(fh, rows)
    else:
        bench.write_csv(sys.stdout, rows)
    if args.history:
        bench.write_histories(args.history, rows)


def cmd_bench(args) -> int:
    case = _bench_case(args, args.solvers)
    models = bench.load_models(_checkpoints(args.checkpoint), case.solvers)
    for name, model in models.items():
        if model.kind != name:
            raise UsageError(f"checkpoint for {name} holds a {model.kind} model")
    _emit(args, bench.run_case(case, models))
    return EXIT_OK


def cmd_compare_smoothers(args) -> int:
    case = _bench_case(args, ("meta_direct", "meta_sc"))
    models = bench.load_models({"meta_direct": args.direct_model, "meta_sc": args.sc_model}, case.solvers)
    if len(models) < 2:
        raise UsageError("compare-smoothers needs both --direct-model and --sc-model checkpoints")
    _emit(args, bench.run_case(case, models))
    return EXIT_OK


def cmd_export_stencil(args) -> int:
    spec = _pde_spec(args)
    levels = args.levels or bench.default_levels(args.n)
    hier = Hierarchy.from_pde(spec, levels)
    blocks = []
    for level, op in enumerate(hier.operators[0]):
        blocks.append(f"# level {level}\n{format_stencil(op.stencil)}")
    text = "\n".join(blocks) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metamg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve one problem and print the report")
    _add_problem_flags(p)
    p.add_argument("--smoother", default="gs", choices=bench.SOLVERS)
    p.add_argument("--omega", type=float, default=2.0 / 3.0, help="Jacobi damping in (0, 1]")
    p.add_argument("--model", help="checkpoint for a learned smoother")
    p.add_argument("--history", help="write the residual history CSV here")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("train", help="train a learned smoother and write a checkpoint")
    p.add_argument("--config", help="INI file with a [train] section")
    p.add_argument("--model", help="pde_mgnet (alias mgnet), meta_sc or meta_direct")
    p.add_argument("--pde", choices=("aniso2d", "aniso3d"))
    p.add_argument("--n", type=int)
    p.add_argument("--levels", type=int)
    p.add_argument("--nu", type=_ints)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--tasks", type=int)
    p.add_argument("--rhs-per-task", type=int)
    p.add_argument("--lg-inv-eps", type=_floats, help="uniform range lo,hi for lg(1/eps)")
    p.add_argument("--per-eta", type=float, help="train on the single value eps")
    p.add_argument("--theta", type=_floats, help="fixed angle or range lo,hi")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="model.ckpt")
    p.add_argument("--history", help="loss CSV path (default <out>.loss.csv)")
    p.set_defaults(func=cmd_train)

    for name, helptext in (("bench", "iteration/time table over a parameter sweep"),
                           ("compare-smoothers", "convolutional vs subspace meta smoother")):
        p = sub.add_parser(name, help=helptext)
        _add_problem_flags(p, multi=True)
        p.add_argument("--omega", type=float, default=2.0 / 3.0)
        p.add_argument("--rhs", type=int, default=10, help="right-hand sides per parameter")
        p.add_argument("--out", help="CSV path (default stdout)")
        p.add_argument("--history", help="per-row residual history CSV")
        if name == "bench":
            p.add_argument("--solvers", type=_names, default=("gs",),
                           help=f"comma-separated, from {','.join(bench.SOLVERS)}")
            p.add_argument("--checkpoint", action="append", metavar="SOLVER=PATH")
            p.set_defaults(func=cmd_bench)
        else:
            p.add_argument("--sc-model", required=True)
            p.add_argument("--direct-model", required=True)
            p.set_defaults(func=cmd_compare_smoothers)

    p = sub.add_parser("export-stencil", help="print the Galerkin stencil of every level")
    _add_problem_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_stencil)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        bench.thread_count()
        return args.func(args)
    except (UsageError, ValueError, ContractError, CheckpointError, configparser.Error, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as err:
        print(f"error: training failed: {err}", file=sys.stderr)
        return EXIT_NOT_CONVERGED


if __name__ == "__main__":
    sys.exit(main())
