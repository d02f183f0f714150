"""Command-line entry point: ``mtcurv <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import curvature as cv
from .data import DatasetError, SplitSpec, load_dataset, prepare, synth_generate, write_dataset
from .graphs import validate_graph
from .train import (
    NumericalError,
    TrainConfig,
    curvature_eval_set,
    curvature_snapshot,
    load_checkpoint,
    train,
    write_density_json,
    write_trace_csv,
)

log = logging.getLogger("mtcurv")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that exits with the usage code instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mtcurv", description="Multi-task graph-network training and curvature probes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic coupled-target dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tasks", type=int, default=3)
    s.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("train", help="train a model and record metrics and curvature snapshots")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--config", type=Path, help="run config JSON (TrainConfig fields)")
    t.add_argument("--outdir", type=Path, required=True)

    c = sub.add_parser("curvature", help="trace and spectral density of a checkpoint")
    c.add_argument("--checkpoint", type=Path, required=True)
    c.add_argument("--data", type=Path, required=True)
    c.add_argument("--task", default="all", help="task index or 'all'")
    c.add_argument("--probes", type=int, default=500)
    c.add_argument("--lanczos", type=int, default=100)
    c.add_argument("--runs", type=int, default=10)
    c.add_argument("--eval-size", type=int, default=None)
    c.add_argument("--outdir", type=Path, required=True)

    d = sub.add_parser("spectrum-demo", help="random symmetric matrix: SLQ versus dense eigenvalues")
    d.add_argument("--dim", type=int, default=1000)
    d.add_argument("--lanczos", type=int, default=100)
    d.add_argument("--runs", type=int, default=10)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--outdir", type=Path, required=True)

    v = sub.add_parser("validate", help="check dataset invariants")
    v.add_argument("--data", type=Path, required=True)
    return p


def _require_file(path: Path) -> None:
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")


def cmd_synth(args) -> int:
    if args.n < 1:
        raise _UsageError("--n must be >= 1")
    write_dataset(synth_generate(args.n, args.seed, T=args.tasks), args.out)
    print(f"wrote {args.n} graphs to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    _require_file(args.data)
    config = TrainConfig()
    if args.config is not None:
        _require_file(args.config)
        config = TrainConfig.from_json(args.config)
    data = prepare(load_dataset(args.data), SplitSpec(config.train_fraction, config.split_seed))
    artifacts = train(config, data, args.outdir, progress=log.info)
    print(f"metrics: {artifacts.metrics_csv}")
    if artifacts.trace_csv is not None:
        print(f"traces: {artifacts.trace_csv}")
    print(f"{len(artifacts.density_paths)} density snapshots, {len(artifacts.checkpoint_paths)} checkpoints")
    return EXIT_OK


def cmd_curvature(args) -> int:
    _require_file(args.checkpoint)
    _require_file(args.data)
    params, config, model_config, stats, epoch = load_checkpoint(args.checkpoint)
    if args.task == "all":
        tasks = list(range(model_config.num_tasks))
    else:
        try:
            tasks = [int(args.task)]
        except ValueError:
            raise _UsageError(f"--task must be an integer or 'all', got {args.task!r}") from None
        if not 0 <= tasks[0] < model_config.num_tasks:
            raise _UsageError(f"--task {tasks[0]} outside [0, {model_config.num_tasks})")
    config = TrainConfig.from_dict({
        **config.to_dict(),
        "trace_probes": args.probes,
        "lanczos_iters": args.lanczos,
        "slq_runs": args.runs,
        "curvature_eval_size": args.eval_size,
    })
    data = prepare(load_dataset(args.data), SplitSpec(config.train_fraction, config.split_seed))
    if not np.allclose(data.stats.mean, stats.mean) or not np.allclose(data.stats.std, stats.std):
        log.warning("training statistics of --data differ from those stored in the checkpoint")
    rows, docs = curvature_snapshot(params, curvature_eval_set(data.train, config), epoch, config,
                                    model_config, tasks=tasks)
    args.outdir.mkdir(parents=True, exist_ok=True)
    write_trace_csv(rows, args.outdir / "traces.csv")
    for doc in docs:
        write_density_json(doc, args.outdir / f"density_e{epoch:04d}_{doc['task_label']}.json")
    for r in rows:
        print(f"{r['task_label']}: trace {r['trace_mean']:.6g} +/- {r['trace_stderr']:.3g}")
    return EXIT_OK


def spectrum_demo(dim: int, lanczos_iters: int, runs: int = 10, seed: int = 0) -> dict:
    """SLQ on a random symmetric Gaussian matrix next to its exact spectrum."""
    op, matrix = cv.random_symmetric_operator(dim, seed)
    exact = cv.dense_spectrum_oracle(matrix)
    density = cv.slq_density(op, lanczos_iters, runs, seed=cv.derive_seed(seed, "lanczos"))
    reference = cv.exact_smoothed_density(exact, density.grid, density.sigma)
    ritz = np.concatenate([r.values for r in density.runs])
    trace = cv.hutchinson_trace(op, 500, seed=cv.derive_seed(seed, "hutchinson"))
    return {
        "dim": dim,
        "lanczos_iters": lanczos_iters,
        "runs": runs,
        "seed": seed,
        "sigma": density.sigma,
        "grid": density.grid.tolist(),
        "slq_density": density.density.tolist(),
        "exact_density": reference.tolist(),
        "l1_distance": cv.l1_distance(density.grid, density.density, reference),
        "ritz": density.ritz_points(),
        "ritz_min": float(ritz.min()),
        "ritz_max": float(ritz.max()),
        "eigenvalues": exact.tolist(),
        "exact_trace": float(np.trace(matrix)),
        "trace_mean": trace.mean,
        "trace_stderr": trace.stderr,
    }


def cmd_spectrum_demo(args) -> int:
    if args.dim < 1 or not 1 <= args.lanczos <= args.dim:
        raise _UsageError("need --dim >= 1 and 1 <= --lanczos <= --dim")
    if args.dim > cv.MAX_DENSE_DIM:
        raise _UsageError(f"--dim is limited to {cv.MAX_DENSE_DIM} by the dense oracle")
    doc = spectrum_demo(args.dim, args.lanczos, args.runs, args.seed)
    args.outdir.mkdir(parents=True, exist_ok=True)
    out = args.outdir / "spectrum_demo.json"
    write_density_json(doc, out)
    lo, hi = doc["eigenvalues"][0], doc["eigenvalues"][-1]
    print(f"extreme eigenvalues {lo:.10g} {hi:.10g}; Ritz {doc['ritz_min']:.10g} {doc['ritz_max']:.10g}")
    print(f"density L1 distance {doc['l1_distance']:.4f}; trace {doc['trace_mean']:.4g} "
          f"+/- {doc['trace_stderr']:.3g} (exact {doc['exact_trace']:.4g})")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    _require_file(args.data)
    graphs = load_dataset(args.data)
    problems = [(g.id, p) for g in graphs for p in validate_graph(g)]
    widths = {(g.node_dim, g.edge_dim if g.num_edges else None, g.num_targets) for g in graphs}
    if len({(v, t) for v, _, t in widths}) > 1:
        problems.append(("*", "graphs have different node widths or target counts"))
    for gid, p in problems:
        print(f"{gid}: {p}", file=sys.stderr)
    if problems:
        return EXIT_DATA
    print(f"{len(graphs)} graphs valid")
    return EXIT_OK


class _UsageError(Exception):
    pass


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "curvature": cmd_curvature,
    "spectrum-demo": cmd_spectrum_demo,
    "validate": cmd_validate,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mtcurv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, DatasetError) as exc:
        print(f"mtcurv: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"mtcurv: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # malformed configs, checkpoints or datasets that fail preprocessing
        print(f"mtcurv: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
