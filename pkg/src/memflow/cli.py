"""Command-line entry point: generate -> build-dataset -> train -> predict -> eval-*.

Each subcommand accepts ``--config`` (a file or bundled preset name); explicit
flags override config values. Every successful command prints one line
``SUMMARY {json}`` on stdout and exits 0. User errors print a one-line message
on stderr and exit 1.
"""

import argparse
import contextlib
import csv
import json
import logging
import os
import shutil
import sys

import numpy as np

from memflow import __version__
from memflow.checkpoint import load_checkpoint, read_header
from memflow.config import config_from_dict, list_presets, load_raw, parse_grid
from memflow.dataset import build_training_set, load_dataset, save_dataset
from memflow.errors import MemflowError
from memflow.evaluation import (
    bifurcation_scan,
    ensemble_error,
    eval_rng,
    memory_sweep,
    write_ensemble_csv,
    write_error_series_csv,
    write_scan_csv,
    write_sweep_csv,
)
from memflow.network import ModelConfig
from memflow.predictor import predict
from memflow.systems import (
    INDEX_NAME,
    generate_trajectories,
    get_system,
    integrate,
    load_collection,
    sample_initial_condition,
    sample_parameters,
    save_collection,
)
from memflow.trainer import TrainHyper, train

log = logging.getLogger("memflow")

SEED_ENV = "MEMFLOW_SEED"


class UsageError(MemflowError):
    pass


# --- helpers -------------------------------------------------------------------


def _summary(command, **fields):
    print("SUMMARY " + json.dumps({"command": command, "status": "ok", **fields}, sort_keys=True))


def _claim_output(path, force, directory=False):
    """Refuse to clobber existing output unless ``--force``."""
    if os.path.lexists(path):
        if not force:
            raise UsageError(f"output {path} already exists (pass --force to overwrite)")
        if os.path.isdir(path) and not os.path.islink(path):
            shutil.rmtree(path)
        else:
            os.unlink(path)
    if directory:
        os.makedirs(path)
    else:
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)


def _experiment(args, mapping, seed_keys=()):
    """Merge config file, ``MEMFLOW_SEED`` fallback and explicit flags.

    Precedence: flag > config file > ``MEMFLOW_SEED`` (seeds only) > default.
    """
    raw, sources = {}, []
    if getattr(args, "config", None):
        raw, origin = load_raw(args.config)
        sources = [origin]
    overrides = {key: getattr(args, dest) for dest, key in mapping.items() if getattr(args, dest, None) is not None}
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        for key in seed_keys:
            if key not in overrides and key not in raw:
                overrides[key] = env_seed
    return config_from_dict(raw, _as_text(overrides), sources=sources)


def _as_text(d):
    out = {}
    for k, v in d.items():
        if isinstance(v, (tuple, list)):
            out[k] = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        else:
            out[k] = str(v)
    return out


def _checkpoint_path(path):
    if os.path.isdir(path):
        path = os.path.join(path, "last.mfc")
    if not os.path.isfile(path):
        raise UsageError(f"checkpoint {path} not found")
    return path


def _hyper(cfg):
    return TrainHyper(
        lr=cfg.lr,
        batch_size=cfg.batch,
        epochs=cfg.epochs,
        seed=cfg.train_seed,
        lr_schedule=cfg.lr_schedule,
        lr_min=cfg.lr_min,
        normalize=cfg.normalize,
        whiten_ridge=cfg.whiten_ridge,
        val_fraction=cfg.val_fraction,
    )


# --- subcommands ---------------------------------------------------------------


def cmd_generate(args):
    cfg = _experiment(
        args,
        {"system": "system", "num_traj": "num_trajectories", "steps": "steps", "dt": "dt",
         "substeps": "substeps", "seed": "gen_seed"},
        seed_keys=("gen_seed",),
    )
    spec = get_system(cfg.system)
    _claim_output(args.out, args.force, directory=True)
    trajs = generate_trajectories(
        spec, cfg.num_trajectories, cfg.steps, cfg.dt, cfg.substeps, cfg.gen_seed, debug=args.debug_params
    )
    meta = {
        "system": spec.system_id,
        "dt": cfg.dt,
        "steps": cfg.steps,
        "substeps": cfg.substeps,
        "seed": cfg.gen_seed,
        "requested": cfg.num_trajectories,
        "tool_version": __version__,
    }
    save_collection(trajs, args.out, meta)
    written = len(load_collection(args.out))
    if written != len(trajs):
        raise MemflowError(f"wrote {len(trajs)} trajectories but read back {written}")
    _summary("generate", out=args.out, system=spec.system_id, trajectories=written,
             dropped=cfg.num_trajectories - written)


def cmd_build_dataset(args):
    cfg = _experiment(
        args,
        {"n_mem": "n_mem", "n_rec": "n_rec", "samples_per_traj": "samples_per_traj", "seed": "data_seed"},
        seed_keys=("data_seed",),
    )
    _claim_output(args.out, args.force)
    trajs = load_collection(args.trajectories, allow_debug=False)
    rng = np.random.default_rng(cfg.data_seed)
    ds, skipped = build_training_set(trajs, cfg.n_mem, cfg.n_rec, cfg.samples_per_traj, rng, cfg.data_seed)
    save_dataset(ds, args.out)
    back = load_dataset(args.out)
    if not (np.array_equal(back.x_in, ds.x_in) and np.array_equal(back.y_out, ds.y_out)):
        raise MemflowError("dataset failed read-back validation")
    _summary("build-dataset", out=args.out, J=ds.meta.J, n=ds.meta.n, n_mem=ds.meta.n_mem,
             n_rec=ds.meta.n_rec, skipped=skipped)


def cmd_train(args):
    ds = load_dataset(args.dataset)
    mapping = {"widths": "widths", "lr": "lr", "lr_schedule": "lr_schedule",
               "lr_min": "lr_min", "batch": "batch", "epochs": "epochs", "seed": "train_seed",
               "normalize": "normalize", "val_fraction": "val_fraction"}
    cfg = _experiment(args, mapping, seed_keys=("train_seed",))
    # memory and unroll length are fixed by the dataset windows; flags may only confirm them
    m = ds.meta
    for flag, given, have in (("--n-mem", args.n_mem, m.n_mem), ("--n-rec", args.n_rec, m.n_rec)):
        if given is not None and given != have:
            raise UsageError(f"{flag} {given} does not match the dataset ({have}); rebuild the dataset instead")
    config = ModelConfig(n=m.n, n_mem=m.n_mem, n_rec=m.n_rec, dt=m.dt, hidden_widths=cfg.widths)
    _claim_output(args.out, args.force, directory=True)

    def progress(rec):
        log.info("epoch %d loss %.6e (%.2fs)", rec.epoch, rec.loss, rec.seconds)

    run = train(ds, config, _hyper(cfg), out_dir=args.out, progress=progress)
    ck = load_checkpoint(os.path.join(args.out, "last.mfc"))
    if not all(np.array_equal(a, b) for a, b in zip(ck.theta.tensors(), run.final_theta.tensors())):
        raise MemflowError("checkpoint failed read-back validation")
    final = run.history[-1].loss if run.history else run.initial_loss
    _summary("train", out=args.out, epochs=len(run.history), initial_loss=run.initial_loss,
             final_loss=final, best_epoch=run.best_epoch, best_loss=run.best_loss)


def cmd_predict(args):
    cfg = _experiment(args, {"system": "system", "seed": "eval_seed", "substeps": "substeps", "x0": "x0"},
                      seed_keys=("eval_seed",))
    ck = load_checkpoint(_checkpoint_path(args.checkpoint))
    spec = get_system(cfg.system)
    if spec.state_dim != ck.config.n:
        raise UsageError(f"checkpoint models n={ck.config.n} states but {spec.system_id} has {spec.state_dim}")
    rng = eval_rng(cfg.eval_seed, 0)
    x0 = sample_initial_condition(spec, rng)
    alpha = sample_parameters(spec, rng)
    if cfg.x0 is not None:
        x0 = np.asarray(cfg.x0, dtype=float)
    dt = ck.config.dt
    w = ck.config.n_mem + 1
    ref = integrate(spec, x0, alpha, dt, w + args.steps, cfg.substeps).states
    run = predict(ck.theta, ref[:w], args.steps, dt=dt, reference=ref[w:] if args.reference else None)
    _claim_output(args.out, args.force)
    n = spec.state_dim
    with open(args.out, "w", newline="") as fh:
        wr = csv.writer(fh)
        header = ["t"] + [f"x_{j + 1}" for j in range(n)]
        if args.reference:
            header += [f"ref_{j + 1}" for j in range(n)]
        wr.writerow(header)
        for k in range(w + run.predicted.shape[0]):
            row = run.warmup[k] if k < w else run.predicted[k - w]
            line = [repr(k * dt)] + [repr(float(v)) for v in row]
            if args.reference:
                line += [repr(float(v)) for v in ref[k]]
            wr.writerow(line)
    _summary("predict", out=args.out, steps=int(run.predicted.shape[0]), truncated=run.truncated,
             stop_index=run.stop_index)


def cmd_eval_ensemble(args):
    cfg = _experiment(args, {"system": "system", "t_eval": "t_eval", "runs": "runs", "seed": "eval_seed",
                             "substeps": "substeps"}, seed_keys=("eval_seed",))
    ck = load_checkpoint(_checkpoint_path(args.checkpoint))
    spec = get_system(cfg.system)
    report = ensemble_error(ck.theta, spec, cfg.t_eval, cfg.runs, cfg.eval_seed, ck.config.dt, cfg.substeps)
    _claim_output(args.out, args.force)
    write_ensemble_csv(report, args.out)
    if args.series:
        _claim_output(args.series, args.force)
        write_error_series_csv(report, args.series)
    _summary("eval-ensemble", out=args.out, mean_error=report.mean_error, runs=cfg.runs,
             completed=report.n_completed, truncated=report.n_truncated, t_eval=cfg.t_eval)


def cmd_eval_sweep(args):
    mapping = {"system": "system", "n_mem_list": "n_mem_list", "n_rec_list": "n_rec_list",
               "samples_per_traj": "samples_per_traj", "widths": "widths", "lr": "lr",
               "lr_schedule": "lr_schedule", "lr_min": "lr_min", "batch": "batch", "epochs": "epochs",
               "train_seed": "train_seed", "normalize": "normalize", "t_eval": "t_eval", "runs": "runs",
               "seed": "eval_seed", "substeps": "substeps"}
    cfg = _experiment(args, mapping, seed_keys=("eval_seed", "train_seed"))
    if not cfg.n_mem_list or not cfg.n_rec_list:
        raise UsageError("eval-sweep needs --n-mem-list and --n-rec-list (or config keys)")
    spec = get_system(cfg.system)
    trajs = load_collection(args.trajectories, allow_debug=False)
    _claim_output(args.out, args.force)

    def progress(row):
        log.info("n_mem=%d n_rec=%d mean_error=%.4e", row.n_mem, row.n_rec, row.mean_error)

    rows = memory_sweep(trajs, spec, cfg.n_mem_list, cfg.n_rec_list, _hyper(cfg), cfg.samples_per_traj,
                        cfg.t_eval, cfg.runs, cfg.eval_seed, cfg.widths, cfg.substeps, progress)
    write_sweep_csv(rows, args.out)
    _summary("eval-sweep", out=args.out, rows=len(rows),
             errors={f"{r.n_mem}/{r.n_rec}": r.mean_error for r in rows})


def cmd_eval_bifurcation(args):
    cfg = _experiment(args, {"system": "system", "da_grid": "da_grid", "x0": "x0", "horizon": "horizon",
                             "window": "window", "dt": "dt", "substeps": "substeps"})
    spec = get_system(cfg.system)
    if not cfg.da_grid:
        raise UsageError("eval-bifurcation needs --da-grid (e.g. 0.070:0.086:17)")
    if cfg.x0 is None:
        raise UsageError("eval-bifurcation needs --x0")
    theta = None
    dt = cfg.dt
    if args.checkpoint:
        ck = load_checkpoint(_checkpoint_path(args.checkpoint))
        theta, dt = ck.theta, ck.config.dt
    scan = bifurcation_scan(spec, cfg.da_grid, np.asarray(cfg.x0), theta=theta, horizon=cfg.horizon,
                            window=tuple(cfg.window), dt=dt, substeps=cfg.substeps)
    _claim_output(args.out, args.force)
    write_scan_csv(scan, args.out)
    _summary("eval-bifurcation", out=args.out, points=int(scan.da.size),
             mode="dnn+reference" if theta is not None else "reference")


def cmd_info(args):
    if args.checkpoint:
        header = read_header(_checkpoint_path(args.checkpoint))
        print(json.dumps(header, indent=2, sort_keys=True))
        _summary("info", kind="checkpoint", config=header["config"])
    elif args.dataset:
        ds = load_dataset(args.dataset)
        print(json.dumps(ds.meta.to_dict(), indent=2, sort_keys=True))
        _summary("info", kind="dataset", meta=ds.meta.to_dict())
    elif args.trajectories:
        with open(os.path.join(args.trajectories, INDEX_NAME)) as fh:
            index = json.load(fh)
        print(json.dumps({k: v for k, v in index.items() if k != "files"}, indent=2, sort_keys=True))
        _summary("info", kind="trajectories", count=index["count"])
    else:
        print("\n".join(list_presets()))
        _summary("info", kind="presets")


# --- parser ----------------------------------------------------------------------


def _csv_floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _csv_ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def build_parser():
    p = argparse.ArgumentParser(prog="memflow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"memflow {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file or bundled preset name")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="integrate a reference system into trajectories")
    g.add_argument("--system")
    g.add_argument("--num-traj", type=int)
    g.add_argument("--steps", type=int, help="states per trajectory")
    g.add_argument("--dt", type=float)
    g.add_argument("--substeps", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--debug-params", action="store_true", help="store hidden parameters (never for training)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("build-dataset", parents=[common], help="cut training windows from trajectories")
    b.add_argument("--trajectories", required=True)
    b.add_argument("--n-mem", type=int)
    b.add_argument("--n-rec", type=int)
    b.add_argument("--samples-per-traj", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_dataset)

    t = sub.add_parser("train", parents=[common], help="train a flow-map model")
    t.add_argument("--dataset", required=True)
    t.add_argument("--n-mem", type=int, help="must match the dataset")
    t.add_argument("--n-rec", type=int, help="must match the dataset")
    t.add_argument("--widths", type=_csv_ints)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-schedule", choices=("constant", "cosine"))
    t.add_argument("--lr-min", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--normalize", choices=("off", "diag", "full"))
    t.add_argument("--val-fraction", type=float)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", parents=[common], help="iterate a trained model from a true warmup")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--system")
    pr.add_argument("--x0", type=_csv_floats)
    pr.add_argument("--seed", type=int, help="draws the hidden parameters (and x0 if not given)")
    pr.add_argument("--steps", type=int, required=True)
    pr.add_argument("--substeps", type=int)
    pr.add_argument("--reference", action="store_true", help="add ref_* columns from the true system")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval-ensemble", parents=[common], help="mean l2 error at t_eval over fresh draws")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--system")
    e.add_argument("--t-eval", type=float)
    e.add_argument("--runs", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--substeps", type=int)
    e.add_argument("--series", help="also write the per-step error series here")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval_ensemble)

    s = sub.add_parser("eval-sweep", parents=[common], help="ensemble error across n_mem/n_rec")
    s.add_argument("--trajectories", required=True)
    s.add_argument("--system")
    s.add_argument("--n-mem-list", type=_csv_ints)
    s.add_argument("--n-rec-list", type=_csv_ints)
    s.add_argument("--samples-per-traj", type=int)
    s.add_argument("--widths", type=_csv_ints)
    s.add_argument("--lr", type=float)
    s.add_argument("--lr-schedule", choices=("constant", "cosine"))
    s.add_argument("--lr-min", type=float)
    s.add_argument("--batch", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--train-seed", type=int)
    s.add_argument("--normalize", choices=("off", "diag", "full"))
    s.add_argument("--t-eval", type=float)
    s.add_argument("--runs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--substeps", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval_sweep)

    f = sub.add_parser("eval-bifurcation", parents=[common], help="window amplitudes across a Da grid")
    f.add_argument("--system")
    f.add_argument("--da-grid", type=parse_grid)
    f.add_argument("--x0", type=_csv_floats)
    f.add_argument("--horizon", type=float)
    f.add_argument("--window", type=_csv_floats)
    f.add_argument("--dt", type=float)
    f.add_argument("--substeps", type=int)
    f.add_argument("--checkpoint", help="also run the trained model (reference only when omitted)")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_eval_bifurcation)

    i = sub.add_parser("info", parents=[common], help="describe an artifact, or list presets")
    i.add_argument("--checkpoint")
    i.add_argument("--dataset")
    i.add_argument("--trajectories")
    i.set_defaults(func=cmd_info)
    return p


def _thread_limit(n):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        with _thread_limit(args.threads):
            args.func(args)
    except (MemflowError, OSError, ValueError) as exc:
        print(f"memflow {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
