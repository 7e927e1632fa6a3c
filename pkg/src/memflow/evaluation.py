"""Evaluation protocols: ensemble error, memory sweeps, and amplitude scans."""

import csv
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from memflow.dataset import build_training_set
from memflow.errors import ContractError
from memflow.network import ModelConfig
from memflow.predictor import predict_batch
from memflow.systems import (
    DEFAULT_SUBSTEPS,
    integrate_batch,
    sample_initial_condition,
    sample_parameters,
)
from memflow.trainer import train


def l2_error_series(run):
    """Euclidean norm of prediction minus reference at every predicted step."""
    if run.reference is None:
        raise ContractError("prediction run has no reference to compare against")
    return np.linalg.norm(run.predicted - run.reference, axis=-1)


def eval_rng(seed, index):
    # Third entropy word keeps evaluation draws disjoint from generation streams.
    return np.random.default_rng([int(seed), int(index), 1])


@dataclass
class References:
    x0s: np.ndarray
    alphas: np.ndarray
    paths: np.ndarray  # (M, K, n) from t=0
    dt: float


def draw_references(spec, t_eval, M, seed, dt, substeps=DEFAULT_SUBSTEPS):
    k_eval = int(round(t_eval / dt))
    x0s = np.empty((M, spec.state_dim))
    alphas = np.empty((M, spec.param_dim))
    for i in range(M):
        rng = eval_rng(seed, i)
        x0s[i] = sample_initial_condition(spec, rng)
        alphas[i] = sample_parameters(spec, rng)
    paths = integrate_batch(spec, x0s, alphas, dt, k_eval + 1, substeps)
    return References(x0s, alphas, paths, dt)


@dataclass
class ErrorReport:
    t_eval: float
    errors: np.ndarray  # per run at t_eval, NaN where the prediction was truncated
    series: np.ndarray  # (M, steps) error over time, NaN after truncation
    times: np.ndarray
    truncated: np.ndarray  # bool per run

    @property
    def n_truncated(self):
        return int(self.truncated.sum())

    @property
    def n_completed(self):
        return int((~self.truncated).sum())

    @property
    def mean_error(self):
        ok = ~self.truncated
        return float(np.mean(self.errors[ok])) if ok.any() else float("nan")


def ensemble_error(theta, spec, t_eval, M, seed, dt, substeps=DEFAULT_SUBSTEPS, references=None):
    """Mean l2 error at ``t_eval`` over ``M`` fresh (x0, alpha) draws.

    Warmups are the first ``n_mem + 1`` rows of each reference path, so the
    hidden parameters reach the network only through the states. Truncated
    runs are excluded from the mean and counted in the report.
    """
    if references is None:
        references = draw_references(spec, t_eval, M, seed, dt, substeps)
    paths = references.paths
    w = theta.n_mem + 1
    k_eval = paths.shape[1] - 1
    steps = k_eval - theta.n_mem
    if steps < 1:
        raise ContractError(f"t_eval={t_eval} falls inside the warmup window (n_mem={theta.n_mem})")
    if not np.all(np.isfinite(paths)):
        raise ContractError("a reference path blew up; cannot evaluate against it")
    pred, stops = predict_batch(theta, paths[:, :w], steps)
    series = np.linalg.norm(pred - paths[:, w:], axis=-1)
    truncated = stops < steps
    return ErrorReport(
        t_eval=float(t_eval),
        errors=series[:, -1],
        series=series,
        times=np.arange(w, k_eval + 1) * dt,
        truncated=truncated,
    )


def write_ensemble_csv(report, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "error", "truncated"])
        for i, (e, t) in enumerate(zip(report.errors, report.truncated)):
            w.writerow([i, repr(float(e)), int(t)])
        w.writerow(["mean", repr(report.mean_error), report.n_truncated])


def write_error_series_csv(report, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"run_{i}" for i in range(report.series.shape[0])])
        for k, t in enumerate(report.times):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in report.series[:, k]])


# --- amplitude and bifurcation scan ------------------------------------------


def amplitude(signal):
    """Half the peak-to-peak range of a signal."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.size == 0:
        raise ContractError("amplitude of an empty window")
    return float((signal.max() - signal.min()) / 2.0)


@dataclass
class AmplitudeScan:
    da: np.ndarray
    reference: np.ndarray  # (G, n) amplitudes per state component
    predicted: Optional[np.ndarray] = None  # (G, n), NaN where a run was truncated

    def __post_init__(self):
        if np.any(np.diff(self.da) <= 0):
            raise ContractError("Da grid must be strictly increasing")


def _window_amplitudes(states, dt, window):
    t = np.arange(states.shape[0]) * dt
    sel = (t >= window[0] - 1e-9) & (t <= window[1] + 1e-9)
    return np.array([amplitude(states[sel, j]) for j in range(states.shape[1])])


def bifurcation_scan(
    spec,
    da_grid,
    x0,
    theta=None,
    horizon=70.0,
    window=(50.0, 70.0),
    dt=0.02,
    substeps=DEFAULT_SUBSTEPS,
):
    """Window amplitudes of each state component across a grid of the single hidden parameter.

    The reference integrator always runs; with ``theta`` the network is also
    iterated from a warmup produced by the true system at that parameter value.
    """
    if spec.param_dim != 1:
        raise ContractError("bifurcation_scan needs a system with one hidden parameter")
    da_grid = np.asarray(da_grid, dtype=np.float64)
    if window[1] > horizon:
        raise ContractError("amplitude window extends past the horizon")
    K = int(round(horizon / dt)) + 1
    G = da_grid.size
    x0s = np.tile(np.asarray(x0, dtype=np.float64), (G, 1))
    # all grid points integrate in one vectorized batch
    refs = integrate_batch(spec, x0s, da_grid[:, None], dt, K, substeps)
    if not np.all(np.isfinite(refs)):
        raise ContractError("a reference trajectory blew up during the scan")
    ref_amp = np.array([_window_amplitudes(r, dt, window) for r in refs])
    dnn_amp = None
    if theta is not None:
        w = theta.n_mem + 1
        pred, stops = predict_batch(theta, refs[:, :w], K - w)
        dnn_amp = np.full((G, spec.state_dim), np.nan)
        for g in np.flatnonzero(stops == K - w):
            dnn_amp[g] = _window_amplitudes(np.concatenate([refs[g, :w], pred[g]]), dt, window)
    return AmplitudeScan(da_grid, ref_amp, dnn_amp)


def write_scan_csv(scan, path):
    n = scan.reference.shape[1]
    cols = ["da"] + [f"ref_amp_x{j + 1}" for j in range(n)]
    if scan.predicted is not None:
        cols += [f"dnn_amp_x{j + 1}" for j in range(n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for g, da in enumerate(scan.da):
            row = [repr(float(da))] + [repr(float(v)) for v in scan.reference[g]]
            if scan.predicted is not None:
                row += [repr(float(v)) for v in scan.predicted[g]]
            w.writerow(row)


# --- memory sweep ------------------------------------------------------------


@dataclass
class SweepRow:
    n_mem: int
    n_rec: int
    mean_error: float
    n_completed: int
    n_truncated: int
    final_loss: float


SWEEP_COLUMNS = ["n_mem", "n_rec", "mean_error", "n_completed", "n_truncated", "final_loss"]


def memory_sweep(
    trajs,
    spec,
    n_mem_list,
    n_rec_list,
    hyper,
    samples_per_traj,
    t_eval,
    M,
    seed,
    hidden_widths=(30, 30, 30),
    substeps=DEFAULT_SUBSTEPS,
    progress=None,
) -> List[SweepRow]:
    """Train one model per (n_mem, n_rec) under the same budget and tabulate ensemble errors.

    Every model sees windows cut with the same seed and is scored against the
    same reference ensemble.
    """
    dt = trajs[0].dt
    refs = draw_references(spec, t_eval, M, seed, dt, substeps)
    rows = []
    for n_mem in n_mem_list:
        for n_rec in n_rec_list:
            ds, _ = build_training_set(
                trajs, n_mem, n_rec, samples_per_traj, np.random.default_rng([seed, 3]), source_seed=seed
            )
            config = ModelConfig(n=spec.state_dim, n_mem=n_mem, n_rec=n_rec, dt=dt, hidden_widths=hidden_widths)
            run = train(ds, config, hyper)
            report = ensemble_error(run.final_theta, spec, t_eval, M, seed, dt, substeps, references=refs)
            final = run.history[-1].loss if run.history else run.initial_loss
            row = SweepRow(n_mem, n_rec, report.mean_error, report.n_completed, report.n_truncated, final)
            rows.append(row)
            if progress:
                progress(row)
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([r.n_mem, r.n_rec, repr(r.mean_error), r.n_completed, r.n_truncated, repr(r.final_loss)])


def read_sweep_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            SweepRow(
                int(d["n_mem"]),
                int(d["n_rec"]),
                float(d["mean_error"]),
                int(d["n_completed"]),
                int(d["n_truncated"]),
                float(d["final_loss"]),
            )
            for d in reader
        ]
