"""Mini-batch Adam training of the recurrent loss."""

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from memflow.checkpoint import save_checkpoint
from memflow.errors import ContractError, TrainingDiverged
from memflow.network import (
    AdamHyper,
    ModelConfig,
    adam_init,
    adam_update,
    init_params,
    loss,
    loss_and_grad,
    with_normalization,
)

log = logging.getLogger(__name__)

EVAL_CHUNK = 8192


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    shuffle: bool = True
    # "constant" or "cosine" (decays lr to lr_min over the run)
    lr_schedule: str = "constant"
    lr_min: float = 0.0
    # "off", "diag" (per-component standardization) or "full" (whitening)
    normalize: str = "off"
    whiten_ridge: float = 1e-6
    init: str = "he"
    val_fraction: float = 0.0

    def lr_at(self, epoch):
        """Learning rate used throughout 1-based ``epoch``."""
        if self.lr_schedule == "constant":
            return self.lr
        if self.lr_schedule == "cosine":
            frac = (epoch - 1) / max(self.epochs, 1)
            return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + math.cos(math.pi * frac))
        raise ContractError(f"unknown lr schedule {self.lr_schedule!r}")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    seconds: float
    val_loss: Optional[float] = None


@dataclass
class TrainRun:
    config: ModelConfig
    hyper: TrainHyper
    initial_loss: float
    history: List[EpochRecord]
    final_theta: object
    opt_state: object = None
    best_epoch: int = 0
    best_loss: float = math.inf
    checkpoints: dict = field(default_factory=dict)


def dataset_loss(theta, x_in, y_out, chunk=EVAL_CHUNK):
    """Full-dataset loss, accumulated over fixed chunks in index order."""
    J = x_in.shape[0]
    total = 0.0
    for start in range(0, J, chunk):
        stop = min(start + chunk, J)
        total += loss(theta, x_in[start:stop], y_out[start:stop]) * (stop - start)
    return total / J


def normalization_stats(dataset, mode, ridge=1e-6):
    """Fixed input/output maps for ``mode`` in {"diag", "full"}.

    ``diag`` standardizes each state component (statistics tiled over the
    history); ``full`` whitens the assembled input vector with a ridge of
    ``ridge * largest eigenvalue`` so near-collinear directions stay bounded.
    The output is scaled by the standard deviation of one-step increments.
    """
    m = dataset.meta
    X = dataset.x_in.reshape(m.J, m.n_mem + 1, m.n)[:, ::-1].reshape(m.J, -1)
    shift = X.mean(axis=0)
    out_scale = (dataset.y_out[:, : m.n] - dataset.x_in[:, -m.n :]).std(axis=0)
    out_scale[out_scale == 0] = 1.0
    if mode == "diag":
        scale = dataset.x_in.reshape(-1, m.n).std(axis=0)
        scale[scale == 0] = 1.0
        return dict(in_shift=shift, in_scale=np.tile(scale, m.n_mem + 1), out_scale=out_scale)
    if mode == "full":
        C = np.cov(X, rowvar=False).reshape(X.shape[1], X.shape[1])
        lam, V = np.linalg.eigh(C)
        lam = np.clip(lam, 0.0, None) + ridge * max(lam.max(), 1e-300)
        return dict(in_shift=shift, in_matrix=(V / np.sqrt(lam)) @ V.T, out_scale=out_scale)
    raise ContractError(f"unknown normalization mode {mode!r}")


def check_conformance(dataset, config):
    m = dataset.meta
    if (m.n, m.n_mem, m.n_rec) != (config.n, config.n_mem, config.n_rec):
        raise ContractError(
            f"dataset (n={m.n}, n_mem={m.n_mem}, n_rec={m.n_rec}) does not match model "
            f"(n={config.n}, n_mem={config.n_mem}, n_rec={config.n_rec})"
        )


def write_history_csv(run, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "seconds"])
        w.writerow([0, repr(run.initial_loss), 0.0])
        for rec in run.history:
            w.writerow([rec.epoch, repr(rec.loss), f"{rec.seconds:.3f}"])


def train(dataset, config, hyper, out_dir=None, progress=None):
    """Minimize the recurrent loss over ``dataset``.

    The RNG streams for initialization, validation split and shuffling are
    derived from ``hyper.seed``, so two runs with equal inputs produce
    bit-identical parameters. ``history[e-1]`` is the full-dataset loss after
    epoch ``e``; ``initial_loss`` is the loss of the initial parameters.

    With ``out_dir`` set, ``last.mfc`` and ``best.mfc`` are rewritten every
    epoch and ``history.csv`` at the end. A non-finite loss raises
    :class:`TrainingDiverged` pointing at the last good checkpoint.
    """
    check_conformance(dataset, config)
    if hyper.batch_size < 1 or hyper.epochs < 0:
        raise ContractError("batch_size must be >= 1 and epochs >= 0")
    init_rng = np.random.default_rng([hyper.seed, 0])
    shuffle_rng = np.random.default_rng([hyper.seed, 1])

    x_all, y_all = dataset.x_in, dataset.y_out
    x_val = y_val = None
    if hyper.val_fraction > 0:
        J = x_all.shape[0]
        n_val = int(round(hyper.val_fraction * J))
        if not 0 < n_val < J:
            raise ContractError(f"val_fraction {hyper.val_fraction} leaves an empty split")
        perm = np.random.default_rng([hyper.seed, 2]).permutation(J)
        x_val, y_val = x_all[perm[:n_val]], y_all[perm[:n_val]]
        x_all, y_all = x_all[perm[n_val:]], y_all[perm[n_val:]]

    theta = init_params(config, init_rng, hyper.init)
    if hyper.normalize != "off":
        theta = with_normalization(theta, **normalization_stats(dataset, hyper.normalize, hyper.whiten_ridge))
    opt = adam_init(theta)

    initial = dataset_loss(theta, x_all, y_all)
    run = TrainRun(config, hyper, initial, [], theta, opt, best_epoch=0, best_loss=initial)
    paths = {}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        paths = {"last": os.path.join(out_dir, "last.mfc"), "best": os.path.join(out_dir, "best.mfc")}
        for p in paths.values():
            save_checkpoint(p, config, theta, opt, {"epoch": 0, "loss": initial})
        run.checkpoints = dict(paths)

    J = x_all.shape[0]
    bs = hyper.batch_size
    for epoch in range(1, hyper.epochs + 1):
        t0 = time.perf_counter()
        adam = AdamHyper(hyper.lr_at(epoch), hyper.beta1, hyper.beta2, hyper.eps)
        order = shuffle_rng.permutation(J) if hyper.shuffle else np.arange(J)
        for start in range(0, J, bs):
            idx = order[start : start + bs]
            _, grad = loss_and_grad(theta, x_all[idx], y_all[idx])
            theta, opt = adam_update(theta, grad, opt, adam)
        value = dataset_loss(theta, x_all, y_all)
        seconds = time.perf_counter() - t0
        if not math.isfinite(value) or not theta.all_finite():
            raise TrainingDiverged(
                f"loss became non-finite at epoch {epoch}", epoch, paths.get("last")
            )
        val = dataset_loss(theta, x_val, y_val) if x_val is not None else None
        run.history.append(EpochRecord(epoch, value, seconds, val))
        info = {"epoch": epoch, "loss": value}
        if paths:
            save_checkpoint(paths["last"], config, theta, opt, info)
        if value < run.best_loss:
            run.best_loss, run.best_epoch = value, epoch
            if paths:
                save_checkpoint(paths["best"], config, theta, opt, info)
        if progress:
            progress(run.history[-1])
        log.debug("epoch %d loss %.6e (%.2fs)", epoch, value, seconds)

    run.final_theta, run.opt_state = theta, opt
    if out_dir:
        write_history_csv(run, os.path.join(out_dir, "history.csv"))
    return run
