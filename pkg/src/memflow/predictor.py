"""Long-horizon prediction by iterating the single-step residual block."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from memflow.errors import ContractError
from memflow.network import _ffn_forward
from memflow.systems import BLOWUP_THRESHOLD, DEFAULT_SUBSTEPS, integrate


@dataclass
class PredictionRun:
    """Warmup rows sit at ``t_0..t_{n_mem}``; predicted row ``m`` at ``t_{n_mem+1+m}``.

    ``stop_index`` is the number of valid predicted rows when the run blew up,
    else ``None``. ``predicted`` only holds valid rows.
    """

    warmup: np.ndarray
    predicted: np.ndarray
    dt: float
    reference: Optional[np.ndarray] = None
    stop_index: Optional[int] = None

    @property
    def truncated(self):
        return self.stop_index is not None

    @property
    def times(self):
        start = self.warmup.shape[0]
        return (start + np.arange(self.predicted.shape[0])) * self.dt


def predict_batch(theta, warmups, steps):
    """Iterate a batch of warmups ``(B, n_mem+1, n)`` for ``steps`` steps.

    Returns ``(states, stops)``: ``states`` is ``(B, steps, n)`` with NaN rows
    after a member's blow-up, ``stops[b]`` its count of valid rows.
    """
    warmups = np.asarray(warmups, dtype=np.float64)
    w, n = theta.n_mem + 1, theta.n
    if warmups.ndim != 3 or warmups.shape[1:] != (w, n):
        raise ContractError(f"warmups must be (B, {w}, {n}), got {warmups.shape}")
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    B = warmups.shape[0]
    S = np.full((B, w + steps, n), np.nan)
    S[:, :w] = warmups
    stops = np.full(B, steps)
    alive = np.ones(B, dtype=bool)
    for m in range(steps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        window = S[idx, m : m + w]
        X = window[:, ::-1].reshape(idx.size, w * n)
        with np.errstate(all="ignore"):
            out, _ = _ffn_forward(theta, X)
            nxt = window[:, -1] + out
        ok = np.all(np.isfinite(nxt) & (np.abs(nxt) <= BLOWUP_THRESHOLD), axis=1)
        S[idx[ok], m + w] = nxt[ok]
        stops[idx[~ok]] = m
        alive[idx[~ok]] = False
    return S[:, w:], stops


def predict(theta, warmup, steps, dt=1.0, reference=None):
    """Predict ``steps`` states after ``warmup`` (shape ``(n_mem+1, n)``).

    The result depends only on ``theta`` and ``warmup``; a non-finite or
    runaway state truncates the run instead of raising.
    """
    warmup = np.asarray(warmup, dtype=np.float64)
    if warmup.shape != (theta.n_mem + 1, theta.n):
        raise ContractError(f"warmup must be ({theta.n_mem + 1}, {theta.n}), got {warmup.shape}")
    states, stops = predict_batch(theta, warmup[None], steps)
    stop = int(stops[0])
    ref = None
    if reference is not None:
        ref = np.asarray(reference, dtype=np.float64)
        if ref.shape != (steps, theta.n):
            raise ContractError(f"reference must be ({steps}, {theta.n}), got {ref.shape}")
    return PredictionRun(
        warmup=warmup.copy(),
        predicted=states[0, :stop].copy(),
        dt=float(dt),
        reference=None if ref is None else ref[:stop].copy(),
        stop_index=None if stop == steps else stop,
    )


def make_warmup(spec, x0, alpha, n_mem, dt, substeps=DEFAULT_SUBSTEPS):
    """The first ``n_mem + 1`` true states from ``x0``; ``alpha`` is not returned."""
    return integrate(spec, x0, alpha, dt, n_mem + 1, substeps).states
