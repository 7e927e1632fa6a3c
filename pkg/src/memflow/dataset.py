"""Training windows cut from trajectories, and the MFD1 dataset file."""

import logging
from dataclasses import dataclass

import numpy as np

from memflow._binio import read_container, split_payload, write_container
from memflow.errors import ContractError, EmptyDatasetError, IntegrityError

log = logging.getLogger(__name__)

DATASET_MAGIC = "MFD1"


@dataclass
class TrainingSample:
    x_in: np.ndarray  # x_k .. x_{k+n_mem}, oldest first, flattened
    y_out: np.ndarray  # x_{k+n_mem+1} .. x_{k+n_mem+n_rec}, flattened


@dataclass(frozen=True)
class DatasetMeta:
    n: int
    n_mem: int
    n_rec: int
    dt: float
    J: int
    source_seed: int = 0

    @property
    def n_tot(self):
        return self.n_mem + self.n_rec + 1

    def to_dict(self):
        return {
            "n": self.n,
            "n_mem": self.n_mem,
            "n_rec": self.n_rec,
            "dt": self.dt,
            "J": self.J,
            "source_seed": self.source_seed,
        }


@dataclass
class Dataset:
    """``J`` samples stored as two matrices, ``x_in`` (J, n(n_mem+1)) and ``y_out`` (J, n n_rec)."""

    meta: DatasetMeta
    x_in: np.ndarray
    y_out: np.ndarray

    def __post_init__(self):
        m = self.meta
        if m.J < 1:
            raise ContractError("a dataset needs at least one sample")
        if self.x_in.shape != (m.J, m.n * (m.n_mem + 1)) or self.y_out.shape != (m.J, m.n * m.n_rec):
            raise ContractError(
                f"sample arrays {self.x_in.shape}/{self.y_out.shape} do not conform to {m}"
            )

    def __len__(self):
        return self.meta.J

    def __getitem__(self, j):
        return TrainingSample(self.x_in[j], self.y_out[j])


def _check_steps(n_mem, n_rec):
    if n_mem < 0:
        raise ContractError(f"n_mem must be >= 0, got {n_mem}")
    if n_rec < 1:
        raise ContractError(f"n_rec must be >= 1, got {n_rec}")


def window(traj, k, n_mem, n_rec):
    _check_steps(n_mem, n_rec)
    last = traj.K - 1 - n_mem - n_rec
    if not 0 <= k <= last:
        raise ContractError(
            f"window start k={k} out of range: need 0 <= k <= K-1-n_mem-n_rec = {last}"
        )
    rows = traj.states[k : k + n_mem + n_rec + 1]
    return TrainingSample(rows[: n_mem + 1].ravel().copy(), rows[n_mem + 1 :].ravel().copy())


def build_training_set(trajs, n_mem, n_rec, samples_per_traj, rng, source_seed=0):
    """Draw ``samples_per_traj`` windows per trajectory, start indices uniform with replacement.

    Trajectories shorter than ``n_mem + n_rec + 1`` are skipped and counted.
    Trajectory identity is discarded. Any ``debug_params`` on the inputs are
    never read.
    """
    _check_steps(n_mem, n_rec)
    if samples_per_traj < 1:
        raise ContractError(f"samples_per_traj must be >= 1, got {samples_per_traj}")
    n_tot = n_mem + n_rec + 1
    xs, ys = [], []
    skipped = 0
    n = dt = None
    for traj in trajs:
        if traj.K < n_tot:
            skipped += 1
            continue
        if n is None:
            n, dt = traj.n, traj.dt
        elif traj.n != n or not np.isclose(traj.dt, dt, rtol=1e-12, atol=0):
            raise ContractError("all trajectories must share state dimension and dt")
        starts = rng.integers(0, traj.K - n_tot + 1, size=samples_per_traj)
        # (samples, n_tot) row indices
        rows = traj.states[starts[:, None] + np.arange(n_tot)]
        xs.append(rows[:, : n_mem + 1].reshape(samples_per_traj, -1))
        ys.append(rows[:, n_mem + 1 :].reshape(samples_per_traj, -1))
    if skipped:
        log.warning("skipped %d trajectories shorter than n_tot=%d", skipped, n_tot)
    if not xs:
        raise EmptyDatasetError(f"no trajectory has at least n_tot={n_tot} entries")
    x_in, y_out = np.concatenate(xs), np.concatenate(ys)
    meta = DatasetMeta(n=n, n_mem=n_mem, n_rec=n_rec, dt=float(dt), J=x_in.shape[0], source_seed=int(source_seed))
    return Dataset(meta, x_in, y_out), skipped


def save_dataset(ds, path):
    header = {"format": DATASET_MAGIC, **ds.meta.to_dict()}
    write_container(path, DATASET_MAGIC, header, [ds.x_in, ds.y_out])


def load_dataset(path):
    header, payload = read_container(path, DATASET_MAGIC)
    try:
        meta = DatasetMeta(
            n=int(header["n"]),
            n_mem=int(header["n_mem"]),
            n_rec=int(header["n_rec"]),
            dt=float(header["dt"]),
            J=int(header["J"]),
            source_seed=int(header.get("source_seed", 0)),
        )
    except KeyError as exc:
        raise IntegrityError(f"{path}: header is missing field {exc}") from None
    shapes = [(meta.J, meta.n * (meta.n_mem + 1)), (meta.J, meta.n * meta.n_rec)]
    try:
        x_in, y_out = split_payload(payload, shapes)
    except IntegrityError as exc:
        raise IntegrityError(f"{path}: J={meta.J} inconsistent with payload ({exc})") from None
    return Dataset(meta, x_in, y_out)
