"""Reference ("true") dynamical systems and the RK4 integrator that samples them.

These systems only synthesize training data and validation references. Their
parameters are drawn here and never travel with a trajectory unless the
caller explicitly asks for ``debug`` output.
"""

import enum
import json
import os
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from memflow._binio import read_container, split_payload, write_container
from memflow.errors import ContractError, DomainError, FormatError, TrajectoryBlowUp

BLOWUP_THRESHOLD = 1e6
DEFAULT_SUBSTEPS = 4


class SystemId(str, enum.Enum):
    PENDULUM = "Pendulum"
    LINEAR20 = "Linear20"
    CSTR = "Cstr"
    CELL_CASCADE = "CellCascade"


@dataclass(frozen=True, eq=False)
class SystemSpec:
    """One benchmark system: vector field, domains and fixed constants.

    ``state_domain`` and ``param_domain`` are ``(dim, 2)`` arrays of
    per-axis ``[lo, hi]``. ``rhs(x, alpha, constants)`` must broadcast over
    leading batch axes.
    """

    system_id: str
    state_dim: int
    param_dim: int
    state_domain: np.ndarray
    param_domain: np.ndarray
    rhs: Callable
    constants: dict = field(default_factory=dict)
    param_names: tuple = ()
    # where the vector field stops being defined, quoted in DomainError messages
    singularity: str = ""

    def __post_init__(self):
        for name, box, dim in (
            ("state_domain", self.state_domain, self.state_dim),
            ("param_domain", self.param_domain, self.param_dim),
        ):
            box = np.asarray(box, dtype=float)
            if box.shape != (dim, 2):
                raise ContractError(f"{name} must have shape ({dim}, 2), got {box.shape}")
            object.__setattr__(self, name, box)


@dataclass(eq=False)
class Trajectory:
    """States sampled at ``t_k = k * dt``; row ``k`` is ``x(t_k)``."""

    dt: float
    states: np.ndarray
    system_id: Optional[str] = None
    debug_params: Optional[np.ndarray] = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2 or self.states.shape[0] < 1:
            raise ContractError(f"states must be a non-empty K x n matrix, got {self.states.shape}")
        if not self.dt > 0:
            raise ContractError(f"dt must be positive, got {self.dt}")
        if not np.all(np.isfinite(self.states)):
            raise ContractError("trajectory contains non-finite states")

    @property
    def K(self):
        return self.states.shape[0]

    @property
    def n(self):
        return self.states.shape[1]

    @property
    def times(self):
        return np.arange(self.K) * self.dt


# --- vector fields -----------------------------------------------------------


def _pendulum_rhs(x, alpha, c):
    damping, stiffness = alpha[..., 0], alpha[..., 1]
    return np.stack([x[..., 1], -damping * x[..., 1] - stiffness * np.sin(x[..., 0])], axis=-1)


def _linear20_rhs(x, alpha, c):
    p, q = x[..., :10], x[..., 10:]
    s21 = alpha.reshape(alpha.shape[:-1] + (10, 10))
    s11, s12, s22 = c["sigma11"], c["sigma12"], c["sigma22"]
    dp = p @ s11.T + q + q @ s12.T
    dq = -p - np.einsum("...ij,...j->...i", s21, p) - q @ s22.T
    return np.concatenate([dp, dq], axis=-1)


def _cstr_rhs(x, alpha, c):
    # exp(x2 / (1 + x2/gamma)) is singular at x2 = -gamma; callers check finiteness
    x1, x2, da = x[..., 0], x[..., 1], alpha[..., 0]
    denom = 1.0 + x2 / c["gamma"]
    arrhenius = np.where(denom == 0.0, np.nan, np.exp(x2 / denom))
    reaction = da * (1.0 - x1) * arrhenius
    dx1 = -x1 + reaction
    dx2 = -x2 + c["B"] * reaction - c["beta"] * (x2 - c["x2c"])
    return np.stack([dx1, dx2], axis=-1)


def _cell_rhs(x, alpha, c):
    e1, e2, e3 = x[..., 0], x[..., 1], x[..., 2]
    km = alpha[..., :6]
    vmax = alpha[..., 6:]

    def mm(v, s, k):
        # Michaelis-Menten rate v*s/(k+s)
        return v * s / (k + s)

    drive = c["I"] / (1.0 + c["G4"] * e3)
    de1 = drive * mm(vmax[..., 0], 1.0 - e1, km[..., 0]) - mm(vmax[..., 1], e1, km[..., 1])
    de2 = e1 * mm(vmax[..., 2], 1.0 - e2, km[..., 2]) - mm(vmax[..., 3], e2, km[..., 3])
    de3 = e2 * mm(vmax[..., 4], 1.0 - e3, km[..., 4]) - mm(vmax[..., 5], e3, km[..., 5])
    return np.stack([de1, de2, de3], axis=-1)


# Damping block of the 20-d linear system, listed in units of 1e-3.
_SIGMA22_MILLI = np.array(
    [
        [1500, 124, 814, -104, -179, -223, -731, -189, -400, 242],
        [124, 836, 679, 277, 197, -515, -52.1, -273, 101, 301],
        [814, 679, 1500, 651, 755, -605, -379, -546, -225, 223],
        [-104, 277, 651, 1960, 720, -782, -299, -775, -180, 506],
        [-179, 197, 755, 720, 2290, -973, 518, -19.1, -604, -369],
        [-223, -515, -605, -782, -973, 1290, -400, 412, 314, -420],
        [-731, -52.1, -379, -299, 518, -400, 1960, 68.3, 455, -316],
        [-189, -273, -546, -775, -19.1, 412, 68.3, 576, -53.6, -332],
        [-400, 101, -225, -180, -604, 314, 455, -53.6, 1030, 265],
        [242, 301, 223, 506, -369, -420, -316, -332, 265, 1090],
    ]
)

DA_CRITICAL = 0.078
CELL_KM_NOMINAL = (0.2,) * 6
CELL_VMAX_NOMINAL = (0.5, 0.15, 0.15, 0.15, 0.25, 0.05)


def _pm10(values):
    v = np.asarray(values, dtype=float)
    return np.stack([0.9 * v, 1.1 * v], axis=1)


def _build_catalog():
    cell_nominal = np.array(CELL_KM_NOMINAL + CELL_VMAX_NOMINAL)
    return {
        SystemId.PENDULUM: SystemSpec(
            system_id=SystemId.PENDULUM.value,
            state_dim=2,
            param_dim=2,
            state_domain=np.array([[-0.5, 0.5], [-1.6, 1.6]]),
            param_domain=np.array([[0.05, 0.15], [8.0, 10.0]]),
            rhs=_pendulum_rhs,
            param_names=("alpha", "beta"),
        ),
        SystemId.LINEAR20: SystemSpec(
            system_id=SystemId.LINEAR20.value,
            state_dim=20,
            param_dim=100,
            state_domain=np.tile([-2.0, 2.0], (20, 1)),
            param_domain=np.tile([-0.05, 0.05], (100, 1)),
            rhs=_linear20_rhs,
            constants={
                "sigma11": np.zeros((10, 10)),
                "sigma12": np.zeros((10, 10)),
                "sigma22": _SIGMA22_MILLI * 1e-3,
            },
            param_names=tuple(f"sigma21[{i},{j}]" for i in range(10) for j in range(10)),
        ),
        SystemId.CSTR: SystemSpec(
            system_id=SystemId.CSTR.value,
            state_dim=2,
            param_dim=1,
            state_domain=np.array([[0.1, 1.0], [0.5, 5.5]]),
            param_domain=_pm10([DA_CRITICAL]),
            rhs=_cstr_rhs,
            constants={"B": 22.0, "beta": 3.0, "gamma": 12.0, "x2c": 0.5},
            param_names=("Da",),
            singularity="Arrhenius term exp(x2 / (1 + x2/gamma)) at x2 = -gamma or overflow",
        ),
        SystemId.CELL_CASCADE: SystemSpec(
            system_id=SystemId.CELL_CASCADE.value,
            state_dim=3,
            param_dim=12,
            state_domain=np.tile([0.0, 1.0], (3, 1)),
            param_domain=_pm10(cell_nominal),
            rhs=_cell_rhs,
            constants={"I": 1.0, "G4": 0.2, "nominal": cell_nominal},
            param_names=tuple(f"Km{i}" for i in range(1, 7)) + tuple(f"Vmax{i}" for i in range(1, 7)),
        ),
    }


CATALOG = _build_catalog()


def get_system(name):
    """Look up a catalog system by id (case-insensitive, ``-``/``_`` ignored)."""
    if isinstance(name, SystemId):
        return CATALOG[name]
    key = str(name).replace("-", "").replace("_", "").lower()
    for sid, spec in CATALOG.items():
        if sid.value.lower() == key:
            return spec
    aliases = {"cell": SystemId.CELL_CASCADE, "linear": SystemId.LINEAR20}
    if key in aliases:
        return CATALOG[aliases[key]]
    known = ", ".join(s.value for s in SystemId)
    raise ContractError(f"unknown system {name!r}; expected one of {known}")


# --- evaluation and integration ---------------------------------------------


def _check_vec(v, dim, what):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (dim,):
        raise ContractError(f"{what} must have shape ({dim},), got {v.shape}")
    return v


def _rhs(spec, x, alpha):
    with np.errstate(all="ignore"):
        out = spec.rhs(x, alpha, spec.constants)
    if not np.all(np.isfinite(out)):
        where = f" ({spec.singularity})" if spec.singularity else ""
        raise DomainError(f"{spec.system_id}: vector field evaluated to a non-finite value{where}")
    return out


def eval_rhs(spec, x, alpha):
    """Evaluate ``f(x, alpha)`` for a single state and parameter vector."""
    x = _check_vec(x, spec.state_dim, "x")
    alpha = _check_vec(alpha, spec.param_dim, "alpha")
    return _rhs(spec, x, alpha)


def _rk4(spec, x, alpha, h):
    k1 = _rhs(spec, x, alpha)
    k2 = _rhs(spec, x + 0.5 * h * k1, alpha)
    k3 = _rhs(spec, x + 0.5 * h * k2, alpha)
    k4 = _rhs(spec, x + h * k3, alpha)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step(spec, x, alpha, h):
    """One classical RK4 step of the autonomous system ``x' = f(x, alpha)``."""
    if not h > 0:
        raise ContractError(f"step size must be positive, got {h}")
    x = _check_vec(x, spec.state_dim, "x")
    alpha = _check_vec(alpha, spec.param_dim, "alpha")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(alpha))):
        raise ContractError("rk4_step inputs must be finite")
    return _rk4(spec, x, alpha, h)


def _in_box(x, box):
    return bool(np.all((x >= box[:, 0]) & (x <= box[:, 1])))


def integrate(spec, x0, alpha, dt, K, substeps=DEFAULT_SUBSTEPS, debug=False):
    """Sample ``K`` states spaced ``dt`` apart, starting at ``x0``.

    Each recorded step takes ``substeps`` RK4 steps of size ``dt/substeps``.
    Raises :class:`TrajectoryBlowUp` if any component exceeds
    ``BLOWUP_THRESHOLD`` in magnitude or the vector field stops being finite.
    """
    x0 = _check_vec(x0, spec.state_dim, "x0")
    alpha = _check_vec(alpha, spec.param_dim, "alpha")
    if K < 1 or int(K) != K:
        raise ContractError(f"K must be a positive integer, got {K}")
    if substeps < 1 or int(substeps) != substeps:
        raise ContractError(f"substeps must be a positive integer, got {substeps}")
    if not dt > 0:
        raise ContractError(f"dt must be positive, got {dt}")
    if not _in_box(x0, spec.state_domain):
        warnings.warn(f"{spec.system_id}: x0 lies outside the state domain", stacklevel=2)

    h = dt / substeps
    states = np.empty((int(K), spec.state_dim))
    states[0] = x0
    x = x0
    for k in range(1, int(K)):
        try:
            for _ in range(int(substeps)):
                x = _rk4(spec, x, alpha, h)
        except DomainError as exc:
            raise TrajectoryBlowUp(f"{exc} (after row {k - 1})", k - 1, states[:k].copy()) from exc
        if not np.all(np.abs(x) <= BLOWUP_THRESHOLD):
            raise TrajectoryBlowUp(
                f"{spec.system_id}: state left |x| <= {BLOWUP_THRESHOLD:g} at row {k}",
                k - 1,
                states[:k].copy(),
            )
        states[k] = x
    return Trajectory(
        dt=float(dt),
        states=states,
        system_id=spec.system_id,
        debug_params=alpha.copy() if debug else None,
    )


def integrate_batch(spec, x0s, alphas, dt, K, substeps=DEFAULT_SUBSTEPS):
    """Vectorized :func:`integrate` over a batch; returns a ``(B, K, n)`` array.

    Rows of a batch member that blows up are filled with NaN from the first
    bad row onward; callers decide whether to drop or report them.
    """
    x = np.array(x0s, dtype=np.float64)
    alphas = np.asarray(alphas, dtype=np.float64)
    B = x.shape[0]
    if x.shape != (B, spec.state_dim) or alphas.shape != (B, spec.param_dim):
        raise ContractError("x0s/alphas must be (B, n) and (B, d)")
    h = dt / substeps
    out = np.full((B, int(K), spec.state_dim), np.nan)
    out[:, 0] = x
    idx = np.arange(B)  # surviving members
    xa, aa = x, alphas
    with np.errstate(all="ignore"):
        for k in range(1, int(K)):
            for _ in range(int(substeps)):
                k1 = spec.rhs(xa, aa, spec.constants)
                k2 = spec.rhs(xa + 0.5 * h * k1, aa, spec.constants)
                k3 = spec.rhs(xa + 0.5 * h * k2, aa, spec.constants)
                k4 = spec.rhs(xa + h * k3, aa, spec.constants)
                xa = xa + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            ok = np.all(np.isfinite(xa) & (np.abs(xa) <= BLOWUP_THRESHOLD), axis=1)
            if not ok.all():
                idx, xa, aa = idx[ok], xa[ok], aa[ok]
                if idx.size == 0:
                    break
            out[idx, k] = xa
    return out


# --- sampling ----------------------------------------------------------------


def sample_initial_condition(spec, rng):
    box = spec.state_domain
    return rng.uniform(box[:, 0], box[:, 1])


def sample_parameters(spec, rng):
    box = spec.param_domain
    return rng.uniform(box[:, 0], box[:, 1])


def trajectory_rng(seed, index):
    """Independent stream for trajectory ``index`` under master ``seed``."""
    return np.random.default_rng([int(seed), int(index)])


def generate_trajectories(spec, num, K, dt, substeps=DEFAULT_SUBSTEPS, seed=0, debug=False):
    """Draw ``num`` (x0, alpha) pairs and integrate them.

    The pair for trajectory ``i`` comes from ``trajectory_rng(seed, i)`` so the
    collection does not depend on batching. Blown-up trajectories are dropped.
    """
    x0s = np.empty((num, spec.state_dim))
    alphas = np.empty((num, spec.param_dim))
    for i in range(num):
        rng = trajectory_rng(seed, i)
        x0s[i] = sample_initial_condition(spec, rng)
        alphas[i] = sample_parameters(spec, rng)
    paths = integrate_batch(spec, x0s, alphas, dt, K, substeps)
    trajs = []
    for i in range(num):
        if np.all(np.isfinite(paths[i])):
            trajs.append(
                Trajectory(
                    dt=float(dt),
                    states=paths[i],
                    system_id=spec.system_id,
                    debug_params=alphas[i].copy() if debug else None,
                )
            )
    return trajs


# --- MFT1 trajectory files ---------------------------------------------------

TRAJ_MAGIC = "MFT1"
INDEX_NAME = "index.json"


def save_trajectory(traj, path):
    header = {
        "format": TRAJ_MAGIC,
        "system_id": traj.system_id,
        "n": traj.n,
        "dt": traj.dt,
        "K": traj.K,
        "debug": traj.debug_params is not None,
    }
    arrays = [traj.states]
    if traj.debug_params is not None:
        header["d"] = int(np.size(traj.debug_params))
        arrays.append(traj.debug_params)
    write_container(path, TRAJ_MAGIC, header, arrays)


def load_trajectory(path, allow_debug=True):
    header, payload = read_container(path, TRAJ_MAGIC)
    K, n = int(header["K"]), int(header["n"])
    d = int(header.get("d", 0)) if header.get("debug") else 0
    parts = split_payload(payload, [(K, n)] + ([(d,)] if d else []))
    if d and not allow_debug:
        raise FormatError(f"{path}: trajectory carries debug parameters; refusing to load for training")
    return Trajectory(
        dt=float(header["dt"]),
        states=parts[0],
        system_id=header.get("system_id"),
        debug_params=parts[1] if d else None,
    )


def save_collection(trajs, directory, meta=None):
    """Write one MFT1 file per trajectory plus an ``index.json`` manifest."""
    os.makedirs(directory, exist_ok=True)
    files = []
    for i, traj in enumerate(trajs):
        name = f"traj_{i:06d}.mft"
        save_trajectory(traj, os.path.join(directory, name))
        files.append(name)
    index = {"format": TRAJ_MAGIC, "count": len(files), "files": files}
    if meta:
        index["meta"] = meta
    tmp = os.path.join(directory, INDEX_NAME + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, os.path.join(directory, INDEX_NAME))


def load_collection(directory, allow_debug=True):
    index_path = os.path.join(directory, INDEX_NAME)
    try:
        with open(index_path) as fh:
            index = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"{directory}: no {INDEX_NAME}; not a trajectory collection") from None
    if index.get("format") != TRAJ_MAGIC:
        raise FormatError(f"{index_path}: expected format {TRAJ_MAGIC}")
    return [load_trajectory(os.path.join(directory, f), allow_debug) for f in index["files"]]
