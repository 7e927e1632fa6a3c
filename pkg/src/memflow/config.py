"""Flat ``key = value`` experiment configs with ``include`` support.

Example::

    include = pendulum.cfg
    # desk-scale default
    num_trajectories = 2000

``include`` paths are resolved relative to the including file, then against
the bundled presets. Later keys override earlier ones, so an include placed
first acts as a base.
"""

import os
from dataclasses import dataclass, field, fields
from importlib import resources
from typing import Optional, Tuple

import numpy as np

from memflow.errors import ContractError

PRESET_PACKAGE = "memflow.presets"


def _floats(text):
    return tuple(float(v) for v in str(text).replace(" ", "").split(",") if v)


def _ints(text):
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _choice(text, allowed):
    t = str(text).strip().lower()
    if t not in allowed:
        raise ContractError(f"{text!r} is not one of {', '.join(allowed)}")
    return t


def parse_grid(text):
    """``start:stop:num`` (inclusive linspace) or a comma list."""
    text = str(text).strip()
    if ":" in text:
        start, stop, num = text.split(":")
        return tuple(float(v) for v in np.linspace(float(start), float(stop), int(num)))
    return _floats(text)


@dataclass
class ExperimentConfig:
    system: str = "Pendulum"
    # generation
    num_trajectories: int = 1000
    steps: int = 200
    dt: float = 0.02
    substeps: int = 4
    gen_seed: int = 0
    # dataset
    n_mem: int = 20
    n_rec: int = 1
    samples_per_traj: int = 20
    data_seed: int = 0
    # model
    widths: Tuple[int, ...] = (30, 30, 30)
    # training
    lr: float = 1e-3
    lr_schedule: str = "constant"
    lr_min: float = 0.0
    batch: int = 64
    epochs: int = 100
    train_seed: int = 0
    normalize: str = "off"
    whiten_ridge: float = 1e-6
    val_fraction: float = 0.0
    # evaluation
    t_eval: float = 20.0
    runs: int = 20
    eval_seed: int = 0
    x0: Optional[Tuple[float, ...]] = None
    da_grid: Tuple[float, ...] = ()
    horizon: float = 70.0
    window: Tuple[float, ...] = (50.0, 70.0)
    n_mem_list: Tuple[int, ...] = ()
    n_rec_list: Tuple[int, ...] = ()
    sources: list = field(default_factory=list)

    def validate(self):
        problems = []
        if self.dt <= 0:
            problems.append("dt must be positive")
        if self.steps < 1 or self.num_trajectories < 1 or self.substeps < 1:
            problems.append("steps, num_trajectories and substeps must be >= 1")
        if self.n_mem < 0 or self.n_rec < 1:
            problems.append("need n_mem >= 0 and n_rec >= 1")
        if self.n_mem + self.n_rec + 1 > self.steps:
            problems.append(
                f"trajectories of {self.steps} steps are shorter than n_mem + n_rec + 1 = "
                f"{self.n_mem + self.n_rec + 1}"
            )
        if self.t_eval <= self.n_mem * self.dt:
            problems.append("t_eval must lie beyond the warmup window n_mem * dt")
        if len(self.window) != 2 or self.window[0] >= self.window[1] or self.window[1] > self.horizon:
            problems.append("window must be lo,hi with lo < hi <= horizon")
        if problems:
            raise ContractError("inconsistent config: " + "; ".join(problems))
        return self


_CONVERTERS = {
    "widths": _ints,
    "n_mem_list": _ints,
    "n_rec_list": _ints,
    "x0": _floats,
    "window": _floats,
    "da_grid": parse_grid,
    "normalize": lambda v: _choice(v, ("off", "diag", "full")),
    "lr_schedule": lambda v: _choice(v, ("constant", "cosine")),
}


def _convert(name, value, ftype):
    if name in _CONVERTERS:
        return _CONVERTERS[name](value)
    if ftype in (int, "int"):
        return int(float(value)) if "e" in str(value).lower() else int(value)
    if ftype in (float, "float"):
        return float(value)
    return str(value).strip()


def _read_preset(name):
    try:
        return resources.files(PRESET_PACKAGE).joinpath(name).read_text()
    except (FileNotFoundError, ModuleNotFoundError):
        return None


def resolve_config_path(ref, base_dir=None):
    """Return ``(text, origin)`` for a path or bundled preset name."""
    candidates = [ref]
    if base_dir:
        candidates.insert(0, os.path.join(base_dir, ref))
    for c in candidates:
        if os.path.isfile(c):
            with open(c) as fh:
                return fh.read(), os.path.abspath(c)
    name = ref if ref.endswith(".cfg") else ref + ".cfg"
    text = _read_preset(os.path.basename(name))
    if text is None:
        raise ContractError(f"config {ref!r} not found as a file or bundled preset")
    return text, f"preset:{os.path.basename(name)}"


def parse_config_text(text, origin="<string>", base_dir=None, _seen=None):
    """Parse into a flat dict, expanding includes depth-first."""
    seen = set() if _seen is None else _seen
    if origin in seen:
        raise ContractError(f"include cycle through {origin}")
    seen = seen | {origin}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"{origin}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key == "include":
            sub_text, sub_origin = resolve_config_path(value, base_dir)
            sub_dir = os.path.dirname(sub_origin) if not sub_origin.startswith("preset:") else base_dir
            values.update(parse_config_text(sub_text, sub_origin, sub_dir, seen))
        else:
            values[key] = value
    return values


def load_raw(ref):
    """Return ``(values, origin)`` with includes expanded but values unparsed."""
    text, origin = resolve_config_path(ref)
    base = os.path.dirname(origin) if not origin.startswith("preset:") else None
    return parse_config_text(text, origin, base), origin


def load_config(ref, overrides=None):
    raw, origin = load_raw(ref)
    return config_from_dict(raw, overrides, sources=[origin])


def config_from_dict(raw, overrides=None, sources=None):
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    kwargs = {}
    for key, value in {**raw, **(overrides or {})}.items():
        if value is None:
            continue
        if key not in types or key == "sources":
            raise ContractError(f"unknown config key {key!r}")
        try:
            kwargs[key] = _convert(key, value, types[key])
        except (TypeError, ValueError) as exc:
            raise ContractError(f"bad value for {key}: {value!r} ({exc})") from None
    cfg = ExperimentConfig(**kwargs)
    cfg.sources = list(sources or [])
    return cfg


def list_presets():
    return sorted(
        p.name for p in resources.files(PRESET_PACKAGE).iterdir() if p.name.endswith(".cfg")
    )
