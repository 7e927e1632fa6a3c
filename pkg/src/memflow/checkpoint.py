"""MFC1 checkpoint files: model config, parameters, optional Adam state."""

from dataclasses import dataclass, field
from typing import Optional

from memflow._binio import read_container, split_payload, write_container
from memflow.errors import IntegrityError
from memflow.network import AdamState, ModelConfig, NetworkParams

CHECKPOINT_MAGIC = "MFC1"


@dataclass
class Checkpoint:
    config: ModelConfig
    theta: NetworkParams
    opt_state: Optional[AdamState] = None
    info: dict = field(default_factory=dict)


_FIXED_MAPS = ("in_shift", "in_scale", "in_matrix", "out_scale")


def _map_shape(name, config):
    D = config.input_dim
    return {"in_shift": (D,), "in_scale": (D,), "in_matrix": (D, D), "out_scale": (config.n,)}[name]


def save_checkpoint(path, config, theta, opt_state=None, info=None):
    tensors = theta.tensors()
    present = [name for name in _FIXED_MAPS if getattr(theta, name) is not None]
    header = {
        "format": CHECKPOINT_MAGIC,
        "config": config.to_dict(),
        "layer_shapes": [list(t.shape) for t in tensors],
        "fixed_maps": present,
        "has_optimizer_state": opt_state is not None,
        "optimizer_step": opt_state.step if opt_state is not None else 0,
        "info": info or {},
    }
    arrays = list(tensors) + [getattr(theta, name) for name in present]
    if opt_state is not None:
        arrays += list(opt_state.m) + list(opt_state.v)
    write_container(path, CHECKPOINT_MAGIC, header, arrays)


def load_checkpoint(path):
    header, payload = read_container(path, CHECKPOINT_MAGIC)
    try:
        cfg = header["config"]
        config = ModelConfig(
            n=int(cfg["n"]),
            n_mem=int(cfg["n_mem"]),
            n_rec=int(cfg["n_rec"]),
            dt=float(cfg["dt"]),
            hidden_widths=tuple(cfg["hidden_widths"]),
            activation=cfg.get("activation", "relu"),
        )
        shapes = [tuple(s) for s in header["layer_shapes"]]
        present = list(header.get("fixed_maps", []))
    except KeyError as exc:
        raise IntegrityError(f"{path}: header is missing field {exc}") from None
    unknown = set(present) - set(_FIXED_MAPS)
    if unknown:
        raise IntegrityError(f"{path}: unknown fixed maps {sorted(unknown)}")
    map_shapes = [_map_shape(name, config) for name in present]
    opt_shapes = shapes * 2 if header.get("has_optimizer_state") else []
    parts = split_payload(payload, shapes + map_shapes + opt_shapes)
    k = len(shapes)
    maps = dict(zip(present, parts[k : k + len(present)]))
    theta = NetworkParams.from_tensors(parts[:k])
    theta = NetworkParams(theta.weights, theta.biases, **maps)
    expected = config.layer_dims
    got = [theta.input_dim, *theta.hidden_widths, theta.n]
    if got != expected:
        raise IntegrityError(f"{path}: layer shapes {got} disagree with config {expected}")
    opt_state = None
    if opt_shapes:
        rest = parts[k + len(present) :]
        opt_state = AdamState(int(header.get("optimizer_step", 0)), rest[:k], rest[k:])
    return Checkpoint(config, theta, opt_state, header.get("info", {}))


def read_header(path):
    return read_container(path, CHECKPOINT_MAGIC)[0]
