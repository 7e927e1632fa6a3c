"""Memory-input residual network, its weight-shared unroll, and exact gradients.

Histories are passed oldest -> newest, shape ``(n_mem + 1, n)`` or batched
``(B, n_mem + 1, n)``. The network input is assembled newest-first, so the
first ``n`` entries of the input vector are the current state; the residual
connection adds exactly that block back onto the network output.

Everything is float64 numpy; there is no hidden global state.
"""

from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from memflow.errors import ContractError

ACTIVATIONS = ("relu",)


@dataclass(frozen=True)
class ModelConfig:
    n: int
    n_mem: int
    n_rec: int = 1
    dt: float = 1.0
    hidden_widths: tuple = (30, 30, 30)
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.n < 1:
            raise ContractError(f"state dimension must be positive, got {self.n}")
        if self.n_mem < 0:
            raise ContractError(f"n_mem must be >= 0, got {self.n_mem}")
        if self.n_rec < 1:
            raise ContractError(f"n_rec must be >= 1, got {self.n_rec}")
        if any(w < 1 for w in self.hidden_widths):
            raise ContractError(f"hidden widths must be positive, got {self.hidden_widths}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unsupported activation {self.activation!r}")

    @property
    def input_dim(self):
        return self.n * (self.n_mem + 1)

    @property
    def memory_length(self):
        return self.n_mem * self.dt

    @property
    def layer_dims(self):
        return [self.input_dim, *self.hidden_widths, self.n]

    def to_dict(self):
        return {
            "n": self.n,
            "n_mem": self.n_mem,
            "n_rec": self.n_rec,
            "dt": self.dt,
            "hidden_widths": list(self.hidden_widths),
            "activation": self.activation,
        }


@dataclass
class NetworkParams:
    """Trainable weights ``W[l]`` (out x in) and biases ``b[l]``.

    The optional fixed affine maps around the network are not trained and
    stay ``None`` when normalization is off: the input is shifted by
    ``in_shift`` (length D) and then either divided by ``in_scale`` (length D)
    or multiplied by the whitening matrix ``in_matrix`` (D x D); the output is
    multiplied by ``out_scale`` (length n).
    """

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    in_shift: Optional[np.ndarray] = None
    in_scale: Optional[np.ndarray] = None
    in_matrix: Optional[np.ndarray] = None
    out_scale: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ContractError("need one bias per weight matrix and at least one layer")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ContractError(f"layer {l}: weight {W.shape} and bias {b.shape} do not match")
            if l and W.shape[1] != self.weights[l - 1].shape[0]:
                raise ContractError(f"layer {l}: input width {W.shape[1]} does not chain")
        if self.input_dim % self.n:
            raise ContractError(f"input width {self.input_dim} is not a multiple of n={self.n}")

    @property
    def n(self):
        return self.weights[-1].shape[0]

    @property
    def input_dim(self):
        return self.weights[0].shape[1]

    @property
    def n_mem(self):
        return self.input_dim // self.n - 1

    @property
    def hidden_widths(self):
        return tuple(W.shape[0] for W in self.weights[:-1])

    @property
    def normalization(self):
        if self.in_matrix is not None:
            return "full"
        if self.in_scale is not None:
            return "diag"
        return "off"

    def fixed_maps(self):
        return dict(
            in_shift=self.in_shift, in_scale=self.in_scale, in_matrix=self.in_matrix, out_scale=self.out_scale
        )

    def tensors(self):
        """Trainable tensors in declaration order W1, b1, W2, b2, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    @classmethod
    def from_tensors(cls, tensors, like=None):
        kw = like.fixed_maps() if like is not None else {}
        return cls(list(tensors[0::2]), list(tensors[1::2]), **kw)

    def flat(self):
        return np.concatenate([t.ravel() for t in self.tensors()])

    def with_flat(self, vec):
        size = sum(t.size for t in self.tensors())
        if len(vec) != size:
            raise ContractError(f"flat vector has {len(vec)} entries, expected {size}")
        out, offset = [], 0
        for t in self.tensors():
            out.append(np.asarray(vec[offset : offset + t.size], dtype=np.float64).reshape(t.shape))
            offset += t.size
        return NetworkParams.from_tensors(out, like=self)

    def copy(self):
        return NetworkParams.from_tensors([t.copy() for t in self.tensors()], like=self)

    def all_finite(self):
        return all(np.all(np.isfinite(t)) for t in self.tensors())


def init_params(config, rng, scheme="he"):
    """He-normal weights (variance ``2 / fan_in``) and zero biases.

    ``scheme="zeros"`` gives the all-zero network, i.e. the identity flow map.
    """
    dims = config.layer_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        if scheme == "he":
            W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        elif scheme == "zeros":
            W = np.zeros((fan_out, fan_in))
        else:
            raise ContractError(f"unknown init scheme {scheme!r}")
        weights.append(W)
        biases.append(np.zeros(fan_out))
    return NetworkParams(weights, biases)


def zero_params(config):
    return init_params(config, None, scheme="zeros")


# --- feedforward map ---------------------------------------------------------


def _ffn_forward(theta, X):
    """Batched forward pass on ``X`` of shape ``(B, D)``; returns (out, cache)."""
    a = X
    if theta.in_shift is not None:
        a = a - theta.in_shift
    if theta.in_matrix is not None:
        a = a @ theta.in_matrix.T
    elif theta.in_scale is not None:
        a = a / theta.in_scale
    acts, masks = [a], []
    for W, b in zip(theta.weights[:-1], theta.biases[:-1]):
        pre = a @ W.T + b
        mask = pre > 0.0
        a = pre * mask
        acts.append(a)
        masks.append(mask)
    out = a @ theta.weights[-1].T + theta.biases[-1]
    if theta.out_scale is not None:
        out = out * theta.out_scale
    return out, (acts, masks)


def _ffn_backward(theta, cache, dout, grads):
    """Accumulate parameter gradients into ``grads`` (list of arrays, W/b
    interleaved) and return the gradient with respect to the raw input."""
    acts, masks = cache
    if theta.out_scale is not None:
        dout = dout * theta.out_scale
    L = len(theta.weights)
    delta = dout
    for l in range(L - 1, -1, -1):
        grads[2 * l] += delta.T @ acts[l]
        grads[2 * l + 1] += delta.sum(axis=0)
        delta = delta @ theta.weights[l]
        if l:
            delta = delta * masks[l - 1]
    if theta.in_matrix is not None:
        delta = delta @ theta.in_matrix
    elif theta.in_scale is not None:
        delta = delta / theta.in_scale
    return delta


def forward_ffn(theta, X):
    """The plain network map ``N(X; theta)``; ``X`` is ``(D,)`` or ``(B, D)``."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    if X.shape[-1] != theta.input_dim or X.ndim not in (1, 2):
        raise ContractError(f"input must have trailing width {theta.input_dim}, got {X.shape}")
    out, _ = _ffn_forward(theta, X[None] if single else X)
    return out[0] if single else out


def assemble_input(x_hist):
    """Stack an oldest->newest history into the newest-first input vector."""
    x_hist = np.asarray(x_hist, dtype=np.float64)
    B = x_hist.shape[:-2]
    return x_hist[..., ::-1, :].reshape(B + (-1,))


def _check_hist(theta, x_hist):
    x_hist = np.asarray(x_hist, dtype=np.float64)
    if x_hist.ndim not in (2, 3) or x_hist.shape[-2:] != (theta.n_mem + 1, theta.n):
        raise ContractError(
            f"history must be ({theta.n_mem + 1}, {theta.n}) oldest->newest "
            f"(optionally batched), got {x_hist.shape}"
        )
    return x_hist


def forward_block(theta, x_hist):
    """One residual step: newest state + ``N`` applied to the history."""
    x_hist = _check_hist(theta, x_hist)
    return x_hist[..., -1, :] + forward_ffn(theta, assemble_input(x_hist))


def _unroll(theta, hist, n_rec, keep_cache):
    """Run the weight-shared unroll on a batched history ``(B, n_mem+1, n)``.

    Returns the state buffer ``(B, n_mem + n_rec + 1, n)`` holding inputs
    followed by outputs, and per-step network caches when ``keep_cache``.
    """
    B, w, n = hist.shape
    S = np.empty((B, w + n_rec, n))
    S[:, :w] = hist
    caches = []
    for k in range(n_rec):
        X = S[:, k : k + w][:, ::-1].reshape(B, w * n)
        out, cache = _ffn_forward(theta, X)
        S[:, k + w] = S[:, k + w - 1] + out
        if keep_cache:
            caches.append(cache)
    return S, caches


def recurrent_forward(theta, x_hist, n_rec):
    """Apply :func:`forward_block` ``n_rec`` times with a sliding history.

    Returns ``(n_rec, n)`` (or ``(B, n_rec, n)`` for batched input).
    """
    if n_rec < 1:
        raise ContractError(f"n_rec must be >= 1, got {n_rec}")
    x_hist = _check_hist(theta, x_hist)
    single = x_hist.ndim == 2
    S, _ = _unroll(theta, x_hist[None] if single else x_hist, n_rec, keep_cache=False)
    out = S[:, theta.n_mem + 1 :]
    return out[0] if single else out


# --- loss and gradient ---------------------------------------------------------


def _split_batch(theta, x_in, y_out):
    x_in = np.atleast_2d(np.asarray(x_in, dtype=np.float64))
    y_out = np.atleast_2d(np.asarray(y_out, dtype=np.float64))
    n, w = theta.n, theta.n_mem + 1
    if x_in.shape[0] == 0 or x_in.shape[0] != y_out.shape[0]:
        raise ContractError(f"batch sizes disagree or are empty: {x_in.shape[0]} vs {y_out.shape[0]}")
    if x_in.shape[1] != n * w:
        raise ContractError(f"x_in width {x_in.shape[1]} does not match n*(n_mem+1)={n * w}")
    if y_out.shape[1] % n or y_out.shape[1] == 0:
        raise ContractError(f"y_out width {y_out.shape[1]} is not a positive multiple of n={n}")
    B = x_in.shape[0]
    return x_in.reshape(B, w, n), y_out.reshape(B, -1, n)


def loss(theta, x_in, y_out):
    """Mean over samples of the squared Euclidean norm of the full unrolled residual.

    ``x_in`` rows are oldest->newest concatenated histories; ``y_out`` rows are
    the ``n_rec`` target states. No averaging over components or steps.
    """
    hist, Y = _split_batch(theta, x_in, y_out)
    S, _ = _unroll(theta, hist, Y.shape[1], keep_cache=False)
    r = S[:, theta.n_mem + 1 :] - Y
    return float(np.sum(r * r) / hist.shape[0])


def loss_and_grad(theta, x_in, y_out):
    """Loss and its exact gradient via backpropagation through the unroll.

    Each produced state feeds later steps both through the residual path and
    through the network input; both dependencies are differentiated.
    """
    hist, Y = _split_batch(theta, x_in, y_out)
    B, n_rec, w = hist.shape[0], Y.shape[1], theta.n_mem + 1
    S, caches = _unroll(theta, hist, n_rec, keep_cache=True)
    r = S[:, w:] - Y
    value = float(np.sum(r * r) / B)

    G = np.zeros_like(S)
    G[:, w:] = (2.0 / B) * r
    grads = [np.zeros_like(t) for t in theta.tensors()]
    for k in range(n_rec - 1, -1, -1):
        g = G[:, k + w]
        G[:, k + w - 1] += g
        dX = _ffn_backward(theta, caches[k], g, grads)
        G[:, k : k + w] += dX.reshape(B, w, -1)[:, ::-1]
    return value, NetworkParams.from_tensors(grads, like=theta)


def grad_loss(theta, x_in, y_out):
    return loss_and_grad(theta, x_in, y_out)[1]


# --- Adam ----------------------------------------------------------------------


@dataclass
class AdamState:
    step: int
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(theta):
    zeros = [np.zeros_like(t) for t in theta.tensors()]
    return AdamState(step=0, m=zeros, v=[z.copy() for z in zeros])


def adam_update(theta, grad, state, hyper=AdamHyper()):
    """One bias-corrected Adam step. Inputs are not modified."""
    t = state.step + 1
    bc1 = 1.0 - hyper.beta1**t
    bc2 = 1.0 - hyper.beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(theta.tensors(), grad.tensors(), state.m, state.v):
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * (g * g)
        new_p.append(p - hyper.lr * (m / bc1) / (np.sqrt(v / bc2) + hyper.eps))
        new_m.append(m)
        new_v.append(v)
    return NetworkParams.from_tensors(new_p, like=theta), AdamState(t, new_m, new_v)


def with_normalization(theta, in_shift=None, in_scale=None, in_matrix=None, out_scale=None):
    def arr(v):
        return None if v is None else np.asarray(v, dtype=np.float64)

    D = theta.input_dim
    out = replace(theta, in_shift=arr(in_shift), in_scale=arr(in_scale), in_matrix=arr(in_matrix), out_scale=arr(out_scale))
    for name, shape in (("in_shift", (D,)), ("in_scale", (D,)), ("in_matrix", (D, D)), ("out_scale", (theta.n,))):
        v = getattr(out, name)
        if v is not None and v.shape != shape:
            raise ContractError(f"{name} must have shape {shape}, got {v.shape}")
    return out
