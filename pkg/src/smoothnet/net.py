"""Dense ReLU network with a softmax head and an exact reverse pass.

All parameters live in one contiguous float64 vector.  The per-layer
``weights`` and ``biases`` are views into it, laid out layer-major with the
weight matrix (row-major, shape ``out x in``) before the bias of each layer.
Optimizers therefore update ``net.params`` in place with plain vector
arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

CHECKPOINT_MAGIC = "SMOOTHNET v1"
LOSS_KINDS = ("cross_entropy", "entropy", "kl_to_fixed_target")

# Guard used for log(target); predictions go through log-softmax instead.
LOG_FLOOR = 1e-30


def _check_dims(dims: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2:
        raise ValueError(f"need at least input and output width, got dims={dims}")
    if any(d < 1 for d in dims):
        raise ValueError(f"all layer widths must be >= 1, got dims={dims}")
    return dims


def count_params(dims: Sequence[int]) -> int:
    dims = _check_dims(dims)
    return sum(dims[i + 1] * dims[i] + dims[i + 1] for i in range(len(dims) - 1))


def _layer_views(dims, flat):
    weights, biases = [], []
    off = 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        n = fan_out * fan_in
        weights.append(flat[off:off + n].reshape(fan_out, fan_in))
        off += n
        biases.append(flat[off:off + fan_out])
        off += fan_out
    return weights, biases


class MlpNetwork:
    """Multilayer perceptron ``dims[0] -> ... -> dims[-1]`` with ReLU hidden layers."""

    def __init__(self, dims: Sequence[int], params: Optional[np.ndarray] = None):
        self.dims = _check_dims(dims)
        n = count_params(self.dims)
        if params is None:
            params = np.zeros(n)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (n,):
            raise ValueError(
                f"parameter vector has length {params.size}, dims {list(self.dims)} need {n}")
        self.params = params
        self.weights, self.biases = _layer_views(self.dims, self.params)

    @property
    def param_count(self) -> int:
        return self.params.size

    @property
    def n_classes(self) -> int:
        return self.dims[-1]

    def copy(self) -> "MlpNetwork":
        return MlpNetwork(self.dims, self.params.copy())

    def with_params(self, params: np.ndarray) -> "MlpNetwork":
        return MlpNetwork(self.dims, params)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MlpNetwork):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.params, other.params)

    def __repr__(self) -> str:
        return f"MlpNetwork(dims={list(self.dims)}, param_count={self.param_count})"


@dataclass
class GradientBundle:
    loss_value: float
    weight_grads: np.ndarray  # flat, canonical layout
    input_grads: np.ndarray
    dims: tuple

    @property
    def weights(self) -> list:
        return _layer_views(self.dims, self.weight_grads)[0]

    @property
    def biases(self) -> list:
        return _layer_views(self.dims, self.weight_grads)[1]


def init_network(dims: Sequence[int], seed: int) -> MlpNetwork:
    """He-scaled Gaussian weights (std ``sqrt(2 / fan_in)``), zero biases."""
    net = MlpNetwork(dims)
    rng = np.random.default_rng(seed)
    for w in net.weights:
        w[...] = rng.standard_normal(w.shape) * np.sqrt(2.0 / w.shape[1])
    return net


def flatten(net: MlpNetwork) -> np.ndarray:
    return net.params.copy()


def unflatten(flat: np.ndarray, dims: Sequence[int]) -> MlpNetwork:
    flat = np.asarray(flat, dtype=np.float64)
    n = count_params(dims)
    if flat.ndim != 1 or flat.size != n:
        raise ValueError(f"flat vector of length {flat.size} does not match dims {list(dims)} ({n})")
    return MlpNetwork(dims, flat.copy())


def _as_batch(net: MlpNetwork, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.dims[0]:
        raise ValueError(f"input batch of shape {x.shape} does not match input width {net.dims[0]}")
    return x


def _forward_cache(net, x):
    acts = [x]
    pre = []
    a = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w.T + b
        pre.append(z)
        if i < last:
            a = np.maximum(z, 0.0)
            acts.append(a)
    return acts, pre


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def logits(net: MlpNetwork, x) -> np.ndarray:
    return _forward_cache(net, _as_batch(net, x))[1][-1]


def forward(net: MlpNetwork, x) -> np.ndarray:
    """Class probabilities, one row per input row."""
    return np.exp(log_softmax(logits(net, x)))


def backward(net: MlpNetwork, x, loss_kind: str = "cross_entropy",
             target=None) -> GradientBundle:
    """Mean batch loss with gradients for every parameter and every input entry.

    ``cross_entropy`` and ``kl_to_fixed_target`` take a distribution batch as
    ``target`` (held constant); ``entropy`` takes none.  For the KL loss the
    value is ``KL(target || f(x))``.
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}; expected one of {LOSS_KINDS}")
    x = _as_batch(net, x)
    n = x.shape[0]
    needs_target = loss_kind != "entropy"
    if needs_target and target is None:
        raise ValueError(f"loss kind {loss_kind!r} requires a target distribution")
    if not needs_target and target is not None:
        raise ValueError("entropy loss takes no target")
    if needs_target:
        target = np.asarray(target, dtype=np.float64)
        if target.ndim == 1:
            target = target[None, :]
        if target.shape != (n, net.n_classes):
            raise ValueError(f"target of shape {target.shape} does not match ({n}, {net.n_classes})")

    acts, pre = _forward_cache(net, x)
    logp = log_softmax(pre[-1])
    p = np.exp(logp)

    if loss_kind == "cross_entropy":
        loss = -np.sum(target * logp) / n
        dz = (p * target.sum(axis=1, keepdims=True) - target) / n
    elif loss_kind == "kl_to_fixed_target":
        logt = np.log(np.maximum(target, LOG_FLOOR))
        loss = np.sum(np.where(target > 0, target * (logt - logp), 0.0)) / n
        dz = (p * target.sum(axis=1, keepdims=True) - target) / n
    else:
        h = -np.sum(p * logp, axis=1, keepdims=True)
        loss = float(h.sum()) / n
        dz = -p * (logp + h) / n

    grads = np.empty(net.param_count)
    gw, gb = _layer_views(net.dims, grads)
    for i in range(len(net.weights) - 1, -1, -1):
        np.matmul(dz.T, acts[i], out=gw[i])
        gb[i][...] = dz.sum(axis=0)
        da = dz @ net.weights[i]
        if i > 0:
            dz = da * (pre[i - 1] > 0)
    return GradientBundle(float(loss), grads, da, net.dims)


def save_checkpoint(net: MlpNetwork, path) -> None:
    lines = [CHECKPOINT_MAGIC, ",".join(str(d) for d in net.dims)]
    lines.extend(format(float(v), ".17g") for v in net.params)
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> MlpNetwork:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint")
    if len(lines) < 2:
        raise ValueError(f"{path}: missing dims line")
    try:
        dims = [int(tok) for tok in lines[1].split(",")]
    except ValueError:
        raise ValueError(f"{path}: malformed dims line {lines[1]!r}") from None
    values = [ln for ln in lines[2:] if ln.strip()]
    n = count_params(dims)
    if len(values) != n:
        raise ValueError(f"{path}: {len(values)} parameter lines, dims {dims} need {n}")
    return MlpNetwork(dims, np.array([float(v) for v in values]))
