"""Adversarial block coordinate descent and plain SGD.

Each ABCD inner iteration splits the parameters at random into an ascent
block and a descent block.  The ascent block takes a small gradient *ascent*
step; the gradient is then recomputed at the intermediate point on the same
batch and the complementary block takes an ordinary descent step.

The optimizers work on flat parameter vectors through a ``loss_grad``
callable returning ``(loss, gradient)``, so they apply equally to networks
and to toy objectives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .net import GradientBundle, MlpNetwork, backward

ETA_ASCENT = 1e-5

LossGrad = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


@dataclass(frozen=True)
class AbcdConfig:
    eta_ascent: float = ETA_ASCENT
    eta_descent: float = 0.1
    inner_iters: int = 1
    ascent_fraction: float = 0.5
    exact_split: bool = False
    include_biases: bool = True

    def __post_init__(self):
        if self.eta_ascent < 0 or self.eta_descent < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.inner_iters < 1:
            raise ValueError(f"inner_iters must be >= 1, got {self.inner_iters}")
        if not 0.0 <= self.ascent_fraction <= 1.0:
            raise ValueError(f"ascent_fraction must lie in [0, 1], got {self.ascent_fraction}")


@dataclass(frozen=True)
class Mask:
    """Block assignment with ``gamma`` in {0, -1}; -1 marks an ascent coordinate."""

    gamma: np.ndarray

    @property
    def ascent(self) -> np.ndarray:
        return self.gamma

    @property
    def descent(self) -> np.ndarray:
        return self.gamma + 1.0


def sample_mask(param_count: int, ascent_fraction: float, rng: np.random.Generator,
                exact: bool = False) -> Mask:
    """Independent Bernoulli(``ascent_fraction``) ascent membership per coordinate.

    With ``exact=True`` exactly ``round(ascent_fraction * param_count)``
    coordinates are chosen instead.
    """
    if not 0.0 <= ascent_fraction <= 1.0:
        raise ValueError(f"ascent_fraction must lie in [0, 1], got {ascent_fraction}")
    gamma = np.zeros(param_count)
    if exact:
        k = int(round(ascent_fraction * param_count))
        gamma[rng.permutation(param_count)[:k]] = -1.0
    else:
        gamma[rng.random(param_count) < ascent_fraction] = -1.0
    return Mask(gamma)


def abcd_update(params: np.ndarray, loss_grad: LossGrad, cfg: AbcdConfig,
                rng: np.random.Generator, eligible: Optional[np.ndarray] = None):
    """Run ``cfg.inner_iters`` ABCD iterations from ``params``.

    ``eligible`` optionally restricts which coordinates may join the ascent
    block.  Returns the new parameter vector and the loss at the starting
    point.
    """
    w = np.array(params, dtype=np.float64)
    first_loss = None
    for _ in range(cfg.inner_iters):
        mask = sample_mask(w.size, cfg.ascent_fraction, rng, exact=cfg.exact_split)
        gamma = mask.gamma if eligible is None else mask.gamma * eligible
        if gamma.any():
            loss, g = loss_grad(w)
            if first_loss is None:
                first_loss = loss
            step = cfg.eta_ascent * gamma
            step *= g
            w = np.subtract(w, step, out=step)
        loss, g = loss_grad(w)
        if first_loss is None:
            first_loss = loss
        step = gamma + 1.0
        step *= cfg.eta_descent
        step *= g
        w = np.subtract(w, step, out=step)
    return w, first_loss


def sgd_update(params: np.ndarray, loss_grad: LossGrad, eta: float):
    loss, g = loss_grad(params)
    step = eta * g
    return np.subtract(params, step, out=step), loss


class Objective:
    """Mean batch loss of a network as a function of its parameters.

    ``kind`` is one of the :func:`~smoothnet.net.backward` loss kinds; the
    loss and its gradients are multiplied by ``scale``.
    """

    def __init__(self, kind: str, x, target=None, scale: float = 1.0):
        self.kind = kind
        self.x = np.asarray(x, dtype=np.float64)
        self.target = target
        self.scale = scale

    def __call__(self, net: MlpNetwork) -> GradientBundle:
        gb = backward(net, self.x, self.kind, self.target)
        if self.scale != 1.0:
            # backward hands back fresh arrays, so scaling in place is safe
            gb.loss_value *= self.scale
            gb.weight_grads *= self.scale
            gb.input_grads *= self.scale
        return gb


def as_loss_grad(objective: Callable[[MlpNetwork], GradientBundle], dims) -> LossGrad:
    def loss_grad(params):
        gb = objective(MlpNetwork(dims, params))
        return gb.loss_value, gb.weight_grads
    return loss_grad


def weight_mask(dims) -> np.ndarray:
    """1 on weight-matrix coordinates, 0 on biases."""
    eligible = MlpNetwork(dims, np.ones(MlpNetwork(dims).param_count))
    for b in eligible.biases:
        b[...] = 0.0
    return eligible.params


def abcd_step(net: MlpNetwork, objective, cfg: AbcdConfig,
              rng: np.random.Generator) -> MlpNetwork:
    eligible = None if cfg.include_biases else weight_mask(net.dims)
    w, _ = abcd_update(net.params, as_loss_grad(objective, net.dims), cfg, rng, eligible)
    return MlpNetwork(net.dims, w)


def sgd_step(net: MlpNetwork, objective, eta: float) -> MlpNetwork:
    w, _ = sgd_update(net.params, as_loss_grad(objective, net.dims), eta)
    return MlpNetwork(net.dims, w)
