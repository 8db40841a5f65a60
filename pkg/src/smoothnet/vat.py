"""Input-space smoothing: virtual adversarial perturbations and the VAT loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .net import GradientBundle, MlpNetwork, backward, forward

# Both divergences share the gradient in their second argument; they differ by
# the (constant) entropy of the clean prediction.
DIVERGENCES = {"kl": "kl_to_fixed_target", "cross_entropy": "cross_entropy"}

SVHN_EPSILON = 0.25
CIFAR10_EPSILON = 128.0


@dataclass(frozen=True)
class VatConfig:
    epsilon_x: float = 0.2
    xi: float = 1e-3
    divergence: str = "kl"

    def __post_init__(self):
        if not self.epsilon_x > 0:
            raise ValueError(f"epsilon_x must be positive, got {self.epsilon_x}")
        if not self.xi > 0:
            raise ValueError(f"xi must be positive, got {self.xi}")
        if self.divergence not in DIVERGENCES:
            raise ValueError(f"unknown divergence {self.divergence!r}; choose from {sorted(DIVERGENCES)}")

    @property
    def loss_kind(self) -> str:
        return DIVERGENCES[self.divergence]


def _row_normalize(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return v / safe, norms[:, 0]


def vat_perturbation(net: MlpNetwork, x, cfg: VatConfig, rng: np.random.Generator,
                     clean=None) -> np.ndarray:
    """One power-iteration estimate of the worst-case input perturbation.

    Returns a batch of perturbations, each of Euclidean norm ``cfg.epsilon_x``.
    A row whose probe gradient is exactly zero falls back to its random
    direction.
    """
    x = np.asarray(x, dtype=np.float64)
    if clean is None:
        clean = forward(net, x)
    d, _ = _row_normalize(rng.standard_normal(x.shape))
    g = backward(net, x + cfg.xi * d, cfg.loss_kind, target=clean).input_grads
    direction, norms = _row_normalize(g)
    flat = norms == 0
    if flat.any():
        direction[flat] = d[flat]
    return cfg.epsilon_x * direction


def vat_loss(net: MlpNetwork, x, cfg: VatConfig, rng: np.random.Generator) -> GradientBundle:
    """Divergence between clean and adversarially perturbed predictions.

    The clean prediction and the perturbation are both held constant, so the
    weight gradients only flow through the perturbed branch.
    """
    x = np.asarray(x, dtype=np.float64)
    clean = forward(net, x)
    delta = vat_perturbation(net, x, cfg, rng, clean=clean)
    return backward(net, x + delta, cfg.loss_kind, target=clean)


def fgsm_perturbation(net: MlpNetwork, x, labels, epsilon_x: float) -> np.ndarray:
    """L2-normalized input gradient of cross-entropy against the true labels."""
    if not epsilon_x > 0:
        raise ValueError(f"epsilon_x must be positive, got {epsilon_x}")
    g = backward(net, x, "cross_entropy", target=labels).input_grads
    direction, _ = _row_normalize(g)
    return epsilon_x * direction
