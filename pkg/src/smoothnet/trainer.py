"""Semi-supervised training loop: ABCD on cross-entropy and entropy, SGD on VAT."""

from __future__ import annotations

import csv
import logging
import math
import time
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .abcd import AbcdConfig, Objective, abcd_update, as_loss_grad, sgd_update, weight_mask
from .datasets import PointSet, SslDataset
from .losses import cross_entropy
from .net import MlpNetwork, forward, init_network
from .vat import VatConfig, vat_loss

log = logging.getLogger(__name__)

TERMS = ("ce", "entropy", "vat")
LR_SHAPES = ("constant", "linear", "step")

# method name -> (optimizer uses ABCD, enabled terms)
METHODS = {
    "sgd+ce": (False, ("ce",)),
    "abcd+ce": (True, ("ce",)),
    "entmin": (False, ("ce", "entropy")),
    "vat": (False, ("ce", "vat")),
    "vat+entmin": (False, ("ce", "entropy", "vat")),
    "abcd+entmin": (True, ("ce", "entropy")),
    "abcd+entmin+vat": (True, ("ce", "entropy", "vat")),
}


def derive_rng(seed: int, consumer: str) -> np.random.Generator:
    """Independent generator for one consumer of randomness under a root seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(consumer.encode())]))


def derive_seed(seed: int, consumer: str) -> int:
    return int(derive_rng(seed, consumer).integers(2**31 - 1))


@dataclass(frozen=True)
class TrainerConfig:
    outer_iters: int = 1000
    hidden: tuple = (100, 100, 100, 100)
    labeled_batch: int = 32
    unlabeled_batch: int = 128
    abcd: AbcdConfig = field(default_factory=AbcdConfig)
    vat: VatConfig = field(default_factory=VatConfig)
    vat_weight: float = 1.0
    entropy_weight: float = 1.0
    eta0: float = 0.1
    lr_shape: str = "linear"
    abcd_off_fraction: float = 0.05
    use_abcd: bool = True
    terms: tuple = TERMS
    momentum: float = 0.0
    eval_every: int = 100
    target_loss: Optional[float] = None  # stop once full labeled CE reaches this
    seed: int = 0

    def __post_init__(self):
        if self.outer_iters < 1:
            raise ValueError(f"outer_iters must be >= 1, got {self.outer_iters}")
        if not 0.0 <= self.abcd_off_fraction < 1.0:
            raise ValueError(f"abcd_off_fraction must lie in [0, 1), got {self.abcd_off_fraction}")
        if self.vat_weight < 0 or self.entropy_weight < 0:
            raise ValueError("regularizer weights must be nonnegative")
        if self.lr_shape not in LR_SHAPES:
            raise ValueError(f"unknown lr_shape {self.lr_shape!r}; choose from {LR_SHAPES}")
        unknown = set(self.terms) - set(TERMS)
        if unknown:
            raise ValueError(f"unknown terms {sorted(unknown)}; choose from {TERMS}")
        if self.target_loss is not None and not self.target_loss > 0:
            raise ValueError(f"target_loss must be positive, got {self.target_loss}")
        if self.labeled_batch < 1 or self.unlabeled_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")

    @classmethod
    def for_method(cls, method: str, **kw) -> "TrainerConfig":
        try:
            use_abcd, terms = METHODS[method]
        except KeyError:
            raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}") from None
        return cls(use_abcd=use_abcd, terms=terms, **kw)

    @property
    def abcd_cutoff(self) -> int:
        """Last iteration that still uses ABCD; later ones fall back to SGD."""
        return self.outer_iters - int(round(self.abcd_off_fraction * self.outer_iters))


@dataclass
class TrainReport:
    iters: list = field(default_factory=list)
    ce_loss: list = field(default_factory=list)
    ent_loss: list = field(default_factory=list)
    vat_loss: list = field(default_factory=list)
    eta_d: list = field(default_factory=list)
    test_error: dict = field(default_factory=dict)
    best_iter: Optional[int] = None
    best_net: Optional[MlpNetwork] = None
    stopped_at: Optional[int] = None  # iteration where target_loss was reached
    wall_time: float = 0.0

    def to_csv(self, path) -> None:
        def cell(v):
            return "" if v is None else format(v, ".17g")

        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "ce_loss", "ent_loss", "vat_loss", "eta_d", "test_error"])
            for i, t in enumerate(self.iters):
                w.writerow([t, cell(self.ce_loss[i]), cell(self.ent_loss[i]), cell(self.vat_loss[i]),
                            cell(self.eta_d[i]), cell(self.test_error.get(t))])


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss; carries the partial report."""

    def __init__(self, message, report: TrainReport, net: MlpNetwork):
        super().__init__(message)
        self.report = report
        self.net = net


def lr_schedule(t: int, T: int, eta0: float, shape: str = "linear") -> float:
    if not 1 <= t <= T:
        raise ValueError(f"iteration {t} outside 1..{T}")
    if shape == "constant":
        return eta0
    if shape == "linear":
        return eta0 if T == 1 else eta0 * (T - t) / (T - 1)
    if shape == "step":
        return eta0 if t <= T // 2 else eta0 / 2
    raise ValueError(f"unknown lr shape {shape!r}")


def evaluate(net: MlpNetwork, test: PointSet) -> float:
    """Argmax error rate; ties go to the lowest class index."""
    if test.labels is None:
        raise ValueError("test split has no labels")
    if len(test) == 0:
        raise ValueError("empty test set")
    pred = np.argmax(forward(net, test.features), axis=1)
    return float(np.mean(pred != test.labels))


class _VatObjective:
    def __init__(self, x, cfg, rng, scale):
        self.x, self.cfg, self.rng, self.scale = x, cfg, rng, scale

    def __call__(self, net):
        gb = vat_loss(net, self.x, self.cfg, self.rng)
        if self.scale != 1.0:
            gb.loss_value *= self.scale
            gb.weight_grads *= self.scale
        return gb


def train(cfg: TrainerConfig, data: SslDataset, net: Optional[MlpNetwork] = None):
    """Run ``cfg.outer_iters`` outer iterations; returns ``(report, final_net)``.

    Per iteration: a labeled batch updates cross-entropy, then one unlabeled
    batch updates entropy and then the weighted VAT loss, each step starting
    from the previous step's weights.  Batches are drawn with replacement.
    """
    terms = set(cfg.terms)
    if "ce" in terms and len(data.labeled) == 0:
        raise ValueError("cross-entropy term enabled but the labeled split is empty")
    if terms & {"entropy", "vat"} and len(data.unlabeled) == 0:
        raise ValueError("entropy/VAT terms enabled but the unlabeled split is empty")
    if net is None:
        dims = (data.labeled.width, *cfg.hidden, data.n_classes)
        net = init_network(dims, derive_seed(cfg.seed, "init"))
    dims = net.dims
    w = net.params.copy()

    batch_rng = derive_rng(cfg.seed, "batches")
    mask_rng = derive_rng(cfg.seed, "masks")
    vat_rng = derive_rng(cfg.seed, "vat")
    eligible = None if cfg.abcd.include_biases else weight_mask(dims)
    labeled_targets = data.labeled.targets()
    velocity = np.zeros_like(w) if cfg.momentum > 0 else None
    report = TrainReport()
    best_err = math.inf
    t0 = time.perf_counter()

    def sgd(w, objective, eta):
        nonlocal velocity
        loss_grad = as_loss_grad(objective, dims)
        if velocity is None:
            return sgd_update(w, loss_grad, eta)
        loss, g = loss_grad(w)
        velocity = cfg.momentum * velocity + g
        return w - eta * velocity, loss

    for t in range(1, cfg.outer_iters + 1):
        eta = lr_schedule(t, cfg.outer_iters, cfg.eta0, cfg.lr_shape)
        use_abcd = cfg.use_abcd and t <= cfg.abcd_cutoff
        abcd_cfg = replace(cfg.abcd, eta_descent=eta)

        def step(w, objective):
            if use_abcd:
                return abcd_update(w, as_loss_grad(objective, dims), abcd_cfg, mask_rng, eligible)
            return sgd(w, objective, eta)

        ce = ent = vl = None
        if "ce" in terms:
            idx = batch_rng.integers(0, len(data.labeled), cfg.labeled_batch)
            w, ce = step(w, Objective("cross_entropy", data.labeled.features[idx], labeled_targets[idx]))
        if terms & {"entropy", "vat"}:
            xu = data.unlabeled.features[batch_rng.integers(0, len(data.unlabeled), cfg.unlabeled_batch)]
            if "entropy" in terms:
                w, ent = step(w, Objective("entropy", xu, scale=cfg.entropy_weight))
            if "vat" in terms:
                w, vl = sgd(w, _VatObjective(xu, cfg.vat, vat_rng, cfg.vat_weight), eta)

        report.iters.append(t)
        report.ce_loss.append(ce)
        report.ent_loss.append(ent)
        report.vat_loss.append(vl)
        report.eta_d.append(eta)

        bad = [name for name, v in (("ce", ce), ("entropy", ent), ("vat", vl))
               if v is not None and not math.isfinite(v)]
        if bad or not np.all(np.isfinite(w)):
            report.wall_time = time.perf_counter() - t0
            what = ", ".join(bad) if bad else "parameters"
            raise NumericalAbort(f"non-finite {what} at iteration {t} (eta_d={eta:g})",
                                 report, MlpNetwork(dims, w))

        if data.test is not None and cfg.eval_every > 0 and (t % cfg.eval_every == 0 or t == cfg.outer_iters):
            current = MlpNetwork(dims, w.copy())
            err = evaluate(current, data.test)
            report.test_error[t] = err
            if err < best_err:
                best_err, report.best_iter, report.best_net = err, t, current
            log.info("iter %d  ce=%s ent=%s vat=%s test_error=%.4f", t, ce, ent, vl, err)

        if cfg.target_loss is not None and cfg.eval_every > 0 and t % cfg.eval_every == 0:
            full = cross_entropy(labeled_targets, forward(MlpNetwork(dims, w), data.labeled.features))
            if full <= cfg.target_loss:
                report.stopped_at = t
                break

    report.wall_time = time.perf_counter() - t0
    final = MlpNetwork(dims, w)
    if report.best_net is None:
        report.best_iter, report.best_net = report.iters[-1], final.copy()
    return report, final
