"""Loss-landscape probes: ascent robustness, 1-D interpolation, response grids."""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .abcd import Objective
from .datasets import PointSet, SslDataset
from .losses import cross_entropy, entropy
from .net import GradientBundle, MlpNetwork, count_params, forward
from .trainer import NumericalAbort, TrainerConfig, derive_rng, evaluate, train
from .vat import vat_loss

log = logging.getLogger(__name__)

WIDTH_PROBE_RATE = 0.005
OPTIMIZER_PROBE_RATE = 0.001
FULL_WIDTHS = (1000, 2500, 10000)
DESK_WIDTHS = (100, 400, 1600)
THRESHOLD_FACTOR = 10.0
THRESHOLD_FLOOR = 1.0


def default_alphas() -> np.ndarray:
    """57 points from -0.2 to 1.2 in steps of 0.025, with 0 and 1 hit exactly."""
    return np.arange(-8, 49) / 40.0


def divergence_threshold(initial_loss: float) -> float:
    return max(THRESHOLD_FACTOR * initial_loss, THRESHOLD_FLOOR)


def objective_for(points: PointSet) -> Objective:
    """Cross-entropy for labeled points, prediction entropy otherwise."""
    if points.labels is not None:
        return Objective("cross_entropy", points.features, points.targets())
    return Objective("entropy", points.features)


class TrainingLoss:
    """Full semi-supervised training objective as a function of the weights.

    Sums labeled cross-entropy with the weighted entropy and VAT terms that
    ``cfg`` enables.  ``unlabeled_rows`` keeps only the leading rows of the
    unlabeled split to bound the cost.  VAT directions are redrawn from the
    same seed on every call, so the value depends on the weights alone.
    """

    def __init__(self, data: SslDataset, cfg: TrainerConfig, unlabeled_rows: Optional[int] = None,
                 seed: int = 0):
        self.labeled = Objective("cross_entropy", data.labeled.features, data.labeled.targets())
        xu = data.unlabeled.features
        self.xu = xu if unlabeled_rows is None else xu[:unlabeled_rows]
        self.terms = set(cfg.terms)
        self.cfg = cfg
        self.seed = seed
        if self.terms & {"entropy", "vat"} and len(self.xu) == 0:
            raise ValueError("entropy/VAT terms need unlabeled rows")

    def __call__(self, net: MlpNetwork) -> GradientBundle:
        gb = self.labeled(net)
        loss, grads = gb.loss_value, gb.weight_grads
        if "entropy" in self.terms:
            ent = Objective("entropy", self.xu, scale=self.cfg.entropy_weight)(net)
            loss += ent.loss_value
            grads += ent.weight_grads
        if "vat" in self.terms:
            v = vat_loss(net, self.xu, self.cfg.vat, derive_rng(self.seed, "probe-vat"))
            loss += self.cfg.vat_weight * v.loss_value
            grads += self.cfg.vat_weight * v.weight_grads
        return GradientBundle(loss, grads, np.zeros((0, net.dims[0])), net.dims)


def points_loss(net: MlpNetwork, points: PointSet) -> float:
    pred = forward(net, points.features)
    if points.labels is not None:
        return cross_entropy(points.targets(), pred)
    return entropy(pred)


def _write_rows(path, header, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _g(v) -> str:
    return format(float(v), ".17g")


@dataclass
class ProbeTrajectory:
    initial_loss: float
    losses: list
    steps_to_diverge: Optional[int]  # None: did not diverge within max_steps
    ascent_rate: float
    threshold: float
    max_steps: int

    @property
    def diverged(self) -> bool:
        return self.steps_to_diverge is not None

    def censored_steps(self) -> int:
        """Steps to divergence, counting a run that never diverged as ``max_steps + 1``."""
        return self.steps_to_diverge if self.diverged else self.max_steps + 1

    def to_csv(self, path) -> None:
        rows = [(0, _g(self.initial_loss))]
        rows += [(i + 1, _g(v)) for i, v in enumerate(self.losses)]
        _write_rows(path, ["step", "loss"], rows)


def ascent_probe(net: MlpNetwork, data, ascent_rate: float = OPTIMIZER_PROBE_RATE,
                 max_steps: int = 5000, threshold: Optional[float] = None,
                 batch_size: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None) -> ProbeTrajectory:
    """Plain gradient ascent on a copy of ``net`` until the loss blows up.

    ``data`` is a :class:`PointSet` (cross-entropy when labeled, entropy
    otherwise) or any ``net -> GradientBundle`` objective.  Gradients are
    full-batch unless ``batch_size`` is given.  ``threshold`` defaults to
    ``max(10 * initial loss, 1.0)``.  A non-finite loss counts as divergence
    at that step.
    """
    if ascent_rate <= 0:
        raise ValueError(f"ascent_rate must be positive, got {ascent_rate}")
    if max_steps < 1:
        raise ValueError(f"max_steps must be >= 1, got {max_steps}")
    objective = objective_for(data) if isinstance(data, PointSet) else data
    if batch_size is not None:
        if not isinstance(objective, Objective):
            raise ValueError("minibatch probing needs an Objective with stored inputs")
        rng = rng if rng is not None else np.random.default_rng(0)
        full = objective

        def objective(n):
            idx = rng.integers(0, len(full.x), batch_size)
            tgt = None if full.target is None else np.asarray(full.target)[idx]
            return Objective(full.kind, full.x[idx], tgt, full.scale)(n)

    work = net.copy()
    gb = objective(work)
    initial = gb.loss_value
    thr = divergence_threshold(initial) if threshold is None else threshold
    losses, diverged_at = [], None
    for k in range(1, max_steps + 1):
        work.params += ascent_rate * gb.weight_grads
        gb = objective(work)
        losses.append(gb.loss_value)
        if not math.isfinite(gb.loss_value) or gb.loss_value >= thr:
            diverged_at = k
            break
    return ProbeTrajectory(initial, losses, diverged_at, ascent_rate, thr, max_steps)


@dataclass
class LandscapeCurve:
    alphas: np.ndarray
    train_losses: np.ndarray
    test_losses: np.ndarray

    def to_csv(self, path) -> None:
        _write_rows(path, ["alpha", "train_loss", "test_loss"],
                    [(_g(a), _g(tr), _g(te)) for a, tr, te in
                     zip(self.alphas, self.train_losses, self.test_losses)])


def interpolation_curve(weights_a: np.ndarray, weights_b: np.ndarray, dims: Sequence[int],
                        train_data: PointSet, test_data: PointSet,
                        alphas: Optional[Sequence[float]] = None) -> LandscapeCurve:
    """Losses along ``alpha * weights_b + (1 - alpha) * weights_a``.

    ``alpha = 0`` gives ``weights_a`` and ``alpha = 1`` gives ``weights_b``.
    """
    n = count_params(dims)
    weights_a = np.asarray(weights_a, dtype=np.float64)
    weights_b = np.asarray(weights_b, dtype=np.float64)
    if weights_a.shape != (n,) or weights_b.shape != (n,):
        raise ValueError(f"parameter vectors of length {weights_a.size} and {weights_b.size} "
                         f"do not match dims {list(dims)} ({n})")
    alphas = default_alphas() if alphas is None else np.asarray(alphas, dtype=np.float64)
    if alphas.size == 0:
        raise ValueError("alpha grid is empty")
    train_l, test_l = [], []
    for a in alphas:
        net = MlpNetwork(dims, a * weights_b + (1.0 - a) * weights_a)
        train_l.append(points_loss(net, train_data))
        test_l.append(points_loss(net, test_data))
    return LandscapeCurve(alphas, np.array(train_l), np.array(test_l))


@dataclass
class ResponseGrid:
    bounds: tuple  # (x_min, x_max, y_min, y_max)
    resolution: tuple  # (nx, ny)
    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray  # shape (ny, nx)
    mode: str

    def to_csv(self, path) -> None:
        rows = []
        for j, y in enumerate(self.ys):
            for i, x in enumerate(self.xs):
                v = self.values[j, i]
                rows.append((_g(x), _g(y), _g(v) if self.mode == "probability" else int(v)))
        _write_rows(path, ["x", "y", "value"], rows)


def response_grid(net: MlpNetwork, bounds, resolution, mode: str = "probability") -> ResponseGrid:
    """Evaluate a planar network at cell centres of a regular lattice.

    ``probability`` mode records the class-0 probability, ``argmax`` mode the
    predicted class.
    """
    if net.dims[0] != 2:
        raise ValueError(f"response grids need 2-D inputs, network input width is {net.dims[0]}")
    if mode not in ("probability", "argmax"):
        raise ValueError(f"unknown mode {mode!r}")
    x0, x1, y0, y1 = (float(b) for b in bounds)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate bounds {bounds}")
    nx, ny = (resolution, resolution) if np.isscalar(resolution) else resolution
    nx, ny = int(nx), int(ny)
    if nx < 1 or ny < 1:
        raise ValueError("resolution must be >= 1 per axis")
    xs = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
    ys = y0 + (np.arange(ny) + 0.5) * (y1 - y0) / ny
    gx, gy = np.meshgrid(xs, ys)
    probs = forward(net, np.column_stack([gx.ravel(), gy.ravel()]))
    if mode == "probability":
        values = probs[:, 0].reshape(ny, nx)
    else:
        values = np.argmax(probs, axis=1).reshape(ny, nx)
    return ResponseGrid((x0, x1, y0, y1), (nx, ny), xs, ys, values, mode)


PROBE_OBJECTIVES = ("ce", "total")


@dataclass(frozen=True)
class ProbeConfig:
    ascent_rate: float = WIDTH_PROBE_RATE
    max_steps: int = 5000
    threshold: Optional[float] = None
    objective: str = "total"  # "ce": labeled cross-entropy; "total": full training loss
    unlabeled_rows: Optional[int] = None  # cap on unlabeled rows in the total loss

    def __post_init__(self):
        if self.objective not in PROBE_OBJECTIVES:
            raise ValueError(f"unknown probe objective {self.objective!r}; choose from {PROBE_OBJECTIVES}")


@dataclass
class WidthSummary:
    width: int
    seeds: list
    steps: list = field(default_factory=list)  # censored steps per completed seed
    test_errors: list = field(default_factory=list)
    failures: list = field(default_factory=list)  # (seed, message)

    @property
    def median_steps(self) -> Optional[float]:
        return float(np.median(self.steps)) if self.steps else None


def sweep_threads() -> int:
    try:
        return max(1, int(os.environ.get("SMOOTHNET_THREADS", "1")))
    except ValueError:
        return 1


def _train_and_probe(width, seed, depth, trainer_cfg, probe_cfg, make_data):
    data: SslDataset = make_data(seed)
    cfg = replace(trainer_cfg, hidden=(width,) * depth, seed=seed)
    _, net = train(cfg, data)
    err = evaluate(net, data.test) if data.test is not None else None
    if probe_cfg.objective == "total":
        objective = TrainingLoss(data, cfg, probe_cfg.unlabeled_rows, seed=seed)
    else:
        objective = objective_for(data.labeled)
    traj = ascent_probe(net, objective, probe_cfg.ascent_rate, probe_cfg.max_steps, probe_cfg.threshold)
    return err, traj


def width_sweep(widths: Sequence[int], trainer_cfg: TrainerConfig, probe_cfg: ProbeConfig,
                seeds: Sequence[int], make_data: Callable[[int], SslDataset],
                depth: int = 4, threads: Optional[int] = None) -> list:
    """Train one network per (width, seed) and probe its ascent robustness.

    ``make_data(seed)`` supplies the dataset, so every width sees the same
    data for a given seed.  The probe ascends the objective named in
    ``probe_cfg``.  A training abort is recorded against its width and the
    sweep carries on.
    """
    if not widths:
        raise ValueError("widths must be nonempty")
    jobs = [(w, s) for w in widths for s in seeds]
    threads = sweep_threads() if threads is None else threads

    def run(job):
        w, s = job
        try:
            return job, _train_and_probe(w, s, depth, trainer_cfg, probe_cfg, make_data), None
        except NumericalAbort as exc:
            log.warning("width %d seed %d aborted: %s", w, s, exc)
            return job, None, str(exc)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    summaries = {w: WidthSummary(w, list(seeds)) for w in widths}
    for (w, s), out, err in results:
        summary = summaries[w]
        if out is None:
            summary.failures.append((s, err))
            continue
        test_err, traj = out
        summary.steps.append(traj.censored_steps())
        summary.test_errors.append(test_err)
    return [summaries[w] for w in widths]
