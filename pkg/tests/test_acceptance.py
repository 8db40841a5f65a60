"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
The slow ones (half-moons training, the width sweep, optimizer comparison)
run the shipped presets at full size.
"""

import csv
import math
import time

import numpy as np
import pytest

from smoothnet import (AbcdConfig, MlpNetwork, PointSet, SslDataset, TrainerConfig, VatConfig, abcd_step,
                       backward, cross_entropy, entropy, evaluate, forward, gaussian_blobs, half_moons,
                       init_network, kl_divergence, load_checkpoint, load_csv, normalize, sample_mask,
                       save_csv, sgd_step, split_labeled, train, vat_perturbation)
from smoothnet.abcd import Objective, abcd_update
from smoothnet.cli import main as cli
from smoothnet.losses import one_hot
from smoothnet.probes import ascent_probe, interpolation_curve, points_loss

from conftest import ACCEPTANCE, central_diff, max_rel_err, random_distributions


def record(number, passed, detail, started):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}  ({time.perf_counter() - started:.1f}s)"
    ACCEPTANCE.append(line)
    print(line)
    return passed


def run_cli(*argv):
    return cli([str(a) for a in argv])


def test_c01_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        depth = int(rng.integers(1, 3))
        dims = (int(rng.integers(1, 5)), *rng.integers(1, 17, depth).tolist(), int(rng.integers(2, 4)))
        net = init_network(dims, seed=int(rng.integers(1 << 30)))
        net.params[:] += 0.1 * rng.standard_normal(net.param_count)
        x = rng.standard_normal((4, dims[0]))
        target = random_distributions(rng, 4, dims[-1])
        for kind in ("cross_entropy", "kl_to_fixed_target", "entropy"):
            tgt = None if kind == "entropy" else target
            gb = backward(net, x, kind, tgt)
            fd_w = central_diff(lambda p: backward(MlpNetwork(dims, p), x, kind, tgt).loss_value, net.params)
            fd_x = central_diff(lambda v: backward(net, v, kind, tgt).loss_value, x)
            worst = max(worst, max_rel_err(gb.weight_grads, fd_w), max_rel_err(gb.input_grads, fd_x))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 30
    assert record(1, ok, f"max relative error {worst:.2e} (< 1e-4)", t0)


def test_c02_loss_identities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    errs = []
    for _ in range(1000):
        k = int(rng.integers(2, 11))
        p, q = random_distributions(rng, 1, k), random_distributions(rng, 1, k)
        errs.append(abs(kl_divergence(p, p)))
        errs.append(abs(entropy(one_hot(np.array([rng.integers(k)]), k))))
        errs.append(abs(entropy(np.full((1, k), 1.0 / k)) - math.log(k)))
        errs.append(abs(cross_entropy(p, q) - (entropy(p) + kl_divergence(p, q))))
    worst = max(errs)
    ok = worst < 1e-9 and time.perf_counter() - t0 < 5
    assert record(2, ok, f"worst identity residual {worst:.1e} (< 1e-9)", t0)


def _brute_force_best_kl(net, x_row, eps, n_dirs=720):
    angles = 2 * np.pi * np.arange(n_dirs) / n_dirs
    dirs = eps * np.column_stack([np.cos(angles), np.sin(angles)])
    clean = np.repeat(forward(net, x_row[None]), n_dirs, axis=0)
    p = forward(net, x_row + dirs)
    return max(kl_divergence(clean[i:i + 1], p[i:i + 1]) for i in range(n_dirs))


def _kink_distance(net, x_row):
    """First-order distance from ``x_row`` to the nearest hidden-unit kink."""
    acts, h = x_row[None], 1e-7
    jac = np.eye(x_row.size)
    dist = math.inf
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        z = acts @ w.T + b
        jz = jac @ w.T
        live = np.linalg.norm(jz, axis=0) > h
        if live.any():
            dist = min(dist, float(np.min(np.abs(z[0, live]) / np.linalg.norm(jz[:, live], axis=0))))
        acts, jac = np.maximum(z, 0.0), jz * (z > 0)
    return dist


def test_c03_vat_contract():
    t0 = time.perf_counter()
    net = init_network((2, 16, 16, 2), seed=21)
    x = np.random.default_rng(4).standard_normal((40, 2)) * 0.5
    cfg = VatConfig(epsilon_x=0.01)
    delta = vat_perturbation(net, x, cfg, np.random.default_rng(5))
    norm_err = float(np.max(np.abs(np.linalg.norm(delta, axis=1) / cfg.epsilon_x - 1)))
    grad0 = backward(net, x, "kl_to_fixed_target", forward(net, x)).input_grads
    grad_norm = float(np.linalg.norm(grad0))
    ratios = np.array([kl_divergence(forward(net, x[i:i + 1]), forward(net, x[i:i + 1] + delta[i]))
                       / _brute_force_best_kl(net, x[i], cfg.epsilon_x) for i in range(len(x))])
    # The second-order model behind the power iteration only holds on balls without a ReLU kink.
    smooth = np.array([_kink_distance(net, row) > 2 * cfg.epsilon_x for row in x])
    worst = float(ratios[smooth].min())
    ok = (norm_err < 1e-9 and grad_norm < 1e-6 and smooth.sum() >= 10 and worst >= 0.9
          and time.perf_counter() - t0 < 60)
    assert record(3, ok, f"norm rel err {norm_err:.1e}, grad at 0 {grad_norm:.1e}, worst VAT/brute-force KL "
                         f"ratio {worst:.3f} (>= 0.9) over {smooth.sum()} kink-free points "
                         f"(all {len(x)} points: {ratios.min():.3f})", t0)


def test_c04_abcd_algebra():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    complementary = True
    for i in range(100_000):
        m = sample_mask(16, (i % 11) / 10, rng)
        a, d = m.ascent, m.descent
        complementary &= bool(np.all(np.isin(a, (0.0, -1.0))) and np.all((a == -1) == (d == 0))
                              and np.all((a == 0) == (d == 1)))
    net = init_network((3, 8, 2), seed=1)
    obj = Objective("cross_entropy", rng.standard_normal((6, 3)), one_hot(rng.integers(0, 2, 6), 2))
    a = abcd_step(net, obj, AbcdConfig(eta_descent=0.1, ascent_fraction=0.0), np.random.default_rng(0))
    s = sgd_step(net, obj, 0.1)
    bit_equal = np.array_equal(a.params, s.params)
    w, _ = abcd_update(np.array([1.0]), lambda w: (0.5 * float(w[0]) ** 2, w.copy()),
                       AbcdConfig(eta_ascent=0.1, ascent_fraction=1.0), np.random.default_rng(0))
    hand = w[0] == 1.1
    ok = complementary and bit_equal and hand and time.perf_counter() - t0 < 10
    assert record(4, ok, f"complementary over 1e5 masks {complementary}, fraction 0 == SGD bitwise {bit_equal}, "
                         f"quadratic example w={w[0]!r}", t0)


def test_c05_half_moons_ssl(tmp_path):
    t0 = time.perf_counter()
    errors = []
    for seed in range(5):
        data, run = tmp_path / f"data{seed}", tmp_path / f"run{seed}"
        assert run_cli("gen-data", "--preset", "halfmoons-paper", "--seed", seed, "--out", data) == 0
        assert run_cli("train", "--preset", "halfmoons-paper", "--seed", seed, "--data", data, "--out", run) == 0
        test = load_csv(data / "test.csv")
        assert len(test) == 2000
        errors.append(evaluate(load_checkpoint(run / "final.ckpt"), test))
    good = sum(e <= 0.01 for e in errors)
    ok = good >= 4 and time.perf_counter() - t0 < 600
    assert record(5, ok, "test errors " + ", ".join(f"{e:.4f}" for e in errors) + f"; {good}/5 <= 1%", t0)


def test_c06_width_trend(tmp_path):
    t0 = time.perf_counter()
    assert run_cli("sweep", "--preset", "fig1-sweep", "--out", tmp_path) == 0
    with (tmp_path / "sweep.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    widths = [int(r["width"]) for r in rows]
    medians = [float(r["median_steps"]) if r["median_steps"] else math.nan for r in rows]
    errors = [[float(e) for e in r["test_errors"].split()] for r in rows]
    complete = all(len(e) == 5 for e in errors)
    converged = complete and all(e <= 0.01 for errs in errors for e in errs)
    monotone = all(b >= a for a, b in zip(medians, medians[1:]))
    strict = medians[-1] > medians[0]
    elapsed = time.perf_counter() - t0
    ok = widths == [100, 400, 1600] and converged and monotone and strict and elapsed < 1800
    detail = "; ".join(f"width {w}: median steps {m:g}, worst test error {max(e, default=math.nan):.4f}"
                       for w, m, e in zip(widths, medians, errors))
    assert record(6, ok, f"{detail}; all <= 1% {converged}, nondecreasing {monotone}, "
                         f"strict end-to-end {strict}", t0)


def _abcd_vs_sgd(points, eta, target, seed):
    """Steps to diverge for (ABCD, SGD) nets stopped at the same training loss, or None if unmatched."""
    ds = SslDataset(points, PointSet(np.zeros((0, points.width)), None, points.n_classes))
    steps = []
    for method in ("abcd+ce", "sgd+ce"):
        cfg = TrainerConfig.for_method(method, outer_iters=50_000, eta0=eta, lr_shape="constant",
                                       abcd_off_fraction=0.0, target_loss=target, eval_every=10, seed=seed)
        report, net = train(cfg, ds)
        if report.stopped_at is None:
            return None
        steps.append(ascent_probe(net, points, 0.001, 20_000).censored_steps())
    return tuple(steps)


def test_c07_abcd_vs_sgd():
    t0 = time.perf_counter()
    outcome = {}
    for name, make in (("half-moons", lambda s: half_moons(100, 0.1, seed=200 + s)),
                       ("blobs-10", lambda s: gaussian_blobs(30, 10, 2, 0.1, seed=200 + s))):
        outcome[name] = [_abcd_vs_sgd(make(seed), 0.03, 0.1, seed) for seed in range(5)]
    wins = {k: sum(r is not None and r[0] >= r[1] for r in v) for k, v in outcome.items()}
    ok = all(w >= 4 for w in wins.values()) and time.perf_counter() - t0 < 1200
    detail = "; ".join(f"{k}: ABCD >= SGD in {wins[k]}/5, (ABCD, SGD) steps {v}" for k, v in outcome.items())
    assert record(7, ok, detail, t0)


def test_c08_interpolation_endpoints():
    t0 = time.perf_counter()
    pts = half_moons(50, 0.1, seed=5)
    test = half_moons(50, 0.1, seed=6)
    ds = SslDataset(pts, PointSet(np.zeros((0, 2)), None))
    nets = [train(TrainerConfig.for_method(m, outer_iters=300, hidden=(20, 20), seed=3), ds)[1]
            for m in ("abcd+ce", "sgd+ce")]
    a, b = nets[0].params, nets[1].params
    curve = interpolation_curve(a, b, nets[0].dims, pts, test)
    swapped = interpolation_curve(b, a, nets[0].dims, pts, test, alphas=1.0 - curve.alphas)
    i0, i1 = int(np.flatnonzero(curve.alphas == 0)[0]), int(np.flatnonzero(curve.alphas == 1)[0])
    exact = (curve.train_losses[i0] == points_loss(nets[0], pts) and curve.test_losses[i0] == points_loss(nets[0], test)
             and curve.train_losses[i1] == points_loss(nets[1], pts) and curve.test_losses[i1] == points_loss(nets[1], test))
    sym = float(max(np.max(np.abs(curve.train_losses - swapped.train_losses)),
                    np.max(np.abs(curve.test_losses - swapped.test_losses))))
    ok = (exact and sym < 1e-12 and curve.alphas[0] == -0.2 and curve.alphas[-1] == 1.2
          and time.perf_counter() - t0 < 60)
    assert record(8, ok, f"{len(curve.alphas)} alphas, endpoints exact {exact}, swap asymmetry {sym:.1e}", t0)


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_c09_determinism(tmp_path):
    t0 = time.perf_counter()
    data = tmp_path / "data"
    assert run_cli("gen-data", "--n-unlabeled", 50, "--n-test", 40, "--seed", 3, "--out", data) == 0
    assert run_cli("train", "--data", data, "--iters", 40, "--hidden", "10x2", "--eval-every", 10,
                   "--out", tmp_path / "base") == 0
    ckpt = tmp_path / "base" / "final.ckpt"
    other = tmp_path / "base" / "best.ckpt"
    commands = {
        "gen-data": ["--n-unlabeled", 30, "--n-test", 20, "--seed", 8],
        "train": ["--data", data, "--iters", 30, "--hidden", "8x2", "--eval-every", 10],
        "probe": ["--checkpoint", ckpt, "--data", data / "labeled.csv", "--rate", 0.05, "--max-steps", 500],
        "landscape": ["--a", ckpt, "--b", other, "--train-data", data / "labeled.csv", "--test-data", data / "test.csv"],
        "grid": ["--checkpoint", ckpt, "--resolution", "9,7", "--mode", "probability"],
        "eval": ["--checkpoint", ckpt, "--data", data / "test.csv"],
        "sweep": ["--widths", "4,6", "--seeds", "0,1", "--depth", 1, "--iters", 10, "--n-unlabeled", 20,
                  "--n-test", 10, "--max-steps", 50, "--rate", 0.05],
    }
    identical = {}
    for command, args in commands.items():
        first, second = tmp_path / f"{command}-1", tmp_path / f"{command}-2"
        assert run_cli(command, *args, "--out", first) == 0
        assert run_cli(command, "--config", first / "manifest.txt", "--out", second) == 0
        identical[command] = _files(first) == _files(second)
    ok = all(identical.values())
    assert record(9, ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in identical.items()), t0)


def test_c10_image_subset_smoke(tmp_path):
    load_digits = pytest.importorskip("sklearn.datasets").load_digits
    t0 = time.perf_counter()
    images, labels = load_digits(return_X_y=True)
    idx = np.random.default_rng(0).permutation(len(labels))[:500]
    save_csv(PointSet(images[idx], labels[idx], 10), tmp_path / "digits.csv")
    points, _ = normalize(load_csv(tmp_path / "digits.csv"), "standardize")
    ds = split_labeled(points, 20, seed=0)
    cfg = TrainerConfig.for_method("abcd+entmin+vat", outer_iters=200, eta0=0.03, vat=VatConfig(epsilon_x=1.0),
                                   eval_every=0, seed=0)
    try:
        report, _ = train(cfg, ds)
        aborted = False
    except Exception as exc:  # any abort fails the criterion
        report, aborted = getattr(exc, "report", None), True
    smoothed = np.array(report.ce_loss).reshape(5, 40).mean(axis=1) if not aborted else np.array([])
    decreasing = not aborted and bool(np.all(np.diff(smoothed) < 0))
    ok = len(points) == 500 and decreasing and time.perf_counter() - t0 < 600
    assert record(10, ok, "smoothed CE (40-iteration means) " + " ".join(f"{v:.3f}" for v in smoothed)
                  + f", aborted {aborted}", t0)
