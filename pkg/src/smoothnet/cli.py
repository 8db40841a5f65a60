"""Train and probe small semi-supervised networks with input and weight smoothing.

Every subcommand accepts ``--config FILE`` (flat ``key=value`` lines, keys
named like the long flags with ``_`` or ``-``) and ``--preset NAME``.
Precedence, lowest first: built-in defaults, preset, config file, flags.
Each command writes ``manifest.txt`` to its output directory; passing that
file back as ``--config`` reproduces the outputs byte for byte.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .abcd import AbcdConfig
from .datasets import PointSet, SslDataset, gaussian_blobs, half_moons, load_csv, save_csv, split_labeled
from .net import load_checkpoint, save_checkpoint
from .probes import (DESK_WIDTHS, WIDTH_PROBE_RATE, OPTIMIZER_PROBE_RATE, PROBE_OBJECTIVES, ProbeConfig,
                     ascent_probe, default_alphas, interpolation_curve, response_grid, width_sweep)
from .trainer import METHODS, NumericalAbort, TrainerConfig, derive_seed, evaluate, train
from .vat import VatConfig

log = logging.getLogger("smoothnet")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
MANIFEST = "manifest.txt"
# Not recorded in manifests: where outputs go and how settings were supplied.
UNRECORDED = {"out", "config", "preset", "command", "verbose"}

HALFMOONS_TRAIN = {
    "method": "abcd+entmin+vat", "hidden": "100,100,100,100", "iters": "3000", "eta0": "0.2",
    "epsilon_x": "0.2", "vat_weight": "20", "labeled_batch": "32", "unlabeled_batch": "128",
}
PRESETS = {
    "halfmoons-paper": {
        "dataset": "halfmoons", "n_labeled": "4", "n_unlabeled": "1000", "n_test": "1000",
        "noise": "0.1", **HALFMOONS_TRAIN,
    },
    # Sized so that five seeds over three widths fit a 30 minute desk budget.
    "fig1-sweep": {
        **HALFMOONS_TRAIN, "method": "vat+entmin", "iters": "400", "eta0": "0.1", "vat_weight": "10",
        "widths": ",".join(map(str, DESK_WIDTHS)), "seeds": "0,1,2,3,4", "rate": str(WIDTH_PROBE_RATE), "max_steps": "20000",
        "probe_objective": "total", "probe_rows": "256",
    },
    # Supervised runs stopped at a common training loss, then probed.
    "fig2-compare": {
        "dataset": "halfmoons", "n_labeled": "100", "n_unlabeled": "0", "n_test": "1000",
        "hidden": "100,100,100,100", "iters": "50000", "eta0": "0.03", "lr_shape": "constant",
        "abcd_off_fraction": "0", "target_loss": "0.1", "eval_every": "10",
        "rate": str(OPTIMIZER_PROBE_RATE), "max_steps": "20000",
    },
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> tuple:
    text = text.strip()
    if "x" in text and "," not in text:
        width, count = text.split("x")
        return (int(width),) * int(count)
    return tuple(int(t) for t in text.split(",") if t.strip())


def _float_list(text: str) -> tuple:
    return tuple(float(t) for t in text.split(","))


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _common(p):
    p.add_argument("--config", help="key=value settings file (e.g. a manifest)")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def _train_options(p):
    p.add_argument("--method", choices=sorted(METHODS), default="abcd+entmin+vat")
    p.add_argument("--hidden", default="100,100,100,100", help="hidden widths, e.g. 100,100 or 100x4")
    p.add_argument("--iters", type=int, default=3000)
    p.add_argument("--eta0", type=float, default=0.1)
    p.add_argument("--lr-shape", choices=("constant", "linear", "step"), default="linear")
    p.add_argument("--eta-ascent", type=float, default=AbcdConfig.eta_ascent)
    p.add_argument("--inner-iters", type=int, default=1)
    p.add_argument("--ascent-fraction", type=float, default=0.5)
    p.add_argument("--include-biases", type=_bool, default=True)
    p.add_argument("--epsilon-x", type=float, default=VatConfig.epsilon_x)
    p.add_argument("--xi", type=float, default=VatConfig.xi)
    p.add_argument("--divergence", choices=("kl", "cross_entropy"), default="kl")
    p.add_argument("--vat-weight", type=float, default=1.0)
    p.add_argument("--entropy-weight", type=float, default=1.0)
    p.add_argument("--abcd-off-fraction", type=float, default=0.05)
    p.add_argument("--labeled-batch", type=int, default=32)
    p.add_argument("--unlabeled-batch", type=int, default=128)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--target-loss", type=float, default=None,
                   help="stop once the full labeled cross-entropy is at or below this")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="smoothnet", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"smoothnet {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write labeled/unlabeled/test CSV splits")
    _common(p)
    p.add_argument("--dataset", choices=("halfmoons", "blobs"), default="halfmoons")
    p.add_argument("--n-labeled", type=int, default=4, help="labeled rows per class")
    p.add_argument("--n-unlabeled", type=int, default=1000, help="unlabeled rows per class")
    p.add_argument("--n-test", type=int, default=1000, help="test rows per class")
    p.add_argument("--noise", type=float, default=0.1, help="noise sigma (blob spread for blobs)")
    p.add_argument("--n-classes", type=int, default=10, help="blobs only")

    p = sub.add_parser("train", help="semi-supervised training run")
    _common(p)
    p.add_argument("--data", help="directory with labeled.csv, unlabeled.csv and optional test.csv")
    _train_options(p)

    p = sub.add_parser("probe", help="gradient-ascent robustness trajectory")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="CSV of points; labeled rows probe cross-entropy")
    p.add_argument("--rate", type=float, default=OPTIMIZER_PROBE_RATE)
    p.add_argument("--max-steps", type=int, default=5000)
    p.add_argument("--threshold", type=float, default=None)

    p = sub.add_parser("landscape", help="1-D interpolation between two checkpoints")
    _common(p)
    p.add_argument("--a", help="checkpoint at alpha=0")
    p.add_argument("--b", help="checkpoint at alpha=1")
    p.add_argument("--train-data")
    p.add_argument("--test-data")

    p = sub.add_parser("grid", help="planar network response on a lattice")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--bounds", type=_float_list, default=(-1.5, 2.5, -1.0, 1.5))
    p.add_argument("--resolution", type=_int_list, default=(100, 100))
    p.add_argument("--mode", choices=("probability", "argmax"), default="probability")

    p = sub.add_parser("eval", help="test error rate of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")

    p = sub.add_parser("sweep", help="train and probe several widths over several seeds")
    _common(p)
    p.add_argument("--data-seed-base", type=int, default=0)
    p.add_argument("--widths", type=_int_list, default=DESK_WIDTHS)
    p.add_argument("--seeds", type=_int_list, default=(0, 1, 2, 3, 4))
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--rate", type=float, default=WIDTH_PROBE_RATE)
    p.add_argument("--max-steps", type=int, default=20000)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--probe-objective", choices=PROBE_OBJECTIVES, default="total")
    p.add_argument("--probe-rows", type=int, default=None, help="unlabeled rows in the total-loss probe")
    p.add_argument("--n-labeled", type=int, default=4)
    p.add_argument("--n-unlabeled", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--noise", type=float, default=0.1)
    _train_options(p)
    return parser


def _subparser(parser, command):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def _dests(sub) -> dict:
    return {a.dest: a.option_strings[-1] for a in sub._actions if a.option_strings and a.dest != "help"}


def read_settings(path) -> dict:
    settings = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        settings[key.replace("-", "_")] = value
    return settings


def _tokens(settings: dict, dests: dict, source: str, strict: bool) -> list:
    out = []
    for key, value in settings.items():
        if key == "command":
            continue
        if key not in dests or key in UNRECORDED - {"out"}:
            if strict:
                raise UsageError(f"{source}: unknown key {key!r}")
            continue
        out.append(f"{dests[key]}={value}")
    return out


def parse(argv) -> argparse.Namespace:
    parser = build_parser()
    first = parser.parse_args(argv)
    if first.command is None:
        raise UsageError("missing command; see smoothnet --help")
    sub = _subparser(parser, first.command)
    dests = _dests(sub)
    tokens = []
    if first.preset:
        tokens += _tokens(PRESETS[first.preset], dests, f"preset {first.preset}", strict=False)
    if first.config:
        settings = read_settings(first.config)
        if settings.get("command", first.command) != first.command:
            raise UsageError(f"{first.config} is a manifest for {settings['command']!r}, not {first.command!r}")
        tokens += _tokens(settings, dests, first.config, strict=True)
    args = sub.parse_args(tokens + list(argv[1:]))
    args.command = first.command
    return args


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def write_manifest(args, out: Path) -> None:
    lines = [f"command={args.command}"]
    for key in sorted(vars(args)):
        value = getattr(args, key)
        if key in UNRECORDED or value is None:
            continue
        lines.append(f"{key}={_fmt(value)}")
    (out / MANIFEST).write_text("\n".join(lines) + "\n")


def _need(args, *names):
    missing = [n for n in names if getattr(args, n) in (None, "")]
    if missing:
        raise UsageError(f"{args.command}: missing required setting(s): "
                         + ", ".join("--" + n.replace("_", "-") for n in missing))


def _outdir(args) -> Path:
    _need(args, "out")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    return out


def _load_points(path, **kw) -> PointSet:
    try:
        return load_csv(path, **kw)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_net(path):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _make_dataset(kind, n_labeled, n_unlabeled, n_test, noise, n_classes, seed) -> SslDataset:
    if n_labeled < 1:
        raise UsageError("--n-labeled must be >= 1 (no labeled data)")
    if n_unlabeled < 0 or n_test < 1:
        raise UsageError("--n-unlabeled must be >= 0 and --n-test >= 1")
    per_class = n_labeled + n_unlabeled
    if kind == "halfmoons":
        pool = half_moons(per_class, noise, derive_seed(seed, "data"))
        test = half_moons(n_test, noise, derive_seed(seed, "test"))
    else:
        pool = gaussian_blobs(per_class, n_classes, spread=noise, seed=derive_seed(seed, "data"))
        test = gaussian_blobs(n_test, n_classes, spread=noise, seed=derive_seed(seed, "test"))
    return split_labeled(pool, n_labeled, derive_seed(seed, "split"), test=test)


def cmd_gen_data(args) -> int:
    try:
        ds = _make_dataset(args.dataset, args.n_labeled, args.n_unlabeled, args.n_test,
                           args.noise, args.n_classes, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _outdir(args)
    save_csv(ds.labeled, out / "labeled.csv")
    save_csv(ds.unlabeled, out / "unlabeled.csv")
    save_csv(ds.test, out / "test.csv")
    write_manifest(args, out)
    print(f"wrote {len(ds.labeled)} labeled, {len(ds.unlabeled)} unlabeled, {len(ds.test)} test rows to {out}")
    return EXIT_OK


def _trainer_config(args) -> TrainerConfig:
    try:
        abcd = AbcdConfig(eta_ascent=args.eta_ascent, eta_descent=args.eta0, inner_iters=args.inner_iters,
                          ascent_fraction=args.ascent_fraction, include_biases=args.include_biases)
        vat = VatConfig(epsilon_x=args.epsilon_x, xi=args.xi, divergence=args.divergence)
        return TrainerConfig.for_method(
            args.method, outer_iters=args.iters, hidden=_int_list(args.hidden),
            labeled_batch=args.labeled_batch, unlabeled_batch=args.unlabeled_batch, abcd=abcd, vat=vat,
            vat_weight=args.vat_weight, entropy_weight=args.entropy_weight, eta0=args.eta0,
            lr_shape=args.lr_shape, abcd_off_fraction=args.abcd_off_fraction, momentum=args.momentum,
            eval_every=args.eval_every, target_loss=args.target_loss, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    _need(args, "data")
    cfg = _trainer_config(args)
    data_dir = Path(args.data)
    labeled = _load_points(data_dir / "labeled.csv", has_labels=True)
    unlabeled_path = data_dir / "unlabeled.csv"
    unlabeled = _load_points(unlabeled_path, has_labels=False) if unlabeled_path.exists() \
        else PointSet(np.zeros((0, labeled.width)), None, labeled.n_classes)
    test_path = data_dir / "test.csv"
    test = _load_points(test_path, has_labels=True) if test_path.exists() else None
    n_classes = max(labeled.n_classes, test.n_classes if test is not None else 0)
    labeled = PointSet(labeled.features, labeled.labels, n_classes)
    if test is not None:
        test = PointSet(test.features, test.labels, n_classes)
    try:
        ds = SslDataset(labeled, PointSet(unlabeled.features, None, n_classes), test)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _outdir(args)
    write_manifest(args, out)
    try:
        report, net = train(cfg, ds)
    except NumericalAbort as exc:
        exc.report.to_csv(out / "report.csv")
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report.to_csv(out / "report.csv")
    save_checkpoint(net, out / "final.ckpt")
    save_checkpoint(report.best_net, out / "best.ckpt")
    if test is not None and report.test_error:
        print(f"final test error {evaluate(net, test):.4f} (best {min(report.test_error.values()):.4f} "
              f"at iteration {report.best_iter})")
    return EXIT_OK


def cmd_probe(args) -> int:
    _need(args, "checkpoint", "data")
    net = _load_net(args.checkpoint)
    points = _load_points(args.data)
    _check_width(net, points, args.data)
    try:
        traj = ascent_probe(net, PointSet(points.features, points.labels, net.n_classes)
                            if points.labels is not None else points,
                            args.rate, args.max_steps, args.threshold)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _outdir(args)
    traj.to_csv(out / "trajectory.csv")
    write_manifest(args, out)
    steps = traj.steps_to_diverge if traj.diverged else f"never within {args.max_steps}"
    print(f"initial loss {traj.initial_loss:.6g}, threshold {traj.threshold:.6g}, steps to diverge: {steps}")
    return EXIT_OK


def _check_width(net, points, path):
    if points.width != net.dims[0]:
        raise UsageError(f"{path}: {points.width} features, network expects {net.dims[0]}")
    if points.labels is not None and points.labels.size and points.labels.max() >= net.n_classes:
        raise UsageError(f"{path}: labels exceed the network's {net.n_classes} classes")


def cmd_landscape(args) -> int:
    _need(args, "a", "b", "train_data", "test_data")
    a, b = _load_net(args.a), _load_net(args.b)
    if a.dims != b.dims:
        raise UsageError(f"checkpoint dims differ: {args.a} has {list(a.dims)}, {args.b} has {list(b.dims)}")
    train_pts, test_pts = _load_points(args.train_data), _load_points(args.test_data)
    for pts, path in ((train_pts, args.train_data), (test_pts, args.test_data)):
        _check_width(a, pts, path)
        if pts.labels is not None:
            pts.n_classes = a.n_classes
    curve = interpolation_curve(a.params, b.params, a.dims, train_pts, test_pts, default_alphas())
    out = _outdir(args)
    curve.to_csv(out / "landscape.csv")
    write_manifest(args, out)
    print(f"wrote {len(curve.alphas)} points to {out / 'landscape.csv'}")
    return EXIT_OK


def cmd_grid(args) -> int:
    _need(args, "checkpoint")
    net = _load_net(args.checkpoint)
    if len(args.bounds) != 4:
        raise UsageError("--bounds needs x_min,x_max,y_min,y_max")
    res = args.resolution if len(args.resolution) == 2 else (args.resolution[0],) * 2
    try:
        grid = response_grid(net, args.bounds, res, args.mode)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _outdir(args)
    grid.to_csv(out / "grid.csv")
    write_manifest(args, out)
    return EXIT_OK


def cmd_eval(args) -> int:
    _need(args, "checkpoint", "data")
    net = _load_net(args.checkpoint)
    points = _load_points(args.data, has_labels=True)
    _check_width(net, points, args.data)
    try:
        err = evaluate(net, PointSet(points.features, points.labels, net.n_classes))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(f"{err:.4f}")
    if args.out:
        out = _outdir(args)
        (out / "eval.csv").write_text(f"checkpoint,error\n{args.checkpoint},{err:.17g}\n")
        write_manifest(args, out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _trainer_config(args)
    try:
        probe_cfg = ProbeConfig(args.rate, args.max_steps, args.threshold, args.probe_objective, args.probe_rows)
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    def make_data(seed):
        return _make_dataset("halfmoons", args.n_labeled, args.n_unlabeled, args.n_test,
                             args.noise, 2, args.data_seed_base + seed)

    summaries = width_sweep(args.widths, cfg, probe_cfg, args.seeds, make_data, depth=args.depth)
    out = _outdir(args)
    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["width", "median_steps", "steps", "test_errors", "failures"])
        for s in summaries:
            w.writerow([s.width, "" if s.median_steps is None else format(s.median_steps, "g"),
                        " ".join(map(str, s.steps)), " ".join(format(e, ".4f") for e in s.test_errors),
                        len(s.failures)])
    write_manifest(args, out)
    for s in summaries:
        print(f"width {s.width}: median steps {s.median_steps} over {len(s.steps)} runs")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "probe": cmd_probe, "landscape": cmd_landscape,
    "grid": cmd_grid, "eval": cmd_eval, "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
