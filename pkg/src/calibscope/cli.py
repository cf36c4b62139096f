"""Command-line entry point: ``calibscope <command> [flags]``.

Exit status is 0 on success, 1 on a usage error and 2 when the input data
is invalid. Reported values are fractions unless ``--percent`` is given.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

from . import caltask, calibrator, dynamics, metrics, posthoc, synth
from .core import (CalibrationError, LabelSpace, load_labeled_data, load_prediction_set,
                   save_labeled_data, save_prediction_set)

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

METRIC_COLUMNS = ("n", "acc", "conf", "ece", "conf_pos", "conf_neg", "cerr_pos", "cerr_neg", "mean_entropy")
RELIABILITY_COLUMNS = ("bin", "lo", "hi", "count", "mean_conf", "accuracy", "gap")
TRAJECTORY_COLUMNS = ("step", "acc", "conf", "ece", "cerr_pos", "cerr_neg", "state")
# entropy is in nats, never a percentage
_FRACTION_FIELDS = {"acc", "conf", "ece", "conf_pos", "conf_neg", "cerr_pos", "cerr_neg",
                    "lo", "hi", "mean_conf", "accuracy", "gap"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def fmt(value, name: str, percent: bool = False, missing: str = "") -> str:
    if value is None:
        return missing
    if isinstance(value, int) and not isinstance(value, bool):
        return str(value)
    if percent and name in _FRACTION_FIELDS:
        return f"{100.0 * value:.4f}"
    return f"{value:.6f}"


def _binning(value: str) -> str:
    b = value.replace("-", "_")
    if b not in metrics.BINNINGS:
        raise argparse.ArgumentTypeError(f"binning must be equal-mass or equal-width, not {value!r}")
    return b


def _write_csv(path, header, rows):
    handle = open(path, "w", newline="", encoding="utf-8") if path else io.StringIO()
    w = csv.writer(handle, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    if path:
        handle.close()
    else:
        sys.stdout.write(handle.getvalue())


def _label_space(args, num_classes=None):
    names = getattr(args, "class_names", None)
    if names:
        names = tuple(names.split(","))
        return LabelSpace(len(names), names)
    return LabelSpace(num_classes) if num_classes else None


# -- commands --------------------------------------------------------------------

def cmd_metrics(args):
    pset = load_prediction_set(args.inp, _label_space(args))
    report = metrics.compute_metrics(pset, args.bins, args.binning, use_override=not args.max_prob)
    d = report.as_dict()
    print(" ".join(f"{c}={fmt(d[c], c, args.percent, 'NA')}" for c in METRIC_COLUMNS))
    if args.csv:
        _write_csv(args.csv, METRIC_COLUMNS, [[fmt(d[c], c, args.percent) for c in METRIC_COLUMNS]])


def cmd_reliability(args):
    pset = load_prediction_set(args.inp, _label_space(args))
    diagram = metrics.reliability_diagram(pset, args.bins, args.binning, use_override=not args.max_prob)
    rows = [[i] + [fmt(getattr(b, c), c, args.percent) for c in RELIABILITY_COLUMNS[1:]]
            for i, b in enumerate(diagram)]
    _write_csv(args.csv, RELIABILITY_COLUMNS, rows)
    if args.plot:
        from .plotting import reliability_figure
        reliability_figure(diagram, args.plot)
    if args.csv:
        print(f"ece={fmt(metrics.ece_from_bins(diagram), 'ece', args.percent)} bins={len(diagram)}")


def cmd_fit_temperature(args):
    pset = load_prediction_set(args.val, _label_space(args))
    fit = posthoc.fit_temperature(pset, args.t_min, args.t_max, args.tol)
    print(f"temperature={fit.temperature:.6f} nll_before={fit.nll_before:.6f} "
          f"nll_after={fit.nll_after:.6f} iterations={fit.iterations}")


def cmd_apply_temperature(args):
    pset = load_prediction_set(args.inp, _label_space(args))
    save_prediction_set(posthoc.apply_temperature(pset, args.t), args.out)


def cmd_ensemble(args):
    space = _label_space(args)
    members = [load_prediction_set(p, space) for p in args.files]
    save_prediction_set(posthoc.ensemble_average(members), args.out)


def cmd_build_caltask(args):
    pset = load_prediction_set(args.inp, _label_space(args))
    ds = caltask.build_calibration_dataset(pset, args.seed, balance=not args.no_balance)
    caltask.export_calibration_dataset(ds, args.out)
    print(f"examples={len(ds)} positive={ds.positive_count} negative={ds.negative_count}")


def _train_config(args, mode):
    return calibrator.TrainConfig(
        learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
        label_smoothing_epsilon=args.label_smoothing, mode=mode,
        cal_learning_rate=getattr(args, "cal_lr", None))


def cmd_train_calibrator(args):
    ds = caltask.load_calibration_dataset(args.caltask)
    if len(ds) == 0:
        raise CalibrationError("empty calibration dataset")
    dims = calibrator.mlp_dims(ds.feature_matrix().shape[1], args.hidden, args.layers)
    model = calibrator.init_mlp(dims, args.activation, args.seed)
    model, trace = calibrator.train_calibrator(model, ds, _train_config(args, "extrinsic"))
    calibrator.save_model(model, args.model_out)
    if args.trace:
        _write_csv(args.trace, ("epoch", "loss"), [[i + 1, f"{v:.6f}"] for i, v in enumerate(trace)])
    print(f"epochs={len(trace)} final_loss={trace[-1]:.6f}")


def cmd_apply_calibrator(args):
    model = calibrator.load_model(args.model)
    if not isinstance(model, calibrator.MLPCalibrator):
        raise CalibrationError(f"{args.model}: not an extrinsic calibrator")
    pset = load_prediction_set(args.inp, _label_space(args))
    save_prediction_set(calibrator.apply_calibrator(model, pset), args.out)


def cmd_train_multitask(args):
    main_data = load_labeled_data(args.main, args.num_classes)
    cal_data = caltask.load_calibration_dataset(args.cal)
    model = calibrator.init_multitask(main_data.dim, args.hidden, main_data.num_classes,
                                      args.activation, args.seed)
    model = calibrator.train_multitask(model, main_data, cal_data, _train_config(args, args.mode))
    calibrator.save_model(model, args.model_out)
    if args.test:
        test = load_labeled_data(args.test, main_data.num_classes)
        out = calibrator.apply_multitask(model, test)
        if args.out:
            save_prediction_set(out, args.out)
        m = metrics.compute_metrics(out)
        print(f"test_acc={m.acc:.6f} test_conf={m.conf:.6f}")


def cmd_dynamics(args):
    checkpoints = dynamics.load_checkpoints(args.dir, _label_space(args))
    traj = dynamics.compute_trajectory(checkpoints, args.bins, args.binning)
    report = dynamics.classify_states(traj, args.window, args.acc_eps, args.conf_eps)
    rows = [[p.step] + [fmt(getattr(p, c), c, args.percent) for c in TRAJECTORY_COLUMNS[1:-1]] + [lab]
            for p, lab in zip(traj, report.labels)]
    _write_csv(args.csv, TRAJECTORY_COLUMNS, rows)
    if args.plot:
        from .plotting import trajectory_figure
        trajectory_figure(traj, report, args.plot)
    if args.csv:
        print(f"points={len(traj)} transition_step={report.transition_step} "
              f"conf_monotone_fraction={report.conf_monotone_fraction:.4f} "
              f"cerr_neg_monotone_fraction={report.cerr_neg_monotone_fraction:.4f}")


def cmd_synth(args):
    kind = args.kind
    if kind == "calibrated":
        save_prediction_set(synth.gen_calibrated(args.n, args.K, args.seed), args.out)
    elif kind == "overconfident":
        save_prediction_set(synth.gen_overconfident(args.n, args.K, args.seed, args.s), args.out)
    elif kind == "predictable_correctness":
        save_prediction_set(synth.gen_predictable_correctness(args.n, args.D, args.seed, args.margin), args.out)
    elif kind == "gaussian_mixture":
        save_labeled_data(synth.gen_gaussian_mixture(args.n, args.K, args.D, args.seed, args.separation,
                                                     args.centers_seed), args.out)
    elif kind == "toy_checkpoints":
        centers = args.seed if args.centers_seed is None else args.centers_seed
        train = synth.gen_gaussian_mixture(args.n, args.K, args.D, args.seed, args.separation, centers)
        test = synth.gen_gaussian_mixture(args.n_test, args.K, args.D, args.seed + 1, args.separation, centers)
        arch = [args.D, *([args.hidden] * args.layers), args.K]
        cps = synth.train_toy_classifier(train, test, arch, args.epochs, args.log_every, args.seed,
                                         args.lr, args.batch_size or args.n)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for step, pset in cps:
            save_prediction_set(pset, out / f"step_{step}.jsonl")
        print(f"checkpoints={len(cps)} dir={out}")


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="calibscope", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(func=func)
        return sp

    def binning_flags(sp):
        sp.add_argument("--bins", type=int, default=100, help="number of bins (default 100)")
        sp.add_argument("--binning", type=_binning, default=metrics.EQUAL_MASS,
                        help="equal-mass (default) or equal-width")

    def space_flag(sp):
        sp.add_argument("--class-names", help="comma-separated class names; fixes K")

    def report_flags(sp):
        sp.add_argument("--percent", action="store_true", help="print fractions as percentages")
        sp.add_argument("--max-prob", action="store_true",
                        help="ignore calibrator confidences and use max probability")

    sp = add("metrics", cmd_metrics, "Accuracy, confidence, ECE and CErr for one prediction log")
    sp.add_argument("--in", dest="inp", required=True, help="prediction log")
    sp.add_argument("--csv", help="also write a one-row CSV here")
    binning_flags(sp); report_flags(sp); space_flag(sp)

    sp = add("reliability", cmd_reliability, "Reliability-diagram bins as CSV, optionally plotted")
    sp.add_argument("--in", dest="inp", required=True, help="prediction log")
    sp.add_argument("--csv", help="CSV output path (default: stdout)")
    sp.add_argument("--plot", help="figure path (.png, .svg or .pdf)")
    binning_flags(sp); report_flags(sp); space_flag(sp)

    sp = add("fit-temperature", cmd_fit_temperature, "Fit a temperature on a validation log with logits")
    sp.add_argument("--val", required=True, help="validation prediction log")
    sp.add_argument("--t-min", type=float, default=0.05)
    sp.add_argument("--t-max", type=float, default=20.0)
    sp.add_argument("--tol", type=float, default=1e-4)
    space_flag(sp)

    sp = add("apply-temperature", cmd_apply_temperature, "Rescale a log's logits by 1/T")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--t", type=float, required=True, help="temperature")
    sp.add_argument("--out", required=True)
    space_flag(sp)

    sp = add("ensemble", cmd_ensemble, "Average the predicted distributions of several logs")
    sp.add_argument("files", nargs="+", help="member prediction logs")
    sp.add_argument("--out", required=True)
    space_flag(sp)

    sp = add("build-caltask", cmd_build_caltask, "Build a correctness dataset from a validation log")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--no-balance", action="store_true", help="keep every example")
    sp.add_argument("--out", required=True)
    space_flag(sp)

    def train_flags(sp, epochs=50, lr=0.1):
        sp.add_argument("--seed", type=int, required=True)
        sp.add_argument("--hidden", type=int, default=calibrator.DEFAULT_HIDDEN)
        sp.add_argument("--activation", choices=("relu", "tanh"), default="relu")
        sp.add_argument("--epochs", type=int, default=epochs)
        sp.add_argument("--lr", type=float, default=lr)
        sp.add_argument("--batch-size", type=int, default=32)
        sp.add_argument("--label-smoothing", type=float, default=0.0)
        sp.add_argument("--model-out", required=True, help="weights file to write")

    sp = add("train-calibrator", cmd_train_calibrator, "Train an MLP correctness calibrator")
    sp.add_argument("--caltask", required=True, help="calibration dataset with features")
    sp.add_argument("--layers", type=int, default=2, help="number of affine layers")
    sp.add_argument("--trace", help="write the per-epoch loss CSV here")
    train_flags(sp)

    sp = add("apply-calibrator", cmd_apply_calibrator, "Replace a log's confidences with a calibrator's")
    sp.add_argument("--model", required=True)
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    space_flag(sp)

    sp = add("train-multitask", cmd_train_multitask, "Train a shared-trunk main + correctness model")
    sp.add_argument("--mode", choices=("iterative", "simultaneous"), required=True)
    sp.add_argument("--main", required=True, help="labeled feature data for the main task")
    sp.add_argument("--cal", required=True, help="calibration dataset (features = main-task inputs)")
    sp.add_argument("--num-classes", type=int, help="K (default: inferred from labels)")
    sp.add_argument("--cal-lr", type=float, help="learning rate for the calibration task")
    sp.add_argument("--test", help="labeled data to predict after training")
    sp.add_argument("--out", help="prediction log for --test")
    train_flags(sp)

    sp = add("dynamics", cmd_dynamics, "Metric trajectory and fit states over step_<n> checkpoint logs")
    sp.add_argument("--dir", required=True, help="directory of step_<n>.<ext> logs")
    sp.add_argument("--csv", help="CSV output path (default: stdout)")
    sp.add_argument("--plot", help="figure path")
    sp.add_argument("--window", type=int, default=5)
    sp.add_argument("--acc-eps", type=float, default=0.001)
    sp.add_argument("--conf-eps", type=float, default=0.001)
    sp.add_argument("--percent", action="store_true")
    binning_flags(sp); space_flag(sp)

    sp = add("synth", cmd_synth, "Write synthetic prediction logs, labeled data or toy checkpoints")
    sp.add_argument("--kind", required=True, choices=synth.KINDS + ("toy_checkpoints",))
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True, help="output file (directory for toy_checkpoints)")
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--K", type=int, default=2)
    sp.add_argument("--D", type=int, default=8)
    sp.add_argument("--s", type=float, default=2.0, help="overconfidence scale (> 1)")
    sp.add_argument("--margin", type=float, default=3.0)
    sp.add_argument("--separation", type=float, default=3.0)
    sp.add_argument("--centers-seed", type=int)
    sp.add_argument("--n-test", type=int, default=2000)
    sp.add_argument("--hidden", type=int, default=256)
    sp.add_argument("--layers", type=int, default=1, help="hidden layers of the toy classifier")
    sp.add_argument("--epochs", type=int, default=100)
    sp.add_argument("--log-every", type=int, default=1)
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--batch-size", type=int, help="default: full batch")
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        args.func(args)
    except (CalibrationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
