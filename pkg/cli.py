import argparse
import logging
import sys

import numpy as np
import sentry_sdk

import ablation
import detector
import tensor as T
import trainer
from configs import sentry_setup, settings
from errors import ConfigError, DivergenceError, FormatError
from metrics import evaluate
from pseudo_labels import make_predictor
from rd_strategy import student_objective
from refinement import ScalingSet, tmr_loss
from scenes import augment_pair, generate_dataset, read_dataset, write_dataset
from views import (
    display_ablation_table,
    display_error,
    display_eval_report,
    display_gradcheck_report,
    display_message,
    display_training_summary,
    write_ablation_csv,
)

logging.basicConfig(
    filename=settings.log_file(),
    level=logging.DEBUG if settings.DEBUG else logging.INFO,
    format="%(asctime)s - %(levelname)s - %(message)s",
)

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 1, 2, 3
GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_ATOL = 1e-9
GRADCHECK_TARGETS = ("sup", "tmr", "student")


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _ratio(text):
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"ratio must lie strictly between 0 and 1, got {text}")
    return value


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser():
    parser = ArgumentParser(prog="tmrd", description="Desk-scale TMR-RD semi-supervised detection lab.")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", help="Generate a synthetic dataset file.")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--count", type=_positive_int, required=True, help="Training scenes (labeled + unlabeled).")
    gen.add_argument("--ratio", type=_ratio, required=True, help="Labeled fraction.")
    gen.add_argument("--test-count", type=int, default=100, help="Labeled test scenes.")
    gen.add_argument("--out", required=True)

    for name, help_text in (("burnin", "Supervised burn-in only."), ("train", "Full training run.")):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("config", nargs="?", help="Flat section.field=value config file.")
        sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides")
        sub.add_argument("--data", required=True)
        sub.add_argument("--checkpoint", default=f"{name}.tmrc", help="Checkpoint written at the end.")
        sub.add_argument("--metrics", default=None, help="Metrics CSV path.")
        sub.add_argument("--record-wall-time", action="store_true")
        if name == "train":
            sub.add_argument("--resume", default=None, help="Continue from this checkpoint.")
            sub.add_argument("--stop-at", type=_positive_int, default=None, help="Pause after this iteration.")

    ev = commands.add_parser("eval", help="Evaluate a checkpoint on the test split.")
    ev.add_argument("--data", required=True)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--model", choices=("auto", "teacher", "student"), default="auto")

    ab = commands.add_parser("ablate", help="Run an ablation matrix.")
    ab.add_argument("spec", nargs="?", help="Ablation spec file.")
    ab.add_argument("--preset", choices=sorted(ablation.PRESETS))
    ab.add_argument("--data", required=True)
    ab.add_argument("--config", default=None, help="Base config shared by every row.")
    ab.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides")
    ab.add_argument("--csv", default="ablation.csv")
    ab.add_argument("--workers", type=_positive_int, default=None, help="Defaults to TMRD_THREADS.")

    gc = commands.add_parser("gradcheck", help="Compare tape gradients with central differences.")
    gc.add_argument("--target", choices=GRADCHECK_TARGETS + ("all",), default="all")
    gc.add_argument("--h", type=float, default=1e-5)
    gc.add_argument("--samples", type=int, default=64, help="Coordinates per target (0 checks all).")
    gc.add_argument("--seed", type=int, default=0)
    return parser


def _load_dataset(path):
    dataset = read_dataset(path)
    if not dataset.labeled:
        raise ConfigError([f"dataset {path} has no labeled scenes"])
    return dataset


def handle_gen_data(args):
    dataset = generate_dataset(args.seed, args.count, args.ratio, args.test_count)
    write_dataset(dataset, args.out)
    display_message(
        f"Wrote {args.out}: {len(dataset.labeled)} labeled, {len(dataset.unlabeled)} unlabeled, "
        f"{len(dataset.test)} test scenes."
    )
    return EXIT_OK


def _finish_run(args, config, state, rows):
    trainer.save_checkpoint(state, config, args.checkpoint)
    if args.metrics:
        trainer.write_metrics_csv(rows, args.metrics)
    display_training_summary(state, rows)
    display_message(f"Checkpoint written to {args.checkpoint}.")
    return EXIT_OK


def handle_burnin(args):
    config = settings.load_config(args.config, args.overrides)
    dataset = _load_dataset(args.data)
    logging.info(f"Burn-in for {config.burn_in_iterations} iterations.")
    state, rows = trainer.run(
        config,
        dataset.labeled,
        dataset.unlabeled,
        dataset.test,
        stop_at=config.burn_in_iterations,
        record_wall_time=args.record_wall_time,
    )
    logging.info("Burn-in complete.")
    return _finish_run(args, config, state, rows)


def handle_train(args):
    state = None
    if args.resume:
        if args.config:
            raise ConfigError(["a resumed run keeps its checkpoint config; use --set to change it"])
        config, state = trainer.load_checkpoint(args.resume)
        if args.overrides:
            config = trainer.parse_overrides([settings.split_override(o) for o in args.overrides], config)
    else:
        config = settings.load_config(args.config, args.overrides)
    dataset = _load_dataset(args.data)
    state, rows = trainer.run(
        config,
        dataset.labeled,
        dataset.unlabeled,
        dataset.test,
        state=state,
        stop_at=args.stop_at,
        record_wall_time=args.record_wall_time,
    )
    return _finish_run(args, config, state, rows)


def handle_eval(args):
    config, state = trainer.load_checkpoint(args.checkpoint)
    dataset = _load_dataset(args.data)
    if not dataset.test:
        raise ConfigError([f"dataset {args.data} has no test split"])
    which = args.model
    if which == "auto":
        which = "student" if state.stage == trainer.BURN_IN and state.iteration < config.burn_in_iterations else "teacher"
    params = state.student if which == "student" else state.teacher
    result = evaluate(make_predictor(params, config.stages), dataset.test)
    display_eval_report(result, title=f"Evaluation of the {which} at iteration {state.iteration}")
    return EXIT_OK


def handle_ablate(args):
    if bool(args.spec) == bool(args.preset):
        raise ConfigError(["give either an ablation spec file or --preset"])
    if args.spec:
        with open(args.spec, encoding="utf-8") as handle:
            text = handle.read()
    else:
        text = f"preset {args.preset}\n"
    base = settings.load_config(args.config, args.overrides)
    rows = ablation.parse_ablation_spec(text, base)
    dataset = _load_dataset(args.data)
    workers = args.workers or settings.max_workers()
    batch, records = ablation.run_ablation(rows, base, dataset, workers=workers)
    display_ablation_table(records, title=f"Ablation batch {batch}")
    write_ablation_csv(records, args.csv)
    failed = [record.label for record in records if record.failed]
    if failed:
        display_error(f"ablation members failed: {', '.join(failed)}")
        return EXIT_DIVERGED
    return EXIT_OK


def _random_scaling(params, rng):
    return ScalingSet({name: rng.uniform(0.5, 1.0, size=t.shape[0]) for name, t in params.items()})


def gradient_checks(targets, h=1e-5, samples=64, seed=0):
    """Central-difference checks of the three trained objectives.

    Ground-truth boxes stand in for pseudo-labels so the unsupervised term is
    never empty.

    Returns:
        list: (target, parameter count, coordinates checked, max relative error) tuples.
    """
    rng = np.random.default_rng(seed)
    scenes = generate_dataset(seed, count=4, split_ratio=0.5).labeled
    config = detector.LossConfig()
    coords = samples or None
    checks = []
    for target in targets:
        if target == "sup":
            leaves = detector.init_params(rng).as_leaves()
            params = list(leaves.values())
            loss_fn = lambda: detector.supervised_loss(leaves, None, scenes, config)
        elif target == "tmr":
            theta_t, theta_s = detector.init_params(rng), detector.init_params(rng)
            omega_t = _random_scaling(theta_t, rng).as_leaves()
            omega_s = _random_scaling(theta_s, rng).as_leaves()
            params = list(omega_t.values()) + list(omega_s.values())
            loss_fn = lambda: tmr_loss(theta_t, omega_t, theta_s, omega_s, scenes, 1.0, 4.0, config)
        else:
            teacher = detector.init_params(rng)
            leaves = detector.init_params(rng).as_leaves()
            params = list(leaves.values())
            pairs = [augment_pair(scene, rng) for scene in scenes]
            labels = [scene.objects for scene in scenes]
            loss_fn = lambda: student_objective(leaves, pairs, labels, teacher, 4.0, 1.0, config)[0]
        size = sum(p.size for p in params)
        checked = min(coords, size) if coords else size
        error = T.finite_diff_check(loss_fn, params, h=h, coords=coords, rng=rng, atol=GRADCHECK_ATOL)
        verdict = "PASS" if error <= GRADCHECK_TOLERANCE else "FAIL"
        logging.info(f"Gradient check {target}: max relative error {error:.3e} over {checked} coordinates, {verdict}.")
        checks.append((target, size, checked, error))
    return checks


def handle_gradcheck(args):
    if args.h <= 0:
        raise ConfigError(["--h must be positive"])
    if args.samples < 0:
        raise ConfigError(["--samples must not be negative"])
    targets = GRADCHECK_TARGETS if args.target == "all" else (args.target,)
    checks = gradient_checks(targets, args.h, args.samples, args.seed)
    display_gradcheck_report(checks, GRADCHECK_TOLERANCE)
    if any(error > GRADCHECK_TOLERANCE for _, _, _, error in checks):
        return EXIT_GRADCHECK
    return EXIT_OK


HANDLERS = {
    "gen-data": handle_gen_data,
    "burnin": handle_burnin,
    "train": handle_train,
    "eval": handle_eval,
    "ablate": handle_ablate,
    "gradcheck": handle_gradcheck,
}


def main(argv=None):
    """Run one subcommand and return its exit code."""
    args = build_parser().parse_args(argv)
    logging.info(f"Command {args.command} started.")
    try:
        return HANDLERS[args.command](args)
    except ConfigError as e:
        logging.error(f"Configuration error: {e}")
        display_error(str(e))
        return EXIT_USAGE
    except FormatError as e:
        logging.error(f"Unreadable file: {e}")
        display_error(str(e))
        return EXIT_USAGE
    except DivergenceError as e:
        sentry_sdk.capture_exception(e)
        logging.error(f"Training diverged: {e}")
        display_error(f"training diverged: {e}")
        return EXIT_DIVERGED
    except (OSError, ValueError) as e:
        sentry_sdk.capture_exception(e)
        logging.error(f"{args.command} failed: {e}")
        display_error(str(e))
        return EXIT_USAGE


if __name__ == "__main__":
    sentry_setup.init_sentry()
    try:
        code = main()
    except Exception as e:
        sentry_sdk.capture_exception(e)
        logging.error(f"An error occurred: {e}")
        print("An unexpected error occurred. See the log file for details.")
        code = EXIT_USAGE
    sys.exit(code)
