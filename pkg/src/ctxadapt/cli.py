"""Command-line entry point.

Subcommands: ``synth``, ``zeroshot``, ``pseudolabel``, ``adapt``, ``eval``,
``infer`` and ``sweep``. Every input file is loaded and validated before any
computation starts. Failures print one line ``error: <ErrorClass>: <message>``
to stderr and exit non-zero (2 for usage errors, 1 otherwise).
"""

import argparse
import itertools
import json
import logging
import os
import sys
import warnings

import numpy as np

from . import __version__
from .cam import INFER_MODES
from .cbpl import CbplConfig, class_histogram, cbpl_filter
from .classifier import classify
from .errors import AdaptError, ConfigError, DivergenceError, StateError
from .formats import read_checkpoint, read_features, read_prototypes, write_checkpoint, write_features, write_prototypes
from .metrics import SPLIT_SCHEMES, evaluate
from .report import build_report, dumps_report, emit_report, per_class_table, pseudo_label_section
from .synthetic import SynthConfig, generate_synthetic
from .trainer import TrainConfig, adapt, adapt_base_to_new, infer, prepare_data

log = logging.getLogger("ctxadapt")

FEATURES_FILE = "features.bin"
PROTOTYPES_FILE = "prototypes.bin"
SYNTH_CONFIG_FILE = "synth_config.json"

# flag dest -> TrainConfig field (cbpl.* and fusion handled separately)
TRAIN_FLAGS = {
    "tau": "tau",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "lr": "eta_max",
    "momentum": "momentum",
    "weight_decay": "weight_decay",
    "cau_depth": "cau_depth",
    "hidden_dim": "hidden_dim",
    "infer_mode": "infer_mode",
    "seed": "seed",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_io(p, features=True, prototypes=True, checkpoint=False):
    if features:
        p.add_argument("--features", required=True, help="feature file (COLAFEAT)")
    if prototypes:
        p.add_argument("--prototypes", required=True, help="prototype file (COLAPROT)")
    if checkpoint:
        p.add_argument("--checkpoint", required=True, help="module checkpoint (COLACKPT)")
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--table", help="write a per-class TSV table here")
    p.add_argument("--figures-dir", help="render report figures (PNG) into this directory")
    p.add_argument("--dry-run", action="store_true", help="validate inputs, print the resolved config, stop")


def _add_train_flags(p):
    p.add_argument("--config", help="JSON file with TrainConfig fields; flags override it")
    p.add_argument("--tau", type=float)
    p.add_argument("--tg", type=float, help="global confidence threshold")
    p.add_argument("--q", type=float, help="per-class retention ratio")
    p.add_argument("--confidence-source", choices=("probability", "logit"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="peak learning rate (eta_max); no default")
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--cau-depth", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--infer-mode", choices=INFER_MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-shuffle", action="store_true")


def build_parser():
    parser = _Parser(prog="ctxadapt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic shifted benchmark")
    p.add_argument("--out-dir", required=True)
    defaults = SynthConfig()
    p.add_argument("--seed", type=int, default=defaults.seed)
    p.add_argument("--classes", type=int, default=defaults.num_classes)
    p.add_argument("--dim", type=int, default=defaults.dim)
    p.add_argument("--n-per-class", type=int, default=defaults.n_per_class)
    p.add_argument("--spread", type=float, default=defaults.prototype_spread)
    p.add_argument("--noise", type=float, default=defaults.intra_class_noise)
    p.add_argument("--shift", type=float, default=defaults.domain_shift)
    p.add_argument("--translation-ratio", type=float, default=defaults.translation_ratio)
    p.add_argument("--max-cosine", type=float, default=defaults.max_cosine)
    p.add_argument("--dry-run", action="store_true")

    p = sub.add_parser("zeroshot", help="zero-shot predictions and accuracy")
    _add_io(p)
    p.add_argument("--tau", type=float)
    p.add_argument("--predictions", help="write per-sample predictions (TSV)")
    p.add_argument("--config")

    p = sub.add_parser("pseudolabel", help="class-balanced pseudo-label filtering")
    _add_io(p)
    _add_train_flags(p)
    p.add_argument("--predictions", help="write retained samples (TSV)")

    p = sub.add_parser("adapt", help="filter pseudo-labels and train the module")
    _add_io(p)
    _add_train_flags(p)
    p.add_argument("--checkpoint", help="write the trained module here")
    p.add_argument("--base-to-new", choices=SPLIT_SCHEMES, help="also run a base-to-new split")
    p.add_argument("--timings", action="store_true", help="include wall-clock seconds in the trace")

    for name, text in (("eval", "accuracy of a trained module"), ("infer", "predictions from a trained module")):
        p = sub.add_parser(name, help=text)
        _add_io(p, checkpoint=True)
        p.add_argument("--tau", type=float)
        p.add_argument("--infer-mode", choices=INFER_MODES)
        p.add_argument("--eval-batch-size", type=int, help="context-mean chunk size in batch mode")
        p.add_argument("--predictions", help="write per-sample predictions (TSV)")
        p.add_argument("--config")

    p = sub.add_parser("sweep", help="grid over fusion coefficients")
    _add_io(p)
    _add_train_flags(p)
    p.add_argument("--grid", default="0.1,0.5,1", help="comma-separated values used for alpha, beta and gamma")
    return parser


def _load_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def resolve_train_config(args):
    """Defaults < ``--config`` file < explicit flags."""
    values = {}
    if getattr(args, "config", None):
        values.update(_load_json(args.config))
    cbpl = dict(values.pop("cbpl", {}) or {})
    fusion = list(values.pop("fusion", [0.1, 0.5, 1.0]))
    for flag, name in TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[name] = value
    if getattr(args, "no_shuffle", False):
        values["shuffle"] = False
    for flag, key in (("tg", "global_threshold"), ("q", "retention_ratio"), ("confidence_source", "confidence_source")):
        if getattr(args, flag, None) is not None:
            cbpl[key] = getattr(args, flag)
    for i, flag in enumerate(("alpha", "beta", "gamma")):
        if getattr(args, flag, None) is not None:
            fusion[i] = getattr(args, flag)
    unknown = set(values) - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    if "eta_max" not in values:
        # only training needs a learning rate; other commands get a placeholder
        if args.command in ("adapt", "sweep"):
            raise ConfigError("the peak learning rate is required: pass --lr or set eta_max in --config")
        values["eta_max"] = 1.0
    try:
        return TrainConfig(cbpl=CbplConfig(**cbpl), fusion=tuple(fusion), **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _inputs_section(args, features, labels, protos):
    section = {}
    if features is not None:
        section["features"] = {
            "path": os.path.basename(args.features),
            "n": int(features.shape[0]),
            "d": int(features.shape[1]),
            "has_labels": labels is not None,
        }
    if protos is not None:
        section["prototypes"] = {
            "path": os.path.basename(args.prototypes),
            "num_classes": protos.num_classes,
            "class_names": protos.class_names,
        }
    return section


def _load_inputs(args):
    features, labels = read_features(args.features)
    protos = read_prototypes(args.prototypes)
    if features.shape[1] != protos.dim:
        raise ConfigError(f"feature dim {features.shape[1]} != prototype dim {protos.dim}")
    if labels is not None and labels.size and labels.max() >= protos.num_classes:
        raise ConfigError(f"feature labels reach {labels.max()} but there are {protos.num_classes} classes")
    return features, labels, protos


def _write_predictions(path, preds, indices=None):
    rows = ["index\tlabel\tconfidence"]
    idx = range(len(preds)) if indices is None else indices
    for i, p in zip(idx, preds):
        rows.append(f"{i}\t{p.label}\t{p.confidence:.8f}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")


def _finish(args, report, protos=None, evaluation=None, trace=None, dataset=None, cfg=None):
    text = dumps_report(report)
    if args.report:
        emit_report(report, args.report)
    else:
        sys.stdout.write(text)
    if evaluation and getattr(args, "table", None):
        hist = None if dataset is None else class_histogram(dataset)
        thresholds = None if dataset is None else dataset.thresholds
        with open(args.table, "w", encoding="utf-8") as fh:
            fh.write(per_class_table(protos.class_names, evaluation, thresholds, hist))
    if evaluation and getattr(args, "figures_dir", None):
        from .plotting import render_report_figures

        render_report_figures(
            args.figures_dir,
            protos.class_names,
            evaluation,
            trace=trace,
            dataset=dataset,
            global_threshold=None if cfg is None else cfg.cbpl.global_threshold,
        )
    return 0


def _dry_run(resolved):
    sys.stdout.write(json.dumps(resolved, indent=2) + "\n")
    return 0


def cmd_synth(args):
    cfg = SynthConfig(
        num_classes=args.classes,
        dim=args.dim,
        n_per_class=args.n_per_class,
        prototype_spread=args.spread,
        intra_class_noise=args.noise,
        domain_shift=args.shift,
        translation_ratio=args.translation_ratio,
        max_cosine=args.max_cosine,
        seed=args.seed,
    )
    if args.dry_run:
        return _dry_run({"synth": cfg.to_dict(), "out_dir": args.out_dir})
    data = generate_synthetic(cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    write_features(os.path.join(args.out_dir, FEATURES_FILE), data.features, data.labels)
    write_prototypes(os.path.join(args.out_dir, PROTOTYPES_FILE), data.prototypes)
    with open(os.path.join(args.out_dir, SYNTH_CONFIG_FILE), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(cfg.to_dict(), indent=2) + "\n")
    return 0


def cmd_zeroshot(args):
    cfg = resolve_train_config(args)
    features, labels, protos = _load_inputs(args)
    if args.dry_run:
        return _dry_run({"tau": cfg.tau})
    preds = classify(features, protos, cfg.tau)
    evaluation = None
    if labels is not None:
        evaluation = {"zero_shot": evaluate(preds, labels, protos.num_classes)}
    counts = np.bincount(preds.labels, minlength=protos.num_classes)
    report = build_report(
        "zeroshot",
        {"tau": cfg.tau},
        _inputs_section(args, features, labels, protos),
        evaluation=evaluation,
        extra={"predicted_histogram": dict(zip(protos.class_names, counts.tolist()))},
    )
    if args.predictions:
        _write_predictions(args.predictions, preds)
    return _finish(args, report, protos, evaluation)


def cmd_pseudolabel(args):
    cfg = resolve_train_config(args)
    features, labels, protos = _load_inputs(args)
    if args.dry_run:
        return _dry_run({"tau": cfg.tau, "cbpl": cfg.to_dict()["cbpl"]})
    preds = classify(features, protos, cfg.tau)
    dataset = cbpl_filter(preds, cfg.cbpl, protos.num_classes)
    report = build_report(
        "pseudolabel",
        {"tau": cfg.tau, "cbpl": cfg.to_dict()["cbpl"]},
        _inputs_section(args, features, labels, protos),
        pseudo_labels=pseudo_label_section(dataset, protos.class_names, labels),
    )
    if args.predictions:
        _write_predictions(args.predictions, [preds[int(i)] for i in dataset.indices], dataset.indices)
    return _finish(args, report)


def cmd_adapt(args):
    cfg = resolve_train_config(args)
    features, labels, protos = _load_inputs(args)
    if args.base_to_new and labels is None:
        raise ConfigError("--base-to-new needs a feature file with labels")
    if args.dry_run:
        return _dry_run(cfg.to_dict())

    zero_shot_preds = classify(features, protos, cfg.tau)
    dataset = prepare_data(features, protos, cfg, preds=zero_shot_preds)
    try:
        params, trace, dataset = adapt(features, protos, cfg, truth=labels, dataset=dataset)
    except DivergenceError as exc:
        if args.checkpoint and exc.params is not None:
            write_checkpoint(args.checkpoint, exc.params)
        raise
    if args.checkpoint:
        write_checkpoint(args.checkpoint, params)

    evaluation = None
    base_to_new = None
    if labels is not None:
        zero_shot = evaluate(zero_shot_preds, labels, protos.num_classes)
        adapted = evaluate(infer(params, features, protos, cfg.tau), labels, protos.num_classes)
        evaluation = {"zero_shot": zero_shot, "adapted": adapted}
        if args.base_to_new:
            result, _ = adapt_base_to_new(features, labels, protos, cfg, args.base_to_new, zero_shot=zero_shot)
            base_to_new = (args.base_to_new, result)
    report = build_report(
        "adapt",
        cfg.to_dict(),
        _inputs_section(args, features, labels, protos),
        pseudo_labels=pseudo_label_section(dataset, protos.class_names, labels),
        trace=trace.to_dict(timings=args.timings),
        evaluation=evaluation,
        base_to_new=base_to_new,
    )
    return _finish(args, report, protos, evaluation, trace, dataset, cfg)


def _run_trained(args, command):
    cfg = resolve_train_config(args)
    features, labels, protos = _load_inputs(args)
    params = read_checkpoint(args.checkpoint)
    if params.dim != protos.dim:
        raise ConfigError(f"checkpoint dim {params.dim} != prototype dim {protos.dim}")
    mode = args.infer_mode or params.mode
    if mode == "frozen-prototype" and params.frozen_mean is None:
        raise StateError("frozen-prototype inference needs a checkpoint with a stored context mean")
    if command == "eval" and labels is None:
        raise ConfigError("eval needs a feature file with labels")
    resolved = {"tau": cfg.tau, "infer_mode": mode, "eval_batch_size": args.eval_batch_size}
    if args.dry_run:
        return _dry_run(resolved)
    preds = infer(params, features, protos, cfg.tau, mode=mode, batch_size=args.eval_batch_size)
    if args.predictions:
        _write_predictions(args.predictions, preds)
    evaluation = None
    if labels is not None:
        evaluation = {"adapted": evaluate(preds, labels, protos.num_classes)}
    counts = np.bincount(preds.labels, minlength=protos.num_classes)
    report = build_report(
        command,
        resolved,
        _inputs_section(args, features, labels, protos) | {"checkpoint": os.path.basename(args.checkpoint)},
        evaluation=evaluation,
        extra={"predicted_histogram": dict(zip(protos.class_names, counts.tolist()))},
    )
    return _finish(args, report, protos, evaluation)


def cmd_eval(args):
    return _run_trained(args, "eval")


def cmd_infer(args):
    return _run_trained(args, "infer")


def cmd_sweep(args):
    cfg = resolve_train_config(args)
    features, labels, protos = _load_inputs(args)
    if labels is None:
        raise ConfigError("sweep needs a feature file with labels")
    values = [float(v) for v in args.grid.split(",")]
    if args.dry_run:
        return _dry_run(cfg.to_dict() | {"grid": values})
    dataset = prepare_data(features, protos, cfg)
    grid = {}
    for alpha, beta, gamma in itertools.product(values, repeat=3):
        run_cfg = TrainConfig(**(cfg.to_dict() | {"fusion": (alpha, beta, gamma)}))
        params, _, _ = adapt(features, protos, run_cfg, dataset=dataset)
        grid[(alpha, beta, gamma)] = evaluate(infer(params, features, protos, cfg.tau), labels).average
    zero_shot = evaluate(classify(features, protos, cfg.tau), labels, protos.num_classes).average
    rows = [{"alpha": a, "beta": b, "gamma": g, "average_accuracy": acc} for (a, b, g), acc in grid.items()]
    report = build_report(
        "sweep",
        cfg.to_dict(),
        _inputs_section(args, features, labels, protos),
        extra={"zero_shot_average_accuracy": zero_shot, "grid": rows},
    )
    if args.table:
        with open(args.table, "w", encoding="utf-8") as fh:
            fh.write("alpha\tbeta\tgamma\taverage_accuracy\n")
            for r in rows:
                fh.write(f"{r['alpha']:g}\t{r['beta']:g}\t{r['gamma']:g}\t{r['average_accuracy']:.6f}\n")
    if args.figures_dir:
        from .plotting import plot_fusion_grid

        os.makedirs(args.figures_dir, exist_ok=True)
        plot_fusion_grid(grid, os.path.join(args.figures_dir, "fusion_grid.png"))
    args.table = None
    args.figures_dir = None
    return _finish(args, report)


COMMANDS = {
    "synth": cmd_synth,
    "zeroshot": cmd_zeroshot,
    "pseudolabel": cmd_pseudolabel,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "sweep": cmd_sweep,
}


def _fail(kind, message, code):
    message = " ".join(str(message).split())
    sys.stderr.write(f"error: {kind}: {message}\n")
    return code


def run(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("UsageError", exc, 2)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    logging.captureWarnings(True)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](args)
    except (AdaptError, OSError, json.JSONDecodeError) as exc:
        return _fail(type(exc).__name__, exc, 1)


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
