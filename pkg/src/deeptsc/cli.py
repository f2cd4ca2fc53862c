"""Command-line entry point: ``deeptsc <command> [--flags]``.

Every command accepts ``--config FILE`` (flat ``key = value`` lines using the
flag names); explicit flags override the file. Failures print one JSON line
on stderr and exit with 1 (usage), 2 (data) or 3 (numeric failure).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adversarial import AttackConfig, adversarial_train, attack_dataset, export_adversarial
from .config import ConfigError, read_kv
from .datasets import (DataError, LabeledDataset, find_split, generate_synthetic, load_mts_dir,
                       load_split_dir, load_ucr, make_dataset, prepare, write_ucr)
from .elastic import (augment_dataset, dataset_similarity, dilate, nlts, select_transfer_source,
                      write_schedule_csv, write_similarity_csv)
from .interpret import cam, euclidean_distances, gap_features, mds, write_cam_csv, write_mds_csv
from .models import (ModelFormatError, ModelSpec, ModelState, build_model, ensemble_predict,
                     load_model, predict, save_model)
from .stats import format_report, read_results_csv, wilcoxon_holm, write_report_csv
from .training import TrainConfig, TrainingDiverged, fine_tune, train

log = logging.getLogger("deeptsc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# data helpers ----------------------------------------------------------------------------------

def _load_any(path, split: str = "TEST") -> LabeledDataset:
    p = Path(path)
    if p.is_file():
        return load_ucr(p)
    if not p.is_dir():
        raise DataError(f"{p}: no such file or directory")
    if (p / "labels.txt").exists():
        return load_mts_dir(p)
    return load_ucr(find_split(p, split))


def _load_splits(path) -> tuple[LabeledDataset, LabeledDataset | None]:
    p = Path(path)
    if p.is_file():
        return load_ucr(p), None
    if not p.is_dir():
        raise DataError(f"{p}: no such file or directory")
    try:
        return load_split_dir(p)
    except DataError:
        return _load_any(p, "TRAIN"), None


def _prepare_for(state: ModelState, data: LabeledDataset) -> LabeledDataset:
    length = state.meta.get("train_length")
    return prepare(data, int(length) if length else None)


def _label_values(state: ModelState) -> list[str]:
    raw = state.meta.get("label_values", "")
    return raw.split(",") if raw else [str(k) for k in range(state.spec.n_classes)]


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _spec_from(args, data: LabeledDataset) -> ModelSpec:
    kw = dict(architecture=args.arch, input_dims=data.n_dims, n_classes=data.n_classes)
    if args.arch == "mlp":
        kw["input_length"] = data.lengths[0]
    if args.arch == "inception":
        kw.update(depth=args.depth, n_filters=args.n_filters, bottleneck_size=args.bottleneck_size,
                  use_residual=not args.no_residual, use_bottleneck=not args.no_bottleneck)
        if args.kernel_sizes:
            kw["kernel_sizes"] = tuple(int(k) for k in args.kernel_sizes.split(","))
    return ModelSpec(**kw)


def _train_config(args, arch: str) -> TrainConfig:
    overrides = dict(seed=args.seed, lr=args.lr, val_fraction=args.val_fraction,
                     max_seconds=args.max_seconds, loss=args.loss)
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.val_fraction > 0:
        overrides["checkpoint"] = "best_val_loss"
    return TrainConfig.for_architecture(arch, **overrides)


def _stamp(state: ModelState, data: LabeledDataset) -> ModelState:
    state.meta.update(dataset=data.name, train_length=str(data.lengths[0]),
                      label_values=",".join(f"{v:g}" for v in data.label_values))
    return state


def _accuracy_line(**values) -> str:
    return " ".join(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}" for k, v in values.items())


def _test_accuracy(state: ModelState, test: LabeledDataset | None) -> float | None:
    if test is None:
        return None
    x = _prepare_for(state, test).as_array()
    return float(np.mean(predict(state, x).argmax(axis=1) == test.labels))


# commands -----------------------------------------------------------------------------------------

def cmd_synth(args) -> int:
    positions = [int(p) for p in args.positions.split(",")] if args.positions else None
    data = generate_synthetic(args.n, args.length, args.classes, positions, seed=args.seed,
                              n_test_per_class=args.n_test, name=args.name)
    out = _out_dir(args)
    write_ucr(data.train, out / f"{args.name}_TRAIN.tsv")
    write_ucr(data.test, out / f"{args.name}_TEST.tsv")
    with open(out / "windows.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "start", "end"])
        for c, (lo, hi) in enumerate(data.windows):
            w.writerow([c, lo, hi])
    print(f"wrote {len(data.train)} train and {len(data.test)} test series to {out}")
    return EXIT_OK


def _fit(args, train_set: LabeledDataset, seed: int) -> tuple[ModelState, object]:
    state = build_model(_spec_from(args, train_set), seed=seed)
    return train(_stamp(state, train_set), train_set, _train_config(args, args.arch))


def cmd_train(args) -> int:
    train_raw, test_raw = _load_splits(args.data)
    train_set = prepare(train_raw)
    best, report = _fit(args, train_set, args.seed)
    out = _out_dir(args)
    save_model(best, out / f"{args.name}.tscm")
    report.write_csv(out / "report.csv")
    fields = dict(model=out / f"{args.name}.tscm", epochs=len(report.train_loss),
                  checkpoint_epoch=report.checkpoint_epoch, train_loss=min(report.monitored))
    acc = _test_accuracy(best, test_raw)
    if acc is not None:
        fields["test_accuracy"] = acc
    print(_accuracy_line(**fields))
    return EXIT_OK


def cmd_ensemble_train(args) -> int:
    train_raw, test_raw = _load_splits(args.data)
    train_set = prepare(train_raw)
    out = _out_dir(args)
    members = []
    for i in range(args.members):
        best, report = _fit(args, train_set, args.seed + i)
        save_model(best, out / f"{args.name}_{i}.tscm")
        report.write_csv(out / f"report_{i}.csv")
        members.append(best)
    if test_raw is not None:
        x = _prepare_for(members[0], test_raw).as_array()
        accs = [float(np.mean(predict(m, x).argmax(axis=1) == test_raw.labels)) for m in members]
        ens = float(np.mean(ensemble_predict(members, x).argmax(axis=1) == test_raw.labels))
        print(_accuracy_line(ensemble_accuracy=ens, median_member_accuracy=float(np.median(accs))))
    return EXIT_OK


def _write_predictions(path: Path, probs: np.ndarray, labels: list[str]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "predicted"] + [f"p_{v}" for v in labels])
        for i, row in enumerate(probs):
            w.writerow([i, labels[int(row.argmax())]] + [repr(float(p)) for p in row])


def _predict_common(args, models: list[ModelState]) -> int:
    data = _load_any(args.data, args.split)
    x = _prepare_for(models[0], data).as_array()
    probs = predict(models[0], x) if len(models) == 1 else ensemble_predict(models, x)
    out = _out_dir(args)
    _write_predictions(out / "predictions.csv", probs, _label_values(models[0]))
    print(_accuracy_line(n=len(x), accuracy=float(np.mean(probs.argmax(axis=1) == data.labels))))
    return EXIT_OK


def cmd_predict(args) -> int:
    return _predict_common(args, [load_model(args.model)])


def _model_paths(spec: str) -> list[Path]:
    p = Path(spec)
    if p.is_dir():
        paths = sorted(p.glob("*.tscm"))
    else:
        paths = [Path(s) for s in spec.split(",") if s]
    if not paths:
        raise DataError(f"{spec}: no model files")
    return paths


def cmd_ensemble_predict(args) -> int:
    return _predict_common(args, [load_model(p) for p in _model_paths(args.models)])


def cmd_evaluate(args) -> int:
    state = load_model(args.model)
    data = _load_any(args.data, args.split)
    acc = _test_accuracy(state, data)
    print(_accuracy_line(dataset=data.name, n=len(data), accuracy=acc))
    return EXIT_OK


def cmd_fine_tune(args) -> int:
    pretrained = load_model(args.model)
    train_raw, test_raw = _load_splits(args.data)
    target = prepare(train_raw)
    cfg = _train_config(args, pretrained.spec.architecture)
    best, report = fine_tune(pretrained, target, cfg)
    best = _stamp(best, target)
    best.meta["source"] = pretrained.meta.get("dataset", "")
    out = _out_dir(args)
    save_model(best, out / f"{args.name}.tscm")
    report.write_csv(out / "report.csv")
    fields = dict(model=out / f"{args.name}.tscm", checkpoint_epoch=report.checkpoint_epoch)
    acc = _test_accuracy(best, test_raw)
    if acc is not None:
        fields["test_accuracy"] = acc
    print(_accuracy_line(**fields))
    return EXIT_OK


def cmd_similarity(args) -> int:
    dirs = [d for d in args.data.split(",") if d]
    if len(dirs) < 2:
        raise DataError("similarity needs at least two datasets")
    datasets = [prepare(_load_splits(d)[0]) for d in dirs]
    matrix = dataset_similarity(datasets, iterations=args.iterations)
    out = _out_dir(args)
    write_similarity_csv(matrix, out / "similarity.csv")
    if args.target:
        if args.target not in matrix.names:
            raise DataError(f"unknown target dataset {args.target!r}")
        cands = [n for n in matrix.names if n != args.target]
        for name, dist in select_transfer_source(args.target, cands, args.k, matrix):
            print(f"source={name} distance={dist:.17g}")
    return EXIT_OK


def cmd_augment(args) -> int:
    train_raw, test_raw = _load_splits(args.data)
    grown = augment_dataset(prepare(train_raw), seed=args.seed, iterations=args.iterations)
    out = _out_dir(args)
    name = f"{train_raw.name}_aug"
    write_ucr(grown, out / f"{name}_TRAIN.tsv")
    if test_raw is not None:
        write_ucr(test_raw, out / f"{name}_TEST.tsv")
    print(_accuracy_line(original=len(train_raw), augmented=len(grown)))
    return EXIT_OK


def _attack_config(args) -> AttackConfig:
    return AttackConfig(args.method, args.eps, args.iterations, args.alpha)


def cmd_attack(args) -> int:
    state = load_model(args.model)
    data = _load_any(args.data, args.split)
    prepared = _prepare_for(state, data)
    source = load_model(args.source_model) if args.source_model else None
    adv, clean, adv_acc = attack_dataset(state, prepared, _attack_config(args), source=source)
    path = export_adversarial(adv, prepared, _out_dir(args), split=args.split)
    print(_accuracy_line(clean_accuracy=clean, adversarial_accuracy=adv_acc,
                         flipped=int(adv.flipped.sum()), file=path))
    return EXIT_OK


def cmd_adv_train(args) -> int:
    train_raw, test_raw = _load_splits(args.data)
    train_set = prepare(train_raw)
    state = _stamp(build_model(_spec_from(args, train_set), seed=args.seed), train_set)
    best, report = adversarial_train(state, train_set, _train_config(args, args.arch),
                                     _attack_config(args), advprop=not args.no_advprop)
    out = _out_dir(args)
    save_model(best, out / f"{args.name}.tscm")
    report.write_csv(out / "report.csv")
    fields = dict(model=out / f"{args.name}.tscm", advprop=not args.no_advprop)
    acc = _test_accuracy(best, test_raw)
    if acc is not None:
        fields["test_accuracy"] = acc
    print(_accuracy_line(**fields))
    return EXIT_OK


def cmd_cam(args) -> int:
    state = load_model(args.model)
    data = _prepare_for(state, _load_any(args.data, args.split))
    if not 0 <= args.index < len(data):
        raise DataError(f"series index {args.index} out of range [0, {len(data)})")
    series = data.series[args.index]
    m = cam(state, series, class_id=args.class_id,
            normalization="minmax" if args.minmax else "raw", smoothing=args.smooth)
    out = _out_dir(args)
    write_cam_csv(out / "cam.csv", m, series[0])
    print(_accuracy_line(index=args.index, class_id=m.class_id, argmax=int(m.values.argmax())))
    return EXIT_OK


def cmd_mds(args) -> int:
    state = load_model(args.model)
    data = _prepare_for(state, _load_any(args.data, args.split))
    emb = mds(euclidean_distances(gap_features(state, data.as_array())), seed=args.seed)
    out = _out_dir(args)
    write_mds_csv(out / "mds.csv", emb)
    print(_accuracy_line(points=len(data), stress=emb.stress, iterations=emb.iterations))
    return EXIT_OK


def cmd_nlts(args) -> int:
    data = _load_any(args.data, args.split)
    if args.class_id is not None:
        members = [int(i) for i in np.flatnonzero(data.labels == args.class_id)]
    else:
        members = list(range(len(data)))
    if args.max_series:
        members = members[:args.max_series]
    series = [data.series[i] for i in members]
    average, schedule = nlts(series, iterations=args.iterations)
    out = _out_dir(args)
    np.savetxt(out / "average.csv", average, delimiter=",", fmt="%.17g")  # one row per dimension
    dilated = []
    for i, s, counts in zip(members, series, schedule.counts):
        write_schedule_csv(counts, out / f"schedule_{i}.csv")
        dilated.append(dilate(s, counts))
    if data.n_dims == 1:
        write_ucr(make_dataset(dilated, data.labels[members], n_classes=data.n_classes,
                               name=f"{data.name}_nlts", label_values=data.label_values),
                  out / "dilated.tsv")
    print(_accuracy_line(series=len(series), target_length=schedule.target_length))
    return EXIT_OK


def cmd_compare(args) -> int:
    _, names, table = read_results_csv(args.results)
    report = wilcoxon_holm(table, names, alpha=args.alpha)
    text = format_report(report)
    out = _out_dir(args)
    (out / "comparison.txt").write_text(text)
    write_report_csv(report, out)
    sys.stdout.write(text)
    return EXIT_OK


# parser ---------------------------------------------------------------------------------------------

def _add_model_flags(p):
    p.add_argument("--arch", choices=("fcn", "resnet", "inception", "mlp"), default="fcn")
    p.add_argument("--depth", type=int, default=6)
    p.add_argument("--n-filters", type=int, default=32)
    p.add_argument("--kernel-sizes", default="")
    p.add_argument("--bottleneck-size", type=int, default=32)
    p.add_argument("--no-residual", action="store_true")
    p.add_argument("--no-bottleneck", action="store_true")


def _add_train_flags(p):
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--loss", choices=("cross_entropy", "mse"), default="cross_entropy")
    p.add_argument("--val-fraction", type=float, default=0.0)
    p.add_argument("--max-seconds", type=float)
    p.add_argument("--name", default="model")


def _add_attack_flags(p):
    p.add_argument("--method", choices=("fgsm", "bim"), default="fgsm")
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--alpha", type=float)


def build_parser() -> tuple[_Parser, dict[str, _Parser]]:
    parser = _Parser(prog="deeptsc", description="Deep time series classification toolkit.")
    parser.add_argument("--version", action="version", version=f"deeptsc {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subs: dict[str, _Parser] = {}

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config")
        p.add_argument("--out", default=".")
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = command("synth", cmd_synth, "generate the pattern-position synthetic dataset")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--length", type=int, default=128)
    p.add_argument("--n", type=int, default=64, help="training series per class")
    p.add_argument("--n-test", type=int, help="test series per class (default: --n)")
    p.add_argument("--positions", default="", help="comma-separated window starts, one per class")
    p.add_argument("--name", default="Synthetic")

    p = command("train", cmd_train, "train one model")
    _add_train_flags(p)
    _add_model_flags(p)

    p = command("ensemble-train", cmd_ensemble_train, "train members with seeds seed..seed+n-1")
    _add_train_flags(p)
    _add_model_flags(p)
    p.add_argument("--members", type=int, default=5)
    p.set_defaults(arch="inception")

    for name, func, flag in (("predict", cmd_predict, "--model"),
                             ("ensemble-predict", cmd_ensemble_predict, "--models"),
                             ("evaluate", cmd_evaluate, "--model")):
        p = command(name, func, f"{name.replace('-', ' ')} on a dataset")
        p.add_argument(flag, required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", default="TEST")

    p = command("fine-tune", cmd_fine_tune, "transfer a trained model to a new dataset")
    _add_train_flags(p)
    p.add_argument("--model", required=True)

    p = command("similarity", cmd_similarity, "DTW distance between dataset prototypes")
    p.add_argument("--data", required=True, help="comma-separated dataset folders")
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--target", default="")
    p.add_argument("--k", type=int, default=1)

    p = command("augment", cmd_augment, "weighted-DBA data augmentation")
    p.add_argument("--data", required=True)
    p.add_argument("--iterations", type=int, default=10)

    p = command("attack", cmd_attack, "FGSM/BIM attack on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--source-model", default="")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="TEST")
    _add_attack_flags(p)

    p = command("adv-train", cmd_adv_train, "adversarial training (AdvProp by default)")
    _add_train_flags(p)
    _add_model_flags(p)
    _add_attack_flags(p)
    p.add_argument("--no-advprop", action="store_true")

    p = command("cam", cmd_cam, "class activation map of one series")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="TEST")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--class-id", type=int)
    p.add_argument("--minmax", action="store_true")
    p.add_argument("--smooth", action="store_true")

    p = command("mds", cmd_mds, "2-D MDS of pooled features")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="TEST")

    p = command("nlts", cmd_nlts, "multiple alignment onto the DBA average")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="TRAIN")
    p.add_argument("--class-id", type=int)
    p.add_argument("--max-series", type=int)
    p.add_argument("--iterations", type=int, default=10)

    p = command("compare", cmd_compare, "Friedman + Wilcoxon/Holm comparison of classifiers")
    p.add_argument("--results", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    return parser, subs


def _bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"cannot parse {value!r} as a boolean")


def _apply_config(sub: _Parser, path: str) -> None:
    """Install values from a config file as defaults of ``sub``."""
    values = read_kv(path)
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config", "func")}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise UsageError(f"unknown config keys in {path}: {unknown}")
    for key, raw in values.items():
        action = actions[key]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            value = _bool(raw)
        elif action.type is not None:
            try:
                value = action.type(raw)
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {raw!r}") from None
        else:
            value = raw
        if action.choices is not None and value not in action.choices:
            raise ConfigError(f"{key}: {value!r} not in {sorted(action.choices)}")
        action.default = value
        action.required = False


def parse_args(argv):
    parser, subs = build_parser()
    argv = list(argv)
    if argv and argv[0] in subs and "--config" in argv:
        i = argv.index("--config")
        if i + 1 >= len(argv):
            raise UsageError("--config needs a path")
        _apply_config(subs[argv[0]], argv[i + 1])
    return parser.parse_args(argv)


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "code": code, "message": str(message)}) + "\n")
    return code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except (ConfigError, OSError) as exc:
        return _fail(EXIT_USAGE, "config", exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TrainingDiverged, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)
    except (DataError, ModelFormatError, FileNotFoundError, IsADirectoryError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except (ValueError, ConfigError) as exc:
        return _fail(EXIT_DATA, "invalid", exc)


if __name__ == "__main__":
    sys.exit(main())
