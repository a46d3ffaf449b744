"""Command-line driver: ``clnet <subcommand> ...``.

Exit codes: 0 success, 2 input error, 3 configuration error,
4 data-consistency error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import bench
from .classifier import TrainConfig, evaluate_accuracy, mlp_train_sgd, predict_classes
from .clustering import DEFAULT_N_PATCHES, dump_mosaic
from .datasets import (DATASET_MAGIC, LabeledDataset, load_cifar10_binary, load_cifar10_dir, load_raw_dataset,
                       load_tensor_dir, preprocess_contrastive, save_raw_dataset, subsample,
                       synthetic_bars_dataset, to_grayscale)
from .errors import ConfigurationError, DataConsistencyError, FormatError
from .layers import load_bank, save_bank
from .network import (PRESETS, Network, batch_features, build_clustered_network, build_network, load_network,
                      parse_key_values, preset, save_network, spec_from_text, spec_to_text,
                      train_cnn_supervised, network_header_text)
from .tensor import save_tensor
from .tracker import (SearchConfig, format_ground_truth, load_sequence, run_tracker, static_sequence,
                      translating_sequence, write_track_csv)

log = logging.getLogger("clnet")

EXIT_INPUT, EXIT_CONFIG, EXIT_DATA = 2, 3, 4


# -- helpers --------------------------------------------------------------------------

def _require(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"{p}: no such file or directory")


def load_dataset(path, kind: str = "auto") -> LabeledDataset:
    """CLD1 file, CIFAR-10 binary file or directory, or a directory of .clt tensors."""
    path = Path(path)
    _require(path)
    if kind == "auto":
        if path.is_dir():
            kind = "cifar" if (path / "test_batch.bin").exists() else "tensors"
        else:
            with open(path, "rb") as fh:
                kind = "raw" if fh.read(4) == DATASET_MAGIC else "cifar"
    if kind == "raw":
        return load_raw_dataset(path)
    if kind == "cifar":
        if path.is_dir():
            return load_cifar10_dir(path)[0]
        return load_cifar10_binary(path)
    if kind == "tensors":
        images = load_tensor_dir(path)
        return LabeledDataset(images, np.zeros(len(images), dtype=np.int64), 1, path.name)
    raise ConfigurationError(f"unknown dataset kind {kind!r}")


def _prepare(ds: LabeledDataset, planes: int, preprocess: bool) -> LabeledDataset:
    if ds.images.shape[1] != planes:
        if planes == 1:
            ds = LabeledDataset(to_grayscale(ds.images), ds.labels, ds.classes, ds.name)
        else:
            raise ConfigurationError(f"dataset has {ds.images.shape[1]} planes, network expects {planes}")
    return preprocess_contrastive(ds) if preprocess else ds


def _resolve_spec(args, extra: dict[str, str]):
    if getattr(args, "spec", None):
        _require(args.spec)
        text = Path(args.spec).read_text()
    else:
        text = spec_to_text(preset(args.preset))
    kv = parse_key_values(text)
    if getattr(args, "layers", None) is not None:
        n = int(args.layers)
        if n > int(kv["layers"]):
            raise ConfigurationError(f"spec has only {kv['layers']} layers")
        if n < int(kv["layers"]):
            kv["name"] = f"{kv['name']}-{n}l"
        kv["layers"] = str(n)
    if getattr(args, "k", None) is not None:
        kv["layer1.filters"] = str(args.k)
    if getattr(args, "k2", None) is not None and int(kv["layers"]) > 1:
        kv["layer2.filters"] = str(args.k2)
    kv.update(extra)
    kv["seed"] = str(args.seed)
    return spec_from_text("".join(f"{k} = {v}\n" for k, v in kv.items()))


def _write_manifest(path: Path, items: dict) -> None:
    path.write_text("".join(f"{k} = {v}\n" for k, v in items.items()))


# -- subcommands ----------------------------------------------------------------------

def cmd_learn_filters(args, extra) -> int:
    spec = _resolve_spec(args, extra)
    ds = _prepare(load_dataset(args.data, args.kind), spec.input_shape[0], not args.no_preprocess)
    if ds.images.shape[1:] != spec.input_shape:
        raise ConfigurationError(f"images are {ds.images.shape[1:]}, spec {spec.name} expects {spec.input_shape}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    random_layers = (1,) if args.random_layer2 else ()
    net = build_clustered_network(spec, ds.images, args.patches, normalize=not args.no_normalize,
                                  random_layers=random_layers)
    elapsed = time.perf_counter() - t0
    manifest = {"command": "learn-filters", "seed": args.seed, "spec": spec.name, "data": args.data,
                "images": len(ds), "patches": args.patches, "normalize": int(not args.no_normalize),
                "preprocess": int(not args.no_preprocess)}
    for i, bank in enumerate(net.banks, start=1):
        save_bank(out / f"layer{i}.clf", bank)
        dump_mosaic(bank, out / f"layer{i}.pgm")
        manifest[f"layer{i}"] = f"{bank.out_planes}x{bank.in_planes}x{bank.filter_h}x{bank.filter_w}"
        manifest[f"provenance.layer{i}"] = net.provenance[f"layer{i}"]
        print(f"layer {i}: {bank.out_planes} filters of {bank.in_planes}x{bank.filter_h}x{bank.filter_w}")
    save_network(out / "network.cln", net)
    manifest["network"] = "network.cln"
    _write_manifest(out / "manifest.txt", manifest)
    log.info("filter learning took %.2f s", elapsed)
    print(f"wrote {out}/network.cln")
    return 0


def _train_config(args) -> TrainConfig:
    return TrainConfig(args.lr, args.epochs, args.batch, args.momentum, args.seed,
                       None if args.early_stop <= 0 else args.early_stop)


def cmd_train(args, extra) -> int:
    _require(args.train, args.test, args.net)
    cfg = _train_config(args)
    metrics = []
    if args.mode == "cl":
        if not args.net:
            raise ConfigurationError("CL mode needs --net (the output of learn-filters)")
        base = load_network(args.net)
        spec = base.spec
        train = _prepare(load_dataset(args.train, args.kind), spec.input_shape[0], not args.no_preprocess)
        test = _prepare(load_dataset(args.test, args.kind), spec.input_shape[0], not args.no_preprocess) \
            if args.test else None
        if train.images.shape[1:] != spec.input_shape:
            raise ConfigurationError(f"images are {train.images.shape[1:]}, network expects {spec.input_shape}")
        if train.classes != spec.classes:
            raise ConfigurationError(f"dataset has {train.classes} classes, network has {spec.classes}")
        ftr = batch_features(base, train.images)
        fte = batch_features(base, test.images) if test is not None else None

        def on_epoch(epoch, m, loss):
            row = {"epoch": epoch + 1, "loss": loss, "train_accuracy": evaluate_accuracy(m, ftr, train.labels)}
            if fte is not None:
                row["test_accuracy"] = evaluate_accuracy(m, fte, test.labels)
            metrics.append(row)

        clf, _ = mlp_train_sgd(base.classifier, ftr, train.labels, cfg, on_epoch)
        prov = dict(base.provenance, classifier=f"trained seed={args.seed}")
        net = build_network(spec, base.banks, projection=base.projection, classifier=clf, provenance=prov)
    else:
        spec = _resolve_spec(args, extra)
        train = _prepare(load_dataset(args.train, args.kind), spec.input_shape[0], not args.no_preprocess)
        test = _prepare(load_dataset(args.test, args.kind), spec.input_shape[0], not args.no_preprocess) \
            if args.test else None
        if train.images.shape[1:] != spec.input_shape:
            raise ConfigurationError(f"images are {train.images.shape[1:]}, network expects {spec.input_shape}")

        def on_epoch(epoch, n, loss):
            row = {"epoch": epoch + 1, "loss": loss,
                   "train_accuracy": float(np.mean(n_predict(n, train) == train.labels))}
            if test is not None:
                row["test_accuracy"] = float(np.mean(n_predict(n, test) == test.labels))
            metrics.append(row)

        net, _ = train_cnn_supervised(spec, train.images, train.labels, cfg, on_epoch)
    save_network(args.out, net)
    if args.metrics:
        with open(args.metrics, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(metrics[0]))
            w.writeheader()
            w.writerows(metrics)
    last = metrics[-1]
    print(f"trained {len(metrics)} epochs; train accuracy {last['train_accuracy']:.4f}"
          + (f", test accuracy {last['test_accuracy']:.4f}" if "test_accuracy" in last else ""))
    print(f"wrote {args.out}")
    return 0


def n_predict(net: Network, ds: LabeledDataset) -> np.ndarray:
    return predict_classes(net.classifier, batch_features(net, ds.images))


def cmd_eval(args, extra) -> int:
    _require(args.net, args.data)
    net = load_network(args.net)
    if net.classifier is None:
        raise ConfigurationError(f"{args.net} has no classifier")
    ds = _prepare(load_dataset(args.data, args.kind), net.spec.input_shape[0], not args.no_preprocess)
    if ds.images.shape[1:] != net.spec.input_shape:
        raise ConfigurationError(f"images are {ds.images.shape[1:]}, network expects {net.spec.input_shape}")
    feats = batch_features(net, ds.images)
    acc = evaluate_accuracy(net.classifier, feats, ds.labels)
    pred = predict_classes(net.classifier, feats)
    classes = net.spec.classes
    confusion = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(confusion, (ds.labels, pred), 1)
    print(f"accuracy {acc:.4f} on {len(ds)} images")
    print("confusion (rows = true class, cols = predicted):")
    for c in range(classes):
        print(f"  {c:3d}: " + " ".join(f"{v:5d}" for v in confusion[c]))
    if args.out:
        Path(args.out).write_text(json.dumps({"accuracy": acc, "count": len(ds),
                                              "confusion": confusion.tolist()}, indent=2))
    return 0


def cmd_track(args, extra) -> int:
    _require(args.frames, args.truth, args.net)
    net = load_network(args.net) if args.net else build_network(_resolve_spec(args, extra))
    seq = load_sequence(args.frames, args.truth, args.name)
    search = SearchConfig(args.radius, args.stride)
    result = run_tracker(net, seq, search, args.tau)
    if args.out:
        write_track_csv(args.out, result)
    print("sequence,frames,precision")
    print(f"{result.name},{len(result.boxes)},{result.precision:.4f}")
    return 0


def cmd_bench(args, extra) -> int:
    reports = []
    if not args.network_only:
        reports.append(bench.bench_kernels(reps=args.reps, seed=args.seed, parallel=args.parallel))
    if args.network:
        reports.append(bench.bench_network_fps(args.network, reps=args.reps, seed=args.seed))
    results = [r for rep in reports for r in rep.results]
    report = bench.BenchReport(results, reports[0].environment)
    print(report.to_json() if args.json else report.table())
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(report.header)
            w.writerows(report.rows())
    return 1 if any(r.status != "ok" for r in results) else 0


def cmd_inspect(args, extra) -> int:
    _require(args.file)
    path = Path(args.file)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"CLF1":
        banks = [("bank", load_bank(path))]
    else:
        net = load_network(path)
        print(network_header_text(net), end="")
        banks = [(f"layer{i}", b) for i, b in enumerate(net.banks, start=1)]
        if net.projection is not None:
            banks.append(("projection", net.projection))
    for name, bank in banks:
        fans = sorted({len(r) for r in bank.table.rows})
        print(f"{name}: {bank.out_planes} filters {bank.in_planes}x{bank.filter_h}x{bank.filter_w} fan-in {fans}"
              f" weight range [{bank.weights.min():.4g}, {bank.weights.max():.4g}]")
        if args.mosaic_dir:
            Path(args.mosaic_dir).mkdir(parents=True, exist_ok=True)
            dump_mosaic(bank, Path(args.mosaic_dir) / f"{name}.pgm")
    return 0


def cmd_synth(args, extra) -> int:
    out = Path(args.out)
    if args.what == "bars":
        ds = synthetic_bars_dataset(args.classes, args.per_class, args.size, args.noise, args.seed, args.planes)
        save_raw_dataset(ds, out)
        print(f"wrote {len(ds)} images to {out}")
        return 0
    make = static_sequence if args.what == "static" else translating_sequence
    seq = make(frames=args.frames, seed=args.seed)
    out.mkdir(parents=True, exist_ok=True)
    (out / "frames").mkdir(exist_ok=True)
    for t, frame in enumerate(seq.frames):
        save_tensor(out / "frames" / f"{t:05d}.clt", frame)
    (out / "truth.txt").write_text(format_ground_truth(seq.ground_truth))
    print(f"wrote {len(seq.frames)} frames to {out}")
    return 0


# -- argument parsing -------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="root seed for every random choice")
    p.add_argument("--config", help="key = value file; keys are option names or network spec keys")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_spec(p: argparse.ArgumentParser, default: str) -> None:
    p.add_argument("--preset", default=default, choices=sorted(PRESETS))
    p.add_argument("--spec", help="network spec file (canonical key = value text); overrides --preset")
    p.add_argument("--layers", type=int, help="keep only the first N feature layers")


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kind", default="auto", choices=["auto", "raw", "cifar", "tensors"])
    p.add_argument("--no-preprocess", action="store_true", help="skip per-channel contrast normalization")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clnet", description="Clustering-learning networks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("learn-filters", help="learn filter banks by k-means")
    _add_common(p)
    _add_spec(p, "svhn-cl")
    _add_data(p)
    p.add_argument("--data", required=True)
    p.add_argument("--patches", type=int, default=DEFAULT_N_PATCHES)
    p.add_argument("--k", type=int, help="layer-1 filter count")
    p.add_argument("--k2", type=int, help="layer-2 filter count")
    p.add_argument("--no-normalize", action="store_true", help="install raw centroids as filters")
    p.add_argument("--random-layer2", action="store_true", help="random instead of clustered layer-2 filters")
    p.add_argument("--out", default="filters")
    p.set_defaults(func=cmd_learn_filters)

    p = sub.add_parser("train", help="train the classifier (cl) or the whole network (cnn)")
    _add_common(p)
    _add_spec(p, "svhn-cnn")
    _add_data(p)
    p.add_argument("--mode", choices=["cl", "cnn"], default="cl")
    p.add_argument("--net", help="network file with learned banks (cl mode)")
    p.add_argument("--train", required=True)
    p.add_argument("--test")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--early-stop", type=float, default=1.0, help="stop at this train accuracy (0 disables)")
    p.add_argument("--out", default="trained.cln")
    p.add_argument("--metrics", help="per-epoch CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test accuracy and confusion counts")
    _add_common(p)
    _add_data(p)
    p.add_argument("--net", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="JSON report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("track", help="one-shot tracking of a frame sequence")
    _add_common(p)
    _add_spec(p, "realtime-46")
    p.add_argument("--net", help="network file; a random preset network when omitted")
    p.add_argument("--frames", required=True, help="directory of numbered .clt or .pgm frames")
    p.add_argument("--truth", required=True, help="x,y,w,h per line, nan,nan,nan,nan when absent")
    p.add_argument("--name")
    p.add_argument("--radius", type=int, help="search radius in pixels (default 20%% of the diagonal)")
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--tau", type=float, default=0.5, help="IoU threshold for a correctly tracked frame")
    p.add_argument("--out", help="per-frame CSV with a summary block")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("bench", help="time SAD vs convolution and network frame rate")
    _add_common(p)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--network", default="realtime-46", help="preset to time end to end ('' to skip)")
    p.add_argument("--network-only", action="store_true")
    p.add_argument("--parallel", action="store_true", help="split output planes over CLNET_THREADS workers")
    p.add_argument("--json", action="store_true")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="print a network or bank file, optionally dump mosaics")
    _add_common(p)
    p.add_argument("file")
    p.add_argument("--mosaic-dir")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("synth", help="write synthetic datasets and tracking sequences")
    _add_common(p)
    p.add_argument("what", choices=["bars", "static", "translating"])
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--size", type=int, default=24)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--planes", type=int, default=1)
    p.add_argument("--frames", type=int, default=8)
    p.set_defaults(func=cmd_synth)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> tuple[list[str], dict[str, str]]:
    """Expand ``--config FILE`` into option tokens placed before the explicit flags."""
    if "--config" not in argv:
        return argv, {}
    i = argv.index("--config")
    if i + 1 >= len(argv):
        raise ConfigurationError("--config needs a file")
    path = argv[i + 1]
    _require(path)
    kv = parse_key_values(Path(path).read_text())
    sub = parser._subparsers._group_actions[0].choices[argv[0]]  # noqa: SLF001
    options = {a.dest: a for a in sub._actions if a.option_strings}  # noqa: SLF001
    tokens, extra = [], {}
    for key, value in kv.items():
        dest = key.replace("-", "_")
        if dest in options:
            action = options[dest]
            flag = action.option_strings[-1]
            if action.nargs == 0:
                if value.lower() in ("1", "true", "yes", "on"):
                    tokens.append(flag)
            else:
                tokens += [flag, value]
        else:
            extra[key] = value
    rest = argv[1:i] + argv[i + 2:]
    return [argv[0]] + tokens + rest, extra


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv, extra = _apply_config(parser, argv) if argv else (argv, {})
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if extra and args.command not in ("learn-filters", "train", "track"):
            raise ConfigurationError(f"unknown config keys: {', '.join(extra)}")
        return args.func(args, extra)
    except DataConsistencyError as exc:
        print(f"clnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigurationError as exc:
        print(f"clnet: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, FormatError, OSError) as exc:
        print(f"clnet: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
