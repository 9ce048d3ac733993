"""Command-line interface.

Subcommands: synth-data, convert, train-gmm, train-cvae, train-gan, sample,
train-clf, augment-eval, report. All outputs are deterministic under fixed
seeds; timing goes to stderr only.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys

import numpy as np

from . import classifiers as clf
from . import cvae as cvae_mod
from . import gmm as gmm_mod
from . import harness
from . import icwgan as gan_mod
from . import nn
from .datasets import load_dataset, make_blob_dataset, save_dataset
from .volumes import Volume, apply_mask, compute_mask, write_volume


def _dims(text):
    parts = tuple(int(p) for p in text.split(","))
    if len(parts) != 3 or any(p < 1 for p in parts):
        raise argparse.ArgumentTypeError(f"dims must be three positive ints, got {text!r}")
    return parts


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def cmd_synth_data(args):
    dataset = make_blob_dataset(args.classes, args.per_class, args.dims, args.seed)
    manifest = save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} volumes and {manifest}")
    return 0


def cmd_convert(args):
    if args.input.endswith(".npy"):
        data = np.load(args.input)
        if data.ndim != 3:
            print(f"error: {args.input} holds a {data.ndim}-d array, need 3-d",
                  file=sys.stderr)
            return 1
    else:
        if args.dims is None:
            print("error: raw input requires --dims", file=sys.stderr)
            return 1
        raw = np.fromfile(args.input, dtype="<f4")
        expected = int(np.prod(args.dims))
        if raw.size != expected:
            print(f"error: raw payload holds {raw.size} floats, dims need {expected}",
                  file=sys.stderr)
            return 1
        data = raw.reshape(args.dims)
    write_volume(Volume(data.astype(np.float32)), args.out)
    print(f"wrote {args.out}")
    return 0


def _mask_from_manifest(dataset, strategy):
    return compute_mask(dataset.volumes, strategy=strategy)


def cmd_train_gmm(args):
    dataset = load_dataset(args.manifest)
    mask = _mask_from_manifest(dataset, args.mask_strategy)
    config = gmm_mod.EMConfig(num_components=args.components, seed=args.seed)
    model = gmm_mod.fit_class_gmms(dataset, mask, config)
    gmm_mod.save_gmm(model, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_train_cvae(args):
    dataset = load_dataset(args.manifest)
    block = _load_json(args.config) if args.config else {}
    block.setdefault("seed", args.seed)
    config = harness._cvae_config({"cvae": block}, args.seed)
    model, history = cvae_mod.train_cvae(dataset, config)
    cvae_mod.save_cvae(model, args.out)
    last = history.epochs[-1]
    print(f"wrote {args.out} (final loss {last.total:.4f})")
    return 0


def cmd_train_gan(args):
    dataset = load_dataset(args.manifest)
    block = _load_json(args.config) if args.config else {}
    block.setdefault("seed", args.seed)
    config = harness._gan_config({"icwgan": block}, args.seed)
    gen, disc, log = gan_mod.train_icwgan(dataset, config)
    gan_mod.save_gan(gen, disc, args.out, dataset.dims, dataset.num_classes, config)
    if args.log:
        log.write(args.log)
    print(f"wrote {args.out}")
    return 0


def cmd_sample(args):
    _, extra = nn.load_checkpoint(args.checkpoint)
    kind = (extra or {}).get("kind")
    if kind == "gmm":
        model = gmm_mod.load_gmm(args.checkpoint)
        volumes = model.sample_volumes(args.class_index, args.count, args.seed)
    elif kind == "cvae":
        model, _ = cvae_mod.load_cvae(args.checkpoint)
        volumes = cvae_mod.sample_cvae(model, args.class_index, args.count, args.seed)
    elif kind == "icwgan":
        gen, _, _ = gan_mod.load_gan(args.checkpoint)
        volumes = gan_mod.sample_gan(gen, args.class_index, args.count, args.seed)
    else:
        print(f"error: {args.checkpoint} is not a generator checkpoint", file=sys.stderr)
        return 1
    os.makedirs(args.out, exist_ok=True)
    records = []
    for i, vol in enumerate(volumes):
        name = f"sample_c{args.class_index}_{i:05d}.vvol"
        write_volume(vol, os.path.join(args.out, name))
        records.append(f"{name},{args.class_index}")
    with open(os.path.join(args.out, "manifest.csv"), "w") as fh:
        fh.write("\n".join(records) + "\n")
    print(f"wrote {len(volumes)} samples to {args.out}")
    return 0


def cmd_train_clf(args):
    dataset = load_dataset(args.manifest)
    if args.kind == "dnn":
        block = _load_json(args.config) if args.config else {}
        block.setdefault("seed", args.seed)
        config = harness._dnn_config({"dnn": block}, args.seed)
        model, _ = clf.train_dnn_classifier(dataset.stack(np.float32), dataset.labels,
                                            config, num_classes=dataset.num_classes)
        arrays = model.state_arrays()
        extra = {"kind": "dnn_classifier", "dims": list(dataset.dims),
                 "num_classes": dataset.num_classes,
                 "channels": list(config.channels), "dtype": config.dtype}
        nn.save_checkpoint(args.out, arrays, precision=config.dtype, extra=extra)
    else:
        mask = _mask_from_manifest(dataset, args.mask_strategy)
        features = np.asarray([apply_mask(v, mask) for v in dataset.volumes])
        model = clf.train_svm(features, dataset.labels, seed=args.seed, mask=mask)
        arrays = {"weights": model.weights, "biases": model.biases,
                  "mask": mask.bits.astype(np.float64)}
        extra = {"kind": "svm_classifier", "mask_dims": list(mask.dims),
                 "reg_c": model.reg_c}
        nn.save_checkpoint(args.out, arrays, precision="float64", extra=extra)
    print(f"wrote {args.out}")
    return 0


def _expand_cells(raw):
    """Cross-product of regimes, generators, and classifiers from one config."""
    regimes = raw.get("regime", list(harness.REGIMES))
    classifiers_ = raw.get("classifier", list(harness.CLASSIFIER_KINDS))
    generators = raw.get("generator", list(harness.GENERATOR_KINDS))
    if isinstance(regimes, str):
        regimes = [regimes]
    if isinstance(classifiers_, str):
        classifiers_ = [classifiers_]
    if isinstance(generators, str) or generators is None:
        generators = [generators]
    cells = []
    for regime in regimes:
        gens = generators if regime == "real_synth" else [None]
        for gen in gens:
            for c in classifiers_:
                cells.append((regime, gen, c))
    return cells


def cmd_augment_eval(args):
    raw = _load_json(args.config)
    cells = _expand_cells(raw)
    base = {k: v for k, v in raw.items() if k not in ("regime", "generator", "classifier")}
    if args.single_model:
        base["single_model"] = True
    out_dir = args.out or base.pop("output_dir", None) or "runs"
    base.pop("output_dir", None)
    os.makedirs(out_dir, exist_ok=True)
    dataset = harness.load_config_dataset(base["dataset"])
    reports = []
    for regime, gen, classifier in cells:
        cell_cfg = dict(base)
        cell_cfg["regime"] = regime
        cell_cfg["classifier"] = classifier
        if regime == "real_synth":
            cell_cfg["generator"] = gen
        else:
            cell_cfg["synth_per_class"] = 0
        if regime != "real_noise":
            cell_cfg["noise_variance"] = 0
            cell_cfg["noise_per_class"] = 0
        config = harness.ExperimentConfig.from_dict(cell_cfg)
        print(f"running {regime} / {gen or '-'} / {classifier}", file=sys.stderr)
        report = harness.run_regime(config, dataset=dataset, log=harness.log_stderr)
        reports.append(report)
        name = f"run_{regime}_{gen or 'none'}_{classifier}.json"
        harness.write_run_json(report, os.path.join(out_dir, name))
    with open(os.path.join(out_dir, "report.csv"), "w") as fh:
        fh.write(harness.report_rows(reports, "mean"))
    with open(os.path.join(out_dir, "variance.csv"), "w") as fh:
        fh.write(harness.report_rows(reports, "variance"))
    print(f"wrote {len(reports)} runs to {out_dir}")
    return 0


def cmd_report(args):
    paths = sorted(glob.glob(os.path.join(args.runs, "run_*.json")))
    if not paths:
        print(f"error: no run_*.json files under {args.runs}", file=sys.stderr)
        return 1
    runs = [harness.load_run_json(p) for p in paths]
    mean_csv = harness.rows_from_stored(runs, "mean")
    var_csv = harness.rows_from_stored(runs, "variance")
    with open(os.path.join(args.runs, "report.csv"), "w") as fh:
        fh.write(mean_csv)
    with open(os.path.join(args.runs, "variance.csv"), "w") as fh:
        fh.write(var_csv)
    sys.stdout.write(mean_csv)
    sys.stdout.write("variance:\n")
    sys.stdout.write(var_csv)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="volsynth",
                                     description="Volumetric synthesis-based "
                                                 "data-augmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the blob fixture dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=30)
    p.add_argument("--dims", type=_dims, default=(16, 16, 16))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("convert", help="convert .npy or raw float32 to VVOL")
    p.add_argument("--input", required=True)
    p.add_argument("--dims", type=_dims, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_convert)

    p = sub.add_parser("train-gmm", help="fit per-class mixtures")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--components", type=int, default=1)
    p.add_argument("--mask-strategy", default="nonconstant",
                   choices=["nonconstant", "background_border"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_train_gmm)

    p = sub.add_parser("train-cvae", help="train the conditional VAE")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON block of CVAE fields")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_train_cvae)

    p = sub.add_parser("train-gan", help="train the ICW-GAN")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON block of GAN fields")
    p.add_argument("--log", default=None, help="write the per-step training log here")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_train_gan)

    p = sub.add_parser("sample", help="class-conditional samples from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--class-index", type=int, required=True)
    p.add_argument("--count", "-n", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("train-clf", help="train a classifier on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--kind", choices=["dnn", "svm"], default="dnn")
    p.add_argument("--config", default=None)
    p.add_argument("--mask-strategy", default="nonconstant",
                   choices=["nonconstant", "background_border"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_clf)

    p = sub.add_parser("augment-eval", help="full augmentation sweep from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="output directory (default from config)")
    p.add_argument("--single-model", action="store_true",
                   help="paper-fidelity mode: one generator trained on the full "
                        "dataset, reused across folds (leaks fold information)")
    p.set_defaults(fn=cmd_augment_eval)

    p = sub.add_parser("report", help="aggregate stored runs into tables")
    p.add_argument("--runs", required=True)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    try:
        return args.fn(args)
    except (ValueError, KeyError, OSError, nn.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
