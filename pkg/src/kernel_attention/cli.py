"""Command-line entry point: ``kernel-attention <subcommand> ...``.

Exit codes: 0 success, 1 file I/O failure, 2 bad arguments, 3 numeric failure.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from .attention import AttentionEngine, fd_gradcheck, init_head_params
from .densities import write_density_csv
from .errors import ArgumentError, NumericError
from .pipeline import (
    Model,
    RunConfig,
    SyntheticDataset,
    export_density,
    fit_density_from_points,
    generate_synthetic,
    read_weighted_points,
    train_demo,
    write_metrics,
)
from .value_function import read_timeseries_csv, write_timeseries_csv


def _config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _dataset(cfg):
    return generate_synthetic(cfg.seed, cfg.classes, cfg.train_per_class, cfg.keep_fraction, cfg.test_per_class)


def _require_out(args):
    if not args.out:
        raise ArgumentError("--out is required for this subcommand")
    return args.out


def cmd_demo_data(args):
    cfg = _config(args)
    out = _require_out(args)
    os.makedirs(out, exist_ok=True)
    ds = _dataset(cfg)
    with open(os.path.join(out, "labels.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["file", "label", "split"])
        for i, (s, y, sp) in enumerate(zip(ds.sequences, ds.labels, ds.split)):
            name = f"seq_{i:05d}.csv"
            write_timeseries_csv(s, os.path.join(out, name))
            w.writerow([name, int(y), sp])
    print(f"wrote {len(ds.sequences)} sequences to {out}")


def load_dataset_dir(path):
    with open(os.path.join(path, "labels.csv"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ArgumentError(f"{path}/labels.csv lists no sequences")
    seqs = [read_timeseries_csv(os.path.join(path, r["file"])) for r in rows]
    labels = np.array([int(r["label"]) for r in rows])
    split = np.array([r["split"] for r in rows])
    return SyntheticDataset(seqs, labels, split)


def cmd_train(args):
    cfg = _config(args)
    out = _require_out(args)
    ds = load_dataset_dir(args.data) if args.data else _dataset(cfg)
    result = train_demo(cfg, ds)
    os.makedirs(out, exist_ok=True)
    result["model"].save(os.path.join(out, "model.json"))
    write_metrics(result["metrics"], os.path.join(out, "metrics.json"))
    last = result["metrics"]["epochs"][-1]
    print(json.dumps({k: last[k] for k in sorted(last)}, sort_keys=True))


def cmd_fit_density(args):
    cfg = _config(args)
    out = _require_out(args)
    if not args.input:
        raise ArgumentError("--input (a t,w CSV) is required")
    t, w = read_weighted_points(args.input)
    d = fit_density_from_points(cfg, t, w)
    rows = write_density_csv(d, out, args.grid_points)
    print(f"wrote {rows} rows to {out}")


def cmd_export_density(args):
    out = _require_out(args)
    if not args.model or not args.input:
        raise ArgumentError("--model and --input are required")
    model = Model.load(args.model)
    series = read_timeseries_csv(args.input)
    rows = export_density(model, args.head, series, args.grid_points, out)
    print(f"wrote {rows} rows to {out}")


def cmd_gradcheck(args):
    cfg = _config(args)
    small = cfg.replace(heads=2, inducing_points=6, basis=6, bandwidth=0.12, panels=32, components=2)
    att = small.attention_config()
    engine = AttentionEngine(att, small.value_basis())
    rng = np.random.default_rng(small.seed)
    dv = 3
    scale = 1.0 if att.family.startswith("kernel") else 0.3
    params = init_head_params(att, dv, rng, scale=scale)
    if "b_sigma" in params.arrays:
        params.arrays["b_sigma"][:] = -2.0
    v = rng.normal(size=(2, dv))
    B = rng.normal(size=(2, 2, small.basis))
    report = fd_gradcheck(engine, params, v, B, seed=small.seed, step=args.step)
    doc = {
        "family": att.family,
        "max_rel_err": report["max_rel_err"],
        "location": [str(x) for x in report["location"]] if report["location"] else None,
        "checked": report["checked"],
        "skipped": len(report["skipped"]),
    }
    text = json.dumps(doc, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)


def build_parser():
    parser = argparse.ArgumentParser(prog="kernel-attention", description="Continuous kernel attention toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", help="output path")
        p.set_defaults(func=fn)
        return p

    add("demo-data", cmd_demo_data, "write the synthetic dataset as CSV files")
    p = add("train", cmd_train, "train encoder, attention and classifier")
    p.add_argument("--data", help="dataset directory written by demo-data")
    p = add("fit-density", cmd_fit_density, "fit a density to weighted points")
    p.add_argument("--input", help="CSV with header t,w")
    p.add_argument("--grid-points", type=int, default=1000)
    p = add("export-density", cmd_export_density, "export one head's attention density")
    p.add_argument("--model", help="model.json written by train")
    p.add_argument("--input", help="time series CSV (time,dim_0,...)")
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--grid-points", type=int, default=1000)
    p = add("gradcheck", cmd_gradcheck, "finite-difference check of the attention adjoints")
    p.add_argument("--step", type=float, default=1e-5)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except ArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
