"""Command-line entry points.

Subcommands: train, sweep, eval, report, check, data.  Exit codes:
0 success, 1 configuration error, 2 numerical failure (NaN/divergence),
3 check-suite failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint, config as config_mod, data as data_mod
from . import report, theory, tomo, training, verify
from .experiments import build_experiment

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_CHECK = 3

MNIST_URLS = [
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
]


def _load_cfg(args) -> dict:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "scale", None):
        overrides["scale"] = args.scale
    if args.config:
        return config_mod.load_config(args.config, overrides)
    return config_mod.parse_config("", overrides)


def _out_dir(args) -> Path:
    out = Path(args.out_dir or "runs/latest")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _final_row(bundle, model, cfg, result, elapsed) -> report.MetricsRow:
    scores = bundle.evaluate(model)
    return report.MetricsRow(
        regime=cfg["regime"], C=cfg["C"],
        accuracy_or_pixacc=scores[bundle.metric_key],
        l2_loss=scores["l2_loss"], cross_entropy=scores["cross_entropy"],
        steps=bundle.regime_config.steps, seed=cfg["seed"],
        wall_time=elapsed)


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    bundle = build_experiment(cfg)
    rc = bundle.regime_config
    model = bundle.fresh_model(rc.seed)
    t0 = time.perf_counter()
    steps_csv = out / "steps.csv"
    if cfg["regime"] == "sequential":
        result = training.train_sequential(bundle.source, model, rc,
                                           metrics_path=steps_csv,
                                           out_dir=out)
    else:
        training.pretrain(bundle.source, model, rc, out_dir=out)
        run_cfg = rc if cfg["regime"] == "joint" else None
        if cfg["regime"] == "end_to_end":
            result = training.train_end_to_end(bundle.source, model, rc,
                                               metrics_path=steps_csv,
                                               out_dir=out)
        else:
            result = training.train_joint(bundle.source, model, run_cfg,
                                          metrics_path=steps_csv,
                                          out_dir=out)
    elapsed = time.perf_counter() - t0
    row = _final_row(bundle, model, cfg, result, elapsed)
    report.emit_table([row], out / "metrics.csv")
    checkpoint.save_manifest(out / "manifest.json", experiment=cfg["experiment"],
                             regime=cfg["regime"], C=cfg["C"],
                             seed=cfg["seed"], steps=rc.steps,
                             scale=cfg["scale"])
    print(f"{cfg['regime']} done in {elapsed:.1f}s: "
          f"{bundle.metric_key}={row.accuracy_or_pixacc:.4f} "
          f"l2={row.l2_loss:.6g} ce={row.cross_entropy:.6g}")
    print(f"outputs in {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    bundle = build_experiment(cfg)

    def eval_fn(model):
        return bundle.evaluate(model)[bundle.metric_key]

    def eval_parts(model):
        scores = bundle.evaluate(model)
        return scores["l2_loss"], scores["cross_entropy"]

    rows = training.sweep_C(bundle.source, bundle.model_factory,
                            bundle.regime_config, cfg["C_list"],
                            eval_fn=eval_fn, eval_parts_fn=eval_parts,
                            out_dir=out)
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, ["C", "d_x", "d_d", "task_metric",
                                     "failed"], extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    report.emit_plots(rows, out,
                      log_axes=cfg["experiment"] == "segmentation")
    for row in rows:
        status = "FAILED" if row["failed"] else "ok"
        print(f"C={row['C']:<8g} d_X={row['d_x']:<12.6g} "
              f"d_D={row['d_d']:<12.6g} metric={row['task_metric']:.4f} "
              f"[{status}]")
    print(f"outputs in {out}")
    return EXIT_NUMERICAL if any(r["failed"] for r in rows) else EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    bundle = build_experiment(cfg)
    model = bundle.fresh_model(bundle.regime_config.seed)
    merged = training._merged(model.theta, model.vartheta)
    loaded = checkpoint.load_params(args.checkpoint)
    for name, p in loaded.items():
        merged.assign_(name, p.data)
    scores = bundle.evaluate(model)
    row = report.MetricsRow(
        regime=cfg["regime"], C=cfg["C"],
        accuracy_or_pixacc=scores[bundle.metric_key],
        l2_loss=scores["l2_loss"], cross_entropy=scores["cross_entropy"],
        steps=0, seed=cfg["seed"], wall_time=0.0)
    report.emit_table([row], out / "eval.csv")
    print(f"{bundle.metric_key}={row.accuracy_or_pixacc:.4f} "
          f"l2={row.l2_loss:.6g} ce={row.cross_entropy:.6g} "
          f"({scores['count']} items)")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    sweep_path = Path(args.sweep or (out / "sweep.csv"))
    if not sweep_path.exists():
        print(f"no sweep table at {sweep_path}", file=sys.stderr)
        return EXIT_CONFIG
    rows = []
    with open(sweep_path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append({"C": float(rec["C"]), "d_x": float(rec["d_x"]),
                         "d_d": float(rec["d_d"])})
    paths = report.emit_plots(rows, out,
                              log_axes=cfg["experiment"] == "segmentation")
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_check(args) -> int:
    out = Path(args.out_dir) if args.out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    ok = True
    suites = args.suite
    if "adjoint" in suites or "all" in suites:
        for r in verify.adjoint_suite():
            print(r)
            ok &= r.passed
    if "gradient" in suites or "all" in suites:
        for r in verify.gradient_suite():
            print(r)
            ok &= r.passed
    if "theory" in suites or "all" in suites:
        rows, suite_ok = theory.run_theory_suite(args.models, seed=args.seed
                                                 or 0)
        worst = max(max(r["equality_deviation"], r["independence_deviation"])
                    for r in rows if r["family"] == "conserving")
        flag = "pass" if suite_ok else "FAIL"
        print(f"[{flag}] theory suite: {len(rows)} models, "
              f"max conserving deviation {worst:.3e}")
        ok &= suite_ok
        if out:
            with open(out / "theory.csv", "w", newline="") as fh:
                writer = csv.DictWriter(fh, list(rows[0].keys()))
                writer.writeheader()
                writer.writerows(rows)
            print(f"wrote {out / 'theory.csv'}")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_data(args) -> int:
    if args.action == "download":
        return _data_download(args)
    if args.action == "validate":
        return _data_validate(args)
    if args.action == "generate":
        return _data_generate(args)
    raise AssertionError(args.action)


def _data_download(args) -> int:
    import urllib.request
    dest = Path(args.data_dir)
    dest.mkdir(parents=True, exist_ok=True)
    names = [f + ".gz" for f in data_mod.MNIST_FILES.values()]
    failures = []
    for name in names:
        target = dest / name
        if target.exists():
            print(f"have {target}")
            continue
        done = False
        for base in MNIST_URLS:
            url = base + name
            try:
                print(f"fetching {url}")
                urllib.request.urlretrieve(url, target)
                done = True
                break
            except OSError as e:
                print(f"  failed: {e}")
        if not done:
            failures.append(name)
    if failures:
        print(f"could not fetch: {', '.join(failures)}; download the "
              f"canonical IDX files manually into {dest}", file=sys.stderr)
        return EXIT_CONFIG
    return _data_validate(args)


def _data_validate(args) -> int:
    try:
        ds = data_mod.load_mnist(Path(args.data_dir))
    except (OSError, data_mod.MnistFormatError) as e:
        print(f"invalid MNIST data: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"ok: {len(ds.splits['train'])} train / "
          f"{len(ds.splits['validation'])} validation / "
          f"{len(ds.splits['test'])} test images")
    return EXIT_OK


def _data_generate(args) -> int:
    out = _out_dir(args)
    spec = data_mod.PhantomSpec(seed=args.seed or 0)
    ds = data_mod.make_phantom_dataset(spec, num_train=args.count,
                                       num_val=max(4, args.count // 5),
                                       num_test=max(4, args.count // 5))
    from .tensor import ParamSet, Tensor
    ps = ParamSet()
    ps.add("images", Tensor(ds.images))
    ps.add("masks", Tensor(ds.targets))
    checkpoint.save_params(ps, out / "phantoms.trkp")
    checkpoint.save_manifest(out / "phantoms.json", seed=spec.seed,
                             count=len(ds.images), size=spec.size,
                             contrast=spec.contrast,
                             splits={k: [int(v[0]), int(v[-1]) + 1]
                                     for k, v in ds.splits.items()})
    print(f"wrote {out / 'phantoms.trkp'} ({len(ds.images)} phantom pairs)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taskrec",
        description="joint tomographic reconstruction + task training")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", default=None)
        p.add_argument("--scale", choices=["desk", "full"], default=None)

    p = sub.add_parser("train", help="run one training regime")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sweep", help="joint training across a list of C")
    common(p)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="tables and plots from metrics CSVs")
    common(p)
    p.add_argument("--sweep", help="sweep.csv path (default <out-dir>/sweep.csv)")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("check", help="adjoint / gradient / theory suites")
    common(p, config=False)
    p.add_argument("suite", nargs="*", default=["all"],
                   choices=["all", "adjoint", "gradient", "theory"])
    p.add_argument("--models", type=int, default=1000,
                   help="random models for the theory suite")
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("data", help="download / validate / generate datasets")
    common(p, config=False)
    p.add_argument("action", choices=["download", "validate", "generate"])
    p.add_argument("--data-dir", default="data/mnist")
    p.add_argument("--count", type=int, default=100,
                   help="phantoms to generate")
    p.set_defaults(fn=cmd_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except config_mod.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (training.TrainingDiverged, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
