"""Command-line entry point: simulate -> ingest -> featurize -> train ->
evaluate, plus the two sweeps and a gradient self-check.

Every file-writing command drops a ``*.manifest.json`` next to its
outputs recording the command, resolved arguments, package version,
kernel backend, and a wall-clock stamp.  The data files themselves stay
byte-reproducible for a fixed seed; the manifest is the only place the
clock appears.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from datetime import datetime, timezone

import numpy as np

from . import __version__, evalharness, kernels, sim
from .features import (FeatureSet, NormalizationStats, build_feature_set,
                       read_features_csv, write_features_csv)
from .model import (ArchitectureSpec, Model, ModelConfig, all_config_names,
                    gradcheck_model)
from .records import (DEFAULT_IDLE_GAP_S, DEFAULT_MAX_TRIP_GAP_S, MODE_NAMES,
                      PodDeployment, apply_roster, assemble_trips, load_roster,
                      parse_log_file, sessionize, write_log, write_roster,
                      write_trips_csv)
from .trainer import PseudoLabelConfig, TrainConfig, train_semisupervised, train_supervised


def _manifest(path: str, command: str, args: argparse.Namespace, **extra) -> None:
    skip = {"func"}
    payload = {
        "command": command,
        "args": {k: v for k, v in sorted(vars(args).items()) if k not in skip},
        "version": __version__,
        "backend": kernels.backend_name(),
        "written_utc": datetime.now(timezone.utc).isoformat(),
    }
    payload.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def cmd_simulate(args: argparse.Namespace) -> int:
    spec = sim.ScenarioSpec.load(args.scenario) if args.scenario else sim.ScenarioSpec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    out = _ensure_dir(args.out)
    result = sim.simulate(spec)

    write_log(result.records, os.path.join(out, "log.csv"))
    write_roster(result.roster, os.path.join(out, "roster.csv"))
    result.deployment.save(os.path.join(out, "deployment.json"))
    sim.write_truth_csv(result.truth, os.path.join(out, "truth_trips.csv"))
    spec.save(os.path.join(out, "scenario.json"))

    expected = result.expected_labelled_trips
    print(f"agents: {len(result.agents)}  records: {len(result.records)}")
    print("expected labelled trips: "
          + "  ".join(f"{MODE_NAMES[m]}={expected[m]}" for m in sorted(expected))
          + f"  unlabelled={result.expected_unlabelled_trips}")
    _manifest(os.path.join(out, "simulate.manifest.json"), "simulate", args,
              n_records=len(result.records), n_agents=len(result.agents))
    return 0


def _ingest_pipeline(log_path: str, roster_path: str | None, idle_gap: float,
                     max_trip_gap: float):
    parsed = parse_log_file(log_path)
    visits = sessionize(parsed.records, idle_gap)
    trips, report = assemble_trips(visits, max_trip_gap)
    roster = load_roster(roster_path) if roster_path else {}
    labelled, unlabelled = apply_roster(trips, roster)
    ordered = labelled + unlabelled
    return parsed, visits, ordered, report, len(labelled)


def cmd_ingest(args: argparse.Namespace) -> int:
    parsed, visits, trips, report, n_lab = _ingest_pipeline(
        args.log, args.roster, args.idle_gap, args.max_trip_gap)
    out = _ensure_dir(args.out)
    write_trips_csv(trips, os.path.join(out, "trips.csv"))
    print(f"records: {len(parsed.records)}  bad lines: {len(parsed.errors)}  "
          f"duplicates: {parsed.duplicates_dropped}")
    print(f"visits: {len(visits)}  trips: {report.emitted} "
          f"(labelled {n_lab}, unlabelled {report.emitted - n_lab})")
    print(f"dropped pairs: same_pod={report.dropped_same_pod} "
          f"overlap={report.dropped_nonpositive_gap} long_gap={report.dropped_long_gap}")
    _manifest(os.path.join(out, "ingest.manifest.json"), "ingest", args,
              n_records=len(parsed.records), n_bad_lines=len(parsed.errors),
              n_visits=len(visits), n_trips=report.emitted, n_labelled=n_lab,
              dropped_same_pod=report.dropped_same_pod,
              dropped_overlap=report.dropped_nonpositive_gap,
              dropped_long_gap=report.dropped_long_gap)
    return 0


def cmd_featurize(args: argparse.Namespace) -> int:
    deployment = PodDeployment.load(args.deployment)
    _, _, trips, _, _ = _ingest_pipeline(args.log, args.roster, args.idle_gap,
                                         args.max_trip_gap)
    fs = build_feature_set(trips, deployment)
    write_features_csv(fs, args.out)
    lab = int(np.sum(fs.y >= 0))
    print(f"features: {len(fs.trip_ids)} trips ({lab} labelled) -> {args.out}")
    _manifest(args.out + ".manifest.json", "featurize", args,
              n_trips=len(fs.trip_ids), n_labelled=lab)
    return 0


def _load_split_features(path: str) -> tuple[FeatureSet, FeatureSet]:
    fs = read_features_csv(path)
    return fs.split()


def cmd_train(args: argparse.Namespace) -> int:
    lab, unl = _load_split_features(args.features)
    if not len(lab.trip_ids):
        print("error: no labelled rows in features file", file=sys.stderr)
        return 1

    X_tr, y_tr = lab.X, lab.y
    X_val = y_val = None
    if args.val_fraction > 0:
        split_seed = int(np.random.SeedSequence(args.seed, spawn_key=(99,)).generate_state(1)[0])
        tr_idx, va_idx = evalharness.train_val_split(lab.y, args.val_fraction, split_seed)
        X_tr, y_tr = lab.X[tr_idx], lab.y[tr_idx]
        X_val, y_val = lab.X[va_idx], lab.y[va_idx]

    model = Model.build(ModelConfig.from_name(args.config),
                        ArchitectureSpec.from_name(args.arch),
                        args.seed, NormalizationStats.fit(X_tr))
    tc = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                     lr=args.lr, seed=args.seed)

    if args.sample_rate > 0 and len(unl.trip_ids):
        plc = PseudoLabelConfig(sample_rate=args.sample_rate, alpha_final=args.alpha_final,
                                t1_epoch=args.alpha_t1, t2_epoch=args.alpha_t2,
                                rounds=args.rounds)
        result = train_semisupervised(model, X_tr, y_tr, unl.X, tc, plc, X_val, y_val)
    else:
        result = train_supervised(model, X_tr, y_tr, tc, X_val, y_val)

    model.save(args.out)
    if args.trace:
        result.write_trace(args.trace)
    print(f"final train loss {result.final_train_loss:.4f}  "
          f"accuracy {100.0 * result.final_train_accuracy:.1f}%  -> {args.out}")
    _manifest(args.out + ".manifest.json", "train", args,
              n_labelled=len(lab.trip_ids), n_pool=len(unl.trip_ids),
              final_train_loss=result.final_train_loss)
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    model = Model.load(args.model)
    lab, _ = _load_split_features(args.features)
    if not len(lab.trip_ids):
        print("error: no labelled rows to evaluate", file=sys.stderr)
        return 1
    report = evalharness.evaluate_model(model, lab.X, lab.y)

    print("confusion (rows=actual, cols=predicted):")
    print("            " + "".join(f"{n:>8}" for n in MODE_NAMES))
    for i, name in enumerate(MODE_NAMES):
        print(f"{name:>12}" + "".join(f"{int(v):>8}" for v in report.confusion_matrix[i]))
    for i, name in enumerate(MODE_NAMES):
        print(f"{name:>12}  recall {report.recall_str()[i]:>6}  "
              f"precision {report.precision_str()[i]:>6}")
    print(f"accuracy {report.accuracy_pct:.1f}%")

    if args.json:
        payload = {
            "confusion_matrix": report.confusion_matrix.tolist(),
            "accuracy_pct": report.accuracy_pct,
            "recall_pct": report.recall_pct,
            "precision_pct": report.precision_pct,
        }
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        _manifest(args.json + ".manifest.json", "evaluate", args,
                  accuracy_pct=report.accuracy_pct)
    return 0


def cmd_sweep_config(args: argparse.Namespace) -> int:
    lab, _ = _load_split_features(args.features)
    result = evalharness.run_config_sweep(lab.X, lab.y, epochs=args.epochs,
                                          batch_size=args.batch_size,
                                          master_seed=args.seed,
                                          arch=ArchitectureSpec.from_name(args.arch),
                                          val_fraction=args.val_fraction)
    out = _ensure_dir(args.out)
    evalharness.write_report_csv(result.rows, os.path.join(out, "config_sweep.csv"))
    evalharness.write_summary_json(
        {"ranking": [{"config": c, "val_acc": a} for c, a in result.ranking],
         "best_config": result.best_config},
        os.path.join(out, "config_sweep_summary.json"))
    print("config ranking (best first):")
    for cfg_name, acc in result.ranking:
        print(f"  {cfg_name}  val_acc {acc:.1f}%")
    _manifest(os.path.join(out, "config_sweep.manifest.json"), "sweep-config", args,
              best_config=result.best_config)
    return 0


def cmd_sweep_arch(args: argparse.Namespace) -> int:
    lab, unl = _load_split_features(args.features)
    rates = tuple(float(r) for r in args.rates.split(","))
    archs = tuple(a.strip() for a in args.archs.split(","))
    result = evalharness.run_architecture_sweep(
        lab.X, lab.y, unl.X, epochs=args.epochs, batch_size=args.batch_size,
        master_seed=args.seed, k=args.folds,
        config=ModelConfig.from_name(args.config), arch_names=archs,
        sample_rates=rates, include_plain_baseline=not args.no_plain_baseline,
        jobs=args.jobs)
    out = _ensure_dir(args.out)
    evalharness.write_report_csv(result.rows, os.path.join(out, "arch_sweep.csv"))
    evalharness.write_summary_json(result.summary, os.path.join(out, "arch_sweep_summary.json"))
    best = result.best_cell
    print(f"cells: {len(result.summary)}  best: {best['cell']} "
          f"mean_val_acc {best['mean_val_acc']:.1f}% (std {best['std_val_acc']:.1f})")
    _manifest(os.path.join(out, "arch_sweep.manifest.json"), "sweep-arch", args,
              best_cell=best["cell"], best_mean_val_acc=best["mean_val_acc"])
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    rng = np.random.default_rng(args.seed)
    failures = 0
    for name in (args.configs.split(",") if args.configs else all_config_names()):
        config = ModelConfig.from_name(name.strip())
        # dropout stays in eval mode inside the check, so x01/x11 configs
        # exercise the same deterministic loss as their x00/x10 twins
        for lpb in (2, 3):
            arch = ArchitectureSpec(block_count=args.blocks, layers_per_block=lpb)
            model = Model.build(config, arch, seed=args.seed)
            X = rng.random((args.batch, model.n_in))
            y = rng.integers(0, 3, size=args.batch)
            report = gradcheck_model(model, X, y, step=args.step, tol=args.tol,
                                     max_entries_per_param=args.sample)
            status = "ok" if report.passed else "FAIL"
            print(f"  {config.name} lpb={lpb} blocks={args.blocks}: "
                  f"max_rel_err {report.max_rel_err:.3e}  {status}")
            failures += 0 if report.passed else 1
    if failures:
        print(f"{failures} combination(s) exceeded tol {args.tol}", file=sys.stderr)
        return 1
    print("all gradient checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wifimode",
                                description="Transportation mode detection from "
                                            "Wi-Fi sensor connection logs")
    p.add_argument("--backend", choices=("auto", "numpy", "numba"), default="auto",
                   help="kernel backend (default: auto, or WIFIMODE_NUMBA env)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic log + roster + deployment")
    s.add_argument("--scenario", help="scenario JSON (default: built-in scenario)")
    s.add_argument("--seed", type=int, default=None, help="override scenario seed")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("ingest", help="parse a log into trips.csv")
    s.add_argument("--log", required=True)
    s.add_argument("--roster", default=None)
    s.add_argument("--idle-gap", type=float, default=DEFAULT_IDLE_GAP_S)
    s.add_argument("--max-trip-gap", type=float, default=DEFAULT_MAX_TRIP_GAP_S)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("featurize", help="parse a log into per-trip features")
    s.add_argument("--log", required=True)
    s.add_argument("--deployment", required=True)
    s.add_argument("--roster", default=None)
    s.add_argument("--idle-gap", type=float, default=DEFAULT_IDLE_GAP_S)
    s.add_argument("--max-trip-gap", type=float, default=DEFAULT_MAX_TRIP_GAP_S)
    s.add_argument("--out", required=True, help="features CSV path")
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("train", help="train a classifier on a features CSV")
    s.add_argument("--features", required=True)
    s.add_argument("--out", required=True, help="model JSON path")
    s.add_argument("--trace", default=None, help="training trace CSV path")
    s.add_argument("--config", default="c10")
    s.add_argument("--arch", default="ResNet122")
    s.add_argument("--sample-rate", type=float, default=0.2)
    s.add_argument("--alpha-final", type=float, default=3.0)
    s.add_argument("--alpha-t1", type=int, default=None)
    s.add_argument("--alpha-t2", type=int, default=None)
    s.add_argument("--rounds", type=int, default=1)
    s.add_argument("--epochs", type=int, default=500)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--val-fraction", type=float, default=0.0,
                   help="stratified carve-off reported in the trace (0 = none)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="confusion matrix and metrics for a model")
    s.add_argument("--model", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--json", default=None, help="also dump metrics as JSON")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep-config", help="rank the 16 width/batchnorm/dropout configs")
    s.add_argument("--features", required=True)
    s.add_argument("--arch", default="ResNet34")
    s.add_argument("--epochs", type=int, default=500)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--val-fraction", type=float, default=0.2)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_sweep_config)

    s = sub.add_parser("sweep-arch", help="depth x pseudo-label-rate grid under k-fold CV")
    s.add_argument("--features", required=True)
    s.add_argument("--config", default="c10")
    s.add_argument("--rates", default="0,0.2,0.4,0.6,0.8,1.0")
    s.add_argument("--archs", default=",".join(
        ("ResNet10", "ResNet18", "ResNet34", "ResNet50",
         "ResNet74", "ResNet101", "ResNet122", "ResNet152")))
    s.add_argument("--folds", type=int, default=10)
    s.add_argument("--epochs", type=int, default=1000)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--no-plain-baseline", action="store_true")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_sweep_arch)

    s = sub.add_parser("gradcheck", help="finite-difference check of the kernels")
    s.add_argument("--configs", default=None, help="comma-separated config names "
                                                   "(default: all 16)")
    s.add_argument("--blocks", type=int, default=2)
    s.add_argument("--batch", type=int, default=8)
    s.add_argument("--step", type=float, default=1e-5)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--sample", type=int, default=200,
                   help="coordinates checked per parameter array")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.backend != "auto":
        kernels.set_backend(args.backend)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        kernels.set_backend(None)


if __name__ == "__main__":
    sys.exit(main())
