"""Command-line orchestration: gen, train, eval, noise-sweep, report, snapshot.

Every command resolves its configuration (defaults < config file < flags),
writes its outputs into a run directory, and drops a ``manifest.json``
capturing the resolved config plus sha256 hashes of inputs and outputs.
Reruns with identical inputs produce byte-identical dataset files, history
CSVs, and checkpoints.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time

import numpy as np

from . import dataset as ds_mod
from . import em_core, neural, plots
from . import scene as scene_mod
from .container import sha256_file

OUT_ROOT_ENV = "TWRLOC_OUT"
DATASET_FILENAME = "dataset.twrd"
CHECKPOINT_FILENAME = "checkpoint.twrm"

# Training defaults per target mode: (learning rate, epoch budget).
MODE_DEFAULTS = {"single": (1e-4, 5000), "two": (1e-3, 1000)}


def _out_dir(args, command: str) -> str:
    root = args.out or os.path.join(os.environ.get(OUT_ROOT_ENV, "runs"), command)
    os.makedirs(root, exist_ok=True)
    return root


def _write_manifest(out_dir: str, payload: dict) -> str:
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _file_entry(path: str) -> dict:
    return {"path": os.path.basename(path), "sha256": sha256_file(path)}


def _stats_hash(stats) -> str:
    mean, std = stats
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(mean, dtype="<f8").tobytes())
    digest.update(np.ascontiguousarray(std, dtype="<f8").tobytes())
    return digest.hexdigest()


def _load_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _parse_scenarios(text: str) -> tuple[str, ...]:
    if text == "all":
        return scene_mod.SCENARIOS
    names = tuple(s.strip() for s in text.split(",") if s.strip())
    for name in names:
        if name not in scene_mod.SCENARIOS:
            raise ValueError(f"unknown scenario {name!r}; choose from {scene_mod.SCENARIOS}")
    return names


def _parse_float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _parse_int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


# ----------------------------------------------------------------- gen --

def cmd_gen(args) -> int:
    overrides = _load_json(args.config) if args.config else {}
    if args.scenarios is not None:
        overrides["scenarios"] = list(_parse_scenarios(args.scenarios))
    if args.targets is not None:
        overrides["n_targets"] = args.targets
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    base = ds_mod.GenerationConfig().to_dict()
    base.update(overrides)
    config = ds_mod.GenerationConfig.from_dict(base)

    out_dir = _out_dir(args, "gen")
    t0 = time.perf_counter()

    def progress(done, total):
        if args.verbose and (done % 10 == 0 or done == total):
            rate = (time.perf_counter() - t0) / done
            print(f"  {done}/{total} simulations ({rate:.2f} s each)", flush=True)

    try:
        ds = ds_mod.generate_dataset(config, workers=args.workers, progress=progress)
    except ds_mod.GenerationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    ds = ds_mod.split_dataset(ds, seed=config.master_seed)
    ds = ds_mod.with_standardization(ds)
    path = os.path.join(out_dir, DATASET_FILENAME)
    ds_mod.save_dataset(ds, path)
    if args.csv:
        ds_mod.export_csv(ds, os.path.join(out_dir, "dataset.csv"))
    elapsed = time.perf_counter() - t0
    _write_manifest(out_dir, {
        "command": "gen",
        "config": config.to_dict(),
        "split_seed": config.master_seed,
        "outputs": {"dataset": _file_entry(path)},
        "n_samples": ds.n_samples,
    })
    counts = ds.metadata["split"]["counts"]
    print(f"gen: {ds.n_samples} samples ({counts['train']} train / "
          f"{counts['test']} test / {counts['val']} val) in {elapsed:.1f} s -> {path}")
    return 0


# --------------------------------------------------------------- train --

def _mode_for_dataset(ds: ds_mod.Dataset, mode: str | None) -> str:
    inferred = "single" if ds.n_labels == 2 else "two"
    if mode is None:
        return inferred
    if mode != inferred:
        raise ValueError(
            f"mode {mode!r} expects {'2' if mode == 'single' else '4'} labels "
            f"but the dataset has {ds.n_labels}"
        )
    return mode


def _build_model(mode: str, dropout_rate: float) -> neural.ModelSpec:
    if mode == "single":
        return neural.build_single_target_model(dropout_rate)
    return neural.build_two_target_model(dropout_rate)


def _train_config(mode: str, args, early_default: bool = False) -> neural.TrainConfig:
    lr_default, epochs_default = MODE_DEFAULTS[mode]
    early = args.early_stop if args.early_stop is not None else early_default
    return neural.TrainConfig(
        learning_rate=args.lr if args.lr is not None else lr_default,
        batch_size=args.batch,
        max_epochs=args.epochs if args.epochs is not None else epochs_default,
        rng_seed=args.seed if args.seed is not None else 0,
        early_stop_enabled=early,
        patience=args.patience,
        hit_tolerance_cm=args.tol_cm,
    )


def cmd_train(args) -> int:
    ds = ds_mod.load_dataset(args.dataset)
    mode = _mode_for_dataset(ds, args.mode)
    if ds.standardization is None:
        ds = ds_mod.with_standardization(ds)
    spec = _build_model(mode, args.dropout)
    config = _train_config(mode, args)
    out_dir = _out_dir(args, "train")
    history_path = os.path.join(out_dir, "history.csv")

    t0 = time.perf_counter()
    try:
        params, history = neural.train(spec, ds, config)
    except neural.TrainingDiverged as exc:
        if exc.history is not None:
            exc.history.write_csv(history_path)
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 1
    elapsed = time.perf_counter() - t0

    ckpt_path = os.path.join(out_dir, CHECKPOINT_FILENAME)
    neural.save_model(ckpt_path, spec, params, ds.standardization)
    history.write_csv(history_path)
    rows = [r.__dict__ for r in history.records]
    plots.plot_history(rows, os.path.join(out_dir, "history.svg"))

    x_tr, y_tr = ds.split_arrays("train")
    x_val, y_val = ds.split_arrays("val")
    final = {
        "train_msle": neural.msle(y_tr, neural.predict(spec, params, x_tr)),
        "train_hit_acc": neural.hit_accuracy(neural.predict(spec, params, x_tr), y_tr, config.hit_tolerance_cm),
    }
    if x_val.shape[0]:
        final["val_msle"] = neural.msle(y_val, neural.predict(spec, params, x_val))
        final["val_hit_acc"] = neural.hit_accuracy(neural.predict(spec, params, x_val), y_val, config.hit_tolerance_cm)

    scenarios = ds.metadata.get("config", {}).get("scenarios", [])
    _write_manifest(out_dir, {
        "command": "train",
        "mode": mode,
        "train_config": config.__dict__ | {"dropout_rate": args.dropout},
        "inputs": {"dataset": {"path": os.path.abspath(args.dataset),
                               "sha256": sha256_file(args.dataset)}},
        "outputs": {"checkpoint": _file_entry(ckpt_path),
                    "history": _file_entry(history_path)},
        "wall_model": scenarios[0] if len(scenarios) == 1 else "all_data",
        "epochs_run": len(history),
        "final_metrics": final,
    })
    print(f"train[{mode}]: {len(history)} epochs in {elapsed:.1f} s, "
          f"final train MSLE {final['train_msle']:.5f}, "
          f"val hit-acc {final.get('val_hit_acc', float('nan')):.3f} -> {ckpt_path}")
    return 0


# ---------------------------------------------------------------- eval --

def cmd_eval(args) -> int:
    if not os.path.exists(args.checkpoint):
        print(f"error: checkpoint {args.checkpoint} not found", file=sys.stderr)
        return 1
    if not os.path.exists(args.dataset):
        print(f"error: dataset {args.dataset} not found", file=sys.stderr)
        return 1
    spec, params, standardizer = neural.load_model(args.checkpoint)
    ds = ds_mod.load_dataset(args.dataset)
    if ds.n_labels != spec.output_dim:
        print(f"error: dataset has {ds.n_labels} labels but the model outputs "
              f"{spec.output_dim}", file=sys.stderr)
        return 1
    if standardizer is not None and ds.standardization is not None:
        h_ckpt = _stats_hash(standardizer)
        h_ds = _stats_hash(ds.standardization)
        if h_ckpt != h_ds:
            print(f"error: standardizer mismatch: checkpoint {h_ckpt[:16]}... "
                  f"vs dataset {h_ds[:16]}...", file=sys.stderr)
            return 1
    stats = standardizer if standardizer is not None else ds.standardization
    feats, labels = ds.split_arrays(args.split, standardized=False)
    if feats.shape[0] == 0:
        print(f"error: split {args.split!r} is empty", file=sys.stderr)
        return 1
    if stats is not None:
        feats = ds_mod.apply_standardizer(feats, stats)
    out, _ = neural.forward(spec, params, feats, training=False)
    metrics = {
        "split": args.split,
        "n_samples": int(feats.shape[0]),
        "msle": neural.msle(labels, out),
        "hit_accuracy": neural.hit_accuracy(out, labels, args.tol_cm),
        "tol_cm": args.tol_cm,
        "checkpoint_sha256": sha256_file(args.checkpoint),
        "dataset_sha256": sha256_file(args.dataset),
    }
    out_dir = _out_dir(args, "eval")
    with open(os.path.join(out_dir, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out_dir, {"command": "eval", "metrics": metrics})
    print(f"eval[{args.split}]: n={metrics['n_samples']} "
          f"MSLE {metrics['msle']:.6f} hit-acc {metrics['hit_accuracy']:.3f}")
    return 0


# --------------------------------------------------------- noise-sweep --

def cmd_noise_sweep(args) -> int:
    snr_list = _parse_float_list(args.snr)
    if not snr_list:
        print("error: --snr list is empty", file=sys.stderr)
        return 1
    seeds = _parse_int_list(args.seeds)
    ds = ds_mod.load_dataset(args.dataset)
    mode = _mode_for_dataset(ds, args.mode)
    spec = _build_model(mode, args.dropout)
    out_dir = _out_dir(args, "noise-sweep")

    # math.inf marks the no-noise baseline row.
    points = [math.inf] + sorted(snr_list)
    rows = []
    for snr in points:
        accs, losses = [], []
        for seed in seeds:
            if math.isfinite(snr):
                noise_seed = int(np.random.SeedSequence(
                    entropy=(seed, int(round(snr * 1000)))).generate_state(1)[0])
                noisy = ds_mod.with_awgn(ds, snr, noise_seed)
            else:
                noisy = ds
            noisy = ds_mod.with_standardization(noisy)
            config = _train_config(mode, args, early_default=True)
            config = neural.TrainConfig(**{**config.__dict__, "rng_seed": seed})
            params, history = neural.train(spec, noisy, config)
            x_val, y_val = noisy.split_arrays("val")
            out, _ = neural.forward(spec, params, x_val, training=False)
            accs.append(neural.hit_accuracy(out, y_val, config.hit_tolerance_cm))
            losses.append(neural.msle(y_val, out))
            if args.verbose:
                label = "inf" if not math.isfinite(snr) else f"{snr:g}"
                print(f"  snr={label} seed={seed}: val hit-acc {accs[-1]:.3f} "
                      f"({len(history)} epochs)", flush=True)
        row = {
            "snr_db": snr,
            "val_hit_acc_mean": float(np.mean(accs)),
            "val_hit_acc_std": float(np.std(accs)),
            "val_msle_mean": float(np.mean(losses)),
        }
        for seed, acc in zip(seeds, accs):
            row[f"val_hit_acc_seed{seed}"] = acc
        rows.append(row)

    csv_path = os.path.join(out_dir, "sweep.csv")
    cols = ["snr_db", "val_hit_acc_mean", "val_hit_acc_std", "val_msle_mean"] + \
        [f"val_hit_acc_seed{s}" for s in seeds]
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join("inf" if c == "snr_db" and not math.isfinite(row[c])
                              else repr(float(row[c])) for c in cols) + "\n")
    plots.plot_snr_sweep(rows, os.path.join(out_dir, "sweep.svg"))
    _write_manifest(out_dir, {
        "command": "noise-sweep",
        "mode": mode,
        "snr_db": snr_list,
        "seeds": seeds,
        "inputs": {"dataset": {"path": os.path.abspath(args.dataset),
                               "sha256": sha256_file(args.dataset)}},
        "outputs": {"sweep": _file_entry(csv_path)},
        "rows": [{k: (None if isinstance(v, float) and not math.isfinite(v) else v)
                  for k, v in row.items()} for row in rows],
    })
    for row in rows:
        label = "no-noise" if not math.isfinite(row["snr_db"]) else f"{row['snr_db']:g} dB"
        print(f"sweep {label}: val hit-acc {row['val_hit_acc_mean']:.3f} "
              f"+/- {row['val_hit_acc_std']:.3f}")
    return 0


# -------------------------------------------------------------- report --

def cmd_report(args) -> int:
    run_dirs = []
    for root, _, files in os.walk(args.runs):
        if "manifest.json" in files:
            run_dirs.append(os.path.join(root, "manifest.json"))
    rows, problems = [], []
    for path in sorted(run_dirs):
        try:
            manifest = _load_json(path)
        except (OSError, json.JSONDecodeError) as exc:
            problems.append(f"{path}: {exc}")
            continue
        if manifest.get("command") != "train":
            continue
        final = manifest.get("final_metrics", {})
        rows.append({
            "wall_model": manifest.get("wall_model", "unknown"),
            "mode": manifest.get("mode", "unknown"),
            "loss": final.get("train_msle", math.nan),
            "val_loss": final.get("val_msle", math.nan),
            "hit_acc": final.get("train_hit_acc", math.nan),
            "val_hit_acc": final.get("val_hit_acc", math.nan),
            "manifest": path,
        })
    for problem in problems:
        print(f"warning: skipped manifest: {problem}", file=sys.stderr)
    if not rows:
        print(f"error: no completed train manifests under {args.runs}", file=sys.stderr)
        return 1

    out_dir = _out_dir(args, "report")
    csv_path = os.path.join(out_dir, "report.csv")
    cols = ["wall_model", "mode", "loss", "val_loss", "hit_acc", "val_hit_acc"]
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols + ["manifest"]) + "\n")
        for row in rows:
            fh.write(",".join([row["wall_model"], row["mode"]] +
                              [repr(float(row[c])) for c in cols[2:]] +
                              [row["manifest"]]) + "\n")
    txt_path = os.path.join(out_dir, "report.txt")
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write(f"{'wall model':<28}{'mode':<8}{'loss':>10}{'val loss':>10}"
                 f"{'hit acc':>10}{'val hit':>10}\n")
        for row in rows:
            fh.write(f"{row['wall_model']:<28}{row['mode']:<8}{row['loss']:>10.5f}"
                     f"{row['val_loss']:>10.5f}{row['hit_acc']:>10.3f}"
                     f"{row['val_hit_acc']:>10.3f}\n")
    plots.plot_report(rows, os.path.join(out_dir, "report.svg"))
    _write_manifest(out_dir, {
        "command": "report",
        "rows": [{k: v for k, v in row.items()} for row in rows],
        "skipped": problems,
    })
    with open(txt_path, "r", encoding="utf-8") as fh:
        print(fh.read(), end="")
    return 0


# ------------------------------------------------------------ snapshot --

def _parse_targets(text: str) -> tuple[scene_mod.TargetSpec, ...]:
    targets = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        vals = [float(v) for v in part.split(",")]
        if len(vals) == 2:
            targets.append(scene_mod.TargetSpec((vals[0], vals[1])))
        elif len(vals) == 3:
            targets.append(scene_mod.TargetSpec((vals[0], vals[1]), vals[2]))
        else:
            raise SystemExit(f"error: target spec {part!r} must be x,y[,size]")
    return tuple(targets)


def cmd_snapshot(args) -> int:
    cfg = _load_json(args.config) if args.config else {}
    scenario = args.scenario or cfg.get("scenario")
    wall = None
    if scenario is not None:
        wall = scene_mod.wall_for_scenario(
            scenario,
            homogeneous_eps=cfg.get("homogeneous_eps", scene_mod.HOMOGENEOUS_EPS),
            wall_band=tuple(cfg["wall_band"]) if "wall_band" in cfg else None,
        )
        if "layer_eps" in cfg:
            layers = tuple(tuple(l) for l in cfg["layer_eps"])
            wall = scene_mod.WallSpec(wall.scenario, cfg.get("thickness", wall.thickness),
                                      layers, wall.wall_band)
    targets = _parse_targets(args.targets) if args.targets else tuple(
        scene_mod.TargetSpec(tuple(t["center_cm"]), t.get("size_m", 0.10),
                             t.get("eps_r", scene_mod.TARGET_EPS_R))
        for t in cfg.get("targets", [])
    )
    frame_offset = tuple(cfg.get("frame_offset", scene_mod.FRAME_OFFSET))
    scn = scene_mod.Scene(wall=wall, targets=targets, frame_offset=frame_offset)
    grid = em_core.make_grid(cfg.get("domain_m", scene_mod.DOMAIN_SIZE),
                             cfg.get("frequency_hz", 3e9),
                             cfg.get("courant", em_core.DEFAULT_COURANT),
                             cfg.get("pml_cells", 10))
    src = em_core.SourceSpec(cfg.get("frequency_hz", 3e9),
                             cfg.get("source_y", scene_mod.SOURCE_Y),
                             cfg.get("source_amplitude", 1.0),
                             cfg.get("ramp_periods", 2.0))
    state = em_core.simulate_fields(scn, grid, src, args.steps)
    materials = scene_mod.build_material_map(scn, grid)
    out_dir = _out_dir(args, "snapshot")
    outputs = {}
    for name, arr in (("ez", state.ez), ("hx", state.hx), ("hy", state.hy),
                      ("eps_zz", materials.eps_zz)):
        path = os.path.join(out_dir, f"{name}.csv")
        em_core.write_field_csv(arr, path)
        outputs[name] = _file_entry(path)
    _write_manifest(out_dir, {
        "command": "snapshot",
        "scenario": scenario,
        "targets": [{"center_cm": list(t.center_cm), "size_m": t.size, "eps_r": t.eps_r}
                    for t in targets],
        "steps": args.steps,
        "outputs": outputs,
    })
    print(f"snapshot: {args.steps} steps -> {out_dir}")
    return 0


# ---------------------------------------------------------------- main --

def _add_common_train_flags(p) -> None:
    p.add_argument("--epochs", type=int, default=None, help="epoch budget override")
    p.add_argument("--lr", type=float, default=None, help="learning rate override")
    p.add_argument("--batch", type=int, default=30)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dropout", type=float, default=neural.DEFAULT_DROPOUT_RATE)
    p.add_argument("--patience", type=int, default=100)
    p.add_argument("--tol-cm", type=float, default=neural.HIT_TOLERANCE_CM)
    es = p.add_mutually_exclusive_group()
    es.add_argument("--early-stop", dest="early_stop", action="store_true", default=None)
    es.add_argument("--no-early-stop", dest="early_stop", action="store_false")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twrloc",
        description="Through-wall radar localization: simulate, learn, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a labeled dataset")
    p.add_argument("--targets", type=int, choices=(1, 2), default=None)
    p.add_argument("--scenarios", default=None, help="'all' or comma-separated names")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON overrides for generation config")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--csv", action="store_true", help="also export dataset.csv")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a localization model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=("single", "two"), default=None)
    _add_common_train_flags(p)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=ds_mod.SPLITS, default="test")
    p.add_argument("--tol-cm", type=float, default=neural.HIT_TOLERANCE_CM)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("noise-sweep", help="AWGN robustness sweep")
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=("single", "two"), default=None)
    p.add_argument("--snr", default="0,5,10,15,20,25,30", help="comma-separated dB values")
    p.add_argument("--seeds", default="1,2,3", help="comma-separated training seeds")
    _add_common_train_flags(p)
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_noise_sweep)

    p = sub.add_parser("report", help="consolidate training runs into a table")
    p.add_argument("--runs", default=os.environ.get(OUT_ROOT_ENV, "runs"))
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("snapshot", help="export field heatmap grids as CSV")
    p.add_argument("--scenario", choices=scene_mod.SCENARIOS, default=None)
    p.add_argument("--targets", default=None, help="semicolon-separated x,y[,size]")
    p.add_argument("--steps", type=int, default=2375)
    p.add_argument("--config", default=None, help="JSON scene config")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_snapshot)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ds_mod.DatasetLoadError, neural.CheckpointError,
            scene_mod.InvalidSceneError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
