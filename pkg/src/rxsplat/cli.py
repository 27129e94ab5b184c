#!/usr/bin/env python3
"""rxsplat - Receiver-conditioned RF Gaussian splatting"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from rxsplat.apps import greedy_plan, localization_study, planning_study
from rxsplat.channelsim import sample_positions, scene_from_config, synth_dataset
from rxsplat.conditioning import condition
from rxsplat.config import (
    ABLATIONS,
    GridConfig,
    SimulateConfig,
    SplitSpec,
    TrainConfig,
    load_config,
    save_config,
)
from rxsplat.errors import EXIT_OK, ConfigError, DataIOError, NumericError, RxsplatError, exit_code_for
from rxsplat.experiments import (
    FOLD_METHODS,
    ablate,
    baseline_evaluation,
    bench,
    evaluate,
    fold_protocol,
    fold_rows,
    load_model,
    merge_folds,
    make_split,
    pipeline_gradcheck,
    random_bench_scene,
    run_training,
    sweep_receivers,
    sweep_reference,
    tiny_instance,
    write_evaluation,
    write_gradcheck,
)
from rxsplat.fileio import read_csv, read_dataset, write_csv, write_dataset, write_pgm, write_sidecar
from rxsplat.modalities import AVAILABLE_MODALITIES, get_modality
from rxsplat.radiance import as_complex
from rxsplat.seeding import make_rng
from rxsplat.sphraster import SphericalGrid, render_field
from rxsplat.trainer import predict
from rxsplat.version import get_current_version

logger = logging.getLogger("rxsplat")

STAGES = [1, 2]
SWEEP_KINDS = ["receivers", "reference", "folds"]


def parse_vector(text: str) -> list[float]:
    """Parse 'x,y,z' into three floats.

    Raises:
        ValueError: If the text is not three comma-separated numbers
    """
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"Expected x,y,z, got: {text}")
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise ValueError(f"Expected x,y,z, got: {text}") from None


def load_receivers(rx_text=None, rx_file=None) -> np.ndarray:
    """Receiver positions from ';'-separated vectors or a file with one per line.

    Raises:
        ValueError: If both or neither are given, or the file is missing or empty
    """
    if rx_text and rx_file:
        raise ValueError("Cannot specify both --rx and --rx-file")
    if rx_file:
        path = Path(rx_file)
        if not path.exists():
            raise DataIOError(f"Receiver file not found: {rx_file}")
        lines = [line.strip() for line in path.read_text().splitlines() if line.strip()]
        if not lines:
            raise ValueError(f"Receiver file is empty: {rx_file}")
        return np.array([parse_vector(line) for line in lines])
    if rx_text:
        return np.array([parse_vector(part) for part in rx_text.split(";") if part.strip()])
    raise ValueError("Must provide either --rx or --rx-file")


def setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )


def load_train_config(args) -> TrainConfig:
    config = load_config(args.config, TrainConfig)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.threads is not None:
        updates["threads"] = args.threads
    if getattr(args, "dataset", None):
        updates["dataset"] = args.dataset
    if getattr(args, "split", None):
        updates["split"] = args.split
    if getattr(args, "output", None):
        updates["output_dir"] = args.output
    return config.model_copy(update=updates)


def load_dataset_and_split(dataset_path, split_path):
    if not dataset_path:
        raise ConfigError("dataset: no dataset given (config 'dataset' or --dataset)")
    dataset = read_dataset(dataset_path)
    if split_path:
        split = load_config(split_path, SplitSpec)
    else:
        split = make_split(dataset)
    return dataset, split


def grid_from_meta(meta: dict) -> SphericalGrid:
    return SphericalGrid.from_config(GridConfig(**meta["grid"]) if "grid" in meta else GridConfig())


def cmd_simulate(args) -> None:
    config = load_config(args.config, SimulateConfig)
    seed = args.seed if args.seed is not None else config.seed
    threads = args.threads or config.threads
    out = Path(args.output or config.output_dir)
    scene = scene_from_config(config.scene, seed)
    tx = sample_positions(config.tx, config.scene.room_min, config.scene.room_max, seed, "tx")
    rx = sample_positions(config.rx, config.scene.room_min, config.scene.room_max, seed, "rx")
    grid = SphericalGrid.from_config(config.grid)
    dataset = synth_dataset(
        scene, tx, rx, config.modality, grid=grid, csi_channels=config.csi.channels,
        csi_bandwidth=config.csi.fractional_bandwidth, kappa=config.spectrum.kappa,
        normalize=config.spectrum.normalize, threads=threads,
    )
    path = write_dataset(dataset, out, scene)
    save_config(make_split(dataset), out / "split.json")
    print(f"Wrote {dataset.num_tx * dataset.num_rx} {config.modality} records to {path}")


def cmd_train(args) -> None:
    config = load_train_config(args)
    dataset, split = load_dataset_and_split(config.dataset, config.split)
    if dataset.modality != config.modality:
        raise ConfigError(f"modality: config says {config.modality}, dataset holds {dataset.modality}")
    result = run_training(config, dataset, split, args.stage, config.output_dir, args.init)
    final = result.trace.smoothed(config.smoothing_window)
    summary = f"{final[-1]:.6g}" if len(final) else "n/a"
    print(f"Stage {args.stage} done: {len(result.trace.raw)} iterations, "
          f"K={result.scene.num_gaussians}, final smoothed loss {summary}")
    print(f"Outputs in {config.output_dir}")


def cmd_render(args) -> None:
    scene, conditioning, meta = load_model(args.checkpoint)
    grid = grid_from_meta(meta)
    tx = parse_vector(args.tx)
    rx = load_receivers(args.rx, args.rx_file)
    base = as_complex(scene.fle_coeffs)
    if conditioning is not None:
        coeffs, _ = condition(base, rx, scene, conditioning)
    else:
        coeffs = np.broadcast_to(base, (len(rx),) + base.shape).copy()
    rendered = render_field(scene, tx, grid, coeffs, threads=args.threads or 1, sequential=args.sequential)
    modality = get_modality(scene.modality)
    values = modality.aggregate(rendered.values, grid.cell_solid_angle())

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    if scene.modality == "rssi":
        write_csv(out / "render.csv", ["rx_id", "x", "y", "z", "rssi_db"],
                  ([j, *map(repr, rx[j].tolist()), repr(float(values[j]))] for j in range(len(rx))))
    elif scene.modality == "csi":
        write_csv(out / "render.csv", ["rx_id", "channel", "re", "im"],
                  ([j, c, repr(float(v.real)), repr(float(v.imag))]
                   for j in range(len(rx)) for c, v in enumerate(values[j])))
    else:
        for j in range(len(rx)):
            write_sidecar(out / f"rx_{j:03d}.rxsp", values[j])
            if args.pgm:
                write_pgm(out / f"rx_{j:03d}.pgm", values[j])
    print(f"Rendered {len(rx)} receivers ({scene.modality}) to {out}")


def cmd_evaluate(args) -> None:
    scene, conditioning, meta = load_model(args.checkpoint)
    grid = grid_from_meta(meta)
    dataset, split = load_dataset_and_split(args.dataset, args.split)
    out = Path(args.output)
    threads = args.threads or 1
    result = evaluate(scene, conditioning, dataset, split, grid, threads)
    write_evaluation(result, out, "eval")
    if args.fallback:
        write_evaluation(evaluate(scene, conditioning, dataset, split, grid, threads, fallback=True), out, "fallback")
    if args.baseline:
        write_evaluation(baseline_evaluation(dataset, split), out, "baseline")
    for tag, metric, mean, std, count in result.summary_rows():
        print(f"{tag:>6} {metric}: {float(mean):.4f} +/- {float(std):.4f} over {count} receivers")


def cmd_localize(args) -> None:
    scene, conditioning, meta = load_model(args.checkpoint)
    grid = grid_from_meta(meta)
    dataset, split = load_dataset_and_split(args.dataset, args.split)
    if dataset.modality != "rssi":
        raise ConfigError(f"modality: localization needs an rssi dataset, got {dataset.modality}")
    if not split.unseen_rx or not split.test_tx:
        raise ConfigError("split: localization needs unseen receivers and test transmitters")
    seen, unseen = split.seen_rx, split.unseen_rx
    db_tx, query_tx = split.train_tx, split.test_tx
    m = dataset.measurements
    synthesized = np.stack([
        predict(scene, dataset.tx_positions[i], dataset.rx_positions[unseen], grid, conditioning, args.threads or 1)
        for i in db_tx
    ])
    study = localization_study(
        dataset.tx_positions[db_tx], m[np.ix_(db_tx, seen)], synthesized, m[np.ix_(db_tx, seen + unseen)],
        dataset.tx_positions[query_tx], m[np.ix_(query_tx, seen + unseen)], k=args.k,
    )
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "localization_cdf.csv", ["database", "error_m", "cdf"],
              ((n, repr(v), repr(p)) for n, v, p in study.cdf_rows()))
    summary = study.summary()
    write_csv(out / "localization_summary.csv", ["database", "mean_m", "median_m", "std_m"],
              ((n, repr(s["mean"]), repr(s["median"]), repr(s["std"])) for n, s in summary.items()))
    for name, s in summary.items():
        print(f"{name:>9}: mean {s['mean']:.3f} m, median {s['median']:.3f} m")


def cmd_plan(args) -> None:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    if args.table:
        rows = read_csv(args.table)
        if not rows:
            raise DataIOError(f"Planning table is empty: {args.table}")
        names = list(rows[0].keys())
        try:
            table = np.array([[float(row[n]) for n in names] for row in rows])
        except ValueError as e:
            raise DataIOError(f"Planning table {args.table} has a non-numeric entry: {e}") from None
        order = greedy_plan(table, args.k, args.threshold)
        write_csv(out / "plan.csv", ["rank", "candidate"], ((r, names[c]) for r, c in enumerate(order)))
        print("Selected: " + ", ".join(names[c] for c in order))
        return

    if not args.checkpoint:
        raise ConfigError("plan: give --table, or a checkpoint with --dataset")
    scene, conditioning, meta = load_model(args.checkpoint)
    grid = grid_from_meta(meta)
    dataset, split = load_dataset_and_split(args.dataset, args.split)
    if not split.test_tx:
        raise ConfigError("split: planning needs test transmitters")
    candidates = np.arange(dataset.num_rx)
    predicted = np.stack([
        predict(scene, dataset.tx_positions[i], dataset.rx_positions, grid, conditioning, args.threads or 1)
        for i in split.train_tx
    ])
    rng = make_rng(args.seed or 0, "cli.plan.surveyed")
    surveyed = sorted(int(j) for j in rng.choice(split.seen_rx, size=min(args.k, len(split.seen_rx)), replace=False))
    study = planning_study(
        dataset.measurements[split.train_tx][:, candidates], predicted,
        dataset.measurements[split.test_tx][:, candidates], dataset.tx_positions[split.test_tx],
        surveyed, args.k, args.threshold, cell_size=args.cell_size,
    )
    write_csv(out / "plan.csv", ["strategy", "selection", "coverage", "gap_to_upper"],
              ((n, " ".join(map(str, study.selections[n])), repr(study.coverage[n]), repr(study.gaps[n]))
               for n in study.selections))
    for name, heatmap in study.heatmaps.items():
        write_pgm(out / f"coverage_{name}.pgm", heatmap, 0.0, 1.0)
        write_csv(out / f"coverage_{name}.csv", [f"c{i}" for i in range(heatmap.shape[1])],
                  ([repr(float(v)) for v in row] for row in heatmap))
    for name in study.selections:
        print(f"{name:>11}: coverage {study.coverage[name]:.3f}, gap-to-upper {study.gaps[name]:.3f}")


def cmd_gradcheck(args) -> None:
    config = load_config(args.config, TrainConfig) if args.config else None
    seed = args.seed or 0
    worst = 0.0
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for n in range(args.instances):
        scene, conditioning, tx, rx, target, grid = tiny_instance(seed + n, args.modality)
        check = pipeline_gradcheck(scene, conditioning, tx, rx, target, grid, config=config)
        write_gradcheck(check, out / f"gradcheck_{seed + n}.csv")
        worst = max(worst, check.max_rel_error)
        if not check.passed:
            raise NumericError(f"Gradient check failed on instance {seed + n}: max rel err {check.max_rel_error:.3e}")
    print(f"Gradient check passed on {args.instances} instances, max rel err {worst:.3e}")


def cmd_bench(args) -> None:
    n_theta, n_phi = (int(v) for v in args.grid.lower().split("x"))
    grid = SphericalGrid(n_theta=n_theta, n_phi=n_phi)
    seed = args.seed or 0
    scene = random_bench_scene(args.gaussians, args.l_max, seed)
    rx = make_rng(seed, "cli.bench.receivers").uniform(-0.2, 0.2, size=(args.receivers, 3))
    result = bench(scene, np.zeros(3), rx, grid, threads=args.threads or 1, repeats=args.repeats)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "bench.csv", ["receivers", "batched_s", "sequential_s", "speedup"],
              [(result.receivers, repr(result.batched_seconds), repr(result.sequential_seconds), repr(result.speedup))])
    print(f"N={result.receivers}: batched {result.batched_seconds:.3f}s, "
          f"sequential {result.sequential_seconds:.3f}s, speedup {result.speedup:.2f}x")


def cmd_sweep(args) -> None:
    config = load_train_config(args)
    dataset, split = load_dataset_and_split(config.dataset, config.split)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "receivers":
        counts = [int(c) for c in args.counts.split(",")] if args.counts else list(range(1, dataset.num_rx))
        rows = sweep_receivers(config, dataset, counts, args.subsets)
        write_csv(out / "sweep_receivers.csv", ["train_rx", "subset", "receivers", "tag", "metric", "mean"], rows)
    elif args.kind == "folds":
        if not 2 <= args.folds <= dataset.num_rx:
            raise ConfigError(f"folds: must be in [2, {dataset.num_rx}], got {args.folds}")
        runs = fold_protocol(config, dataset, args.folds)
        rows = list(fold_rows(runs))
        write_csv(out / "sweep_folds.csv", ["fold", "method", "tag", "rx_id", "metric", "value"], rows)
        summary = [(method,) + row for method in FOLD_METHODS
                   for row in merge_folds(runs, method).summary_rows()]
        write_csv(out / "sweep_folds_summary.csv", ["method", "tag", "metric", "mean", "std", "receivers"], summary)
        for method, tag, metric, mean, std, count in summary:
            print(f"{method:>8} {tag:>6} {metric}: {float(mean):.4f} +/- {float(std):.4f} over {count} receivers")
    else:
        rows = sweep_reference(config, dataset, split)
        write_csv(out / "sweep_reference.csv", ["reference", "tag", "rx_id", "metric", "value"], rows)
    print(f"Sweep '{args.kind}' wrote {len(rows)} rows to {out}")


def cmd_ablate(args) -> None:
    config = load_train_config(args)
    dataset, split = load_dataset_and_split(config.dataset, config.split)
    variants = args.variants.split(",") if args.variants else list(ABLATIONS)
    unknown = [v for v in variants if v not in ABLATIONS]
    if unknown:
        raise ConfigError(f"variants: unknown ablation {unknown[0]}; valid options: {', '.join(ABLATIONS)}")
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = ablate(config, dataset, split, variants, seeds)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "ablation.csv", ["variant", "seed", "final_loss"], rows)
    for variant, seed, loss in rows:
        print(f"{variant:>14} seed {seed}: {float(loss):.6g}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="Run seed (overrides the config)")
    common.add_argument("--threads", type=int, help="Worker threads (1 = serial reference mode)")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(
        prog="rxsplat",
        description="Receiver-conditioned RF Gaussian splatting",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  rxsplat simulate sim.json --output data
  rxsplat train train.json --stage 1 --dataset data
  rxsplat train train.json --stage 2 --dataset data
  rxsplat render run/stage2.rxgs --tx 1,2,1.5 --rx "3,3,1;4,2,1"
  rxsplat evaluate run/stage2.rxgs --dataset data --split data/split.json --fallback
  rxsplat plan --table candidates.csv -k 2
        """,
    )
    parser.add_argument("--version", action="version", version=f"rxsplat {get_current_version()}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="Synthesize a dataset from an oracle scene")
    p.add_argument("config", help="Simulation config (JSON)")
    p.add_argument("-o", "--output", help="Output directory (overrides the config)")
    p.set_defaults(func=cmd_simulate)

    for name, func, help_text in (
        ("train", cmd_train, "Run training stage 1 or 2"),
        ("sweep", cmd_sweep, "Receiver-count, reference-receiver or held-out fold sweep"),
        ("ablate", cmd_ablate, "Train the ablation variants on equal budgets"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("config", help="Training config (JSON)")
        p.add_argument("--dataset", help="Dataset directory (overrides the config)")
        p.add_argument("--split", help="Split spec (JSON)")
        p.add_argument("-o", "--output", help="Output directory (overrides the config)")
        p.set_defaults(func=func)
        if name == "train":
            p.add_argument("--stage", type=int, choices=STAGES, required=True)
            p.add_argument("--init", help="Stage-1 checkpoint for stage 2")
        elif name == "sweep":
            p.add_argument("--kind", choices=SWEEP_KINDS, required=True)
            p.add_argument("--counts", help="Comma-separated training receiver counts")
            p.add_argument("--subsets", type=int, default=3, help="Random subsets per count (default: 3)")
            p.add_argument("--folds", type=int, default=3, help="Receiver folds, each held out once (default: 3)")
        else:
            p.add_argument("--variants", help=f"Comma-separated subset of: {', '.join(ABLATIONS)}")
            p.add_argument("--seeds", default="0,1,2", help="Comma-separated seeds (default: 0,1,2)")

    p = sub.add_parser("render", parents=[common], help="Render receivers from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--tx", required=True, help="Transmitter position x,y,z")
    p.add_argument("--rx", help="Receiver positions 'x,y,z;x,y,z;...'")
    p.add_argument("--rx-file", help="File with one receiver position x,y,z per line")
    p.add_argument("--sequential", action="store_true", help="Render receivers one at a time")
    p.add_argument("--pgm", action="store_true", help="Also write spectra as PGM images")
    p.add_argument("-o", "--output", default="render", help="Output directory (default: render)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("evaluate", parents=[common], help="Seen/unseen receiver metrics")
    p.add_argument("checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", help="Split spec (JSON)")
    p.add_argument("--fallback", action="store_true", help="Also evaluate the nearest-seen fallback")
    p.add_argument("--baseline", action="store_true", help="Also evaluate the per-receiver mean baseline")
    p.add_argument("-o", "--output", default="eval", help="Output directory (default: eval)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("localize", parents=[common], help="WKNN localization with synthesized fingerprints")
    p.add_argument("checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", help="Split spec (JSON)")
    p.add_argument("-k", type=int, default=5, help="Neighbours (default: 5)")
    p.add_argument("-o", "--output", default="localize", help="Output directory (default: localize)")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("plan", parents=[common], help="Greedy access-point planning")
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("--table", help="CSV of dB values: one row per transmitter, one column per candidate")
    p.add_argument("--dataset")
    p.add_argument("--split", help="Split spec (JSON)")
    p.add_argument("-k", type=int, default=5, help="Access points to deploy (default: 5)")
    p.add_argument("--threshold", type=float, default=-80.0, help="Coverage threshold in dBm (default: -80)")
    p.add_argument("--cell-size", type=float, default=1.6, help="Heatmap cell size in metres (default: 1.6)")
    p.add_argument("-o", "--output", default="plan", help="Output directory (default: plan)")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("gradcheck", parents=[common], help="Finite-difference check of the full pipeline")
    p.add_argument("--config", help="Training config supplying loss weights")
    p.add_argument("--modality", choices=AVAILABLE_MODALITIES, default="rssi")
    p.add_argument("--instances", type=int, default=1, help="Random instances (default: 1)")
    p.add_argument("-o", "--output", default="gradcheck", help="Output directory (default: gradcheck)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", parents=[common], help="Batched versus sequential rendering time")
    p.add_argument("--gaussians", type=int, default=1000)
    p.add_argument("--receivers", type=int, default=16)
    p.add_argument("--grid", default="18x36", help="n_theta x n_phi (default: 18x36)")
    p.add_argument("--l-max", type=int, default=2)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("-o", "--output", default="bench", help="Output directory (default: bench)")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    if args.threads is not None and args.threads < 1:
        print("Error: --threads must be >= 1", file=sys.stderr)
        sys.exit(ConfigError.exit_code)
    try:
        args.func(args)
    except RxsplatError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(exit_code_for(e))
    except (ValueError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(exit_code_for(e))
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
