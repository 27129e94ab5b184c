"""Experiment orchestration behind the command line.

Splits and folds, end-to-end training runs, seen/unseen evaluation with the
nearest-seen fallback, sweeps, ablations, the batched-render benchmark and
the full-pipeline gradient check.
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from rxsplat.channelsim import SyntheticDataset
from rxsplat.checkpoint import load_checkpoint, save_checkpoint
from rxsplat.conditioning import ABLATIONS, ConditioningState, build_occupancy, condition, init_conditioning
from rxsplat.config import DEFAULT_SPLIT_SEED, DEFAULT_TEST_FRACTION, SplitSpec, TrainConfig, save_config
from rxsplat.diffengine import GradCheckReport, flatten, grad_check, unflatten
from rxsplat.errors import ConfigError, DataIOError
from rxsplat.fileio import write_csv
from rxsplat.metrics import per_receiver_aggregate, write_receiver_table
from rxsplat.modalities import get_modality
from rxsplat.radiance import as_complex
from rxsplat.scene import GEOMETRY_FIELDS, GaussianScene, init_scene, logit
from rxsplat.seeding import make_rng
from rxsplat.sphraster import SphericalGrid, render_field
from rxsplat.trainer import (
    StageResult,
    conditioning_parameters,
    forward_backward,
    make_conditioning,
    predict,
    train_joint,
    train_stage1,
    train_stage2,
)

logger = logging.getLogger(__name__)

STAGE1_CHECKPOINT = "stage1.rxgs"
STAGE2_CHECKPOINT = "stage2.rxgs"
NUM_FOLDS = 3


def tx_split(num_tx: int, test_fraction: float = DEFAULT_TEST_FRACTION, seed: int = DEFAULT_SPLIT_SEED):
    """Seeded random (train, test) transmitter ids, each sorted."""
    order = make_rng(seed, "experiments.tx_split").permutation(num_tx)
    n_test = int(round(test_fraction * num_tx))
    if num_tx > 1:
        n_test = min(max(n_test, 1), num_tx - 1)
    return sorted(int(i) for i in order[n_test:]), sorted(int(i) for i in order[:n_test])


def receiver_folds(num_rx: int, folds: int = NUM_FOLDS, seed: int = DEFAULT_SPLIT_SEED) -> list[list[int]]:
    """Partition receivers into ``folds`` near-equal held-out groups."""
    if not 1 <= folds <= num_rx:
        raise ValueError(f"folds must be in [1, {num_rx}], got {folds}")
    order = make_rng(seed, "experiments.rx_folds").permutation(num_rx)
    return [sorted(int(i) for i in part) for part in np.array_split(order, folds)]


def make_split(dataset: SyntheticDataset, unseen_rx=(), seed: int = DEFAULT_SPLIT_SEED,
               test_fraction: float = DEFAULT_TEST_FRACTION) -> SplitSpec:
    train_tx, test_tx = tx_split(dataset.num_tx, test_fraction, seed)
    unseen = sorted(int(j) for j in unseen_rx)
    seen = [j for j in range(dataset.num_rx) if j not in unseen]
    return SplitSpec(train_tx=train_tx, test_tx=test_tx, seen_rx=seen, unseen_rx=unseen)


def fold_splits(dataset: SyntheticDataset, folds: int = NUM_FOLDS, seed: int = DEFAULT_SPLIT_SEED) -> list[SplitSpec]:
    return [make_split(dataset, held_out, seed) for held_out in receiver_folds(dataset.num_rx, folds, seed)]


def initial_point_cloud(dataset: SyntheticDataset, count: int, seed: int) -> np.ndarray:
    """Uniform points in the box spanned by all transmitters and receivers."""
    points = np.concatenate([dataset.tx_positions, dataset.rx_positions])
    lo, hi = points.min(axis=0), points.max(axis=0)
    hi = np.where(hi - lo < 1e-3, lo + 1e-3, hi)
    return make_rng(seed, "experiments.point_cloud").uniform(lo, hi, size=(count, 3))


def initial_scene(dataset: SyntheticDataset, config: TrainConfig, channels: Optional[int] = None) -> GaussianScene:
    if channels is None:
        channels = dataset.measurements.shape[2] if dataset.modality == "csi" else 1
    scene = init_scene(
        initial_point_cloud(dataset, config.k_init, config.seed), config.l_max, channels,
        seed=config.seed, modality=dataset.modality, coeff_init_std=config.coeff_init_std,
    )
    if config.real_radiance:
        scene.fle_coeffs[..., 1] = 0.0
    return scene


def conditioning_meta(config: TrainConfig) -> dict:
    return {
        "ablation": config.ablation,
        "probe_samples": config.conditioning.probe_samples,
        "occupancy_lookup": config.conditioning.occupancy_lookup,
    }


def save_model(path, scene: GaussianScene, conditioning: Optional[ConditioningState], config: TrainConfig,
               stage: str) -> None:
    meta = {"stage": stage, "seed": config.seed, "grid": config.grid.model_dump(mode="json")}
    if conditioning is not None:
        meta.update(conditioning_meta(config))
    save_checkpoint(path, scene, conditioning.to_arrays() if conditioning else None, meta)


def load_model(path):
    """(scene, conditioning or None, header metadata) from a checkpoint."""
    ckpt = load_checkpoint(path)
    conditioning = None
    if ckpt.conditioning is not None:
        conditioning = ConditioningState.from_arrays(
            ckpt.conditioning, ckpt.scene.channels,
            ablation=ckpt.meta.get("ablation", "full"),
            probe_samples=int(ckpt.meta.get("probe_samples", 16)),
            lookup=ckpt.meta.get("occupancy_lookup", "trilinear"),
        )
    return ckpt.scene, conditioning, ckpt.meta


def run_training(config: TrainConfig, dataset: SyntheticDataset, split: SplitSpec, stage: int,
                 output_dir, init_checkpoint=None) -> StageResult:
    """Run one stage (or the joint ablation) and write checkpoint plus loss CSV.

    Stage 2 needs a stage-1 checkpoint, by default ``<output_dir>/stage1.rxgs``.

    Raises:
        DataIOError: If the stage-1 checkpoint is missing
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = SphericalGrid.from_config(config.grid)
    save_config(config, out / f"train_config_stage{stage}.json")
    if config.ablation == "joint":
        result = train_joint(dataset, initial_scene(dataset, config), config, split, grid, checkpoint_dir=out)
        save_model(out / STAGE2_CHECKPOINT, result.scene, result.conditioning, config, "joint")
        result.trace.write_csv(out / "joint_loss.csv", config.smoothing_window)
        return result
    if stage == 1:
        result = train_stage1(dataset, initial_scene(dataset, config), config, split, grid, checkpoint_dir=out)
        save_model(out / STAGE1_CHECKPOINT, result.scene, None, config, "stage1")
        result.trace.write_csv(out / "stage1_loss.csv", config.smoothing_window)
        return result
    source = Path(init_checkpoint) if init_checkpoint else out / STAGE1_CHECKPOINT
    if not source.exists():
        raise DataIOError(f"Stage 2 needs a stage-1 checkpoint: {source} not found")
    scene, _, _ = load_model(source)
    result = train_stage2(dataset, scene, None, config, split, grid, checkpoint_dir=out)
    save_model(out / STAGE2_CHECKPOINT, result.scene, result.conditioning, config, "stage2")
    result.trace.write_csv(out / "stage2_loss.csv", config.smoothing_window)
    return result


@dataclass
class Evaluation:
    """Per-receiver metric records tagged seen/unseen."""

    records: dict[str, dict[str, list]] = field(default_factory=dict)

    def add(self, tag: str, metric: str, rx: int, value: float) -> None:
        self.records.setdefault(tag, {}).setdefault(metric, []).append((rx, value))

    def aggregate(self, tag: str, metric: str):
        records = self.records.get(tag, {}).get(metric, [])
        if not records:
            return None
        return per_receiver_aggregate(records)

    def summary_rows(self):
        for tag in sorted(self.records):
            for metric in sorted(self.records[tag]):
                mean, std, table = self.aggregate(tag, metric)
                yield tag, metric, repr(mean), repr(std), len(table)


def nearest_seen(rx_positions: np.ndarray, seen_rx, target: int) -> int:
    seen = np.asarray(seen_rx)
    d = np.linalg.norm(rx_positions[seen] - rx_positions[target], axis=1)
    return int(seen[np.argmin(d)])


def evaluate(scene: GaussianScene, conditioning: Optional[ConditioningState], dataset: SyntheticDataset,
             split: SplitSpec, grid: SphericalGrid, threads: int = 1, fallback: bool = False) -> Evaluation:
    """Score test transmitters at seen and unseen receivers.

    With ``fallback`` every unseen receiver is predicted as if it were the
    nearest seen receiver, the way a per-receiver model would be reused.
    """
    modality = get_modality(dataset.modality)
    tx_ids = split.test_tx or split.train_tx
    result = Evaluation()
    groups = [("seen", split.seen_rx), ("unseen", split.unseen_rx)]
    for tag, rx_ids in groups:
        if not rx_ids:
            continue
        query = [nearest_seen(dataset.rx_positions, split.seen_rx, j) if (fallback and tag == "unseen") else j
                 for j in rx_ids]
        for i in tx_ids:
            preds = predict(scene, dataset.tx_positions[i], dataset.rx_positions[query], grid, conditioning, threads)
            for n, j in enumerate(rx_ids):
                for metric, value in modality.evaluate(preds[n], dataset.measurements[i, j]).items():
                    result.add(tag, metric, j, value)
    return result


def baseline_evaluation(dataset: SyntheticDataset, split: SplitSpec) -> Evaluation:
    """Zero-model baseline: every receiver predicts its mean over training transmitters."""
    modality = get_modality(dataset.modality)
    tx_ids = split.test_tx or split.train_tx
    result = Evaluation()
    for tag, rx_ids in (("seen", split.seen_rx), ("unseen", split.unseen_rx)):
        for j in rx_ids:
            mean = modality.average(dataset.measurements[split.train_tx, j])
            for i in tx_ids:
                for metric, value in modality.evaluate(mean, dataset.measurements[i, j]).items():
                    result.add(tag, metric, j, value)
    return result


def write_evaluation(evaluation: Evaluation, output_dir, prefix: str = "eval") -> None:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for tag in ("seen", "unseen"):
        for metric, records in evaluation.records.get(tag, {}).items():
            _, _, table = per_receiver_aggregate(records)
            write_receiver_table(out / f"{prefix}_{tag}_{metric}.csv", metric, table, tag)
    write_csv(out / f"{prefix}_summary.csv", ["tag", "metric", "mean", "std", "receivers"], evaluation.summary_rows())


def sweep_receivers(config: TrainConfig, dataset: SyntheticDataset, counts, subsets: int = 3,
                    seed: int = DEFAULT_SPLIT_SEED) -> list[tuple]:
    """Train on random receiver subsets of each size; returns
    (count, subset, training receivers, tag, metric, mean) rows.

    Raises:
        ConfigError: If a count is outside [1, number of receivers]
    """
    bad = [c for c in counts if not 1 <= c <= dataset.num_rx]
    if bad:
        raise ConfigError(f"counts: receiver count must be in [1, {dataset.num_rx}], got {bad[0]}")
    grid = SphericalGrid.from_config(config.grid)
    metric = get_modality(dataset.modality).primary_metric
    rng = make_rng(seed, "experiments.sweep_receivers")
    rows = []
    for count in counts:
        for s in range(subsets):
            seen = sorted(int(j) for j in rng.choice(dataset.num_rx, size=count, replace=False))
            split = make_split(dataset, [j for j in range(dataset.num_rx) if j not in seen], seed)
            result = _train_both(_with_seen_reference(config, dataset, split), dataset, split, grid)
            evaluation = evaluate(result.scene, result.conditioning, dataset, split, grid, config.threads)
            receivers = " ".join(str(j) for j in seen)
            for tag in ("seen", "unseen"):
                agg = evaluation.aggregate(tag, metric)
                if agg is not None:
                    rows.append((count, s, receivers, tag, metric, repr(agg[0])))
    return rows


def sweep_reference(config: TrainConfig, dataset: SyntheticDataset, split: SplitSpec) -> list[tuple]:
    """Stage I reference choice: every seen receiver and "avg"; returns
    (reference, tag, rx, metric, value) rows."""
    grid = SphericalGrid.from_config(config.grid)
    metric = get_modality(dataset.modality).primary_metric
    rows = []
    for reference in list(split.seen_rx) + ["avg"]:
        cfg = config.model_copy(update={"reference_rx": reference})
        result = _train_both(cfg, dataset, split, grid)
        evaluation = evaluate(result.scene, result.conditioning, dataset, split, grid, config.threads)
        for tag in ("seen", "unseen"):
            for rx, value in evaluation.records.get(tag, {}).get(metric, []):
                rows.append((reference, tag, rx, metric, repr(float(value))))
    return rows


FOLD_METHODS = ("model", "fallback", "baseline")


@dataclass
class FoldRun:
    """One held-out receiver fold with model, fallback and baseline scores."""

    fold: int
    split: SplitSpec
    evaluations: dict[str, Evaluation]


def fold_protocol(config: TrainConfig, dataset: SyntheticDataset, folds: int = NUM_FOLDS,
                  seed: int = DEFAULT_SPLIT_SEED) -> list[FoldRun]:
    """Hold out each receiver fold once: train on the rest, score seen and unseen.

    A numeric reference receiver that falls in the held-out fold is replaced
    by its nearest seen receiver for that fold.
    """
    grid = SphericalGrid.from_config(config.grid)
    runs = []
    for fold, split in enumerate(fold_splits(dataset, folds, seed)):
        cfg = _with_seen_reference(config, dataset, split)
        logger.info("Fold %d/%d: unseen receivers %s, reference %s",
                    fold + 1, folds, split.unseen_rx, cfg.reference_rx)
        result = _train_both(cfg, dataset, split, grid)
        evaluations = {
            "model": evaluate(result.scene, result.conditioning, dataset, split, grid, config.threads),
            "fallback": evaluate(result.scene, result.conditioning, dataset, split, grid, config.threads,
                                 fallback=True),
            "baseline": baseline_evaluation(dataset, split),
        }
        runs.append(FoldRun(fold, split, evaluations))
    return runs


def merge_folds(runs: list[FoldRun], method: str = "model") -> Evaluation:
    """Pool one method's records over all folds."""
    merged = Evaluation()
    for run in runs:
        for tag, metrics in run.evaluations[method].records.items():
            for metric, records in metrics.items():
                for rx, value in records:
                    merged.add(tag, metric, rx, value)
    return merged


def fold_rows(runs: list[FoldRun]):
    """(fold, method, tag, rx_id, metric, value) rows."""
    for run in runs:
        for method in FOLD_METHODS:
            records = run.evaluations[method].records
            for tag in sorted(records):
                for metric in sorted(records[tag]):
                    for rx, value in records[tag][metric]:
                        yield run.fold, method, tag, rx, metric, repr(float(value))


def _with_seen_reference(config: TrainConfig, dataset: SyntheticDataset, split: SplitSpec) -> TrainConfig:
    if config.reference_rx == "avg" or config.reference_rx in split.seen_rx:
        return config
    reference = nearest_seen(dataset.rx_positions, split.seen_rx, config.reference_rx)
    return config.model_copy(update={"reference_rx": reference})


def _train_both(config: TrainConfig, dataset, split, grid) -> StageResult:
    stage1 = train_stage1(dataset, initial_scene(dataset, config), config, split, grid)
    return train_stage2(dataset, stage1.scene, None, config, split, grid)


def ablate(config: TrainConfig, dataset: SyntheticDataset, split: SplitSpec, variants=ABLATIONS,
           seeds=(0,)) -> list[tuple]:
    """Final smoothed train loss per (variant, seed) on equal budgets.

    Stage-II variants share one Stage I result per seed.
    """
    grid = SphericalGrid.from_config(config.grid)
    rows = []
    for seed in seeds:
        base = config.model_copy(update={"seed": seed})
        stage1 = None
        for variant in variants:
            cfg = base.model_copy(update={"ablation": variant})
            if variant == "joint":
                result = train_joint(dataset, initial_scene(dataset, cfg), cfg, split, grid)
            else:
                if stage1 is None:
                    stage1 = train_stage1(dataset, initial_scene(dataset, base), base, split, grid).scene
                result = train_stage2(dataset, stage1.copy(), None, cfg, split, grid)
            smooth = result.trace.smoothed(cfg.smoothing_window)
            final = float(smooth[-1]) if len(smooth) else float("nan")
            logger.info("Ablation %s seed %d: final loss %.6g", variant, seed, final)
            rows.append((variant, seed, repr(final)))
    return rows


@dataclass
class BenchResult:
    receivers: int
    batched_seconds: float
    sequential_seconds: float

    @property
    def speedup(self) -> float:
        return self.sequential_seconds / self.batched_seconds if self.batched_seconds > 0 else float("inf")


def bench(scene: GaussianScene, tx, rx_positions, grid: SphericalGrid,
          conditioning: Optional[ConditioningState] = None, threads: int = 1, repeats: int = 1) -> BenchResult:
    """Wall-clock of one batched render versus N single-receiver renders."""
    rx_positions = np.asarray(rx_positions, dtype=np.float64).reshape(-1, 3)
    base = as_complex(scene.fle_coeffs)
    if conditioning is not None:
        coeffs, _ = condition(base, rx_positions, scene, conditioning)
    else:
        coeffs = np.broadcast_to(base, (len(rx_positions),) + base.shape).copy()
    batched, sequential = [], []
    for _ in range(repeats):
        start = time.perf_counter()
        render_field(scene, tx, grid, coeffs, threads=threads)
        batched.append(time.perf_counter() - start)
        start = time.perf_counter()
        render_field(scene, tx, grid, coeffs, threads=threads, sequential=True)
        sequential.append(time.perf_counter() - start)
    result = BenchResult(len(rx_positions), min(batched), min(sequential))
    logger.info("Bench N=%d: batched %.4fs, sequential %.4fs, speedup %.2fx",
                result.receivers, result.batched_seconds, result.sequential_seconds, result.speedup)
    return result


def random_bench_scene(num_gaussians: int, l_max: int, seed: int, radius: float = 3.0) -> GaussianScene:
    """Gaussians scattered in a shell around the origin, for timing and checks."""
    rng = make_rng(seed, "experiments.bench_scene")
    direction = rng.normal(size=(num_gaussians, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    positions = direction * rng.uniform(0.5 * radius, radius, size=(num_gaussians, 1))
    scene = init_scene(positions, l_max, 1, seed=seed, coeff_init_std=0.5)
    scene.log_scales[:] = np.log(rng.uniform(0.05, 0.15, size=(num_gaussians, 3)) * radius)
    return scene


@dataclass
class PipelineCheck:
    geometry: GradCheckReport
    conditioning: GradCheckReport

    @property
    def max_rel_error(self) -> float:
        return max(self.geometry.max_rel_error, self.conditioning.max_rel_error)

    @property
    def passed(self) -> bool:
        return self.geometry.passed and self.conditioning.passed


def tiny_instance(seed: int, modality: str = "rssi", num_gaussians: int = 6, l_max: int = 2, channels: int = 1,
                  grid: Optional[SphericalGrid] = None):
    """Random small scene, conditioning, transmitter, receiver and target."""
    rng = make_rng(seed, "experiments.gradcheck")
    grid = grid or SphericalGrid(n_theta=6, n_phi=12, tile_size=3)
    channels = channels if modality == "csi" else 1
    tx = np.zeros(3)
    direction = rng.normal(size=(num_gaussians, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    positions = direction * rng.uniform(1.0, 2.0, size=(num_gaussians, 1))
    quats = rng.normal(size=(num_gaussians, 4))
    scene = GaussianScene(
        positions=positions,
        log_scales=np.log(rng.uniform(0.2, 0.5, size=(num_gaussians, 3))),
        quaternions=quats / np.linalg.norm(quats, axis=1, keepdims=True),
        tau_logits=logit(rng.uniform(0.2, 0.8, size=num_gaussians)),
        fle_coeffs=rng.normal(0.0, 0.5, size=(num_gaussians, (l_max + 1) ** 2, channels, 2)),
        l_max=l_max,
        channels=channels,
        modality=modality,
    )
    rx = rng.uniform(-0.5, 0.5, size=3) + np.array([0.0, 0.0, 2.5])
    occupancy = build_occupancy(scene, 8, -3.0 * np.ones(3), 3.0 * np.ones(3))
    conditioning = init_conditioning(l_max, channels, 2, 8, 4, np.full(3, 4.0), seed=seed, occupancy=occupancy,
                                     probe_samples=4)
    # Non-zero final layers so every branch carries gradient
    for mlp in (conditioning.global_mlp, conditioning.local_mlp):
        mlp.weights[-1][:] = rng.normal(0.0, 0.1, size=mlp.weights[-1].shape)
        mlp.biases[-1][:] = rng.normal(0.0, 0.1, size=mlp.biases[-1].shape)
    if modality == "rssi":
        target = np.asarray(-20.0 + rng.normal())
    elif modality == "csi":
        target = rng.normal(size=channels) + 1j * rng.normal(size=channels)
    else:
        target = rng.uniform(0.0, 1.0, size=grid.shape)
    return scene, conditioning, tx, rx, target, grid


def pipeline_gradcheck(scene: GaussianScene, conditioning: ConditioningState, tx, rx, target,
                       grid: SphericalGrid, config=None, step: float = 1e-6,
                       tolerance: float = 1e-3) -> PipelineCheck:
    """Finite-difference check of render, aggregation and loss.

    Geometry and coefficients are checked without conditioning; coefficients
    and conditioning parameters are checked on frozen geometry.
    """
    def scene_check():
        arrays = {name: getattr(scene, name).copy() for name in GEOMETRY_FIELDS + ("fle_coeffs",)}
        x0, layout = flatten(arrays)

        def f(x):
            for name, arr in unflatten(x, layout).items():
                setattr(scene, name, arr.copy())
            result = forward_backward(scene, tx, None, target, grid, config=config)
            return result.loss, flatten({name: result.grads[name] for name, _ in layout})[0]

        try:
            return grad_check(f, x0, step, tolerance)
        finally:
            for name, arr in arrays.items():
                setattr(scene, name, arr)

    def conditioning_check():
        live = conditioning_parameters(conditioning)
        live["fle_coeffs"] = scene.fle_coeffs
        saved = {name: arr.copy() for name, arr in live.items()}
        x0, layout = flatten(saved)

        def f(x):
            for name, arr in unflatten(x, layout).items():
                live[name][...] = arr
            result = forward_backward(scene, tx, rx, target, grid, config=config, conditioning=conditioning,
                                      train_geometry=False)
            return result.loss, flatten({name: result.grads[name] for name, _ in layout})[0]

        try:
            return grad_check(f, x0, step, tolerance)
        finally:
            for name, arr in saved.items():
                live[name][...] = arr

    return PipelineCheck(scene_check(), conditioning_check())


def write_gradcheck(check: PipelineCheck, path) -> None:
    rows = []
    for part, report in (("geometry", check.geometry), ("conditioning", check.conditioning)):
        rows.append((part, len(report.checked), repr(report.max_rel_error), report.worst_index, len(report.failures)))
    write_csv(path, ["part", "coordinates", "max_rel_error", "worst_index", "failures"], rows)
