"""Two-stage training.

Stage I fits geometry and provisional radiance at one reference receiver
(or the per-transmitter mean over receivers). Stage II freezes geometry,
restarts the base coefficients and trains them together with the
receiver conditioning over every (tx, rx) training pair. The ``joint``
ablation trains everything at once over all pairs.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from rxsplat.channelsim import SyntheticDataset
from rxsplat.checkpoint import save_checkpoint
from rxsplat.conditioning import (
    ConditioningState,
    build_occupancy,
    condition,
    condition_backward,
    init_conditioning,
)
from rxsplat.config import SplitSpec, TrainConfig
from rxsplat.diffengine import CONDITIONING_PREFIX, GroupedAdam, degree_mask
from rxsplat.errors import ConfigError, NumericError
from rxsplat.fileio import write_csv
from rxsplat.modalities import get_modality
from rxsplat.radiance import as_complex, as_pairs
from rxsplat.scene import (
    GEOMETRY_FIELDS,
    PER_GAUSSIAN_FIELDS,
    DensifyState,
    GaussianScene,
    covariances,
    densify_and_prune,
    geometry_hash,
    normalize_quaternions,
    reset_transmittance,
    scene_extent,
)
from rxsplat.seeding import make_rng
from rxsplat.sphraster import SphericalGrid, backward_render, prepare_transmitter, render_with_state

logger = logging.getLogger(__name__)

OCCUPANCY_PAD_SIGMAS = 2.0
MIN_EXTENT = 1e-3


@dataclass
class LossTrace:
    iterations: list[int] = field(default_factory=list)
    raw: list[float] = field(default_factory=list)

    def append(self, iteration: int, loss: float) -> None:
        self.iterations.append(iteration)
        self.raw.append(loss)

    def smoothed(self, window: int = 50) -> np.ndarray:
        """Trailing mean over up to ``window`` values."""
        raw = np.asarray(self.raw, dtype=np.float64)
        if len(raw) == 0:
            return raw
        csum = np.concatenate([[0.0], np.cumsum(raw)])
        idx = np.arange(1, len(raw) + 1)
        start = np.maximum(idx - window, 0)
        return (csum[idx] - csum[start]) / (idx - start)

    def write_csv(self, path, window: int = 50) -> None:
        smooth = self.smoothed(window)
        write_csv(path, ["iteration", "raw", "smoothed"],
                  ([it, repr(r), repr(float(s))] for it, r, s in zip(self.iterations, self.raw, smooth)))


@dataclass
class StageResult:
    scene: GaussianScene
    trace: LossTrace
    conditioning: Optional[ConditioningState] = None


@dataclass
class PassResult:
    loss: float
    pred: np.ndarray
    grads: dict[str, np.ndarray]


def composite_loss(pred, gt, modality: str, config=None):
    """Modality loss and its gradient w.r.t. ``pred``.

    Raises:
        ValueError: If shapes differ
    """
    if np.shape(pred) != np.shape(gt):
        raise ValueError(f"Prediction shape {np.shape(pred)} does not match target {np.shape(gt)}")
    return get_modality(modality).loss(pred, gt, config)


def forward_backward(scene: GaussianScene, tx, rx, target, grid: SphericalGrid, config=None,
                     conditioning: Optional[ConditioningState] = None, threads: int = 1,
                     train_geometry: bool = True) -> PassResult:
    """Render one (tx, rx) pair, score it and back-propagate.

    Gradients are keyed like the optimizer parameters: scene array names,
    and ``cond.<name>`` for conditioning parameters. Local conditioning
    features are treated as constants of the geometry.
    """
    modality = get_modality(scene.modality)
    state = prepare_transmitter(scene, tx, grid)
    base = as_complex(scene.fle_coeffs)
    cache = None
    if conditioning is not None:
        coeffs, cache = condition(base, rx, scene, conditioning)
    else:
        coeffs = base[None]
    rendered = render_with_state(state, coeffs, threads=threads, keep_cache=True)
    omega = grid.cell_solid_angle()
    pred = modality.aggregate(rendered.values, omega)[0]
    loss, g_pred = composite_loss(pred, np.asarray(target), scene.modality, config)
    if not math.isfinite(loss):
        raise NumericError(f"Non-finite loss for tx {np.asarray(tx).tolist()}")
    g_values = modality.aggregate_backward(rendered.values, omega, np.asarray(g_pred)[None])
    bundle = backward_render(scene, state, coeffs, rendered, g_values, threads=threads)

    grads = {}
    if train_geometry:
        for name in GEOMETRY_FIELDS:
            grads[name] = getattr(bundle, name)
    if cache is not None:
        g_base, cond_grads = condition_backward(cache, bundle.coeffs, conditioning)
        grads.update({CONDITIONING_PREFIX + name: g for name, g in cond_grads.items()})
    else:
        g_base = bundle.coeffs[0]
    grads["fle_coeffs"] = as_pairs(g_base)
    return PassResult(loss, pred, grads)


def predict(scene: GaussianScene, tx, rx_positions, grid: SphericalGrid,
            conditioning: Optional[ConditioningState] = None, threads: int = 1) -> np.ndarray:
    """Measurements for every receiver in ``rx_positions`` from one transmitter."""
    rx_positions = np.asarray(rx_positions, dtype=np.float64).reshape(-1, 3)
    base = as_complex(scene.fle_coeffs)
    if conditioning is not None:
        coeffs, _ = condition(base, rx_positions, scene, conditioning)
    else:
        coeffs = np.broadcast_to(base, (len(rx_positions),) + base.shape)
    rendered = render_with_state(prepare_transmitter(scene, tx, grid), coeffs, threads=threads)
    return get_modality(scene.modality).aggregate(rendered.values, grid.cell_solid_angle())


def scene_parameters(scene: GaussianScene, fields=PER_GAUSSIAN_FIELDS) -> dict[str, np.ndarray]:
    return {name: getattr(scene, name) for name in fields}


def conditioning_parameters(conditioning: ConditioningState) -> dict[str, np.ndarray]:
    return {CONDITIONING_PREFIX + name: arr for name, arr in conditioning.parameters().items()}


def default_split(dataset: SyntheticDataset) -> SplitSpec:
    return SplitSpec(train_tx=list(range(dataset.num_tx)), test_tx=[], seen_rx=list(range(dataset.num_rx)))


def check_split(dataset: SyntheticDataset, split: SplitSpec) -> None:
    """Raises ConfigError if the split names ids outside the dataset."""
    for name, ids, limit in (
        ("train_tx", split.train_tx, dataset.num_tx),
        ("test_tx", split.test_tx, dataset.num_tx),
        ("seen_rx", split.seen_rx, dataset.num_rx),
        ("unseen_rx", split.unseen_rx, dataset.num_rx),
    ):
        bad = [i for i in ids if not 0 <= i < limit]
        if bad:
            raise ConfigError(f"split.{name}: id {bad[0]} out of range (dataset has {limit})")


def reference_targets(dataset: SyntheticDataset, split: SplitSpec, reference_rx, modality: str) -> np.ndarray:
    """Stage I target per training transmitter.

    Raises:
        ConfigError: If the reference receiver is not a seen receiver
    """
    tx_ids = np.asarray(split.train_tx)
    if reference_rx == "avg":
        m = get_modality(modality)
        seen = np.asarray(split.seen_rx)
        return np.stack([m.average(dataset.measurements[i, seen]) for i in tx_ids])
    if reference_rx not in split.seen_rx:
        raise ConfigError(f"reference_rx: receiver {reference_rx} is not among the seen receivers")
    return dataset.measurements[tx_ids, reference_rx]


def reinit_coefficients(scene: GaussianScene, std: float, seed: int, name: str, real_only: bool = False) -> None:
    coeffs = np.zeros_like(scene.fle_coeffs)
    if std > 0:
        coeffs = make_rng(seed, name).normal(0.0, std, size=coeffs.shape)
    if real_only:
        coeffs[..., 1] = 0.0
    scene.fle_coeffs = coeffs


def occupancy_bounds(scene: GaussianScene, dataset: SyntheticDataset):
    """Box around every Gaussian's 2-sigma extent and every receiver."""
    points = [dataset.rx_positions]
    if scene.num_gaussians:
        sigma = np.sqrt(np.stack([np.diag(c) for c in covariances(scene)]))
        points += [scene.positions - OCCUPANCY_PAD_SIGMAS * sigma, scene.positions + OCCUPANCY_PAD_SIGMAS * sigma]
    stacked = np.concatenate(points)
    lo, hi = stacked.min(axis=0), stacked.max(axis=0)
    pad = np.maximum(0.01 * (hi - lo), MIN_EXTENT)
    return lo - pad, hi + pad


def axis_extents(dataset: SyntheticDataset) -> np.ndarray:
    points = np.concatenate([dataset.tx_positions, dataset.rx_positions])
    return np.maximum(np.ptp(points, axis=0), MIN_EXTENT)


def make_conditioning(config: TrainConfig, scene: GaussianScene, dataset: SyntheticDataset) -> ConditioningState:
    """Fresh conditioning state with the occupancy grid of the current geometry."""
    cc = config.conditioning
    lo, hi = occupancy_bounds(scene, dataset)
    occupancy = None
    if config.ablation != "no_occlusion":
        occupancy = build_occupancy(scene, cc.grid_resolution, lo, hi, lookup=cc.occupancy_lookup)
    return init_conditioning(
        scene.l_max, scene.channels, cc.fourier_bands, cc.hidden_dim, cc.embed_dim,
        axis_extents(dataset), seed=config.seed, occupancy=occupancy,
        ablation=config.ablation, probe_samples=cc.probe_samples,
    )


def _checkpoint(config: TrainConfig, checkpoint_dir, stage: str, it: int, scene, conditioning) -> None:
    if not checkpoint_dir or not config.checkpoint_interval or it % config.checkpoint_interval:
        return
    path = Path(checkpoint_dir) / f"{stage}_{it:06d}.rxgs"
    save_checkpoint(path, scene, conditioning.to_arrays() if conditioning else None,
                    meta={"stage": stage, "iteration": it, "seed": config.seed})


def _run_loop(name: str, dataset, scene, config: TrainConfig, grid, pairs, targets,
              conditioning: Optional[ConditioningState], train_geometry: bool, total: int,
              checkpoint_dir=None) -> LossTrace:
    """Shared iteration loop; ``pairs`` is a list of (tx id, rx id, target index)."""
    trace = LossTrace()
    if total == 0:
        return trace
    rng = make_rng(config.seed, f"trainer.{name}.sampling")
    split_rng = make_rng(config.seed, f"trainer.{name}.densify")
    optimizer = GroupedAdam.from_config(config, total, scene.l_max)
    densify = DensifyState.fresh(scene.num_gaussians, scene_extent(scene.positions))
    densify_until = config.densify_until if config.densify_until is not None else total // 2
    fields = PER_GAUSSIAN_FIELDS if train_geometry else ("fle_coeffs",)

    for t in range(total):
        it = t + 1
        i, j, target_idx = pairs[int(rng.integers(len(pairs)))]
        rx = dataset.rx_positions[j] if conditioning is not None else None
        try:
            result = forward_backward(
                scene, dataset.tx_positions[i], rx, targets[target_idx], grid, config=config,
                conditioning=conditioning, threads=config.threads, train_geometry=train_geometry,
            )
        except NumericError as e:
            raise NumericError(f"{e} at {name} iteration {it}") from None
        trace.append(it, result.loss)

        grads = result.grads
        grads["fle_coeffs"][:, ~degree_mask(scene.l_max, t, config.t_ramp)] = 0.0
        if config.real_radiance:
            grads["fle_coeffs"][..., 1] = 0.0
        params = scene_parameters(scene, fields)
        if conditioning is not None:
            params.update(conditioning_parameters(conditioning))
        try:
            optimizer.step(params, grads, t)
        except NumericError as e:
            raise NumericError(f"{e} at {name} iteration {it}") from None

        if train_geometry:
            normalize_quaternions(scene)
            densify.accumulate(grads["positions"])
            if config.densify_from <= it <= densify_until and it % config.densify_interval == 0:
                index_map = densify_and_prune(scene, densify, config.densify_grad_threshold, rng=split_rng)
                optimizer.state.remap(PER_GAUSSIAN_FIELDS, index_map)
                if conditioning is not None and conditioning.occupancy is not None:
                    lo, hi = occupancy_bounds(scene, dataset)
                    conditioning.occupancy = build_occupancy(
                        scene, conditioning.occupancy.resolution, lo, hi, conditioning.occupancy.lookup
                    )
            if it % config.transmittance_reset_interval == 0 and it < total:
                reset_transmittance(scene)
                optimizer.state.first_moment.pop("tau_logits", None)
                optimizer.state.second_moment.pop("tau_logits", None)

        if it % config.log_interval == 0 or it == total:
            window = trace.smoothed(config.smoothing_window)
            logger.info("%s iter %d/%d loss %.6g (smoothed %.6g) K=%d",
                        name, it, total, result.loss, window[-1], scene.num_gaussians)
        _checkpoint(config, checkpoint_dir, name, it, scene, conditioning)
    return trace


def train_stage1(dataset: SyntheticDataset, scene: GaussianScene, config: TrainConfig,
                 split: Optional[SplitSpec] = None, grid: Optional[SphericalGrid] = None,
                 checkpoint_dir=None) -> StageResult:
    """Learn geometry and provisional radiance at the reference receiver.

    Each iteration samples one training transmitter uniformly.

    Raises:
        ConfigError: If the reference receiver is not usable
        NumericError: On a non-finite loss or gradient (names the iteration)
    """
    split = split or default_split(dataset)
    check_split(dataset, split)
    grid = grid or SphericalGrid.from_config(config.grid)
    targets = reference_targets(dataset, split, config.reference_rx, scene.modality)
    pairs = [(i, -1, n) for n, i in enumerate(split.train_tx)]
    logger.info("Stage 1: %d iterations, %d transmitters, reference %s",
                config.stage1_iters, len(pairs), config.reference_rx)
    trace = _run_loop("stage1", dataset, scene, config, grid, pairs, targets, None, True,
                      config.stage1_iters, checkpoint_dir)
    return StageResult(scene, trace)


def train_stage2(dataset: SyntheticDataset, scene: GaussianScene, conditioning: Optional[ConditioningState],
                 config: TrainConfig, split: Optional[SplitSpec] = None, grid: Optional[SphericalGrid] = None,
                 checkpoint_dir=None) -> StageResult:
    """Train base coefficients and conditioning on frozen geometry.

    Base coefficients restart from ``coeff_init_std`` noise. The occupancy
    grid is built before the loop when the state has none.

    Raises:
        RuntimeError: If the geometry changed, which would be a bug
    """
    split = split or default_split(dataset)
    check_split(dataset, split)
    grid = grid or SphericalGrid.from_config(config.grid)
    if conditioning is None:
        conditioning = make_conditioning(config, scene, dataset)
    before = geometry_hash(scene)
    reinit_coefficients(scene, config.coeff_init_std, config.seed, "trainer.stage2.coefficients",
                        config.real_radiance)
    pairs = [(i, j, (i, j)) for i in split.train_tx for j in split.seen_rx]
    targets = {(i, j): dataset.measurements[i, j] for i, j, _ in pairs}
    logger.info("Stage 2: %d iterations over %d pairs, ablation %s", config.stage2_iters, len(pairs), config.ablation)
    trace = _run_loop("stage2", dataset, scene, config, grid, pairs, targets, conditioning, False,
                      config.stage2_iters, checkpoint_dir)
    if geometry_hash(scene) != before:
        raise RuntimeError("Stage 2 modified frozen geometry")
    return StageResult(scene, trace, conditioning)


def train_joint(dataset: SyntheticDataset, scene: GaussianScene, config: TrainConfig,
                split: Optional[SplitSpec] = None, grid: Optional[SphericalGrid] = None,
                checkpoint_dir=None) -> StageResult:
    """Single-stage ablation: geometry, coefficients and conditioning together.

    Runs for the combined budget of both stages over all training pairs.
    """
    split = split or default_split(dataset)
    check_split(dataset, split)
    grid = grid or SphericalGrid.from_config(config.grid)
    conditioning = make_conditioning(config, scene, dataset)
    pairs = [(i, j, (i, j)) for i in split.train_tx for j in split.seen_rx]
    targets = {(i, j): dataset.measurements[i, j] for i, j, _ in pairs}
    total = config.stage1_iters + config.stage2_iters
    logger.info("Joint training: %d iterations over %d pairs", total, len(pairs))
    trace = _run_loop("joint", dataset, scene, config, grid, pairs, targets, conditioning, True,
                      total, checkpoint_dir)
    return StageResult(scene, trace, conditioning)
