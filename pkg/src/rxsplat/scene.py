"""Explicit Gaussian scene storage and adaptive density control."""

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from rxsplat.radiance import num_coeffs
from rxsplat.seeding import make_rng

logger = logging.getLogger(__name__)

INIT_TRANSMITTANCE = 0.1
RESET_TRANSMITTANCE = 0.01
SPLIT_SCALE_FACTOR = 0.8
# Fractions of the scene extent
CLONE_SIZE_FRACTION = 0.01
PRUNE_SIZE_FRACTION = 0.1

GEOMETRY_FIELDS = ("positions", "log_scales", "quaternions", "tau_logits")
PER_GAUSSIAN_FIELDS = GEOMETRY_FIELDS + ("fle_coeffs",)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


@dataclass
class GaussianScene:
    positions: np.ndarray
    log_scales: np.ndarray
    quaternions: np.ndarray
    tau_logits: np.ndarray
    fle_coeffs: np.ndarray
    l_max: int
    channels: int
    modality: str = "rssi"

    def __post_init__(self):
        K = len(self.positions)
        L = num_coeffs(self.l_max)
        expected = {
            "positions": (K, 3),
            "log_scales": (K, 3),
            "quaternions": (K, 4),
            "tau_logits": (K,),
            "fle_coeffs": (K, L, self.channels, 2),
        }
        for name, shape in expected.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(shape)
            setattr(self, name, arr)

    @property
    def num_gaussians(self) -> int:
        return len(self.positions)

    @property
    def num_coeffs(self) -> int:
        return num_coeffs(self.l_max)

    @property
    def tau(self) -> np.ndarray:
        return sigmoid(self.tau_logits)

    def copy(self) -> "GaussianScene":
        return GaussianScene(
            self.positions.copy(), self.log_scales.copy(), self.quaternions.copy(),
            self.tau_logits.copy(), self.fle_coeffs.copy(), self.l_max, self.channels, self.modality,
        )

    def take(self, index: np.ndarray) -> "GaussianScene":
        """Scene made of the Gaussians at ``index`` (copies)."""
        return GaussianScene(
            self.positions[index], self.log_scales[index], self.quaternions[index],
            self.tau_logits[index], self.fle_coeffs[index], self.l_max, self.channels, self.modality,
        )

    @classmethod
    def empty(cls, l_max: int, channels: int, modality: str = "rssi") -> "GaussianScene":
        L = num_coeffs(l_max)
        return cls(
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0),
            np.zeros((0, L, channels, 2)), l_max, channels, modality,
        )


@dataclass
class DensifyState:
    grad_accum: np.ndarray
    accum_count: np.ndarray
    scene_extent: float

    @classmethod
    def fresh(cls, num_gaussians: int, scene_extent: float) -> "DensifyState":
        return cls(np.zeros(num_gaussians), np.zeros(num_gaussians, dtype=np.int64), scene_extent)

    def accumulate(self, position_grad: np.ndarray) -> None:
        """Add one iteration's position-gradient norms."""
        self.grad_accum += np.linalg.norm(position_grad, axis=-1)
        self.accum_count += 1

    def reset(self, num_gaussians: int) -> None:
        self.grad_accum = np.zeros(num_gaussians)
        self.accum_count = np.zeros(num_gaussians, dtype=np.int64)

    def mean_grad(self) -> np.ndarray:
        return self.grad_accum / np.maximum(self.accum_count, 1)


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions (w, x, y, z), shape (..., 3, 3)."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
        ],
        axis=-2,
    )


def _normalized(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("Quaternion must be non-zero")
    return q / norm


def covariance_from(log_scale, quaternion) -> np.ndarray:
    """Sigma = R diag(exp(2 s)) R^T. Works on single Gaussians and batches.

    Raises:
        ValueError: On non-finite inputs or a zero quaternion
    """
    log_scale = np.asarray(log_scale, dtype=np.float64)
    quaternion = np.asarray(quaternion, dtype=np.float64)
    if not (np.all(np.isfinite(log_scale)) and np.all(np.isfinite(quaternion))):
        raise ValueError("covariance_from needs finite log_scale and quaternion")
    rot = quaternion_to_rotation(_normalized(quaternion))
    m = rot * np.exp(log_scale)[..., None, :]
    cov = m @ np.swapaxes(m, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def covariances(scene: GaussianScene) -> np.ndarray:
    return covariance_from(scene.log_scales, scene.quaternions)


def covariance_backward(log_scales: np.ndarray, quaternions: np.ndarray, grad_cov: np.ndarray):
    """Adjoint of covariance_from.

    Args:
        log_scales: (K, 3)
        quaternions: (K, 4) raw, not necessarily unit
        grad_cov: (K, 3, 3) dL/dSigma

    Returns:
        (dL/dlog_scales (K, 3), dL/dquaternions (K, 4))
    """
    q_norm = np.linalg.norm(quaternions, axis=-1, keepdims=True)
    q_hat = quaternions / q_norm
    rot = quaternion_to_rotation(q_hat)
    scales = np.exp(log_scales)
    m = rot * scales[:, None, :]
    sym = grad_cov + np.swapaxes(grad_cov, -1, -2)
    d_m = sym @ m
    d_log = scales * np.einsum("kri,kri->ki", d_m, rot)
    g = d_m * scales[:, None, :]

    w, x, y, z = q_hat.T
    g00, g01, g02 = g[:, 0, 0], g[:, 0, 1], g[:, 0, 2]
    g10, g11, g12 = g[:, 1, 0], g[:, 1, 1], g[:, 1, 2]
    g20, g21, g22 = g[:, 2, 0], g[:, 2, 1], g[:, 2, 2]
    d_hat = np.stack(
        [
            2 * (z * (g10 - g01) + y * (g02 - g20) + x * (g21 - g12)),
            2 * (y * (g01 + g10) + z * (g02 + g20) + w * (g21 - g12)) - 4 * x * (g11 + g22),
            2 * (x * (g01 + g10) + w * (g02 - g20) + z * (g12 + g21)) - 4 * y * (g00 + g22),
            2 * (w * (g10 - g01) + x * (g02 + g20) + y * (g12 + g21)) - 4 * z * (g00 + g11),
        ],
        axis=-1,
    )
    d_quat = (d_hat - q_hat * np.sum(q_hat * d_hat, axis=-1, keepdims=True)) / q_norm
    return d_log, d_quat


def scene_extent(positions: np.ndarray) -> float:
    """Diagonal of the bounding box of the positions."""
    if len(positions) == 0:
        return 0.0
    return float(np.linalg.norm(positions.max(axis=0) - positions.min(axis=0)))


def init_scene(point_cloud, l_max: int, channels: int, seed: int = 0, modality: str = "rssi",
               coeff_init_std: float = 0.0) -> GaussianScene:
    """Isotropic Gaussians at the cloud points, sized by nearest-neighbour distance.

    Raises:
        ValueError: With fewer than two points or duplicate points
    """
    points = np.asarray(point_cloud, dtype=np.float64).reshape(-1, 3)
    if len(points) < 2:
        raise ValueError(f"init_scene needs at least 2 points, got {len(points)}")
    dist, _ = cKDTree(points).query(points, k=2)
    nn = dist[:, 1]
    if np.any(nn == 0):
        dup = int(np.flatnonzero(nn == 0)[0])
        raise ValueError(f"Duplicate point at index {dup}")
    K = len(points)
    coeffs = np.zeros((K, num_coeffs(l_max), channels, 2))
    if coeff_init_std > 0:
        coeffs = make_rng(seed, "scene.coefficients").normal(0.0, coeff_init_std, size=coeffs.shape)
    quats = np.zeros((K, 4))
    quats[:, 0] = 1.0
    return GaussianScene(
        positions=points.copy(),
        log_scales=np.repeat(np.log(nn)[:, None], 3, axis=1),
        quaternions=quats,
        tau_logits=np.full(K, float(logit(INIT_TRANSMITTANCE))),
        fle_coeffs=coeffs,
        l_max=l_max,
        channels=channels,
        modality=modality,
    )


def normalize_quaternions(scene: GaussianScene) -> None:
    scene.quaternions[:] = _normalized(scene.quaternions)


def reset_transmittance(scene: GaussianScene) -> None:
    scene.tau_logits[:] = float(logit(RESET_TRANSMITTANCE))


def geometry_hash(scene: GaussianScene) -> str:
    """Digest of the geometric arrays; coefficients are excluded."""
    h = hashlib.blake2b(digest_size=16)
    for name in GEOMETRY_FIELDS:
        arr = np.ascontiguousarray(getattr(scene, name), dtype=np.float64)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def densify_and_prune(scene: GaussianScene, state: DensifyState, grad_threshold: float,
                      clone_fraction: float = CLONE_SIZE_FRACTION,
                      prune_fraction: float = PRUNE_SIZE_FRACTION,
                      rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Clone small and split large Gaussians with high positional gradient, then prune.

    With ``rng`` each split child is placed at a sample of the parent Gaussian,
    with scales reduced by 0.8. Without it the two children sit one standard
    deviation either side of the parent along its largest principal axis. Gaussians larger
    than ``prune_fraction`` of the scene extent are removed afterwards.

    Returns:
        Index map from new Gaussians to source Gaussians (-1 for created ones),
        used to realign optimizer state
    """
    K = scene.num_gaussians
    if K == 0:
        state.reset(0)
        return np.zeros(0, dtype=np.int64)

    mean_grad = state.mean_grad()
    selected = mean_grad > grad_threshold
    max_scale = np.exp(scene.log_scales.max(axis=1))
    clone = selected & (max_scale <= clone_fraction * state.scene_extent)
    split = selected & ~clone

    keep = ~split
    parts = [scene.take(np.flatnonzero(keep))]
    index_map = [np.flatnonzero(keep)]

    clone_idx = np.flatnonzero(clone)
    if len(clone_idx):
        parts.append(scene.take(clone_idx))
        index_map.append(np.full(len(clone_idx), -1))

    split_idx = np.flatnonzero(split)
    if len(split_idx):
        parents = scene.take(split_idx)
        rot = quaternion_to_rotation(_normalized(parents.quaternions))
        if rng is None:
            axis = np.argmax(parents.log_scales, axis=1)
            sigma = np.exp(parents.log_scales[np.arange(len(split_idx)), axis])
            offset = rot[np.arange(len(split_idx)), :, axis] * sigma[:, None]
            offsets = (offset, -offset)
        else:
            # p + R diag(s) z, z ~ N(0, I)
            stds = np.exp(parents.log_scales)
            offsets = tuple(np.einsum("kij,kj->ki", rot, rng.standard_normal(stds.shape) * stds) for _ in range(2))
        for offset in offsets:
            child = parents.copy()
            child.positions = parents.positions + offset
            child.log_scales = parents.log_scales + math.log(SPLIT_SCALE_FACTOR)
            parts.append(child)
            index_map.append(np.full(len(split_idx), -1))

    merged = {
        name: np.concatenate([getattr(p, name) for p in parts]) for name in PER_GAUSSIAN_FIELDS
    }
    index_map = np.concatenate(index_map)

    too_large = np.exp(merged["log_scales"].max(axis=1)) > prune_fraction * state.scene_extent
    retained = ~too_large
    for name, arr in merged.items():
        setattr(scene, name, arr[retained])
    index_map = index_map[retained]

    logger.debug(
        "Densify: cloned %d, split %d, pruned %d, K %d -> %d",
        len(clone_idx), len(split_idx), int(too_large.sum()), K, scene.num_gaussians,
    )
    state.reset(scene.num_gaussians)
    return index_map
