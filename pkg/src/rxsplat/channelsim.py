"""Analytic multipath channel simulator.

Scatterers are point interactors with a complex reflection coefficient.
A path runs tx -> s_i1 -> ... -> s_iP -> rx and contributes

    prod(Gamma) * prod(lambda / (4 pi d_j)) * exp(-j 2 pi / lambda * sum(d_j))

to the channel. The simulator doubles as a brute-force oracle for the
last-segment factorization and the receiver-gradient law.
"""

import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from rxsplat.errors import DataIOError
from rxsplat.seeding import make_rng

logger = logging.getLogger(__name__)

RSSI_FLOOR = 1e-12
LOS_GROUP = -1
DEFAULT_CSI_BANDWIDTH = 0.04
# Spectrum smoothing lobe reaches half power at this many grid cells
SPECTRUM_HALF_POWER_CELLS = 1.5
BOUNDS_TOLERANCE = 1e-9

MODALITIES = ("rssi", "csi", "spectrum")


@dataclass(frozen=True)
class Scatterer:
    position: tuple[float, float, float]
    reflection_coeff: complex

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.position):
            raise ValueError(f"Scatterer position must be finite, got {self.position}")
        if abs(self.reflection_coeff) > 1.0 + 1e-12:
            raise ValueError(
                f"|reflection_coeff| must be <= 1, got {abs(self.reflection_coeff):.6g}"
            )


@dataclass(frozen=True)
class PropagationPath:
    scatterer_indices: tuple[int, ...]
    segment_lengths: tuple[float, ...]

    @property
    def bounces(self) -> int:
        return len(self.scatterer_indices)

    @property
    def last_scatterer(self) -> int:
        return self.scatterer_indices[-1] if self.scatterer_indices else LOS_GROUP


@dataclass
class OracleScene:
    """Ground-truth scene.

    ``occlusion`` is an optional per-path multiplier in [0, 1]; it lets tests
    attenuate the last segment without a geometry model.
    """

    scatterers: list[Scatterer]
    wavelength: float
    max_bounces: int
    room_min: tuple[float, float, float]
    room_max: tuple[float, float, float]
    occlusion: Optional[Callable[[PropagationPath], float]] = field(default=None, compare=False)

    def __post_init__(self):
        if not self.wavelength > 0:
            raise ValueError(f"wavelength must be > 0, got {self.wavelength}")
        if self.max_bounces < 0:
            raise ValueError(f"max_bounces must be >= 0, got {self.max_bounces}")
        for k, s in enumerate(self.scatterers):
            if not self.contains(s.position):
                raise ValueError(f"Scatterer {k} at {s.position} lies outside the room")

    def contains(self, point) -> bool:
        return all(
            lo - BOUNDS_TOLERANCE <= v <= hi + BOUNDS_TOLERANCE
            for v, lo, hi in zip(point, self.room_min, self.room_max)
        )


@dataclass
class SyntheticDataset:
    """Dense M x N measurement table.

    ``measurements`` is (M, N) dB for rssi, (M, N, C) complex for csi and
    (M, N, H, W) amplitudes for spectrum.
    """

    tx_positions: np.ndarray
    rx_positions: np.ndarray
    measurements: np.ndarray
    modality: str

    @property
    def num_tx(self) -> int:
        return len(self.tx_positions)

    @property
    def num_rx(self) -> int:
        return len(self.rx_positions)


def _as_point(v) -> tuple[float, float, float]:
    return tuple(float(x) for x in v)


def enumerate_paths(scene: OracleScene, tx, rx) -> list[PropagationPath]:
    """List every path from tx to rx.

    The LoS path comes first, then sequences of 1..max_bounces scatterers
    without immediate repeats, shortest first and lexicographic within a
    length.

    Raises:
        ValueError: If tx or rx is outside the room, tx == rx, or a
            scatterer coincides with a path endpoint
    """
    tx, rx = _as_point(tx), _as_point(rx)
    for name, point in (("tx", tx), ("rx", rx)):
        if not scene.contains(point):
            raise ValueError(f"{name} {point} lies outside the room")
    if math.dist(tx, rx) == 0.0:
        raise ValueError("tx and rx coincide; the line-of-sight segment has zero length")

    points = [s.position for s in scene.scatterers]
    paths = [PropagationPath((), (math.dist(tx, rx),))]
    for bounces in range(1, scene.max_bounces + 1):
        for seq in itertools.product(range(len(points)), repeat=bounces):
            if any(a == b for a, b in zip(seq, seq[1:])):
                continue
            nodes = [tx, *(points[i] for i in seq), rx]
            lengths = tuple(math.dist(a, b) for a, b in zip(nodes, nodes[1:]))
            if min(lengths) == 0.0:
                raise ValueError(f"Path {list(seq)} has a zero-length segment")
            paths.append(PropagationPath(tuple(seq), lengths))
    return paths


def _propagation_factor(lengths: Sequence[float], wavelength: float) -> complex:
    loss = 1.0
    for d in lengths:
        loss *= wavelength / (4.0 * math.pi * d)
    # Reduce the phase to whole turns first so integer wavelengths cancel exactly
    turns = math.fsum(lengths) / wavelength
    frac = turns - math.floor(turns)
    return loss * complex(math.cos(2.0 * math.pi * frac), -math.sin(2.0 * math.pi * frac))


def path_coefficient(scene: OracleScene, path: PropagationPath) -> complex:
    """Complex gain of one path, including the occlusion hook if set."""
    if min(path.segment_lengths) <= 0:
        raise ValueError("All segment lengths must be > 0")
    gamma = complex(1.0)
    for i in path.scatterer_indices:
        gamma *= scene.scatterers[i].reflection_coeff
    coeff = gamma * _propagation_factor(path.segment_lengths, scene.wavelength)
    if scene.occlusion is not None:
        coeff *= scene.occlusion(path)
    return coeff


def upstream_coefficient(scene: OracleScene, path: PropagationPath) -> complex:
    """Path gain with the last segment (and the occlusion hook) removed."""
    if not path.scatterer_indices:
        raise ValueError("The line-of-sight path has no upstream part")
    gamma = complex(1.0)
    for i in path.scatterer_indices:
        gamma *= scene.scatterers[i].reflection_coeff
    return gamma * _propagation_factor(path.segment_lengths[:-1], scene.wavelength)


def channel_response(scene: OracleScene, tx, rx) -> complex:
    """Sum of all path coefficients in enumeration order."""
    total = complex(0.0)
    for path in enumerate_paths(scene, tx, rx):
        total += path_coefficient(scene, path)
    return total


def eta_eff_oracle(scatterer_pos, rx, wavelength: float, occlusion_product: float) -> complex:
    """Free-space loss, phase and occlusion of a scatterer-to-receiver leg."""
    d = math.dist(_as_point(scatterer_pos), _as_point(rx))
    if d == 0.0:
        raise ValueError("Scatterer and receiver coincide")
    return _propagation_factor((d,), wavelength) * occlusion_product


def group_paths_by_last_scatterer(paths, coefficients) -> dict[int, complex]:
    """Aggregate path coefficients by last interaction; LoS goes to group -1."""
    groups: dict[int, complex] = {}
    for path, coeff in zip(paths, coefficients):
        key = path.last_scatterer
        groups[key] = groups.get(key, complex(0.0)) + coeff
    return groups


def receiver_gradient(scene: OracleScene, tx, rx) -> np.ndarray:
    """Analytic dh/drx as a complex 3-vector."""
    rx_arr = np.asarray(rx, dtype=np.float64)
    k = 2.0 * math.pi / scene.wavelength
    grad = np.zeros(3, dtype=np.complex128)
    for path in enumerate_paths(scene, tx, rx):
        h = path_coefficient(scene, path)
        if path.scatterer_indices:
            last = np.asarray(scene.scatterers[path.scatterer_indices[-1]].position)
        else:
            last = np.asarray(tx, dtype=np.float64)
        d = path.segment_lengths[-1]
        grad += h * (1.0 / d + 1j * k) * (last - rx_arr) / d
    return grad


def csi_wavelengths(wavelength: float, channels: int, fractional_bandwidth: float = DEFAULT_CSI_BANDWIDTH) -> np.ndarray:
    """Subcarrier wavelengths spaced linearly around the carrier."""
    if channels == 1:
        return np.array([wavelength])
    offsets = np.arange(channels) / (channels - 1) - 0.5
    return wavelength * (1.0 + fractional_bandwidth * offsets)


def default_kappa(grid) -> float:
    """Concentration putting the smoothing lobe's half power at 1.5 cells."""
    step = min(grid.theta_step, grid.phi_step)
    return 2.0 * math.log(2.0) / (SPECTRUM_HALF_POWER_CELLS * step) ** 2


def spectrum_field(scene: OracleScene, tx, rx, grid, kappa: Optional[float] = None, normalize: bool = True) -> np.ndarray:
    """Angular power map at the transmitter, shape (n_theta, n_phi).

    Each last-scatterer group's power |Phi_k|^2 is placed at the grid cell
    nearest the tx -> s_k direction (tx -> rx for LoS) and spread with the
    kernel exp(kappa * (cos(gamma) - 1)).
    """
    paths = enumerate_paths(scene, tx, rx)
    groups = group_paths_by_last_scatterer(paths, [path_coefficient(scene, p) for p in paths])
    kappa = default_kappa(grid) if kappa is None else kappa
    tx_arr = np.asarray(tx, dtype=np.float64)
    cell_dirs = grid.directions()
    power = np.zeros(grid.shape)
    for key in sorted(groups):
        target = np.asarray(rx if key == LOS_GROUP else scene.scatterers[key].position, dtype=np.float64)
        i, j = grid.nearest_cell(target - tx_arr)
        cos_gamma = np.clip(cell_dirs @ cell_dirs[i, j], -1.0, 1.0)
        power += abs(groups[key]) ** 2 * np.exp(kappa * (cos_gamma - 1.0))
    peak = power.max()
    if normalize and peak > 0:
        power = power / peak
    return np.sqrt(power)


def measure_pair(scene: OracleScene, tx, rx, modality: str, grid=None, csi_channels: int = 4,
                 csi_bandwidth: float = DEFAULT_CSI_BANDWIDTH, kappa: Optional[float] = None,
                 normalize: bool = True):
    """Ground-truth measurement for one (tx, rx) pair."""
    if modality == "rssi":
        h = channel_response(scene, tx, rx)
        return 10.0 * math.log10(abs(h) ** 2 + RSSI_FLOOR)
    if modality == "csi":
        out = np.empty(csi_channels, dtype=np.complex128)
        for c, lam in enumerate(csi_wavelengths(scene.wavelength, csi_channels, csi_bandwidth)):
            out[c] = channel_response(_with_wavelength(scene, lam), tx, rx)
        return out
    if modality == "spectrum":
        if grid is None:
            raise ValueError("spectrum synthesis needs a SphericalGrid")
        return spectrum_field(scene, tx, rx, grid, kappa=kappa, normalize=normalize)
    raise ValueError(f"Unknown modality: {modality}\nValid options: {', '.join(MODALITIES)}")


def _with_wavelength(scene: OracleScene, wavelength: float) -> OracleScene:
    return OracleScene(
        scatterers=scene.scatterers,
        wavelength=wavelength,
        max_bounces=scene.max_bounces,
        room_min=scene.room_min,
        room_max=scene.room_max,
        occlusion=scene.occlusion,
    )


def synth_dataset(scene: OracleScene, tx_grid, rx_list, modality: str, grid=None,
                  csi_channels: int = 4, csi_bandwidth: float = DEFAULT_CSI_BANDWIDTH,
                  kappa: Optional[float] = None, normalize: bool = True,
                  threads: int = 1) -> SyntheticDataset:
    """Evaluate every (tx, rx) pair into a dense measurement table.

    Pairs are computed in parallel when ``threads > 1``; each result lands in
    its own slot so the table does not depend on the thread count.

    Raises:
        ValueError: If a grid is empty, the modality is unknown, or a pair
            fails (the message names the pair index)
    """
    tx_positions = np.asarray(tx_grid, dtype=np.float64).reshape(-1, 3)
    rx_positions = np.asarray(rx_list, dtype=np.float64).reshape(-1, 3)
    if len(tx_positions) == 0 or len(rx_positions) == 0:
        raise ValueError("tx_grid and rx_list must be non-empty")
    if modality not in MODALITIES:
        raise ValueError(f"Unknown modality: {modality}\nValid options: {', '.join(MODALITIES)}")

    M, N = len(tx_positions), len(rx_positions)
    if modality == "rssi":
        table = np.empty((M, N))
    elif modality == "csi":
        table = np.empty((M, N, csi_channels), dtype=np.complex128)
    else:
        if grid is None:
            raise ValueError("spectrum synthesis needs a SphericalGrid")
        table = np.empty((M, N, *grid.shape))

    def run_pair(pair):
        i, j = pair
        try:
            table[i, j] = measure_pair(
                scene, tx_positions[i], rx_positions[j], modality, grid=grid,
                csi_channels=csi_channels, csi_bandwidth=csi_bandwidth,
                kappa=kappa, normalize=normalize,
            )
        except ValueError as e:
            raise ValueError(f"pair (tx {i}, rx {j}): {e}") from e

    pairs = [(i, j) for i in range(M) for j in range(N)]
    if threads <= 1:
        for pair in pairs:
            run_pair(pair)
    else:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            # list() re-raises the first failure in pair order
            list(executor.map(run_pair, pairs))
    logger.info("Synthesized %d %s measurements (%d tx x %d rx)", M * N, modality, M, N)
    return SyntheticDataset(tx_positions, rx_positions, table, modality)


def random_scene(seed: int, count: int, room_min, room_max, wavelength: float = 0.125,
                 max_bounces: int = 2, reflection_range=(0.3, 0.9), margin: float = 0.25) -> OracleScene:
    """Scatterers placed uniformly inside the room, random reflection phase."""
    rng = make_rng(seed, "channelsim.scatterers")
    lo = np.asarray(room_min, dtype=np.float64) + margin
    hi = np.asarray(room_max, dtype=np.float64) - margin
    positions = rng.uniform(lo, hi, size=(count, 3))
    mags = rng.uniform(reflection_range[0], reflection_range[1], size=count)
    phases = rng.uniform(0.0, 2.0 * math.pi, size=count)
    scatterers = [
        Scatterer(_as_point(p), complex(m * math.cos(a), m * math.sin(a)))
        for p, m, a in zip(positions, mags, phases)
    ]
    return OracleScene(scatterers, wavelength, max_bounces, _as_point(room_min), _as_point(room_max))


def scene_from_config(scene_config, seed: int) -> OracleScene:
    """Build an OracleScene from a validated SceneConfig."""
    if scene_config.scatterers is not None:
        scatterers = [
            Scatterer(_as_point(s.position), complex(*s.reflection)) for s in scene_config.scatterers
        ]
        return OracleScene(
            scatterers, scene_config.wavelength, scene_config.max_bounces,
            _as_point(scene_config.room_min), _as_point(scene_config.room_max),
        )
    return random_scene(
        seed, scene_config.random_scatterers, scene_config.room_min, scene_config.room_max,
        wavelength=scene_config.wavelength, max_bounces=scene_config.max_bounces,
        reflection_range=scene_config.reflection_range,
    )


def sample_positions(positions_config, room_min, room_max, seed: int, name: str) -> np.ndarray:
    """Explicit positions, or ``count`` seeded draws inside the room margin."""
    if positions_config.positions is not None:
        return np.asarray(positions_config.positions, dtype=np.float64)
    rng = make_rng(seed, f"channelsim.positions.{name}")
    lo = np.asarray(room_min, dtype=np.float64) + positions_config.margin
    hi = np.asarray(room_max, dtype=np.float64) - positions_config.margin
    points = rng.uniform(lo, hi, size=(positions_config.count, 3))
    if positions_config.height is not None:
        points[:, 2] = positions_config.height
    return points


def scene_to_dict(scene: OracleScene) -> dict:
    return {
        "wavelength": scene.wavelength,
        "max_bounces": scene.max_bounces,
        "room_min": list(scene.room_min),
        "room_max": list(scene.room_max),
        "scatterers": [
            {
                "position": list(s.position),
                "reflection": [s.reflection_coeff.real, s.reflection_coeff.imag],
            }
            for s in scene.scatterers
        ],
    }


def scene_from_dict(data: dict) -> OracleScene:
    scatterers = [
        Scatterer(_as_point(s["position"]), complex(*s["reflection"])) for s in data["scatterers"]
    ]
    return OracleScene(
        scatterers, float(data["wavelength"]), int(data["max_bounces"]),
        _as_point(data["room_min"]), _as_point(data["room_max"]),
    )


def save_scene(scene: OracleScene, path) -> None:
    with open(path, "w") as f:
        json.dump(scene_to_dict(scene), f, indent=2)


def load_scene(path) -> OracleScene:
    """Read a scene JSON file.

    Raises:
        DataIOError: If the file is missing or malformed
    """
    try:
        with open(path) as f:
            return scene_from_dict(json.load(f))
    except FileNotFoundError:
        raise DataIOError(f"Scene file not found: {path}") from None
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DataIOError(f"Malformed scene file {path}: {e}") from None
