"""Tile-based spherical rasterizer anchored at the transmitter.

Everything that depends only on the transmitter (projection, tile lists,
depth order, basis values) is computed once in ``prepare_transmitter`` and
shared by every receiver. Receivers differ only through their radiance
coefficients, so a batch of N receivers costs one preprocessing pass plus
N cheap coefficient reductions and blends.

Complex gradients follow g = dL/dRe + j dL/dIm throughout.
"""

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from rxsplat.errors import NumericError
from rxsplat.modalities import get_modality
from rxsplat.radiance import as_complex, basis_with_derivatives, reduce_angle
from rxsplat.scene import GaussianScene, covariance_backward, covariances

logger = logging.getLogger(__name__)

WEIGHT_CLAMP = 0.999
EARLY_STOP_T = 1e-4
SPAN_SIGMAS = 3.0
MIN_DEPTH = 1e-9
# Guard for the azimuth gradient on the polar axis
MIN_RHO = 1e-12


@dataclass(frozen=True)
class SphericalGrid:
    """Cell-centred (theta, phi) direction grid."""

    n_theta: int
    n_phi: int
    tile_size: int = 6
    radius: float = 0.0
    theta_min: float = 0.0
    theta_max: float = math.pi

    def __post_init__(self):
        if self.n_theta < 1 or self.n_phi < 1:
            raise ValueError("n_theta and n_phi must be >= 1")
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")
        if not 0.0 <= self.theta_min < self.theta_max <= math.pi:
            raise ValueError("Need 0 <= theta_min < theta_max <= pi")

    @classmethod
    def from_config(cls, grid_config) -> "SphericalGrid":
        return cls(
            n_theta=grid_config.n_theta,
            n_phi=grid_config.n_phi,
            tile_size=grid_config.tile_size,
            radius=grid_config.radius,
            theta_min=grid_config.theta_min,
            theta_max=grid_config.theta_max,
        )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_theta, self.n_phi)

    @property
    def theta_step(self) -> float:
        return (self.theta_max - self.theta_min) / self.n_theta

    @property
    def phi_step(self) -> float:
        return 2.0 * math.pi / self.n_phi

    @property
    def thetas(self) -> np.ndarray:
        return self.theta_min + (np.arange(self.n_theta) + 0.5) * self.theta_step

    @property
    def phis(self) -> np.ndarray:
        return (np.arange(self.n_phi) + 0.5) * self.phi_step

    @property
    def tiles_theta(self) -> int:
        return -(-self.n_theta // self.tile_size)

    @property
    def tiles_phi(self) -> int:
        return -(-self.n_phi // self.tile_size)

    @property
    def num_tiles(self) -> int:
        return self.tiles_theta * self.tiles_phi

    def tile_slices(self, tile: int) -> tuple[slice, slice]:
        ti, tj = divmod(tile, self.tiles_phi)
        ts = self.tile_size
        return (
            slice(ti * ts, min(self.n_theta, (ti + 1) * ts)),
            slice(tj * ts, min(self.n_phi, (tj + 1) * ts)),
        )

    def directions(self) -> np.ndarray:
        """Unit vectors at cell centres, shape (H, W, 3)."""
        t, p = np.meshgrid(self.thetas, self.phis, indexing="ij")
        return np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=-1)

    def cell_solid_angle(self) -> np.ndarray:
        """Solid angle of each cell row, shape (H,)."""
        edges = self.theta_min + np.arange(self.n_theta + 1) * self.theta_step
        return (np.cos(edges[:-1]) - np.cos(edges[1:])) * self.phi_step

    def nearest_cell(self, vector) -> tuple[int, int]:
        """Cell whose centre direction is closest to ``vector``."""
        v = np.asarray(vector, dtype=np.float64)
        v = v / np.linalg.norm(v)
        dots = self.directions() @ v
        i, j = np.unravel_index(int(np.argmax(dots)), self.shape)
        return int(i), int(j)


@dataclass
class ProjectedGaussian:
    center_angles: tuple[float, float]
    depth: float
    angular_cov: np.ndarray
    weight_scale: float
    tile_span: tuple[range, tuple[int, ...]]

    def tiles(self, grid: SphericalGrid) -> list[int]:
        rows, cols = self.tile_span
        return [ti * grid.tiles_phi + tj for ti in rows for tj in cols]


@dataclass
class Projection:
    """Projection of all K Gaussians, as arrays."""

    visible: np.ndarray  # (K,) bool
    theta: np.ndarray
    phi: np.ndarray
    depth: np.ndarray
    frame: np.ndarray  # (K, 3, 2) columns e_theta, e_phi
    angular_cov: np.ndarray  # (K, 2, 2)
    conic: np.ndarray  # (K, 2, 2) inverse of angular_cov
    tau: np.ndarray
    tile_rows: list
    tile_cols: list


def _frames(theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    ct, st, cp, sp = np.cos(theta), np.sin(theta), np.cos(phi), np.sin(phi)
    e_theta = np.stack([ct * cp, ct * sp, -st], axis=-1)
    e_phi = np.stack([-sp, cp, np.zeros_like(phi)], axis=-1)
    return np.stack([e_theta, e_phi], axis=-1)


def _span_tiles(theta, phi, angular_cov, grid: SphericalGrid):
    """Tile rows and wrapped tile columns covered by the 3-sigma extent."""
    a, b, c = angular_cov[0, 0], angular_cov[0, 1], angular_cov[1, 1]
    lam_max = 0.5 * (a + c) + math.sqrt(max(0.25 * (a - c) ** 2 + b * b, 0.0))
    r = SPAN_SIGMAS * math.sqrt(max(lam_max, 0.0))
    lo, hi = theta - r, theta + r
    if hi < grid.theta_min or lo > grid.theta_max:
        return range(0), ()
    i_lo = max(0, int(math.floor((lo - grid.theta_min) / grid.theta_step)))
    i_hi = min(grid.n_theta - 1, int(math.floor((hi - grid.theta_min) / grid.theta_step)))
    ts = grid.tile_size
    rows = range(i_lo // ts, i_hi // ts + 1)

    sin_t = math.sin(theta)
    full_ring = lo <= 0.0 or hi >= math.pi or sin_t <= 0.0 or r / sin_t >= math.pi
    if full_ring:
        return rows, tuple(range(grid.tiles_phi))
    r_phi = r / sin_t
    j_lo = int(math.floor((phi - r_phi) / grid.phi_step))
    j_hi = int(math.floor((phi + r_phi) / grid.phi_step))
    if j_hi - j_lo + 1 >= grid.n_phi:
        return rows, tuple(range(grid.tiles_phi))
    cols = sorted({(j % grid.n_phi) // ts for j in range(j_lo, j_hi + 1)})
    return rows, tuple(cols)


def project_gaussians(positions: np.ndarray, covs: np.ndarray, tau: np.ndarray, tx,
                      grid: SphericalGrid) -> Projection:
    """Project K Gaussians onto the sphere around ``tx``.

    Gaussians closer than the grid radius are culled.
    """
    tx = np.asarray(tx, dtype=np.float64)
    K = len(positions)
    v = positions - tx
    depth = np.linalg.norm(v, axis=-1)
    visible = depth >= max(grid.radius, MIN_DEPTH)
    safe_depth = np.where(visible, depth, 1.0)
    theta = np.arccos(np.clip(v[:, 2] / safe_depth, -1.0, 1.0))
    phi = reduce_angle(np.arctan2(v[:, 1], v[:, 0]))
    frame = _frames(theta, phi)
    angular_cov = np.swapaxes(frame, 1, 2) @ covs @ frame / safe_depth[:, None, None] ** 2
    det = angular_cov[:, 0, 0] * angular_cov[:, 1, 1] - angular_cov[:, 0, 1] * angular_cov[:, 1, 0]
    visible &= det > 0
    safe_det = np.where(det > 0, det, 1.0)
    conic = np.empty_like(angular_cov)
    conic[:, 0, 0] = angular_cov[:, 1, 1] / safe_det
    conic[:, 1, 1] = angular_cov[:, 0, 0] / safe_det
    conic[:, 0, 1] = -angular_cov[:, 0, 1] / safe_det
    conic[:, 1, 0] = -angular_cov[:, 1, 0] / safe_det

    tile_rows, tile_cols = [], []
    for k in range(K):
        if visible[k]:
            rows, cols = _span_tiles(theta[k], phi[k], angular_cov[k], grid)
        else:
            rows, cols = range(0), ()
        tile_rows.append(rows)
        tile_cols.append(cols)
    return Projection(visible, theta, phi, depth, frame, angular_cov, conic,
                      np.asarray(tau, dtype=np.float64), tile_rows, tile_cols)


def project_gaussian(p_k, cov3, tau: float, tx, grid: SphericalGrid) -> Optional[ProjectedGaussian]:
    """Project one Gaussian; None when it is culled."""
    proj = project_gaussians(
        np.asarray(p_k, dtype=np.float64).reshape(1, 3),
        np.asarray(cov3, dtype=np.float64).reshape(1, 3, 3),
        np.array([tau], dtype=np.float64), tx, grid,
    )
    if not proj.visible[0]:
        return None
    return ProjectedGaussian(
        center_angles=(float(proj.theta[0]), float(proj.phi[0])),
        depth=float(proj.depth[0]),
        angular_cov=proj.angular_cov[0],
        weight_scale=float(proj.tau[0]),
        tile_span=(proj.tile_rows[0], proj.tile_cols[0]),
    )


def bin_and_sort(projection: Projection, grid: SphericalGrid) -> list[np.ndarray]:
    """Per-tile Gaussian index lists, depth ascending, ties by index."""
    buckets: list[list[int]] = [[] for _ in range(grid.num_tiles)]
    for k, (rows, cols) in enumerate(zip(projection.tile_rows, projection.tile_cols)):
        for ti in rows:
            for tj in cols:
                buckets[ti * grid.tiles_phi + tj].append(k)
    lists = []
    for bucket in buckets:
        idx = np.asarray(bucket, dtype=np.int64)
        order = np.lexsort((idx, projection.depth[idx]))
        lists.append(idx[order])
    return lists


def blend_ray(depths, weights, signals):
    """Front-to-back composite along one ray.

    Args:
        depths: (G,) depths, used for ordering
        weights: (G,) blend weights, clamped into [0, 0.999]
        signals: (G,) complex per-Gaussian signals

    Returns:
        (C, final transmittance)
    """
    order = np.lexsort((np.arange(len(depths)), np.asarray(depths)))
    w = np.clip(np.asarray(weights, dtype=np.float64)[order], 0.0, WEIGHT_CLAMP)
    s = np.asarray(signals, dtype=np.complex128)[order]
    total = complex(0.0)
    t = 1.0
    for w_k, s_k in zip(w, s):
        total += t * w_k * s_k
        t *= 1.0 - w_k
        if t < EARLY_STOP_T:
            break
    return total, t


@dataclass
class TransmitterState:
    """Receiver-independent render state for one transmitter."""

    tx: np.ndarray
    grid: SphericalGrid
    projection: Projection
    tile_lists: list[np.ndarray]
    basis: np.ndarray  # (K, L) complex
    basis_dtheta: np.ndarray
    basis_dphi: np.ndarray

    def state_hash(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        p = self.projection
        for arr in (p.visible, p.theta, p.phi, p.depth, p.angular_cov, p.conic, p.tau,
                    self.basis, self.basis_dtheta, self.basis_dphi):
            h.update(np.ascontiguousarray(arr).tobytes())
        for idx in self.tile_lists:
            h.update(len(idx).to_bytes(8, "little"))
            h.update(idx.tobytes())
        return h.hexdigest()


def prepare_transmitter(scene: GaussianScene, tx, grid: SphericalGrid) -> TransmitterState:
    """Project, bin, sort and evaluate the basis once per transmitter."""
    tx = np.asarray(tx, dtype=np.float64)
    proj = project_gaussians(scene.positions, covariances(scene), scene.tau, tx, grid)
    tile_lists = bin_and_sort(proj, grid)
    y, y_dt, y_dp = basis_with_derivatives(proj.theta, proj.phi, scene.l_max)
    return TransmitterState(tx, grid, proj, tile_lists, y, y_dt, y_dp)


@dataclass
class TileCache:
    idx: np.ndarray
    rows: slice
    cols: slice
    delta0: np.ndarray
    delta1: np.ndarray
    dphi: np.ndarray
    gauss: np.ndarray
    weights: np.ndarray
    clamped: np.ndarray
    t_prev: np.ndarray
    active: np.ndarray
    contrib: np.ndarray


@dataclass
class RenderedField:
    """Complex field per receiver and channel, shape (N, C, H, W)."""

    values: np.ndarray
    transmittance: np.ndarray  # (H, W), shared by all receivers
    caches: Optional[list] = field(default=None, repr=False)

    @property
    def planes(self) -> np.ndarray:
        """Real and imaginary planes, shape (N, C, 2, H, W)."""
        return np.stack([self.values.real, self.values.imag], axis=2)

    @property
    def final_transmittance(self) -> np.ndarray:
        n = self.values.shape[0]
        return np.broadcast_to(self.transmittance, (n,) + self.transmittance.shape)


def receiver_signals(state: TransmitterState, coeffs: np.ndarray) -> np.ndarray:
    """Reduce coefficients (N, K, L, C) complex against the shared basis -> (N, K, C).

    The reduction runs component by component so every receiver row is
    summed in the same order whatever the batch size.
    """
    N, K, L, C = coeffs.shape
    out = np.zeros((N, K, C), dtype=np.complex128)
    for l in range(L):
        out += coeffs[:, :, l, :] * state.basis[None, :, l, None]
    return out


def _tile_geometry(state: TransmitterState, tile: int):
    grid = state.grid
    rows, cols = grid.tile_slices(tile)
    idx = state.tile_lists[tile]
    p = state.projection
    t_p, p_p = np.meshgrid(grid.thetas[rows], grid.phis[cols], indexing="ij")
    t_p, p_p = t_p.ravel(), p_p.ravel()
    theta_k, phi_k = p.theta[idx][:, None], p.phi[idx][:, None]
    dphi = np.mod(p_p[None, :] - phi_k + math.pi, 2.0 * math.pi) - math.pi
    delta0 = t_p[None, :] - theta_k
    delta1 = np.sin(theta_k) * dphi
    q_ = p.conic[idx]
    q = (q_[:, 0, 0, None] * delta0 ** 2 + 2.0 * q_[:, 0, 1, None] * delta0 * delta1
         + q_[:, 1, 1, None] * delta1 ** 2)
    gauss = np.exp(-0.5 * q)
    w_raw = p.tau[idx][:, None] * gauss
    clamped = w_raw > WEIGHT_CLAMP
    w = np.minimum(w_raw, WEIGHT_CLAMP)
    one_minus = 1.0 - w
    t_prev = np.ones_like(w)
    if len(idx) > 1:
        t_prev[1:] = np.cumprod(one_minus[:-1], axis=0)
    active = t_prev >= EARLY_STOP_T
    contrib = np.where(active, t_prev * w, 0.0)
    t_after = np.where(active, t_prev * one_minus, np.inf)
    t_final = t_after.min(axis=0) if len(idx) else np.ones(t_p.shape)
    cache = TileCache(idx, rows, cols, delta0, delta1, dphi, gauss, w, clamped, t_prev, active, contrib)
    return cache, t_final


def _forward_tile(state: TransmitterState, signals: np.ndarray, tile: int):
    cache, t_final = _tile_geometry(state, tile)
    n, c = signals.shape[0], signals.shape[2]
    p = cache.contrib.shape[1]
    if len(cache.idx) == 0:
        return cache, np.zeros((n, c, p), dtype=np.complex128), t_final
    s = signals[:, cache.idx, :]
    prod = cache.contrib[None, :, None, :] * s[:, :, :, None]
    # Sequential accumulation keeps each receiver's sum independent of N
    values = np.cumsum(prod, axis=1)[:, -1]
    return cache, values, t_final


def _map_tiles(fn, tiles, threads: int):
    if threads <= 1:
        return [fn(t) for t in tiles]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(fn, tiles))


def _check_finite(coeffs: np.ndarray) -> None:
    bad = ~np.isfinite(coeffs)
    if np.any(bad):
        j, k = np.argwhere(bad)[0][:2]
        raise NumericError(f"Non-finite radiance coefficient for receiver {j}, Gaussian {k}")


def render_with_state(state: TransmitterState, coeffs: np.ndarray, threads: int = 1,
                      keep_cache: bool = False) -> RenderedField:
    """Render N receivers from a prepared transmitter state.

    Args:
        state: Output of prepare_transmitter
        coeffs: (N, K, L, C) complex or (N, K, L, C, 2) real pairs
        threads: Worker threads over tiles
        keep_cache: Retain per-tile intermediates for backward_render
    """
    coeffs = np.asarray(coeffs)
    if not np.iscomplexobj(coeffs):
        coeffs = as_complex(coeffs)
    _check_finite(coeffs)
    grid = state.grid
    N, _, _, C = coeffs.shape
    signals = receiver_signals(state, coeffs)
    values = np.zeros((N, C) + grid.shape, dtype=np.complex128)
    trans = np.ones(grid.shape)
    results = _map_tiles(lambda t: _forward_tile(state, signals, t), range(grid.num_tiles), threads)
    caches = []
    for cache, tile_values, t_final in results:
        h = cache.rows.stop - cache.rows.start
        w = cache.cols.stop - cache.cols.start
        values[:, :, cache.rows, cache.cols] = tile_values.reshape(N, C, h, w)
        trans[cache.rows, cache.cols] = t_final.reshape(h, w)
        caches.append(cache)
    return RenderedField(values, trans, caches if keep_cache else None)


def render_field(scene: GaussianScene, tx, grid: SphericalGrid, per_receiver_coeffs,
                 threads: int = 1, sequential: bool = False, keep_cache: bool = False) -> RenderedField:
    """Render all receivers at once, or one by one when ``sequential``.

    ``per_receiver_coeffs`` is (N, K, L, C) complex or (N, K, L, C, 2) pairs.
    """
    coeffs = np.asarray(per_receiver_coeffs)
    if not np.iscomplexobj(coeffs):
        coeffs = as_complex(coeffs)
    if coeffs.ndim != 4 or coeffs.shape[0] < 1:
        raise ValueError(f"per_receiver_coeffs must be (N, K, L, C) with N >= 1, got {coeffs.shape}")
    if sequential:
        fields = [
            render_with_state(prepare_transmitter(scene, tx, grid), coeffs[j:j + 1], threads=threads)
            for j in range(coeffs.shape[0])
        ]
        return RenderedField(np.concatenate([f.values for f in fields]), fields[0].transmittance)
    state = prepare_transmitter(scene, tx, grid)
    return render_with_state(state, coeffs, threads=threads, keep_cache=keep_cache)


@dataclass
class GradientBundle:
    """Gradients of a render w.r.t. scene parameters.

    ``coeffs`` holds per-receiver coefficient gradients (N, K, L, C) in the
    complex convention; ``coeff_pairs`` gives the same as (a, b) pairs.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    quaternions: np.ndarray
    tau_logits: np.ndarray
    coeffs: np.ndarray

    @property
    def coeff_pairs(self) -> np.ndarray:
        return np.stack([self.coeffs.real, self.coeffs.imag], axis=-1)


def _backward_tile(state: TransmitterState, cache: TileCache, signals, grad_tile):
    """Per-tile partials: (idx, d_signals, d_theta, d_phi, d_conic, d_tau)."""
    idx = cache.idx
    s = signals[:, idx, :]
    g = grad_tile
    d_signals = np.einsum("gp,ncp->ngc", cache.contrib, g)
    dcontrib = np.einsum("ncp,ngc->gp", np.conj(g), s).real
    term = dcontrib * cache.contrib
    suffix = np.cumsum(term[::-1], axis=0)[::-1] - term
    dw = np.where(cache.active,dcontrib * cache.t_prev - suffix / (1.0 - cache.weights), 0.0)
    dw_raw = np.where(cache.clamped, 0.0, dw)
    tau = state.projection.tau[idx][:, None]
    d_tau = np.sum(dw_raw * cache.gauss, axis=1)
    dq = -0.5 * dw_raw * tau * cache.gauss

    q_ = state.projection.conic[idx]
    d0, d1 = cache.delta0, cache.delta1
    d_conic = np.empty((len(idx), 2, 2))
    d_conic[:, 0, 0] = np.sum(dq * d0 * d0, axis=1)
    d_conic[:, 1, 1] = np.sum(dq * d1 * d1, axis=1)
    d_conic[:, 0, 1] = d_conic[:, 1, 0] = np.sum(dq * d0 * d1, axis=1)
    d_delta0 = dq * (2.0 * q_[:, 0, 0, None] * d0 + 2.0 * q_[:, 0, 1, None] * d1)
    d_delta1 = dq * (2.0 * q_[:, 0, 1, None] * d0 + 2.0 * q_[:, 1, 1, None] * d1)
    theta_k = state.projection.theta[idx]
    d_theta = -np.sum(d_delta0, axis=1) + np.cos(theta_k) * np.sum(d_delta1 * cache.dphi, axis=1)
    d_phi = -np.sin(theta_k) * np.sum(d_delta1, axis=1)
    return idx, d_signals, d_theta, d_phi, d_conic, d_tau


def backward_render(scene: GaussianScene, state: TransmitterState, coeffs: np.ndarray,
                    rendered: RenderedField, grad_values: np.ndarray, threads: int = 1) -> GradientBundle:
    """Adjoint of render_with_state.

    Args:
        scene: Scene the state was prepared from
        state: Transmitter state used for the forward pass
        coeffs: (N, K, L, C) complex coefficients used for the forward pass
        rendered: Forward output with keep_cache=True
        grad_values: dL/d values, complex (N, C, H, W)
        threads: Worker threads over tiles; partials merge in tile order
    """
    coeffs = np.asarray(coeffs)
    if not np.iscomplexobj(coeffs):
        coeffs = as_complex(coeffs)
    if rendered.caches is None:
        raise ValueError("backward_render needs a forward pass run with keep_cache=True")
    N, K, L, C = coeffs.shape
    proj = state.projection
    signals = receiver_signals(state, coeffs)

    def run(cache):
        h = cache.rows.stop - cache.rows.start
        w = cache.cols.stop - cache.cols.start
        g_tile = grad_values[:, :, cache.rows, cache.cols].reshape(N, C, h * w)
        if len(cache.idx) == 0:
            return None
        return _backward_tile(state, cache, signals, g_tile)

    partials = _map_tiles(run, rendered.caches, threads)
    d_signals = np.zeros((N, K, C), dtype=np.complex128)
    d_theta = np.zeros(K)
    d_phi = np.zeros(K)
    d_conic = np.zeros((K, 2, 2))
    d_tau = np.zeros(K)
    for part in partials:
        if part is None:
            continue
        idx, ds, dt, dp, dc, dtau = part
        d_signals[:, idx, :] += ds
        d_theta[idx] += dt
        d_phi[idx] += dp
        d_conic[idx] += dc
        d_tau[idx] += dtau

    # Coefficients and the signal's dependence on direction
    d_coeffs = np.conj(state.basis)[None, :, :, None] * d_signals[:, :, None, :]
    ds_dtheta = np.einsum("nklc,kl->nkc", coeffs, state.basis_dtheta)
    ds_dphi = np.einsum("nklc,kl->nkc", coeffs, state.basis_dphi)
    d_theta += np.sum((np.conj(d_signals) * ds_dtheta).real, axis=(0, 2))
    d_phi += np.sum((np.conj(d_signals) * ds_dphi).real, axis=(0, 2))

    # Conic -> angular covariance -> (Sigma, frame, depth)
    vis = proj.visible
    d_ang = -proj.conic @ d_conic @ proj.conic
    depth = np.where(vis, proj.depth, 1.0)
    covs = covariances(scene)
    frame = proj.frame
    inv_d2 = 1.0 / depth ** 2
    d_cov = frame @ d_ang @ np.swapaxes(frame, 1, 2) * inv_d2[:, None, None]
    d_frame = 2.0 * covs @ frame @ d_ang * inv_d2[:, None, None]
    d_depth = -2.0 / depth * np.sum(proj.angular_cov * d_ang, axis=(1, 2))

    theta, phi = proj.theta, proj.phi
    e_theta, e_phi = frame[:, :, 0], frame[:, :, 1]
    radial = np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], axis=-1)
    d_et, d_ep = d_frame[:, :, 0], d_frame[:, :, 1]
    d_theta += -np.sum(d_et * radial, axis=1)
    d_phi += np.cos(theta) * np.sum(d_et * e_phi, axis=1)
    d_phi += -np.sum(d_ep[:, :2] * np.stack([np.cos(phi), np.sin(phi)], axis=-1), axis=1)

    rho = depth * np.sin(theta)
    phi_scale = np.where(rho > MIN_RHO, 1.0 / np.where(rho > MIN_RHO, rho, 1.0), 0.0)
    d_pos = (d_theta / depth)[:, None] * e_theta + (d_phi * phi_scale)[:, None] * e_phi + d_depth[:, None] * radial

    zero = ~vis
    d_pos[zero] = 0.0
    d_cov[zero] = 0.0
    d_tau[zero] = 0.0
    d_coeffs[:, zero] = 0.0
    if K:
        d_log, d_quat = covariance_backward(scene.log_scales, scene.quaternions, d_cov)
    else:
        d_log, d_quat = np.zeros((0, 3)), np.zeros((0, 4))
    tau = proj.tau
    return GradientBundle(
        positions=d_pos,
        log_scales=d_log,
        quaternions=d_quat,
        tau_logits=d_tau * tau * (1.0 - tau),
        coeffs=d_coeffs,
    )


def aggregate_modality(rendered: RenderedField, modality: str, grid: SphericalGrid) -> np.ndarray:
    """Per-receiver measurement of a rendered field.

    rssi gives (N,) dB, csi gives (N, C) complex, spectrum gives (N, H, W)
    amplitudes.
    """
    return get_modality(modality).aggregate(rendered.values, grid.cell_solid_angle())
