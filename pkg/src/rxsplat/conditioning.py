"""Receiver-conditioned radiance.

Base coefficients are shared by all receivers. For a receiver at r, a
global branch maps a learnable Fourier encoding of r plus per-component
features to a complex affine (alpha, beta) per component and channel, applied
identically to every Gaussian. A local branch then maps per-Gaussian
geometric features (direction and distance to r, occupancy transmittance and
mean density along the last segment) to a per-Gaussian affine. Both final
layers start at zero, so a fresh state is the identity map.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from rxsplat.radiance import component_degrees, component_orders, num_coeffs
from rxsplat.scene import GaussianScene, covariances
from rxsplat.seeding import make_rng

logger = logging.getLogger(__name__)

PROBE_START = 0.05
PROBE_STOP = 0.95
OCCUPANCY_SIGMAS = 2.0
LOCAL_FEATURES = 6
ABLATIONS = ("full", "joint", "global_only", "local_only", "additive_only", "no_occlusion")


@dataclass
class OccupancyGrid:
    densities: np.ndarray  # (R, R, R)
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    lookup: str = "trilinear"

    @property
    def resolution(self) -> int:
        return self.densities.shape[0]

    @property
    def cell(self) -> np.ndarray:
        return (self.bounds_max - self.bounds_min) / self.resolution

    def voxel_centers(self) -> np.ndarray:
        axes = [self.bounds_min[a] + (np.arange(self.resolution) + 0.5) * self.cell[a] for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def sample(self, points: np.ndarray) -> np.ndarray:
        """Occupancy at points (..., 3); zero outside the bounds."""
        points = np.asarray(points, dtype=np.float64)
        inside = np.all((points >= self.bounds_min) & (points <= self.bounds_max), axis=-1)
        if self.lookup == "nearest":
            idx = np.floor((points - self.bounds_min) / self.cell).astype(np.int64)
            idx = np.clip(idx, 0, self.resolution - 1)
            values = self.densities[idx[..., 0], idx[..., 1], idx[..., 2]]
            return np.where(inside, values, 0.0)
        u = np.clip((points - self.bounds_min) / self.cell - 0.5, 0.0, self.resolution - 1)
        i0 = np.minimum(np.floor(u).astype(np.int64), self.resolution - 2)
        t = u - i0
        d = self.densities
        out = np.zeros(points.shape[:-1])
        for dx in (0, 1):
            wx = t[..., 0] if dx else 1.0 - t[..., 0]
            for dy in (0, 1):
                wy = t[..., 1] if dy else 1.0 - t[..., 1]
                for dz in (0, 1):
                    wz = t[..., 2] if dz else 1.0 - t[..., 2]
                    out = out + wx * wy * wz * d[i0[..., 0] + dx, i0[..., 1] + dy, i0[..., 2] + dz]
        return np.where(inside, out, 0.0)


def build_occupancy(scene: GaussianScene, resolution: int, bounds_min, bounds_max,
                    lookup: str = "trilinear") -> OccupancyGrid:
    """Splat each Gaussian's transmittance into a voxel grid.

    A voxel takes the max over Gaussians of tau * exp(-m^2 / 2) for voxel
    centres within Mahalanobis distance 2 of the Gaussian.

    Raises:
        ValueError: If the bounds are degenerate or the resolution is below 2
    """
    bmin = np.asarray(bounds_min, dtype=np.float64)
    bmax = np.asarray(bounds_max, dtype=np.float64)
    if np.any(bmax <= bmin) or not np.all(np.isfinite(bmin)) or not np.all(np.isfinite(bmax)):
        raise ValueError(f"Degenerate occupancy bounds {bmin} .. {bmax}")
    if resolution < 2:
        raise ValueError("Occupancy resolution must be >= 2")
    grid = OccupancyGrid(np.zeros((resolution,) * 3), bmin, bmax, lookup)
    if scene.num_gaussians == 0:
        return grid
    cell = grid.cell
    axes = [bmin[a] + (np.arange(resolution) + 0.5) * cell[a] for a in range(3)]
    covs = covariances(scene)
    inv_covs = np.linalg.inv(covs)
    tau = scene.tau
    for k in range(scene.num_gaussians):
        reach = OCCUPANCY_SIGMAS * np.sqrt(np.diag(covs[k]))
        lo = np.maximum(np.ceil((scene.positions[k] - reach - bmin) / cell - 0.5), 0).astype(int)
        hi = np.minimum(np.floor((scene.positions[k] + reach - bmin) / cell - 0.5), resolution - 1).astype(int)
        if np.any(hi < lo):
            continue
        sub = np.stack(np.meshgrid(*(axes[a][lo[a]:hi[a] + 1] for a in range(3)), indexing="ij"), axis=-1)
        delta = sub - scene.positions[k]
        m2 = np.einsum("...i,ij,...j->...", delta, inv_covs[k], delta)
        value = np.where(m2 <= OCCUPANCY_SIGMAS ** 2, tau[k] * np.exp(-0.5 * m2), 0.0)
        block = grid.densities[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
        np.maximum(block, value, out=block)
    np.clip(grid.densities, 0.0, 1.0, out=grid.densities)
    logger.info("Built %d^3 occupancy grid from %d Gaussians", resolution, scene.num_gaussians)
    return grid


def probe_points(start, end, samples: int) -> np.ndarray:
    """Evenly spaced probe points between 5% and 95% of each segment.

    Args:
        start: (..., 3) segment starts
        end: (..., 3) segment ends
        samples: Probe count S >= 1

    Returns:
        (..., S, 3)
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    t = np.array([0.5]) if samples == 1 else np.linspace(PROBE_START, PROBE_STOP, samples)
    start = np.asarray(start, dtype=np.float64)[..., None, :]
    end = np.asarray(end, dtype=np.float64)[..., None, :]
    return start + t[:, None] * (end - start)


def probe_segment(grid: OccupancyGrid, start, end, samples: int):
    """(transmittance, mean density) along the segment start -> end."""
    values = grid.sample(probe_points(start, end, samples))
    return np.prod(1.0 - values, axis=-1), np.mean(values, axis=-1)


def fourier_encode(r, freqs: np.ndarray) -> np.ndarray:
    """[sin, cos] per (axis, band), axis-major. Shape (..., 6F)."""
    r = np.asarray(r, dtype=np.float64)
    phase = r[..., None, :] * freqs  # (..., F, 3)
    phase = np.swapaxes(phase, -1, -2)  # (..., 3, F)
    pairs = np.stack([np.sin(phase), np.cos(phase)], axis=-1)  # (..., 3, F, 2)
    return pairs.reshape(r.shape[:-1] + (6 * freqs.shape[0],))


def init_frequencies(bands: int, extents) -> np.ndarray:
    """omega[f, a] = 2^f * 2 pi / extent_a."""
    extents = np.asarray(extents, dtype=np.float64)
    return (2.0 ** np.arange(bands))[:, None] * (2.0 * math.pi / extents)[None, :]


class MLP:
    """Fully connected network with rectifier hidden activations."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        self.weights = weights
        self.biases = biases

    @classmethod
    def init(cls, sizes: list[int], rng: np.random.Generator) -> "MLP":
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if i == len(sizes) - 2:
                weights.append(np.zeros((fan_in, fan_out)))
            else:
                bound = 1.0 / math.sqrt(fan_in)
                weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    def forward(self, x: np.ndarray):
        acts = [x]
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < len(self.weights) - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts: list[np.ndarray], grad_out: np.ndarray):
        """Returns (weight grads, bias grads, input grad)."""
        g = grad_out
        d_w = [None] * len(self.weights)
        d_b = [None] * len(self.weights)
        for i in reversed(range(len(self.weights))):
            if i < len(self.weights) - 1:
                g = g * (acts[i + 1] > 0)
            d_w[i] = acts[i].T @ g
            d_b[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return d_w, d_b, g

    def parameters(self, prefix: str) -> dict[str, np.ndarray]:
        params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"{prefix}.W{i}"] = w
            params[f"{prefix}.b{i}"] = b
        return params


@dataclass
class ConditioningState:
    fourier_freqs: np.ndarray
    global_mlp: MLP
    component_meta: np.ndarray
    component_embed: np.ndarray
    local_mlp: MLP
    channels: int
    occupancy: Optional[OccupancyGrid] = None
    ablation: str = "full"
    probe_samples: int = 16
    calls: dict = field(default_factory=lambda: {"global": 0, "local": 0})

    @property
    def num_coeffs(self) -> int:
        return len(self.component_meta)

    @property
    def uses_global(self) -> bool:
        return self.ablation != "local_only"

    @property
    def uses_local(self) -> bool:
        return self.ablation != "global_only"

    def parameters(self) -> dict[str, np.ndarray]:
        """Learnable arrays by name (live views, updated in place)."""
        params = {"fourier_freqs": self.fourier_freqs, "component_embed": self.component_embed}
        params.update(self.global_mlp.parameters("global"))
        params.update(self.local_mlp.parameters("local"))
        return params

    def reset_calls(self) -> None:
        self.calls = {"global": 0, "local": 0}

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays = dict(self.parameters())
        arrays["component_meta"] = self.component_meta
        if self.occupancy is not None:
            arrays["occupancy.densities"] = self.occupancy.densities
            arrays["occupancy.bounds"] = np.stack([self.occupancy.bounds_min, self.occupancy.bounds_max])
        return arrays

    @classmethod
    def from_arrays(cls, arrays: dict, channels: int, ablation: str = "full", probe_samples: int = 16,
                    lookup: str = "trilinear") -> "ConditioningState":
        def mlp(prefix):
            n = sum(1 for k in arrays if k.startswith(f"{prefix}.W"))
            return MLP(
                [np.array(arrays[f"{prefix}.W{i}"]) for i in range(n)],
                [np.array(arrays[f"{prefix}.b{i}"]) for i in range(n)],
            )

        occupancy = None
        if "occupancy.densities" in arrays:
            bounds = arrays["occupancy.bounds"]
            occupancy = OccupancyGrid(np.array(arrays["occupancy.densities"]), bounds[0].copy(),
                                      bounds[1].copy(), lookup)
        return cls(
            fourier_freqs=np.array(arrays["fourier_freqs"]),
            global_mlp=mlp("global"),
            component_meta=np.array(arrays["component_meta"]),
            component_embed=np.array(arrays["component_embed"]),
            local_mlp=mlp("local"),
            channels=channels,
            occupancy=occupancy,
            ablation=ablation,
            probe_samples=probe_samples,
        )


def component_features(l_max: int) -> np.ndarray:
    """(l / l_max, m / l_max) per component."""
    scale = 1.0 / l_max if l_max > 0 else 0.0
    return np.stack([component_degrees(l_max) * scale, component_orders(l_max) * scale], axis=-1).astype(np.float64)


def init_conditioning(l_max: int, channels: int, fourier_bands: int, hidden_dim: int, embed_dim: int,
                      extents, seed: int = 0, occupancy: Optional[OccupancyGrid] = None,
                      ablation: str = "full", probe_samples: int = 16) -> ConditioningState:
    """Fresh conditioning state; both final layers are zero."""
    if ablation not in ABLATIONS:
        raise ValueError(f"Unknown ablation: {ablation}\nValid options: {', '.join(ABLATIONS)}")
    rng = make_rng(seed, "conditioning.init")
    L = num_coeffs(l_max)
    global_in = 6 * fourier_bands + 2 + embed_dim
    return ConditioningState(
        fourier_freqs=init_frequencies(fourier_bands, extents),
        global_mlp=MLP.init([global_in, hidden_dim, hidden_dim, 4 * channels], rng),
        component_meta=component_features(l_max),
        component_embed=rng.normal(0.0, 0.1, size=(L, embed_dim)),
        local_mlp=MLP.init([LOCAL_FEATURES, hidden_dim, hidden_dim, 4 * channels], rng),
        channels=channels,
        occupancy=occupancy,
        ablation=ablation,
        probe_samples=probe_samples,
    )


def _split_affine(out: np.ndarray, channels: int, additive: bool):
    out = out.reshape(out.shape[:-1] + (channels, 4))
    alpha = out[..., 0] + 1j * out[..., 1]
    if additive:
        alpha = np.zeros_like(alpha)
    beta = out[..., 2] + 1j * out[..., 3]
    return alpha, beta


def _join_affine(g_alpha: np.ndarray, g_beta: np.ndarray, additive: bool) -> np.ndarray:
    if additive:
        g_alpha = np.zeros_like(g_alpha)
    out = np.stack([g_alpha.real, g_alpha.imag, g_beta.real, g_beta.imag], axis=-1)
    return out.reshape(out.shape[:-2] + (-1,))


def global_affine(gamma: np.ndarray, state: ConditioningState):
    """(alpha, beta) per component for one receiver encoding, each (L, C)."""
    L = state.num_coeffs
    x = np.concatenate(
        [np.broadcast_to(gamma, (L, gamma.shape[-1])), state.component_meta, state.component_embed], axis=1
    )
    out, acts = state.global_mlp.forward(x)
    state.calls["global"] += L
    alpha, beta = _split_affine(out, state.channels, state.ablation == "additive_only")
    return alpha, beta, acts


def global_modulate(base_coeffs: np.ndarray, gamma: np.ndarray, state: ConditioningState) -> np.ndarray:
    """(1 + alpha_l) * base + beta_l, the same for every Gaussian.

    ``base_coeffs`` is (K, L, C) complex or (K, L, C, 2) pairs; the result
    keeps the input layout.
    """
    pairs = not np.iscomplexobj(base_coeffs)
    base = np.asarray(base_coeffs)
    if pairs:
        base = base[..., 0] + 1j * base[..., 1]
    if base.shape[1:] != (state.num_coeffs, state.channels):
        raise ValueError(f"Coefficient shape {base.shape} does not match (K, {state.num_coeffs}, {state.channels})")
    alpha, beta, _ = global_affine(gamma, state)
    out = (1.0 + alpha)[None] * base + beta[None]
    return np.stack([out.real, out.imag], axis=-1) if pairs else out


def local_features(positions: np.ndarray, rx, state: ConditioningState) -> np.ndarray:
    """[unit direction to rx, distance, T, mean density] per Gaussian, (K, 6).

    Raises:
        ValueError: If rx coincides with a Gaussian centre
    """
    rx = np.asarray(rx, dtype=np.float64)
    v = rx - positions
    d = np.linalg.norm(v, axis=-1)
    if np.any(d == 0):
        k = int(np.flatnonzero(d == 0)[0])
        raise ValueError(f"Receiver coincides with Gaussian {k}")
    if state.occupancy is None or state.ablation == "no_occlusion":
        trans = np.ones(len(positions))
        density = np.zeros(len(positions))
    else:
        trans, density = probe_segment(state.occupancy, positions, np.broadcast_to(rx, positions.shape),
                                       state.probe_samples)
    return np.concatenate([v / d[:, None], d[:, None], trans[:, None], density[:, None]], axis=1)


def local_affine(features: np.ndarray, state: ConditioningState):
    out, acts = state.local_mlp.forward(features)
    state.calls["local"] += len(features)
    alpha, beta = _split_affine(out, state.channels, state.ablation == "additive_only")
    return alpha, beta, acts


def local_modulate(coeffs_after_global: np.ndarray, scene_positions: np.ndarray, rx,
                   state: ConditioningState) -> np.ndarray:
    """(1 + alpha_k) * coeffs_k + beta_k with a shared per-Gaussian MLP."""
    pairs = not np.iscomplexobj(coeffs_after_global)
    coeffs = np.asarray(coeffs_after_global)
    if pairs:
        coeffs = coeffs[..., 0] + 1j * coeffs[..., 1]
    alpha, beta, _ = local_affine(local_features(scene_positions, rx, state), state)
    out = (1.0 + alpha)[:, None, :] * coeffs + beta[:, None, :]
    return np.stack([out.real, out.imag], axis=-1) if pairs else out


@dataclass
class ConditionCache:
    rx: np.ndarray
    base: np.ndarray
    gamma: np.ndarray
    global_terms: list
    after_global: np.ndarray
    local_terms: list


def condition(base_coeffs: np.ndarray, rx, scene: GaussianScene, state: ConditioningState):
    """Per-receiver coefficients for a batch of receivers.

    Args:
        base_coeffs: (K, L, C) complex or (K, L, C, 2) pairs
        rx: (3,) or (N, 3) receiver positions, anywhere in space
        scene: Scene providing Gaussian positions
        state: Conditioning state

    Returns:
        ((N, K, L, C) complex coefficients, cache for condition_backward)
    """
    base = np.asarray(base_coeffs)
    if not np.iscomplexobj(base):
        base = base[..., 0] + 1j * base[..., 1]
    rx = np.asarray(rx, dtype=np.float64).reshape(-1, 3)
    N = len(rx)
    gamma = fourier_encode(rx, state.fourier_freqs)
    out = np.empty((N,) + base.shape, dtype=np.complex128)
    after_global = np.empty_like(out)
    global_terms, local_terms = [], []
    for n in range(N):
        if state.uses_global:
            alpha, beta, acts = global_affine(gamma[n], state)
            after_global[n] = (1.0 + alpha)[None] * base + beta[None]
            global_terms.append((alpha, acts))
        else:
            after_global[n] = base
            global_terms.append(None)
        if state.uses_local:
            alpha_k, beta_k, acts = local_affine(local_features(scene.positions, rx[n], state), state)
            out[n] = (1.0 + alpha_k)[:, None, :] * after_global[n] + beta_k[:, None, :]
            local_terms.append((alpha_k, acts))
        else:
            out[n] = after_global[n]
            local_terms.append(None)
    return out, ConditionCache(rx, base, gamma, global_terms, after_global, local_terms)


def condition_backward(cache: ConditionCache, grad_out: np.ndarray, state: ConditioningState):
    """Adjoint of condition.

    Args:
        cache: Cache returned by condition
        grad_out: (N, K, L, C) complex gradient of the conditioned coefficients
        state: The same conditioning state

    Returns:
        (base gradient (K, L, C) complex, {parameter name: gradient})
    """
    params = state.parameters()
    grads = {name: np.zeros_like(arr) for name, arr in params.items()}
    g_base = np.zeros(cache.base.shape, dtype=np.complex128)
    additive = state.ablation == "additive_only"
    F = state.fourier_freqs.shape[0]

    for n in range(len(cache.rx)):
        g = grad_out[n]
        if cache.local_terms[n] is not None:
            alpha_k, acts = cache.local_terms[n]
            g_alpha = np.sum(np.conj(cache.after_global[n]) * g, axis=1)
            g_beta = np.sum(g, axis=1)
            d_w, d_b, _ = state.local_mlp.backward(acts, _join_affine(g_alpha, g_beta, additive))
            for i in range(len(d_w)):
                grads[f"local.W{i}"] += d_w[i]
                grads[f"local.b{i}"] += d_b[i]
            g = np.conj(1.0 + alpha_k)[:, None, :] * g
        if cache.global_terms[n] is not None:
            alpha, acts = cache.global_terms[n]
            g_alpha = np.sum(np.conj(cache.base) * g, axis=0)
            g_beta = np.sum(g, axis=0)
            d_w, d_b, g_in = state.global_mlp.backward(acts, _join_affine(g_alpha, g_beta, additive))
            for i in range(len(d_w)):
                grads[f"global.W{i}"] += d_w[i]
                grads[f"global.b{i}"] += d_b[i]
            g_gamma = g_in[:, :6 * F].sum(axis=0).reshape(3, F, 2)
            grads["component_embed"] += g_in[:, 6 * F + 2:]
            r = cache.rx[n]
            phase = (r[None, :] * state.fourier_freqs).T  # (3, F)
            d_phase = g_gamma[..., 0] * np.cos(phase) - g_gamma[..., 1] * np.sin(phase)
            grads["fourier_freqs"] += (d_phase * r[:, None]).T
            g = np.conj(1.0 + alpha)[None] * g
        g_base += g
    return g_base, grads
