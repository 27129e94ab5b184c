"""Fourier-Legendre directional basis and per-Gaussian complex radiance.

Coefficients are stored with a trailing (a, b) pair holding the real and
imaginary part of the complex coefficient a + jb. Component index
``l*l + l + m`` runs over -l <= m <= l, so L = (l_max + 1)**2. The basis
value of component (l, m) in direction (theta, phi) is

    N_lm * P_l^|m|(cos theta) * exp(j m phi)

with P taken without the Condon-Shortley phase.
"""

import math

import numpy as np
from scipy.special import gammaln

AMPLITUDE_EPS = 1e-8
MAX_STABLE_DEGREE = 32
TWO_PI = 2.0 * math.pi


def num_coeffs(l_max: int) -> int:
    return (l_max + 1) ** 2


def coeff_index(l: int, m: int) -> int:
    return l * l + l + m


def component_degrees(l_max: int) -> np.ndarray:
    """Degree l of every component, shape (L,)."""
    return np.concatenate([np.full(2 * l + 1, l) for l in range(l_max + 1)])


def component_orders(l_max: int) -> np.ndarray:
    """Order m of every component, shape (L,)."""
    return np.concatenate([np.arange(-l, l + 1) for l in range(l_max + 1)])


def reduce_angle(phi):
    """Map azimuths into [0, 2 pi)."""
    reduced = np.mod(phi, TWO_PI)
    # np.mod can round up to exactly 2 pi for tiny negative inputs
    return np.where(reduced >= TWO_PI, 0.0, reduced)


def normalization(l_max: int) -> np.ndarray:
    """N_lm for every component, shape (L,)."""
    l = component_degrees(l_max).astype(np.float64)
    m = np.abs(component_orders(l_max)).astype(np.float64)
    log_ratio = gammaln(l - m + 1.0) - gammaln(l + m + 1.0)
    return np.sqrt((2.0 * l + 1.0) / (4.0 * math.pi) * np.exp(log_ratio))


def legendre_table(x, l_max: int) -> np.ndarray:
    """Associated Legendre values P_l^m(x) for 0 <= m <= l <= l_max.

    Args:
        x: Scalar or array with |x| <= 1
        l_max: Highest degree

    Returns:
        Array of shape x.shape + (l_max + 1, l_max + 1); entry [..., l, m]
        is zero for m > l

    Raises:
        ValueError: If any |x| exceeds 1 beyond rounding
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.abs(x) > 1.0 + 1e-12):
        raise ValueError("legendre_table needs |x| <= 1")
    x = np.clip(x, -1.0, 1.0)
    out = np.zeros(x.shape + (l_max + 1, l_max + 1))
    sin_t = np.sqrt((1.0 - x) * (1.0 + x))

    pmm = np.ones_like(x)
    for m in range(l_max + 1):
        if m > 0:
            pmm = pmm * (2 * m - 1) * sin_t
        out[..., m, m] = pmm
        if m + 1 <= l_max:
            out[..., m + 1, m] = x * (2 * m + 1) * pmm
        for l in range(m + 2, l_max + 1):
            out[..., l, m] = ((2 * l - 1) * x * out[..., l - 1, m] - (l + m - 1) * out[..., l - 2, m]) / (l - m)
    return out


def legendre_theta_derivative(table: np.ndarray) -> np.ndarray:
    """d/dtheta of P_l^m(cos theta), from a legendre_table.

    Uses 0.5 * ((l+m)(l-m+1) P_l^(m-1) - P_l^(m+1)) for m >= 1 and
    -P_l^1 for m = 0, which stays finite at the poles.
    """
    l_max = table.shape[-1] - 1
    out = np.zeros_like(table)
    for l in range(l_max + 1):
        if l >= 1:
            out[..., l, 0] = -table[..., l, 1]
        for m in range(1, l + 1):
            upper = table[..., l, m + 1] if m + 1 <= l else 0.0
            out[..., l, m] = 0.5 * ((l + m) * (l - m + 1) * table[..., l, m - 1] - upper)
    return out


def _expand_components(table: np.ndarray, l_max: int) -> np.ndarray:
    degrees = component_degrees(l_max)
    orders = np.abs(component_orders(l_max))
    return table[..., degrees, orders]


def basis(theta, phi, l_max: int) -> np.ndarray:
    """Complex basis values, shape theta.shape + (L,)."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = reduce_angle(np.asarray(phi, dtype=np.float64))
    table = legendre_table(np.cos(theta), l_max)
    radial = normalization(l_max) * _expand_components(table, l_max)
    return radial * np.exp(1j * phi[..., None] * component_orders(l_max))


def basis_with_derivatives(theta, phi, l_max: int):
    """Basis values and their theta and phi derivatives.

    Returns:
        (Y, dY/dtheta, dY/dphi), each complex with shape theta.shape + (L,)
    """
    theta = np.asarray(theta, dtype=np.float64)
    phi = reduce_angle(np.asarray(phi, dtype=np.float64))
    table = legendre_table(np.cos(theta), l_max)
    norm = normalization(l_max)
    orders = component_orders(l_max)
    phase = np.exp(1j * phi[..., None] * orders)
    values = norm * _expand_components(table, l_max) * phase
    d_theta = norm * _expand_components(legendre_theta_derivative(table), l_max) * phase
    d_phi = 1j * orders * values
    return values, d_theta, d_phi


def as_complex(coeffs: np.ndarray) -> np.ndarray:
    """Collapse a trailing (a, b) pair into complex a + jb."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    return coeffs[..., 0] + 1j * coeffs[..., 1]


def as_pairs(values: np.ndarray) -> np.ndarray:
    """Inverse of as_complex."""
    values = np.asarray(values)
    return np.stack([values.real, values.imag], axis=-1)


def eval_radiance(coeffs, theta, phi):
    """Complex radiance R_e + j R_i of one coefficient set.

    Args:
        coeffs: (L, 2) or (L, C, 2) real pairs
        theta: Elevation in [0, pi]
        phi: Azimuth; reduced into [0, 2 pi)

    Returns:
        Complex scalar, or (C,) complex vector for channelled coefficients
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    L = coeffs.shape[0]
    l_max = math.isqrt(L) - 1
    if num_coeffs(l_max) != L:
        raise ValueError(f"Coefficient count {L} is not a perfect square")
    y = basis(theta, phi, l_max)
    return np.tensordot(y, as_complex(coeffs), axes=([-1], [0]))


def amplitude(value):
    """Stabilized magnitude sqrt(Re^2 + Im^2 + eps)."""
    value = np.asarray(value)
    return np.sqrt(value.real ** 2 + value.imag ** 2 + AMPLITUDE_EPS)
