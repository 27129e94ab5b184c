"""Training losses with their adjoints.

Every loss returns ``(value, grad)`` where ``grad`` has the shape of the
prediction. Complex predictions get a complex gradient dL/dRe + j dL/dIm.
"""

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def next_pow2(n: int) -> int:
    return 1 << max(0, (int(n) - 1).bit_length())


def dft2_orthonormal(image: np.ndarray) -> np.ndarray:
    """Unitary 2D DFT after zero-padding each axis to a power of two."""
    image = np.asarray(image)
    h, w = image.shape
    padded = np.zeros((next_pow2(h), next_pow2(w)), dtype=np.result_type(image, np.float64))
    padded[:h, :w] = image
    return np.fft.fft2(padded, norm="ortho")


def gaussian_window(size: int, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(image: np.ndarray, window: np.ndarray) -> np.ndarray:
    r = len(window) // 2
    out = correlate1d(image, window, axis=0, mode="constant")
    out = correlate1d(out, window, axis=1, mode="constant")
    h, w = image.shape
    return out[r:h - r, r:w - r]


def _filter_valid_adjoint(grad: np.ndarray, window: np.ndarray, shape) -> np.ndarray:
    r = len(window) // 2
    full = np.zeros(shape)
    full[r:shape[0] - r, r:shape[1] - r] = grad
    out = correlate1d(full, window[::-1], axis=0, mode="constant")
    return correlate1d(out, window[::-1], axis=1, mode="constant")


def ssim_with_grad(x: np.ndarray, y: np.ndarray, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
                   dynamic_range: float = 1.0, need_grad: bool = True):
    """Mean SSIM over valid windows and its gradient w.r.t. x.

    Returns:
        (ssim, dssim/dx or None)
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    g = gaussian_window(window, sigma)
    c1 = (SSIM_K1 * dynamic_range) ** 2
    c2 = (SSIM_K2 * dynamic_range) ** 2

    mu_x = _filter_valid(x, g)
    mu_y = _filter_valid(y, g)
    var_x = _filter_valid(x * x, g) - mu_x ** 2
    var_y = _filter_valid(y * y, g) - mu_y ** 2
    cov_xy = _filter_valid(x * y, g) - mu_x * mu_y

    a1 = 2.0 * mu_x * mu_y + c1
    a2 = 2.0 * cov_xy + c2
    b1 = mu_x ** 2 + mu_y ** 2 + c1
    b2 = var_x + var_y + c2
    smap = a1 * a2 / (b1 * b2)
    value = float(smap.mean())
    if not need_grad:
        return value, None

    m = smap.size
    d_mu = (2.0 * mu_y * a2 / (b1 * b2) - smap * 2.0 * mu_x / b1) / m
    d_var = -smap / b2 / m
    d_cov = 2.0 * a1 / (b1 * b2) / m
    g_mu = d_mu - 2.0 * mu_x * d_var - mu_y * d_cov
    grad = (
        _filter_valid_adjoint(g_mu, g, x.shape)
        + 2.0 * x * _filter_valid_adjoint(d_var, g, x.shape)
        + y * _filter_valid_adjoint(d_cov, g, x.shape)
    )
    return value, grad


def loss_window(shape) -> int:
    """Largest odd window up to 11 that fits the image."""
    size = min(SSIM_WINDOW, *shape)
    return size if size % 2 == 1 else size - 1


def l1_loss(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    diff = pred - np.asarray(gt, dtype=np.float64)
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def squared_l2_loss(pred, gt):
    """Sum of |pred - gt|^2 over complex entries."""
    diff = np.asarray(pred, dtype=np.complex128) - np.asarray(gt, dtype=np.complex128)
    return float(np.sum(diff.real ** 2 + diff.imag ** 2)), 2.0 * diff


def fft_loss(pred, gt):
    """Squared distance between orthonormal spectra of pred and gt."""
    pred = np.asarray(pred, dtype=np.float64)
    diff_f = dft2_orthonormal(pred) - dft2_orthonormal(gt)
    value = float(np.sum(np.abs(diff_f) ** 2))
    back = np.fft.ifft2(2.0 * diff_f, norm="ortho").real
    h, w = pred.shape
    return value, back[:h, :w]


def spectrum_loss(pred, gt, lambda_ssim: float = 0.2, lambda_fft: float = 0.1, dynamic_range: float = 1.0):
    """(1 - ls - lf) * L1 + ls * (1 - SSIM) + lf * DFT distance."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"Shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    w_l1 = 1.0 - lambda_ssim - lambda_fft
    value, grad = l1_loss(pred, gt)
    value, grad = w_l1 * value, w_l1 * grad
    if lambda_ssim > 0:
        s, ds = ssim_with_grad(pred, gt, window=loss_window(pred.shape), dynamic_range=dynamic_range)
        value += lambda_ssim * (1.0 - s)
        grad = grad - lambda_ssim * ds
    if lambda_fft > 0:
        f, df = fft_loss(pred, gt)
        value += lambda_fft * f
        grad = grad + lambda_fft * df
    return value, grad
