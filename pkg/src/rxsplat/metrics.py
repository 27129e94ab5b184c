"""Evaluation metrics and per-receiver aggregation."""

import csv
import math
from collections import defaultdict

import numpy as np

from rxsplat.losses import SSIM_SIGMA, SSIM_WINDOW, ssim_with_grad

# Reported in place of +inf for exact reconstructions
SENTINEL_DB = 300.0


def mae_dbm(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    gt = np.asarray(gt, dtype=np.float64).ravel()
    if pred.shape != gt.shape or pred.size == 0:
        raise ValueError("mae_dbm needs two non-empty sequences of equal length")
    return float(np.mean(np.abs(pred - gt)))


def mse(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"Shape mismatch: {pred.shape} vs {gt.shape}")
    return float(np.mean((pred - gt) ** 2))


def psnr(pred, gt, max_val: float = 1.0) -> float:
    err = mse(pred, gt)
    if err == 0.0:
        return SENTINEL_DB
    return 10.0 * math.log10(max_val ** 2) - 10.0 * math.log10(err)


def ssim(pred, gt, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dynamic_range: float = 1.0) -> float:
    """Mean local SSIM with an 11x11 Gaussian window.

    Raises:
        ValueError: For images smaller than the window
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"Shape mismatch: {pred.shape} vs {gt.shape}")
    if min(pred.shape) < window:
        raise ValueError(f"ssim needs images of at least {window}x{window}, got {pred.shape}")
    value, _ = ssim_with_grad(pred, gt, window=window, sigma=sigma,
                              dynamic_range=dynamic_range, need_grad=False)
    return value


def snr_csi(pred, gt) -> float:
    """-10 log10 of error energy over signal energy."""
    pred = np.asarray(pred, dtype=np.complex128).ravel()
    gt = np.asarray(gt, dtype=np.complex128).ravel()
    if pred.shape != gt.shape:
        raise ValueError("snr_csi needs vectors of equal length")
    signal = float(np.sum(np.abs(gt) ** 2))
    if signal == 0.0:
        raise ValueError("snr_csi needs a non-zero ground truth")
    error = float(np.sum(np.abs(pred - gt) ** 2))
    if error == 0.0:
        return SENTINEL_DB
    return -10.0 * math.log10(error / signal)


def per_receiver_aggregate(records):
    """Two-level mean: per-receiver means first, then across receivers.

    Args:
        records: Iterable of (rx_id, value)

    Returns:
        (mean of receiver means, population std of receiver means,
         {rx_id: (receiver mean, record count)})
    """
    grouped = defaultdict(list)
    for rx_id, value in records:
        grouped[rx_id].append(float(value))
    if not grouped:
        raise ValueError("per_receiver_aggregate needs at least one record")
    table = {rx: (math.fsum(vals) / len(vals), len(vals)) for rx, vals in sorted(grouped.items())}
    means = np.array([m for m, _ in table.values()])
    return float(means.mean()), float(means.std()), table


def empirical_cdf(values):
    """Sorted values and their cumulative probabilities."""
    values = np.sort(np.asarray(values, dtype=np.float64))
    return values, np.arange(1, len(values) + 1) / len(values)


def write_receiver_table(path, metric: str, table: dict, tag: str = "") -> None:
    """CSV with one row per receiver plus a summary row."""
    means = np.array([m for m, _ in table.values()]) if table else np.zeros(0)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["rx_id", "split", "metric", "value", "n"])
        for rx, (value, n) in table.items():
            writer.writerow([rx, tag, metric, f"{value:.10g}", n])
        if len(means):
            writer.writerow(["mean", tag, metric, f"{means.mean():.10g}", len(means)])
            writer.writerow(["std", tag, metric, f"{means.std():.10g}", len(means)])
