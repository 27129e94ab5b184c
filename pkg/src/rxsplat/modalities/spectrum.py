"""Spatial spectrum: stabilized field amplitude per direction."""

import numpy as np

from rxsplat.losses import SSIM_WINDOW, spectrum_loss
from rxsplat.metrics import mse, psnr, ssim
from rxsplat.modalities import Modality
from rxsplat.radiance import AMPLITUDE_EPS


class SpectrumModality(Modality):
    name = "spectrum"
    metric_names = ("psnr", "mse", "ssim")

    def channels(self, requested: int = 1) -> int:
        return 1

    def aggregate(self, values, solid_angle):
        v = values[:, 0]
        return np.sqrt(v.real ** 2 + v.imag ** 2 + AMPLITUDE_EPS)

    def aggregate_backward(self, values, solid_angle, grad):
        amp = self.aggregate(values, solid_angle)
        out = np.zeros(values.shape, dtype=np.complex128)
        out[:, 0] = np.asarray(grad) * values[:, 0] / amp
        return out

    def loss(self, pred, gt, config=None):
        if config is None:
            return spectrum_loss(pred, gt)
        return spectrum_loss(
            pred, gt,
            lambda_ssim=config.lambda_ssim,
            lambda_fft=config.lambda_fft,
            dynamic_range=config.dynamic_range,
        )

    def average(self, targets):
        return np.mean(np.asarray(targets, dtype=np.float64), axis=0)

    def evaluate(self, pred, gt):
        result = {"psnr": psnr(pred, gt, max_val=1.0), "mse": mse(pred, gt)}
        if min(np.shape(gt)) >= SSIM_WINDOW:
            result["ssim"] = ssim(pred, gt)
        return result

    def encode_value(self, value, sidecars=None):
        if sidecars is None:
            raise ValueError("spectrum records need a sidecar store")
        return sidecars.put(np.asarray(value, dtype=np.float64))

    def decode_value(self, raw, sidecars=None):
        if sidecars is None:
            raise ValueError("spectrum records need a sidecar store")
        return sidecars.get(raw)
