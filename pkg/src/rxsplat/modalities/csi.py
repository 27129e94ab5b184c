"""Channel state information: per-channel solid-angle-weighted field sum."""

import numpy as np

from rxsplat.losses import squared_l2_loss
from rxsplat.metrics import snr_csi
from rxsplat.modalities import Modality


class CsiModality(Modality):
    name = "csi"
    metric_names = ("snr",)

    def channels(self, requested: int = 1) -> int:
        return requested

    def aggregate(self, values, solid_angle):
        return np.sum(values * solid_angle[:, None], axis=(2, 3))

    def aggregate_backward(self, values, solid_angle, grad):
        grad = np.asarray(grad, dtype=np.complex128)
        return grad[:, :, None, None] * np.broadcast_to(solid_angle[:, None], values.shape[2:])

    def loss(self, pred, gt, config=None):
        return squared_l2_loss(pred, gt)

    def average(self, targets):
        return np.mean(np.asarray(targets, dtype=np.complex128), axis=0)

    def evaluate(self, pred, gt):
        return {"snr": snr_csi(pred, gt)}

    def encode_value(self, value, sidecars=None):
        return [[float(v.real), float(v.imag)] for v in np.asarray(value, dtype=np.complex128)]

    def decode_value(self, raw, sidecars=None):
        pairs = np.asarray(raw, dtype=np.float64).reshape(-1, 2)
        return pairs[:, 0] + 1j * pairs[:, 1]
