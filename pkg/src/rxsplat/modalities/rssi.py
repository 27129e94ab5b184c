"""Received signal strength: solid-angle-weighted power in dB."""

import math

import numpy as np

from rxsplat.channelsim import RSSI_FLOOR
from rxsplat.losses import l1_loss
from rxsplat.metrics import mae_dbm
from rxsplat.modalities import Modality


class RssiModality(Modality):
    name = "rssi"
    metric_names = ("mae",)

    def channels(self, requested: int = 1) -> int:
        return 1

    def _power(self, values, solid_angle):
        return np.sum((values.real ** 2 + values.imag ** 2) * solid_angle[:, None], axis=(1, 2, 3))

    def aggregate(self, values, solid_angle):
        return 10.0 * np.log10(self._power(values, solid_angle) + RSSI_FLOOR)

    def aggregate_backward(self, values, solid_angle, grad):
        power = self._power(values, solid_angle)
        scale = np.asarray(grad) * 10.0 / (math.log(10.0) * (power + RSSI_FLOOR))
        return scale[:, None, None, None] * 2.0 * values * solid_angle[:, None]

    def loss(self, pred, gt, config=None):
        return l1_loss(pred, gt)

    def average(self, targets):
        return np.mean(np.asarray(targets, dtype=np.float64), axis=0)

    def evaluate(self, pred, gt):
        return {"mae": mae_dbm([pred], [gt])}

    def encode_value(self, value, sidecars=None):
        return float(value)

    def decode_value(self, raw, sidecars=None):
        return float(raw)
