"""Measurement modality abstraction.

A modality turns a rendered complex field into the quantity a receiver
reports, owns the adjoint of that reduction, the training loss, target
averaging across receivers, evaluation metrics and the dataset record codec.
"""

from abc import ABC, abstractmethod

import numpy as np

AVAILABLE_MODALITIES = ("rssi", "csi", "spectrum")


class Modality(ABC):
    """Base interface for one measurement kind."""

    name = ""

    @abstractmethod
    def channels(self, requested: int = 1) -> int:
        """Number of radiance channels the modality renders."""
        raise NotImplementedError

    @abstractmethod
    def aggregate(self, values: np.ndarray, solid_angle: np.ndarray) -> np.ndarray:
        """Reduce a field (N, C, H, W) complex to per-receiver measurements.

        Args:
            values: Rendered field values
            solid_angle: Cell solid angle per row, shape (H,)
        """
        raise NotImplementedError

    @abstractmethod
    def aggregate_backward(self, values: np.ndarray, solid_angle: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Map dL/dmeasurement back to dL/dvalues (complex, (N, C, H, W))."""
        raise NotImplementedError

    @abstractmethod
    def loss(self, pred, gt, config=None):
        """Loss and its gradient w.r.t. one receiver's prediction."""
        raise NotImplementedError

    @abstractmethod
    def average(self, targets: np.ndarray) -> np.ndarray:
        """Average measurements over axis 0 (receivers) in the native domain."""
        raise NotImplementedError

    @abstractmethod
    def evaluate(self, pred, gt) -> dict[str, float]:
        """Metric values for one prediction."""
        raise NotImplementedError

    @abstractmethod
    def encode_value(self, value, sidecars=None):
        """JSON-compatible record value."""
        raise NotImplementedError

    @abstractmethod
    def decode_value(self, raw, sidecars=None):
        """Inverse of encode_value."""
        raise NotImplementedError

    @property
    def primary_metric(self) -> str:
        return self.metric_names[0]

    metric_names: tuple[str, ...] = ()


def get_modality(name: str) -> Modality:
    """Factory for modality instances.

    Raises:
        ValueError: If the modality name is unknown
    """
    if name == "rssi":
        from rxsplat.modalities.rssi import RssiModality
        return RssiModality()
    elif name == "csi":
        from rxsplat.modalities.csi import CsiModality
        return CsiModality()
    elif name == "spectrum":
        from rxsplat.modalities.spectrum import SpectrumModality
        return SpectrumModality()
    else:
        raise ValueError(
            f"Unknown modality: {name}\n"
            f"Valid options: {', '.join(AVAILABLE_MODALITIES)}"
        )
