"""Hyperparameter presets per dataset family."""

from typing import Optional

# Reported settings for the three measurement families, plus a desk-scale
# preset that keeps CPU runs in the minutes range.
BLE_RSSI = {
    "k_init": 50_000,
    "l_max": 9,
    "t_ramp": 500,
    "n_theta": 9,
    "n_phi": 36,
    "radius": 4.22,
    "lr_position_init": 5.05e-5,
    "lr_position_final": 2.06e-6,
    "lr_feature": 1.14e-3,
    "rest_lr_ratio": 0.16,
    "lr_transmittance": 3.79e-2,
    "lr_scaling": 2.90e-3,
    "lr_rotation": 5.02e-4,
    "densify_grad_threshold": 1.97e-4,
    "transmittance_reset_interval": 4_000,
    "fourier_bands": 6,
    "hidden_dim": 64,
    "embed_dim": 16,
    "probe_samples": 16,
    "grid_resolution": 128,
    "stage1_iters": 30_000,
    "stage2_iters": 100_000,
}

RFID_SPECTRUM = {
    "k_init": 50_000,
    "l_max": 9,
    "t_ramp": 500,
    "n_theta": 90,
    "n_phi": 360,
    "radius": 1.0,
    "lr_position_init": 1.60e-4,
    "lr_position_final": 1.60e-6,
    "lr_feature": 5.00e-3,
    "rest_lr_ratio": 0.20,
    "lr_transmittance": 1.00e-2,
    "lr_scaling": 5.00e-3,
    "lr_rotation": 1.00e-3,
    "densify_grad_threshold": 2.00e-4,
    "transmittance_reset_interval": 3_000,
    "fourier_bands": 6,
    "hidden_dim": 64,
    "embed_dim": 16,
    "probe_samples": 16,
    "grid_resolution": 128,
    "stage1_iters": 30_000,
    "stage2_iters": 60_000,
}

WIFI_CSI = {
    "k_init": 30_000,
    "l_max": 4,
    "t_ramp": 100,
    "n_theta": 18,
    "n_phi": 72,
    "radius": 1.0,
    "lr_position_init": 2.78e-4,
    "lr_position_final": 1.60e-6,
    "lr_feature": 1.53e-2,
    "rest_lr_ratio": 0.80,
    "lr_transmittance": 1.27e-3,
    "lr_scaling": 5.00e-3,
    "lr_rotation": 1.00e-3,
    "densify_grad_threshold": 1.88e-4,
    "transmittance_reset_interval": 2_000,
    "fourier_bands": 5,
    "hidden_dim": 256,
    "embed_dim": 16,
    "probe_samples": 16,
    "grid_resolution": 128,
    "stage1_iters": 30_000,
    "stage2_iters": 100_000,
}

DESK = {
    "k_init": 300,
    "l_max": 2,
    "t_ramp": 100,
    "n_theta": 9,
    "n_phi": 18,
    "radius": 0.05,
    "lr_position_init": 1.60e-4,
    "lr_position_final": 1.60e-6,
    "lr_feature": 5.00e-3,
    "rest_lr_ratio": 0.20,
    "lr_transmittance": 1.00e-2,
    "lr_scaling": 5.00e-3,
    "lr_rotation": 1.00e-3,
    "densify_grad_threshold": 2.00e-4,
    "transmittance_reset_interval": 3_000,
    "fourier_bands": 4,
    "hidden_dim": 32,
    "embed_dim": 8,
    "probe_samples": 16,
    "grid_resolution": 32,
    "stage1_iters": 1_500,
    "stage2_iters": 3_000,
}

PRESETS = {
    "ble_rssi": BLE_RSSI,
    "rfid_spectrum": RFID_SPECTRUM,
    "wifi_csi": WIFI_CSI,
    "desk": DESK,
}

DEFAULT_PRESET = "desk"


def get_preset(name: Optional[str] = None) -> dict:
    """Get a copy of a named hyperparameter table.

    Args:
        name: Preset name, defaults to DEFAULT_PRESET

    Returns:
        Fresh dict of hyperparameters

    Raises:
        ValueError: If the preset name is unknown
    """
    name = name or DEFAULT_PRESET
    if name not in PRESETS:
        raise ValueError(
            f"Unknown preset: {name}\n"
            f"Valid options: {', '.join(sorted(PRESETS))}"
        )
    return dict(PRESETS[name])


def list_presets() -> list[str]:
    """Names of all available presets."""
    return sorted(PRESETS)
