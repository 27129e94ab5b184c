"""RXGS checkpoint container.

Layout: magic ``RXGS``, u32 format version, u32 header length, UTF-8 JSON
header, then little-endian f64 arrays back to back in manifest order. The
header carries scene metadata plus one manifest per named array group
(``scene`` and optionally ``conditioning``).
"""

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from rxsplat.errors import DataIOError
from rxsplat.scene import PER_GAUSSIAN_FIELDS, GaussianScene
from rxsplat.version import CHECKPOINT_VERSION

MAGIC = b"RXGS"
DTYPE = "<f8"


@dataclass
class Checkpoint:
    scene: GaussianScene
    conditioning: Optional[dict[str, np.ndarray]] = None
    meta: dict = field(default_factory=dict)


def write_container(path, meta: dict, groups: dict[str, dict[str, np.ndarray]]) -> None:
    manifest = {}
    blobs = []
    offset = 0
    for group, arrays in groups.items():
        entries = []
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype=DTYPE)
            entries.append({"name": name, "dtype": DTYPE, "shape": list(data.shape), "offset": offset})
            blobs.append(data.tobytes())
            offset += data.nbytes
        manifest[group] = entries
    header = json.dumps({**meta, "groups": manifest}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def read_container(path) -> tuple[dict, dict[str, dict[str, np.ndarray]]]:
    """Read a container back into (meta, groups).

    Raises:
        DataIOError: If the file is missing, has the wrong magic or version,
            or is truncated
    """
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except FileNotFoundError:
        raise DataIOError(f"Checkpoint not found: {path}") from None
    if raw[:4] != MAGIC or len(raw) < 12:
        raise DataIOError(f"Not an RXGS checkpoint: {path}")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise DataIOError(f"Unsupported checkpoint version {version} in {path}")
    try:
        header = json.loads(raw[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataIOError(f"Corrupt checkpoint header in {path}: {e}") from None
    data = memoryview(raw)[12 + header_len:]
    groups = {}
    for group, entries in header.pop("groups", {}).items():
        arrays = {}
        for entry in entries:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            end = entry["offset"] + 8 * count
            if end > len(data):
                raise DataIOError(f"Truncated checkpoint {path}: array {group}.{entry['name']}")
            arr = np.frombuffer(data[entry["offset"]:end], dtype=entry["dtype"]).reshape(entry["shape"])
            arrays[entry["name"]] = arr.astype(np.float64)
        groups[group] = arrays
    return header, groups


def save_checkpoint(path, scene: GaussianScene, conditioning: Optional[dict] = None,
                    meta: Optional[dict] = None) -> None:
    """Write a scene and optional conditioning arrays."""
    header = {
        **(meta or {}),
        "K": scene.num_gaussians,
        "l_max": scene.l_max,
        "C": scene.channels,
        "modality": scene.modality,
    }
    groups = {"scene": {name: getattr(scene, name) for name in PER_GAUSSIAN_FIELDS}}
    if conditioning is not None:
        groups["conditioning"] = conditioning
    write_container(path, header, groups)


def load_checkpoint(path) -> Checkpoint:
    header, groups = read_container(path)
    try:
        arrays = groups["scene"]
        scene = GaussianScene(
            **{name: arrays[name] for name in PER_GAUSSIAN_FIELDS},
            l_max=int(header.pop("l_max")),
            channels=int(header.pop("C")),
            modality=header.pop("modality"),
        )
    except (KeyError, ValueError) as e:
        raise DataIOError(f"Checkpoint {path} is missing scene data: {e}") from None
    header.pop("K", None)
    return Checkpoint(scene=scene, conditioning=groups.get("conditioning"), meta=header)
