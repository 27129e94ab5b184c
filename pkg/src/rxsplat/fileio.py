"""Dataset, sidecar, image and table files.

A dataset directory holds ``records.jsonl`` (one measurement per line),
``scene.json`` when the oracle scene is known, and ``spectra/`` with one
``RXSP`` sidecar per spectrum record: magic ``RXSP``, u32 height, u32 width,
then little-endian f32 values in row-major order.
"""

import csv
import json
import logging
import struct
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image

from rxsplat.channelsim import SyntheticDataset, save_scene
from rxsplat.errors import DataIOError
from rxsplat.modalities import get_modality

logger = logging.getLogger(__name__)

RECORDS_FILE = "records.jsonl"
SCENE_FILE = "scene.json"
SIDECAR_DIR = "spectra"
SIDECAR_MAGIC = b"RXSP"


def write_sidecar(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.ndim != 2:
        raise ValueError(f"Sidecar arrays must be 2-D, got shape {array.shape}")
    h, w = array.shape
    with open(path, "wb") as f:
        f.write(SIDECAR_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_sidecar(path) -> np.ndarray:
    """Read an RXSP sidecar as an f64 (H, W) array.

    Raises:
        DataIOError: If the file is missing, has the wrong magic or is truncated
    """
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataIOError(f"Spectrum sidecar not found: {path}") from None
    if len(raw) < 12 or raw[:4] != SIDECAR_MAGIC:
        raise DataIOError(f"Not an RXSP sidecar: {path}")
    h, w = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + 4 * h * w:
        raise DataIOError(f"Truncated sidecar {path}: expected {h}x{w} values")
    return np.frombuffer(raw[12:], dtype="<f4").reshape(h, w).astype(np.float64)


class SidecarStore:
    """Sequentially named sidecars under one dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.count = 0

    def put(self, array: np.ndarray) -> str:
        rel = f"{SIDECAR_DIR}/{self.count:06d}.rxsp"
        (self.root / SIDECAR_DIR).mkdir(parents=True, exist_ok=True)
        write_sidecar(self.root / rel, array)
        self.count += 1
        return rel

    def get(self, rel: str) -> np.ndarray:
        return read_sidecar(self.root / rel)


def dataset_records(dataset: SyntheticDataset, sidecars: Optional[SidecarStore] = None) -> Iterable[dict]:
    modality = get_modality(dataset.modality)
    for i in range(dataset.num_tx):
        for j in range(dataset.num_rx):
            yield {
                "tx": dataset.tx_positions[i].tolist(),
                "tx_id": i,
                "rx_id": j,
                "rx": dataset.rx_positions[j].tolist(),
                "modality": dataset.modality,
                "value": modality.encode_value(dataset.measurements[i, j], sidecars),
            }


def write_dataset(dataset: SyntheticDataset, directory, scene=None) -> Path:
    """Write a dense dataset as JSON lines, tx-major.

    Returns:
        Path of the records file
    """
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    sidecars = SidecarStore(root) if dataset.modality == "spectrum" else None
    path = root / RECORDS_FILE
    with open(path, "w") as f:
        for record in dataset_records(dataset, sidecars):
            f.write(json.dumps(record, sort_keys=True) + "\n")
    if scene is not None:
        save_scene(scene, root / SCENE_FILE)
    logger.info("Wrote %d records to %s", dataset.num_tx * dataset.num_rx, path)
    return path


def read_dataset(directory) -> SyntheticDataset:
    """Read a dataset directory back into a dense table.

    Raises:
        DataIOError: If the records file is missing, a line is malformed
            (the message names the line), modalities are mixed, or the
            (tx, rx) table is incomplete
    """
    root = Path(directory)
    path = root / RECORDS_FILE if root.is_dir() else root
    root = path.parent
    if not path.exists():
        raise DataIOError(f"Dataset not found: {path}")
    records = []
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                records.append((int(record["tx_id"]), int(record["rx_id"]), record))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DataIOError(f"Malformed record at {path}:{line_no}: {e}") from None
    if not records:
        raise DataIOError(f"Dataset is empty: {path}")

    modalities = {r["modality"] for _, _, r in records}
    if len(modalities) != 1:
        raise DataIOError(f"Mixed modalities in {path}: {', '.join(sorted(modalities))}")
    name = modalities.pop()
    try:
        modality = get_modality(name)
    except ValueError as e:
        raise DataIOError(str(e)) from None
    sidecars = SidecarStore(root)

    M = max(i for i, _, _ in records) + 1
    N = max(j for _, j, _ in records) + 1
    tx = np.full((M, 3), np.nan)
    rx = np.full((N, 3), np.nan)
    values = {}
    for i, j, record in records:
        tx[i] = record["tx"]
        rx[j] = record["rx"]
        values[(i, j)] = modality.decode_value(record["value"], sidecars)
    missing = [(i, j) for i in range(M) for j in range(N) if (i, j) not in values]
    if missing:
        raise DataIOError(f"Dataset {path} is missing {len(missing)} pairs, first (tx {missing[0][0]}, rx {missing[0][1]})")
    first = np.asarray(values[(0, 0)])
    table = np.empty((M, N) + first.shape, dtype=first.dtype)
    for (i, j), value in values.items():
        table[i, j] = value
    return SyntheticDataset(tx, rx, table, name)


def write_pgm(path, image: np.ndarray, vmin: Optional[float] = None, vmax: Optional[float] = None) -> None:
    """Save a 2-D array as an 8-bit greyscale PGM; NaN cells are black.

    By default values are max-normalized: 255 * v / max.
    """
    image = np.asarray(image, dtype=np.float64)
    finite = np.isfinite(image)
    lo = 0.0 if vmin is None else vmin
    hi = vmax if vmax is not None else (float(image[finite].max()) if finite.any() else 1.0)
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pixels = np.where(finite, np.clip((image - lo) * scale, 0.0, 255.0), 0.0)
    Image.fromarray(np.round(pixels).astype(np.uint8)).save(path, format="PPM")


def read_pgm(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im, dtype=np.uint8)
    except FileNotFoundError:
        raise DataIOError(f"Image not found: {path}") from None


def write_csv(path, header: list[str], rows: Iterable) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def read_csv(path) -> list[dict]:
    try:
        with open(path, newline="") as f:
            return list(csv.DictReader(f))
    except FileNotFoundError:
        raise DataIOError(f"Table not found: {path}") from None
