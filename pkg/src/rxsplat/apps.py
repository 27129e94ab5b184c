"""Fingerprint localization and access-point planning on top of a trained model."""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from rxsplat.metrics import empirical_cdf

logger = logging.getLogger(__name__)

WKNN_EPS = 1e-6
DEFAULT_K = 5
COVERAGE_THRESHOLD_DBM = -80.0


@dataclass
class FingerprintDB:
    positions: np.ndarray  # (M, 3)
    fingerprints: np.ndarray  # (M, N) dB
    mask: Optional[np.ndarray] = None  # True where the entry is valid

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.fingerprints = np.asarray(self.fingerprints, dtype=np.float64)
        if self.fingerprints.ndim != 2:
            self.fingerprints = self.fingerprints.reshape(len(self.positions), -1)
        if self.mask is None:
            self.mask = np.isfinite(self.fingerprints)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.fingerprints.shape:
            raise ValueError(f"mask shape {self.mask.shape} does not match fingerprints {self.fingerprints.shape}")
        if np.any(np.isnan(self.fingerprints[self.mask])):
            raise ValueError("NaN in a valid fingerprint entry")

    @property
    def size(self) -> int:
        return len(self.positions)

    @property
    def dims(self) -> int:
        return self.fingerprints.shape[1]

    def columns(self, index) -> "FingerprintDB":
        return FingerprintDB(self.positions, self.fingerprints[:, index], self.mask[:, index])


def fingerprint_distances(db: FingerprintDB, query, query_mask=None) -> np.ndarray:
    """Euclidean distance over jointly valid dimensions, rescaled to all N.

    Rows sharing no valid dimension with the query are at infinity.
    """
    query = np.asarray(query, dtype=np.float64).ravel()
    if query.shape[0] != db.dims:
        raise ValueError(f"query has {query.shape[0]} dimensions, database has {db.dims}")
    q_mask = np.isfinite(query) if query_mask is None else np.asarray(query_mask, dtype=bool)
    valid = db.mask & q_mask[None, :]
    diff = np.where(valid, db.fingerprints - np.where(q_mask, query, 0.0)[None, :], 0.0)
    count = valid.sum(axis=1)
    dist = np.sqrt(np.sum(diff ** 2, axis=1) * db.dims / np.maximum(count, 1))
    return np.where(count > 0, dist, np.inf)


def wknn_localize(db: FingerprintDB, query, k: int = DEFAULT_K, query_mask=None) -> np.ndarray:
    """Inverse-distance weighted mean of the k nearest database positions.

    Ties in distance go to the lower database index.

    Raises:
        ValueError: If the database is empty or k is out of range
    """
    if db.size == 0:
        raise ValueError("Fingerprint database is empty")
    if not 1 <= k <= db.size:
        raise ValueError(f"k must be in [1, {db.size}], got {k}")
    dist = fingerprint_distances(db, query, query_mask)
    nearest = np.argsort(dist, kind="stable")[:k]
    d = dist[nearest]
    if not np.all(np.isfinite(d)):
        raise ValueError("Query shares no valid dimension with enough database rows")
    w = 1.0 / (d + WKNN_EPS)
    return (w[:, None] * db.positions[nearest]).sum(axis=0) / w.sum()


def localization_errors(db: FingerprintDB, queries, true_positions, k: int = DEFAULT_K) -> np.ndarray:
    queries = np.asarray(queries, dtype=np.float64)
    true_positions = np.asarray(true_positions, dtype=np.float64)
    estimates = np.stack([wknn_localize(db, q, k) for q in queries])
    return np.linalg.norm(estimates - true_positions, axis=1)


@dataclass
class LocalizationStudy:
    errors: dict[str, np.ndarray]

    def summary(self) -> dict[str, dict[str, float]]:
        return {
            name: {"mean": float(np.mean(e)), "median": float(np.median(e)), "std": float(np.std(e))}
            for name, e in self.errors.items()
        }

    def cdf_rows(self):
        for name, e in self.errors.items():
            values, probs = empirical_cdf(e)
            for v, p in zip(values, probs):
                yield name, float(v), float(p)


def localization_study(db_positions, measured, synthesized, dense, query_positions, query_fingerprints,
                       k: int = DEFAULT_K) -> LocalizationStudy:
    """Sparse vs model-augmented vs dense fingerprint databases.

    Args:
        db_positions: (M, 3) database transmitter positions
        measured: (M, n) measured values at the installed receivers
        synthesized: (M, s) model predictions at the virtual receivers
        dense: (M, n + s) measured values at every receiver (oracle)
        query_positions: (Q, 3) true query positions
        query_fingerprints: (Q, n + s) query measurements, installed receivers first
        k: Neighbours per estimate
    """
    measured = np.asarray(measured, dtype=np.float64)
    n = measured.shape[1]
    queries = np.asarray(query_fingerprints, dtype=np.float64)
    sparse_db = FingerprintDB(db_positions, measured)
    augmented_db = FingerprintDB(db_positions, np.concatenate([measured, synthesized], axis=1))
    dense_db = FingerprintDB(db_positions, dense)
    errors = {
        "sparse": localization_errors(sparse_db, queries[:, :n], query_positions, k),
        "augmented": localization_errors(augmented_db, queries, query_positions, k),
        "dense": localization_errors(dense_db, queries, query_positions, k),
    }
    study = LocalizationStudy(errors)
    for name, stats in study.summary().items():
        logger.info("Localization %s: mean %.3f m, median %.3f m", name, stats["mean"], stats["median"])
    return study


def covered(rssi_table, selected, threshold_dbm: float = COVERAGE_THRESHOLD_DBM) -> np.ndarray:
    """Per-transmitter flag: the strongest selected candidate exceeds the threshold."""
    selected = list(selected)
    if not selected:
        raise ValueError("selected must not be empty")
    table = np.asarray(rssi_table, dtype=np.float64)
    return table[:, selected].max(axis=1) > threshold_dbm


def coverage_fraction(rssi_table, selected, threshold_dbm: float = COVERAGE_THRESHOLD_DBM) -> float:
    return float(np.mean(covered(rssi_table, selected, threshold_dbm)))


def greedy_plan(rssi_table, k: int, threshold_dbm: float = COVERAGE_THRESHOLD_DBM) -> list[int]:
    """Greedy maximum coverage: add the candidate covering most new transmitters.

    Ties go to the lower candidate index.

    Returns:
        Candidate indices in selection order
    """
    table = np.asarray(rssi_table, dtype=np.float64)
    if not 1 <= k <= table.shape[1]:
        raise ValueError(f"k must be in [1, {table.shape[1]}], got {k}")
    reach = table > threshold_dbm
    done = np.zeros(table.shape[0], dtype=bool)
    order: list[int] = []
    for _ in range(k):
        gains = np.sum(reach & ~done[:, None], axis=0)
        gains[order] = -1
        best = int(np.argmax(gains))
        order.append(best)
        done |= reach[:, best]
    return order


def coverage_heatmap(positions, flags, cell_size: float, bounds_min=None, bounds_max=None) -> np.ndarray:
    """Fraction of covered transmitters per square cell in the x-y plane.

    Cells without transmitters are NaN. Rows follow y, columns follow x.
    """
    xy = np.asarray(positions, dtype=np.float64)[:, :2]
    flags = np.asarray(flags, dtype=np.float64)
    lo = xy.min(axis=0) if bounds_min is None else np.asarray(bounds_min, dtype=np.float64)[:2]
    hi = xy.max(axis=0) if bounds_max is None else np.asarray(bounds_max, dtype=np.float64)[:2]
    shape = np.maximum(np.ceil((hi - lo) / cell_size).astype(int), 1)
    idx = np.clip(np.floor((xy - lo) / cell_size).astype(int), 0, shape - 1)
    hits = np.zeros((shape[1], shape[0]))
    count = np.zeros_like(hits)
    np.add.at(hits, (idx[:, 1], idx[:, 0]), flags)
    np.add.at(count, (idx[:, 1], idx[:, 0]), 1.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, hits / count, np.nan)


def gap_to_upper(heatmap: np.ndarray, upper: np.ndarray) -> float:
    """Mean absolute per-cell coverage difference over populated cells."""
    both = np.isfinite(heatmap) & np.isfinite(upper)
    if not both.any():
        return 0.0
    return float(np.mean(np.abs(heatmap[both] - upper[both])))


@dataclass
class PlanningStudy:
    selections: dict[str, list[int]]
    coverage: dict[str, float]
    heatmaps: dict[str, np.ndarray]
    gaps: dict[str, float]


def planning_study(train_measured, train_predicted, test_measured, test_positions, surveyed,
                   k: int, threshold_dbm: float = COVERAGE_THRESHOLD_DBM,
                   cell_size: float = 1.6, bounds_min=None, bounds_max=None) -> PlanningStudy:
    """Survey-only vs model-augmented greedy vs full-survey greedy deployments.

    Args:
        train_measured: (M, candidates) measured dB on planning transmitters
        train_predicted: (M, candidates) model predictions on the same
        test_measured: (Q, candidates) measured dB on held-out transmitters
        test_positions: (Q, 3) held-out transmitter positions
        surveyed: Candidate indices that were actually measured
        k: Access points to deploy
    """
    surveyed = list(surveyed)
    mixed = np.array(train_predicted, dtype=np.float64)
    mixed[:, surveyed] = np.asarray(train_measured, dtype=np.float64)[:, surveyed]
    selections = {
        "survey_only": surveyed[:k],
        "ours": greedy_plan(mixed, k, threshold_dbm),
        "upper_bound": greedy_plan(train_measured, k, threshold_dbm),
    }
    coverage, heatmaps = {}, {}
    for name, chosen in selections.items():
        flags = covered(test_measured, chosen, threshold_dbm)
        coverage[name] = float(np.mean(flags))
        heatmaps[name] = coverage_heatmap(test_positions, flags, cell_size, bounds_min, bounds_max)
    gaps = {name: gap_to_upper(heatmaps[name], heatmaps["upper_bound"]) for name in selections}
    logger.info("Planning coverage: %s", ", ".join(f"{n} {c:.3f}" for n, c in coverage.items()))
    return PlanningStudy(selections, coverage, heatmaps, gaps)
