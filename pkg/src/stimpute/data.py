"""Dataset ingestion, masking and interpolation for node x time matrices.

Windows are kept in original sensor units; :class:`Normalization` maps them to
per-node z-scores for the model and back again for scoring.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path
from typing import Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed inputs or impossible dataset requests."""


@dataclass(frozen=True)
class SpatioTemporalWindow:
    """An N x L block of observations.

    ``values`` holds ground truth wherever it exists. Cells with
    ``observed_mask == 0`` and ``target_mask == 0`` have no ground truth and hold
    NaN. Target cells keep their true value so they can be scored.
    """

    values: np.ndarray
    observed_mask: np.ndarray
    target_mask: np.ndarray
    timestamps: tuple
    step_minutes: int

    def __post_init__(self):
        n, l = self.values.shape
        if self.observed_mask.shape != (n, l) or self.target_mask.shape != (n, l):
            raise DataError("mask shapes must match values")
        if np.any(self.observed_mask.astype(bool) & self.target_mask.astype(bool)):
            raise DataError("a cell cannot be both observed and a target")
        if len(self.timestamps) != l:
            raise DataError("need one timestamp per time step")
        for a in (self.values, self.observed_mask, self.target_mask):
            a.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    @property
    def ground_truth_mask(self) -> np.ndarray:
        return (self.observed_mask + self.target_mask) > 0

    def with_values(self, values: np.ndarray) -> "SpatioTemporalWindow":
        return replace(self, values=np.array(values, dtype=float))


@dataclass(frozen=True)
class GraphSpec:
    node_ids: tuple
    distances: np.ndarray
    adjacency: np.ndarray

    def __post_init__(self):
        n = len(self.node_ids)
        if self.adjacency.shape != (n, n):
            raise DataError(f"adjacency must be {n}x{n}, got {self.adjacency.shape}")
        if not np.all(np.isfinite(self.adjacency)):
            raise DataError("adjacency contains non-finite entries")
        if np.any(self.adjacency < 0) or np.any(self.adjacency > 1):
            raise DataError("adjacency entries must lie in [0, 1]")

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)


@dataclass(frozen=True)
class InterpolatedConditioner:
    values: np.ndarray
    source_mask: np.ndarray


@dataclass(frozen=True)
class Normalization:
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean[:, None]) / self.std[:, None]

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return z * self.std[:, None] + self.mean[:, None]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalization":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


@dataclass
class Dataset:
    windows: list
    graph: GraphSpec | None
    normalization: Normalization
    name: str = "dataset"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.windows:
            raise DataError("dataset has no windows")
        n = self.windows[0].n_nodes
        step = self.windows[0].step_minutes
        for w in self.windows:
            if w.n_nodes != n or w.step_minutes != step:
                raise DataError("all windows must share node count and sampling interval")
        if self.graph is not None and self.graph.n_nodes != n:
            raise DataError(f"graph has {self.graph.n_nodes} nodes but data has {n}")

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def n_nodes(self) -> int:
        return self.windows[0].n_nodes

    @property
    def step_minutes(self) -> int:
        return self.windows[0].step_minutes

    def subset(self, windows: Sequence[SpatioTemporalWindow]) -> "Dataset":
        return Dataset(list(windows), self.graph, self.normalization, self.name, dict(self.meta))


# --------------------------------------------------------------------------- graph


def build_adjacency(distances, kernel_width: float, threshold: float = 0.1) -> np.ndarray:
    """Thresholded Gaussian kernel ``exp(-d^2 / w^2)`` with unit self-loops."""
    d = np.asarray(distances, dtype=float)
    if kernel_width <= 0:
        raise DataError("kernel_width must be positive")
    if np.any(d < 0):
        raise DataError("distances must be nonnegative")
    with np.errstate(over="ignore", invalid="ignore"):
        a = np.exp(-np.square(d) / kernel_width**2)
    a = np.where(np.isfinite(a), a, 0.0)
    a[a < threshold] = 0.0
    np.fill_diagonal(a, 1.0)
    return a


def default_kernel_width(distances: np.ndarray) -> float:
    finite = distances[np.isfinite(distances) & (distances > 0)]
    if finite.size == 0:
        return 1.0
    return float(finite.std()) or float(finite.mean())


def _read_adjacency(path: Path, node_ids: Sequence[str], kernel_width, threshold) -> GraphSpec:
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(f) if r and any(c.strip() for c in r)]
    n = len(node_ids)
    index = {str(k): i for i, k in enumerate(node_ids)}

    def is_number(s):
        try:
            float(s)
            return True
        except ValueError:
            return False

    def is_edge(r):
        return len(r) == 3 and is_number(r[2]) and all(c.strip() in index or is_number(c) for c in r[:2])

    header = None
    if rows and not all(is_number(c) for c in rows[0]) and not is_edge(rows[0]):
        header, rows = rows[0], rows[1:]
    dense_shaped = len(rows) == n and all(len(r) == n for r in rows)
    edge_shaped = bool(rows) and all(len(r) == 3 for r in rows)
    named_edges = edge_shaped and not all(is_number(c) for r in rows for c in r[:2])
    if header is not None and len(header) == 3 and [h.strip().lower() for h in header][:2] == ["src", "dst"]:
        named_edges = edge_shaped
    if named_edges or (edge_shaped and not dense_shaped):
        layout = "edges"
    elif dense_shaped:
        layout = "dense"
    else:
        raise DataError(
            f"adjacency file is neither a dense {n}x{n} matrix nor a 3-column edge list "
            f"({len(rows)} rows)"
        )

    if layout == "dense":
        mat = np.array([[float(c) for c in r] for r in rows], dtype=float)
        if mat.shape != (n, n):
            raise DataError(f"adjacency is {mat.shape}, values have {n} nodes")
        # A dense file of weights already in [0,1] with unit diagonal is taken as-is.
        if np.allclose(np.diag(mat), 1.0) and mat.max() <= 1.0 and mat.min() >= 0.0:
            return GraphSpec(tuple(node_ids), np.full((n, n), np.nan), mat)
        distances = mat
    else:
        distances = np.full((n, n), np.inf)
        np.fill_diagonal(distances, 0.0)
        for src, dst, dist in rows:
            try:
                i, j = index[src.strip()], index[dst.strip()]
            except KeyError:
                try:
                    i, j = int(float(src)), int(float(dst))
                except ValueError as exc:
                    raise DataError(f"unknown node in edge list: {src!r}, {dst!r}") from exc
                if not (0 <= i < n and 0 <= j < n):
                    raise DataError(f"edge ({i}, {j}) outside the {n} known nodes")
            distances[i, j] = distances[j, i] = float(dist)

    width = kernel_width if kernel_width is not None else default_kernel_width(distances)
    return GraphSpec(tuple(node_ids), distances, build_adjacency(distances, width, threshold))


# --------------------------------------------------------------------------- loading


def _parse_timestamp(s: str) -> datetime:
    try:
        return datetime.fromisoformat(s.strip())
    except ValueError as exc:
        raise DataError(f"bad timestamp {s!r}") from exc


def read_values_csv(path) -> tuple[list[str], list[datetime], np.ndarray]:
    """Read a values CSV: header row of node ids, first column ISO-8601 timestamps.

    Returns the matrix as nodes x time; empty cells and ``NaN`` become NaN.
    """
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(f) if r]
    if len(rows) < 2:
        raise DataError("values file has no data rows")
    node_ids = [c.strip() for c in rows[0][1:]]
    stamps, data = [], []
    for r in rows[1:]:
        if len(r) != len(node_ids) + 1:
            raise DataError(f"row for {r[0]!r} has {len(r) - 1} values, expected {len(node_ids)}")
        stamps.append(_parse_timestamp(r[0]))
        data.append([float(c) if c.strip() and c.strip().lower() != "nan" else math.nan for c in r[1:]])
    return node_ids, stamps, np.array(data, dtype=float).T


def write_values_csv(path, node_ids, timestamps, values: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["timestamp", *node_ids])
        for j, ts in enumerate(timestamps):
            w.writerow([ts.isoformat()] + ["" if np.isnan(v) else repr(float(v)) for v in values[:, j]])


def write_adjacency_csv(path, adjacency: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        csv.writer(f).writerows([[repr(float(v)) for v in row] for row in adjacency])


def _step_minutes(stamps: Sequence[datetime]) -> int:
    if len(stamps) < 2:
        raise DataError("need at least two timestamps to infer the sampling interval")
    deltas = {b - a for a, b in zip(stamps, stamps[1:])}
    if len(deltas) != 1:
        raise DataError("timestamps are not uniformly spaced")
    delta = deltas.pop()
    if delta <= timedelta(0) or delta.total_seconds() % 60:
        raise DataError("sampling interval must be a positive whole number of minutes")
    return int(delta.total_seconds() // 60)


def fit_normalization(values: np.ndarray) -> Normalization:
    """Per-node mean/std over the finite entries of a nodes x time matrix."""
    with np.errstate(invalid="ignore"):
        counts = np.isfinite(values).sum(axis=1)
        mean = np.where(counts > 0, np.nanmean(np.where(counts[:, None] > 0, values, 0.0), axis=1), 0.0)
        std = np.where(counts > 1, np.nanstd(np.where(counts[:, None] > 0, values, 0.0), axis=1), 1.0)
    std = np.where(np.isfinite(std) & (std > 1e-8), std, 1.0)
    mean = np.where(np.isfinite(mean), mean, 0.0)
    return Normalization(mean.astype(float), std.astype(float))


def make_windows(values: np.ndarray, timestamps: Sequence[datetime], step_minutes: int,
                 length: int, stride: int) -> list[SpatioTemporalWindow]:
    n, total = values.shape
    if length > total:
        raise DataError(f"window length {length} exceeds series length {total}")
    if length < 1 or stride < 1:
        raise DataError("window length and stride must be positive")
    windows = []
    for start in range(0, total - length + 1, stride):
        v = values[:, start:start + length].copy()
        obs = np.isfinite(v).astype(np.int8)
        windows.append(SpatioTemporalWindow(
            values=v,
            observed_mask=obs,
            target_mask=np.zeros_like(obs),
            timestamps=tuple(timestamps[start:start + length]),
            step_minutes=step_minutes,
        ))
    return windows


def dataset_from_arrays(values: np.ndarray, timestamps: Sequence[datetime], graph: GraphSpec,
                        length: int, stride: int | None = None, train_frac: float = 0.7,
                        name: str = "dataset") -> Dataset:
    values = np.asarray(values, dtype=float)
    if values.shape[0] != graph.n_nodes:
        raise DataError(f"values have {values.shape[0]} nodes but graph has {graph.n_nodes}")
    step = _step_minutes(timestamps)
    windows = make_windows(values, timestamps, step, length, stride or length)
    n_train = max(1, int(len(windows) * train_frac + 1e-9))
    train_cols = (n_train - 1) * (stride or length) + length
    norm = fit_normalization(values[:, :train_cols])
    return Dataset(windows, graph, norm, name=name,
                   meta={"length": length, "stride": stride or length, "train_frac": train_frac})


def load_dataset(values_path, adjacency_path, length: int, stride: int | None = None,
                 train_frac: float = 0.7, kernel_width: float | None = None,
                 threshold: float = 0.1) -> Dataset:
    """Load a values CSV plus adjacency CSV and slice it into windows.

    Normalization statistics come from the rows covered by the training split.
    """
    node_ids, stamps, values = read_values_csv(values_path)
    graph = _read_adjacency(Path(adjacency_path), node_ids, kernel_width, threshold)
    return dataset_from_arrays(values, stamps, graph, length, stride, train_frac,
                               name=Path(values_path).stem)


# --------------------------------------------------------------------------- splitting


def split_sizes(n_windows: int, train_frac: float = 0.7, valid_frac: float = 0.1) -> tuple[int, int, int]:
    if train_frac <= 0 or valid_frac <= 0 or train_frac + valid_frac >= 1:
        raise DataError("fractions must be positive and sum to less than 1")
    n_train = int(n_windows * train_frac + 1e-9)
    n_valid = int(n_windows * valid_frac + 1e-9)
    n_test = n_windows - n_train - n_valid
    if min(n_train, n_valid, n_test) < 1:
        raise DataError(
            f"{n_windows} windows cannot fill train/valid/test = {n_train}/{n_valid}/{n_test}"
        )
    return n_train, n_valid, n_test


def split_chronological(dataset: Dataset, train_frac: float = 0.7, valid_frac: float = 0.1):
    """Assign windows to train/valid/test in time order.

    Windows that overlap an earlier split in time are dropped so that no window
    straddles a boundary.
    """
    windows = sorted(dataset.windows, key=lambda w: w.timestamps[0])
    n_train, n_valid, _ = split_sizes(len(windows), train_frac, valid_frac)
    train = windows[:n_train]
    valid = windows[n_train:n_train + n_valid]
    test = windows[n_train + n_valid:]
    valid = [w for w in valid if w.timestamps[0] > train[-1].timestamps[-1]]
    if not valid:
        raise DataError("validation split is empty after removing overlapping windows")
    test = [w for w in test if w.timestamps[0] > valid[-1].timestamps[-1]]
    if not test:
        raise DataError("test split is empty after removing overlapping windows")
    return dataset.subset(train), dataset.subset(valid), dataset.subset(test)


def split_manifest(dataset: Dataset, train_frac: float = 0.7, valid_frac: float = 0.1) -> dict:
    n_train, n_valid, n_test = split_sizes(len(dataset), train_frac, valid_frac)
    return {
        "n_windows": len(dataset),
        "train": [0, n_train],
        "valid": [n_train, n_train + n_valid],
        "test": [n_train + n_valid, n_train + n_valid + n_test],
    }


def write_split_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2))


# --------------------------------------------------------------------------- masking


def _move_to_target(window: SpatioTemporalWindow, picked: np.ndarray) -> SpatioTemporalWindow:
    obs = window.observed_mask.astype(bool)
    picked = picked & obs
    return replace(
        window,
        observed_mask=(obs & ~picked).astype(np.int8),
        target_mask=(window.target_mask.astype(bool) | picked).astype(np.int8),
    )


def apply_point_mask(window: SpatioTemporalWindow, rate: float, rng: np.random.Generator):
    """Move each observed cell to the target set independently with probability ``rate``."""
    if not 0 < rate < 1:
        raise DataError(f"point mask rate must be in (0, 1), got {rate}")
    if not window.observed_mask.any():
        raise DataError("window has no observed cells to mask")
    return _move_to_target(window, rng.random(window.shape) < rate)


def block_lengths_for(step_minutes: int, min_hours: float = 1.0, max_hours: float = 4.0) -> tuple[int, int]:
    lo = max(1, int(round(min_hours * 60 / step_minutes)))
    hi = max(lo, int(round(max_hours * 60 / step_minutes)))
    return lo, hi


def sample_block_mask(shape, rng: np.random.Generator, point_rate: float = 0.05,
                      start_prob: float = 0.0015, min_len: int = 1, max_len: int = 4,
                      return_blocks: bool = False):
    """Draw a block-failure mask: i.i.d. points plus per-sensor outages.

    With ``return_blocks`` the (node, start, length) triples are returned too;
    lengths are the drawn lengths before clipping at the window end.
    """
    n, l = shape
    # start_prob == 0 is allowed: it degenerates to plain point masking.
    if not (0 < point_rate < 1 and 0 <= start_prob < 1):
        raise DataError("point_rate must lie in (0, 1) and start_prob in [0, 1)")
    if min_len < 1 or min_len > max_len:
        raise DataError("need 1 <= min_len <= max_len")
    if max_len >= l:
        raise DataError(f"max block length {max_len} must be shorter than the window ({l})")
    mask = rng.random(shape) < point_rate
    starts = rng.random(shape) < start_prob
    lengths = rng.integers(min_len, max_len + 1, size=shape)
    blocks = []
    for i, j in zip(*np.nonzero(starts)):
        k = int(lengths[i, j])
        mask[i, j:j + k] = True
        blocks.append((int(i), int(j), k))
    return (mask, blocks) if return_blocks else mask


def apply_block_mask(window: SpatioTemporalWindow, rng: np.random.Generator,
                     point_rate: float = 0.05, start_prob: float = 0.0015,
                     min_len: int | None = None, max_len: int | None = None):
    if min_len is None or max_len is None:
        lo, hi = block_lengths_for(window.step_minutes)
        min_len = lo if min_len is None else min_len
        max_len = hi if max_len is None else max_len
    picked = sample_block_mask(window.shape, rng, point_rate, start_prob, min_len, max_len)
    return _move_to_target(window, picked)


# --------------------------------------------------------------------------- interpolation


def interpolate_rows(values: np.ndarray, observed: np.ndarray, fill_value=0.0) -> np.ndarray:
    """Per-row linear interpolation holding edge values; empty rows get ``fill_value``."""
    n, l = values.shape
    out = np.empty((n, l), dtype=float)
    grid = np.arange(l)
    fill = np.broadcast_to(np.asarray(fill_value, dtype=float), (n,))
    for i in range(n):
        idx = np.flatnonzero(observed[i])
        if idx.size == 0:
            out[i] = fill[i]
        else:
            out[i] = np.interp(grid, idx, values[i, idx])
    return out


def linear_interpolate(window: SpatioTemporalWindow, fill_value=0.0) -> InterpolatedConditioner:
    obs = window.observed_mask.astype(bool)
    return InterpolatedConditioner(
        values=interpolate_rows(window.values, obs, fill_value),
        source_mask=obs.astype(np.int8),
    )


def normalize_window(window: SpatioTemporalWindow, norm: Normalization) -> SpatioTemporalWindow:
    return window.with_values(norm.normalize(window.values))
