"""Dataset containers, a JSON file format, synthetic generators, and
split management.

The JSON schema (version 1) is:

    {
      "schema_version": 1,
      "name": "...",                     # optional
      "n": 4,
      "edges": [[0, 1], [1, 2]],         # undirected, each edge once
      "features": [[...], ...],          # n rows, c_in columns
      "labels": [0, 1, ...],             # length n, class ids from 0
      "targets": [[...], ...],           # n x c_out floats (regression)
      "splits": {"0": {"train": [...], "val": [...], "test": [...]}}
    }

``labels`` and ``targets`` are individually optional (a bare graph file is
valid input for simulation). Temporal signals travel as CSV with one row
per timestamp and one column per node; the loader turns them into lagged
next-step forecasting snapshots.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .graph import Graph, GraphError, build_graph, normalized_laplacian
from .ioutil import derive_seed, write_text_atomic

SPLIT_PARTS = ("train", "val", "test")


class DataError(ValueError):
    """Raised for schema violations and malformed dataset content."""


@dataclass
class Dataset:
    """Node-level dataset: one graph, features, labels or targets, and any
    number of named train/val/test splits."""

    graph: Graph
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    targets: Optional[np.ndarray] = None
    splits: dict = field(default_factory=dict)
    name: str = ""
    homophily: Optional[float] = None

    @property
    def n(self) -> int:
        return self.graph.n

    @property
    def num_classes(self) -> int:
        if self.labels is None:
            raise DataError("dataset has no labels")
        return int(self.labels.max()) + 1

    def validate(self) -> None:
        n = self.graph.n
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise DataError(f"features must be ({n}, c_in), got {self.features.shape}")
        if self.labels is not None:
            if self.labels.shape != (n,):
                raise DataError(f"labels must have length {n}, got {self.labels.shape}")
            present = np.unique(self.labels)
            expected = np.arange(present.max() + 1) if present.size else present
            if present.size == 0 or not np.array_equal(present, expected):
                raise DataError("class ids must be contiguous from 0")
        if self.targets is not None and (self.targets.ndim != 2 or self.targets.shape[0] != n):
            raise DataError(f"targets must be ({n}, c_out), got {self.targets.shape}")
        for split_name, parts in self.splits.items():
            used = np.zeros(n, dtype=bool)
            for part in SPLIT_PARTS:
                idx = parts[part]
                if idx.size and (idx.min() < 0 or idx.max() >= n):
                    raise DataError(f"split {split_name!r}/{part}: index out of range")
                if np.any(used[idx]):
                    raise DataError(f"split {split_name!r}: parts are not disjoint")
                used[idx] = True


@dataclass
class Snapshot:
    features: np.ndarray  # (n, lags)
    target: np.ndarray    # (n, 1)


@dataclass
class TemporalDataset:
    """A static graph with an ordered sequence of feature/target snapshots
    at uniformly spaced timestamps."""

    graph: Graph
    snapshots: list[Snapshot]
    timestamps: np.ndarray

    def validate(self) -> None:
        if len(self.snapshots) < 2:
            raise DataError("temporal dataset needs at least 2 snapshots")
        if len(self.snapshots) != len(self.timestamps):
            raise DataError("one timestamp per snapshot required")
        n = self.graph.n
        width = self.snapshots[0].features.shape[1]
        for k, snap in enumerate(self.snapshots):
            if snap.features.shape != (n, width):
                raise DataError(f"snapshot {k}: features shape {snap.features.shape}")
            if snap.target.shape[0] != n:
                raise DataError(f"snapshot {k}: target shape {snap.target.shape}")


def edge_homophily(graph: Graph, labels: np.ndarray) -> float:
    """Fraction of undirected edges whose endpoints share a label."""
    und = graph.edges[graph.edges[:, 0] < graph.edges[:, 1]]
    if und.shape[0] == 0:
        return 0.0
    return float(np.mean(labels[und[:, 0]] == labels[und[:, 1]]))


# ---------------------------------------------------------------------------
# JSON round trip
# ---------------------------------------------------------------------------

def load_json_dataset(path: str) -> Dataset:
    """Parse and validate the documented JSON schema; computes edge
    homophily when labels are present."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from exc
    for key in ("n", "edges", "features"):
        if key not in raw:
            raise DataError(f"{path}: missing required field {key!r}")

    try:
        graph = build_graph(raw["n"], raw["edges"])
    except GraphError as exc:
        raise DataError(f"{path}: {exc}") from exc

    features = np.asarray(raw["features"], dtype=np.float64)
    if features.dtype == object or features.ndim != 2:
        raise DataError(f"{path}: features must be a rectangular 2-D array")

    labels = None
    if raw.get("labels") is not None:
        labels = np.asarray(raw["labels"], dtype=np.int64)
    targets = None
    if raw.get("targets") is not None:
        targets = np.asarray(raw["targets"], dtype=np.float64)

    splits = {}
    for split_name, parts in (raw.get("splits") or {}).items():
        entry = {}
        for part in SPLIT_PARTS:
            if part not in parts:
                raise DataError(f"{path}: split {split_name!r} is missing {part!r}")
            entry[part] = np.asarray(parts[part], dtype=np.int64)
        splits[split_name] = entry

    ds = Dataset(graph=graph, features=features, labels=labels, targets=targets,
                 splits=splits, name=str(raw.get("name", "")))
    try:
        ds.validate()
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if labels is not None:
        ds.homophily = edge_homophily(graph, labels)
    return ds


def save_json_dataset(path: str, ds: Dataset) -> None:
    """Inverse of load_json_dataset; undirected edges are written once."""
    und = ds.graph.edges[ds.graph.edges[:, 0] < ds.graph.edges[:, 1]]
    payload = {
        "schema_version": 1,
        "name": ds.name,
        "n": ds.graph.n,
        "edges": und.tolist(),
        "features": ds.features.tolist(),
    }
    if ds.labels is not None:
        payload["labels"] = ds.labels.tolist()
    if ds.targets is not None:
        payload["targets"] = ds.targets.tolist()
    if ds.splits:
        payload["splits"] = {
            name: {part: parts[part].tolist() for part in SPLIT_PARTS}
            for name, parts in ds.splits.items()
        }
    write_text_atomic(path, json.dumps(payload) + "\n")


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

def make_splits(dataset: Dataset, ratios: tuple[float, float, float] = (0.48, 0.32, 0.20),
                count: int = 1, seed: int = 0) -> Dataset:
    """Per-class stratified splits, ``count`` independent draws named
    "0", "1", ...

    Sizes are floor(ratio * class size) with the remainder assigned to
    train, so ratios summing to one cover every labeled node.
    """
    if dataset.labels is None:
        raise DataError("stratified splits need labels")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) > 1 + 1e-12:
        raise DataError(f"ratios must be three non-negatives summing to <= 1, got {ratios}")
    labels = dataset.labels
    classes = np.unique(labels)
    slots = sum(1 for r in ratios if r > 0)
    splits = {}
    for s in range(count):
        rng = np.random.default_rng(derive_seed(seed, s))
        train, val, test = [], [], []
        for cls in classes:
            members = np.flatnonzero(labels == cls)
            if members.size < slots:
                raise DataError(
                    f"class {cls} has {members.size} nodes, fewer than {slots} split slots")
            members = rng.permutation(members)
            n_tr = int(np.floor(ratios[0] * members.size))
            n_va = int(np.floor(ratios[1] * members.size))
            n_te = int(np.floor(ratios[2] * members.size))
            if (ratios[0] > 0 and n_tr == 0) or (ratios[1] > 0 and n_va == 0) \
                    or (ratios[2] > 0 and n_te == 0):
                raise DataError(
                    f"class {cls} has {members.size} nodes, fewer than the split slots need")
            if abs(sum(ratios) - 1.0) <= 1e-12:
                n_tr = members.size - n_va - n_te  # remainder to train
            train.append(members[:n_tr])
            val.append(members[n_tr:n_tr + n_va])
            test.append(members[n_tr + n_va:n_tr + n_va + n_te])
        splits[str(s)] = {
            "train": np.sort(np.concatenate(train)),
            "val": np.sort(np.concatenate(val)),
            "test": np.sort(np.concatenate(test)),
        }
    return dataclasses.replace(dataset, splits=splits)


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------

def synth_sbm(n: int, classes: int, p_in: float, p_out: float, feature_dim: int,
              noise: float, seed: int, split_count: int = 1,
              ratios: tuple[float, float, float] = (0.48, 0.32, 0.20)) -> Dataset:
    """Stochastic block model with one-hot class features plus Gaussian
    noise. p_in > p_out gives a homophilic graph, p_in < p_out a
    heterophilic one."""
    if not (0 <= p_in <= 1 and 0 <= p_out <= 1):
        raise DataError(f"probabilities must lie in [0, 1], got p_in={p_in}, p_out={p_out}")
    if classes < 1 or n % classes != 0:
        raise DataError(f"n={n} must be divisible by classes={classes}")
    if feature_dim < classes:
        raise DataError(f"feature_dim={feature_dim} must be >= classes={classes}")

    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), n // classes)

    same = labels[:, None] == labels[None, :]
    prob = np.where(same, p_in, p_out)
    draw = rng.random((n, n))
    upper = np.triu(draw < prob, k=1)
    edges = np.argwhere(upper)

    features = np.zeros((n, feature_dim))
    features[np.arange(n), labels] = 1.0
    if noise > 0:
        features = features + noise * rng.standard_normal((n, feature_dim))

    graph = build_graph(n, edges)
    ds = Dataset(graph=graph, features=features, labels=labels,
                 name=f"sbm_n{n}_k{classes}", homophily=edge_homophily(graph, labels))
    return make_splits(ds, ratios=ratios, count=split_count, seed=derive_seed(seed, 1))


def synth_temporal(graph: Graph, periods: int, period_length: int,
                   diffusion_strength: float, seed: int, *, sources: int = 1,
                   feature_noise: float = 0.0, amplitude: float = 1.0,
                   strength_period: Optional[int] = None, dt: float = 1.0,
                   lags: int = 4) -> TemporalDataset:
    """Graph diffusion driven by sinusoidal sources at seeded nodes.

    The signal evolves as u <- u - s(t) * Lhat u, after which each source
    node is set to amplitude * sin(2 pi t / period_length + phase). The
    strength s(t) is ``diffusion_strength`` when ``strength_period`` is
    None, otherwise it oscillates in [0, diffusion_strength] with that
    period (a slowly time-varying transport regime). Snapshot features are
    the previous ``lags`` signal steps per node (optionally
    observation-noised); the target is the next step. Timestamps advance
    by ``dt`` per step, which sets the time units seen by time-embedded
    models.
    """
    if period_length < 2:
        raise DataError(f"period_length must be >= 2, got {period_length}")
    if graph.n < 1:
        raise DataError("degenerate graph")
    if not 1 <= sources <= graph.n:
        raise DataError(f"sources must lie in [1, {graph.n}], got {sources}")
    total = periods * period_length
    if total < lags + 2:
        raise DataError(f"{total} steps are too few for {lags} lags")

    rng = np.random.default_rng(seed)
    lap = normalized_laplacian(graph)
    source_nodes = rng.choice(graph.n, size=sources, replace=False)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=sources)

    def strength_at(t: int) -> float:
        if strength_period is None:
            return diffusion_strength
        return diffusion_strength * (0.5 + 0.5 * np.sin(2.0 * np.pi * t / strength_period))

    signal = np.zeros((total, graph.n))
    signal[0, source_nodes] = amplitude * np.sin(phases)
    for t in range(1, total):
        nxt = signal[t - 1] - strength_at(t - 1) * (lap.csr @ signal[t - 1])
        nxt[source_nodes] = amplitude * np.sin(2.0 * np.pi * t / period_length + phases)
        signal[t] = nxt

    snapshots = []
    stamps = []
    for t in range(lags - 1, total - 1):
        feats = signal[t - lags + 1:t + 1].T.copy()  # columns oldest..newest
        if feature_noise > 0:
            feats = feats + feature_noise * rng.standard_normal(feats.shape)
        snapshots.append(Snapshot(features=feats, target=signal[t + 1][:, None].copy()))
        stamps.append(float(t) * dt)
    return TemporalDataset(graph=graph, snapshots=snapshots, timestamps=np.array(stamps))


# ---------------------------------------------------------------------------
# Temporal CSV
# ---------------------------------------------------------------------------

def load_temporal_csv(path: str, graph: Graph, lags: int = 4) -> TemporalDataset:
    """Read a signal matrix (one row per timestamp, one column per node,
    comma-separated, no header) into lagged next-step snapshots."""
    signal = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    if signal.shape[1] != graph.n:
        raise DataError(f"{path}: {signal.shape[1]} columns for a graph with {graph.n} nodes")
    if signal.shape[0] < lags + 2:
        raise DataError(f"{path}: {signal.shape[0]} rows are too few for {lags} lags")
    snapshots = []
    stamps = []
    for t in range(lags - 1, signal.shape[0] - 1):
        snapshots.append(Snapshot(features=signal[t - lags + 1:t + 1].T.copy(),
                                  target=signal[t + 1][:, None].copy()))
        stamps.append(float(t))
    return TemporalDataset(graph=graph, snapshots=snapshots, timestamps=np.array(stamps))


def save_temporal_csv(path: str, signal: np.ndarray) -> None:
    rows = "\n".join(",".join(repr(float(v)) for v in row) for row in np.asarray(signal))
    write_text_atomic(path, rows + "\n")
