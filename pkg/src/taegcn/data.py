"""Dataset container, CSV I/O, splitting, normalization, windowing, and the
synthetic regime-switching generator.

The on-disk format is a single CSV whose first column is ``timestamp``
(epoch seconds) and whose remaining columns are named ``<node>_channel<k>``.
Empty cells are missing readings and are stored as the dataset's missing
marker; the observation mask computed at load time travels with the dataset
through normalization so a normalized value that happens to equal the
marker is never mistaken for a gap.
"""

from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DataError


def atomic_write_text(path: str, text: str) -> None:
    """Write via a temp file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class SeriesDataset:
    """Multivariate series for N nodes over T aligned steps with C channels.

    ``observed`` marks real readings; entries where it is False hold the
    missing marker. When not supplied it is derived by comparing values to
    the marker.
    """

    values: np.ndarray
    node_ids: list[str]
    timestamps: list[int]
    missing_marker: float = 0.0
    observed: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise DataError(f"values must be [nodes, steps, channels], got {self.values.shape}")
        n, t, _ = self.values.shape
        if len(self.node_ids) != n:
            raise DataError(f"{len(self.node_ids)} node ids for {n} value rows")
        if len(self.timestamps) != t:
            raise DataError(f"{len(self.timestamps)} timestamps for {t} steps")
        if any(b <= a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise DataError("timestamps must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise DataError("dataset values must be finite")
        if self.observed is None:
            self.observed = self.values != self.missing_marker
        else:
            self.observed = np.asarray(self.observed, dtype=bool)
            if self.observed.shape != self.values.shape:
                raise DataError("observation mask shape does not match values")

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    @property
    def n_channels(self) -> int:
        return self.values.shape[2]

    def slice_time(self, start: int, stop: int) -> "SeriesDataset":
        return SeriesDataset(values=self.values[:, start:stop].copy(),
                             node_ids=list(self.node_ids),
                             timestamps=list(self.timestamps[start:stop]),
                             missing_marker=self.missing_marker,
                             observed=self.observed[:, start:stop].copy())


def _parse_header(header: list[str]) -> tuple[list[str], int]:
    if not header or header[0] != "timestamp":
        raise DataError("first CSV column must be 'timestamp'")
    pairs = []
    for col in header[1:]:
        node, sep, chan = col.rpartition("_channel")
        if not sep or not node or not chan.isdigit():
            raise DataError(f"column {col!r} is not of the form <node>_channel<k>")
        pairs.append((node, int(chan)))
    if not pairs:
        raise DataError("no data columns present")
    node_ids = list(dict.fromkeys(node for node, _ in pairs))
    channels = sorted({chan for _, chan in pairs})
    n_channels = len(channels)
    if channels != list(range(n_channels)):
        raise DataError(f"channel indices must cover 0..C-1, got {channels}")
    expected = {(node, chan) for node in node_ids for chan in range(n_channels)}
    if set(pairs) != expected or len(pairs) != len(expected):
        raise DataError("every node needs exactly one column per channel")
    return node_ids, n_channels


def load_csv(path: str, missing_marker: float = 0.0) -> SeriesDataset:
    """Parse a series CSV.

    Raises DataError with a 1-based line number for unparseable cells,
    ragged rows, and duplicate timestamps.
    """
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        node_ids, n_channels = _parse_header(header)
        # header order may differ from canonical node-major order
        column_of = {}
        for i, col in enumerate(header[1:], start=1):
            node, _, chan = col.rpartition("_channel")
            column_of[(node, int(chan))] = i

        rows: list[tuple[int, list[float], list[bool]]] = []
        seen_ts: dict[int, int] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            try:
                ts = int(float(row[0]))
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad timestamp {row[0]!r}") from None
            if ts in seen_ts:
                raise DataError(f"{path}:{lineno}: duplicate timestamp {ts} "
                                f"(first seen on line {seen_ts[ts]})")
            seen_ts[ts] = lineno
            vals = []
            obs = []
            for cell in row[1:]:
                cell = cell.strip()
                if cell == "":
                    vals.append(missing_marker)
                    obs.append(False)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: unparseable value {cell!r}") from None
                if not np.isfinite(v):
                    raise DataError(f"{path}:{lineno}: non-finite value {cell!r}")
                vals.append(v)
                obs.append(True)
            rows.append((ts, vals, obs))

    if not rows:
        raise DataError(f"{path}: no data rows")
    rows.sort(key=lambda r: r[0])
    timestamps = [r[0] for r in rows]
    n_nodes = len(node_ids)
    values = np.empty((n_nodes, len(rows), n_channels), dtype=np.float64)
    observed = np.empty((n_nodes, len(rows), n_channels), dtype=bool)
    for t, (_, vals, obs) in enumerate(rows):
        for i, node in enumerate(node_ids):
            for c in range(n_channels):
                col = column_of[(node, c)]
                values[i, t, c] = vals[col - 1]
                observed[i, t, c] = obs[col - 1]
    return SeriesDataset(values=values, node_ids=node_ids, timestamps=timestamps,
                         missing_marker=missing_marker, observed=observed)


def write_csv(dataset: SeriesDataset, path: str) -> None:
    """Inverse of load_csv: missing entries become empty cells, floats keep
    shortest round-trip precision."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["timestamp"] + [f"{node}_channel{c}" for node in dataset.node_ids
                              for c in range(dataset.n_channels)]
    writer.writerow(header)
    for t, ts in enumerate(dataset.timestamps):
        row: list[str] = [str(ts)]
        for i in range(dataset.n_nodes):
            for c in range(dataset.n_channels):
                row.append(repr(float(dataset.values[i, t, c]))
                           if dataset.observed[i, t, c] else "")
        writer.writerow(row)
    atomic_write_text(path, buf.getvalue())


def chronological_split(dataset: SeriesDataset,
                        fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
                        ) -> tuple[SeriesDataset, SeriesDataset, SeriesDataset]:
    """Contiguous train/validation/test split along time.

    Lengths are floor(f_train * T) and floor(f_val * T); the test split takes
    the remainder, so the three parts concatenate back to the original.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ConfigError(f"need three positive fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {fractions}")
    total = dataset.n_steps
    n_train = int(np.floor(fractions[0] * total))
    n_val = int(np.floor(fractions[1] * total))
    n_test = total - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise ConfigError(f"split of {total} steps yields an empty part "
                          f"({n_train}/{n_val}/{n_test})")
    return (dataset.slice_time(0, n_train),
            dataset.slice_time(n_train, n_train + n_val),
            dataset.slice_time(n_train + n_val, total))


@dataclass
class NormStats:
    """Per-channel z-score parameters fitted on observed training entries."""

    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, payload: dict) -> "NormStats":
        return cls(mean=np.asarray(payload["mean"], dtype=np.float64),
                   std=np.asarray(payload["std"], dtype=np.float64))


def compute_norm_stats(dataset: SeriesDataset, std_floor: float = 1e-8) -> NormStats:
    mean = np.zeros(dataset.n_channels)
    std = np.ones(dataset.n_channels)
    for c in range(dataset.n_channels):
        vals = dataset.values[:, :, c][dataset.observed[:, :, c]]
        if vals.size == 0:
            raise DataError(f"channel {c} has no observed entries to fit statistics")
        mean[c] = vals.mean()
        std[c] = max(vals.std(), std_floor)
    return NormStats(mean=mean, std=std)


def normalize(dataset: SeriesDataset, stats: NormStats) -> SeriesDataset:
    """Z-score observed entries; missing entries keep the marker value."""
    scaled = (dataset.values - stats.mean) / stats.std
    values = np.where(dataset.observed, scaled, dataset.values)
    return SeriesDataset(values=values, node_ids=list(dataset.node_ids),
                         timestamps=list(dataset.timestamps),
                         missing_marker=dataset.missing_marker,
                         observed=dataset.observed.copy())


def denormalize(dataset: SeriesDataset, stats: NormStats) -> SeriesDataset:
    restored = dataset.values * stats.std + stats.mean
    values = np.where(dataset.observed, restored, dataset.values)
    return SeriesDataset(values=values, node_ids=list(dataset.node_ids),
                         timestamps=list(dataset.timestamps),
                         missing_marker=dataset.missing_marker,
                         observed=dataset.observed.copy())


@dataclass
class Window:
    """One supervised example: an input block and its forecast targets.

    ``x``: [N, input_length, C] in the units of the windowed dataset.
    ``y``: [N, horizon], target channel only, original units.
    ``y_observed``: bool [N, horizon], False where the target was missing.
    """

    x: np.ndarray
    y: np.ndarray
    y_observed: np.ndarray
    start: int


def make_windows(dataset: SeriesDataset, input_length: int, horizon: int,
                 target_channel: int = 0,
                 target_source: SeriesDataset | None = None) -> list[Window]:
    """Stride-1 sliding windows; yields T - input_length - horizon + 1 of them.

    ``target_source`` supplies original-unit targets when ``dataset`` holds
    normalized values; it must cover the same nodes and timestamps.
    """
    if input_length < 1 or horizon < 1:
        raise ConfigError(f"input_length and horizon must be >= 1, "
                          f"got {input_length} and {horizon}")
    if not 0 <= target_channel < dataset.n_channels:
        raise ConfigError(f"target channel {target_channel} out of range "
                          f"for {dataset.n_channels} channels")
    source = dataset if target_source is None else target_source
    if source.values.shape != dataset.values.shape or source.timestamps != dataset.timestamps:
        raise DataError("target source does not align with the windowed dataset")
    count = dataset.n_steps - input_length - horizon + 1
    if count < 1:
        raise ConfigError(f"{dataset.n_steps} steps cannot fit input_length "
                          f"{input_length} plus horizon {horizon}")
    windows = []
    for start in range(count):
        stop = start + input_length
        x = dataset.values[:, start:stop, :].copy()
        y = source.values[:, stop:stop + horizon, target_channel].copy()
        seen = source.observed[:, stop:stop + horizon, target_channel].copy()
        windows.append(Window(x=x, y=y, y_observed=seen, start=start))
    return windows


# -- synthetic generator -------------------------------------------------------


@dataclass
class RegimeSpec:
    adjacency: np.ndarray
    length: int


@dataclass
class SynthSpec:
    """Regime-switching linear dynamical system specification.

    Each regime holds a nonnegative adjacency; its transition matrix is the
    row-normalized adjacency, rescaled when its spectral radius exceeds
    ``spectral_clip``.
    """

    nodes: int
    regimes: list[RegimeSpec]
    noise_std: float = 0.01
    seed: int = 0
    spectral_clip: float = 0.95
    step_seconds: int = 300

    def __post_init__(self):
        if self.nodes < 1:
            raise ConfigError("synth spec needs at least one node")
        if not self.regimes:
            raise ConfigError("synth spec needs at least one regime")
        if self.noise_std < 0:
            raise ConfigError("noise std must be nonnegative")
        if self.spectral_clip <= 0:
            raise ConfigError("spectral clip must be positive")
        for k, regime in enumerate(self.regimes):
            regime.adjacency = np.asarray(regime.adjacency, dtype=np.float64)
            if regime.adjacency.shape != (self.nodes, self.nodes):
                raise ConfigError(f"regime {k} adjacency must be "
                                  f"[{self.nodes}, {self.nodes}], got {regime.adjacency.shape}")
            if (regime.adjacency < 0).any():
                raise ConfigError(f"regime {k} adjacency has negative entries")
            if regime.length < 1:
                raise ConfigError(f"regime {k} length must be >= 1")

    @property
    def length(self) -> int:
        return sum(r.length for r in self.regimes)

    def to_dict(self) -> dict:
        return {"nodes": self.nodes, "noise_std": self.noise_std, "seed": self.seed,
                "spectral_clip": self.spectral_clip, "step_seconds": self.step_seconds,
                "regimes": [{"length": r.length, "adjacency": r.adjacency.tolist()}
                            for r in self.regimes]}

    @classmethod
    def from_dict(cls, payload: dict) -> "SynthSpec":
        known = {"nodes", "noise_std", "seed", "spectral_clip", "step_seconds", "regimes"}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown synth spec keys: {sorted(unknown)}")
        try:
            regimes = [RegimeSpec(adjacency=np.asarray(r["adjacency"], dtype=np.float64),
                                  length=int(r["length"]))
                       for r in payload["regimes"]]
            return cls(nodes=int(payload["nodes"]), regimes=regimes,
                       noise_std=float(payload.get("noise_std", 0.01)),
                       seed=int(payload.get("seed", 0)),
                       spectral_clip=float(payload.get("spectral_clip", 0.95)),
                       step_seconds=int(payload.get("step_seconds", 300)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad synth spec: {exc}") from exc


def transition_matrix(adjacency: np.ndarray, spectral_clip: float) -> np.ndarray:
    """Row-normalize, then shrink if the spectral radius exceeds the clip."""
    adj = np.asarray(adjacency, dtype=np.float64)
    sums = adj.sum(axis=1, keepdims=True)
    out = np.divide(adj, sums, out=np.zeros_like(adj), where=sums > 0)
    radius = float(np.max(np.abs(np.linalg.eigvals(out)))) if out.any() else 0.0
    if radius > spectral_clip:
        out = out * (spectral_clip / radius)
    return out


@dataclass
class SynthResult:
    dataset: SeriesDataset
    spec: SynthSpec
    boundaries: list[tuple[int, int]] = field(default_factory=list)

    def regime_of_step(self, t: int) -> int:
        for k, (start, stop) in enumerate(self.boundaries):
            if start <= t < stop:
                return k
        raise ValueError(f"step {t} outside generated range")


def synth_generate(spec: SynthSpec) -> SynthResult:
    """Simulate x_{t+1} = A_r x_t + eps_t across the scheduled regimes.

    x_0 is uniform on [0, 1]^N and the noise is i.i.d. Gaussian, all drawn
    from ``spec.seed``, so the series is reproducible bit for bit.
    """
    rng = np.random.default_rng(spec.seed)
    total = spec.length
    matrices = [transition_matrix(r.adjacency, spec.spectral_clip) for r in spec.regimes]
    boundaries = []
    cursor = 0
    for regime in spec.regimes:
        boundaries.append((cursor, cursor + regime.length))
        cursor += regime.length

    series = np.empty((total, spec.nodes), dtype=np.float64)
    series[0] = rng.uniform(0.0, 1.0, size=spec.nodes)
    regime_index = 0
    for t in range(total - 1):
        while t >= boundaries[regime_index][1]:
            regime_index += 1
        noise = rng.normal(0.0, spec.noise_std, size=spec.nodes) if spec.noise_std > 0 \
            else np.zeros(spec.nodes)
        series[t + 1] = matrices[regime_index] @ series[t] + noise

    values = series.T[:, :, None].copy()
    dataset = SeriesDataset(values=values,
                            node_ids=[f"n{i}" for i in range(spec.nodes)],
                            timestamps=[t * spec.step_seconds for t in range(total)],
                            missing_marker=0.0,
                            observed=np.ones_like(values, dtype=bool))
    return SynthResult(dataset=dataset, spec=spec, boundaries=boundaries)


def write_adjacency_csv(matrix: np.ndarray, node_ids: list[str], path: str) -> None:
    """Square matrix with node-id row and column headers."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (len(node_ids), len(node_ids)):
        raise ContractError(f"matrix {matrix.shape} does not match {len(node_ids)} node ids")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["node_id"] + list(node_ids))
    for i, node in enumerate(node_ids):
        writer.writerow([node] + [repr(float(v)) for v in matrix[i]])
    atomic_write_text(path, buf.getvalue())


def load_adjacency_csv(path: str) -> tuple[np.ndarray, list[str]]:
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader)
        if not header or header[0] != "node_id":
            raise DataError(f"{path}: first column must be 'node_id'")
        node_ids = header[1:]
        rows = list(reader)
    if len(rows) != len(node_ids):
        raise DataError(f"{path}: expected {len(node_ids)} rows, got {len(rows)}")
    matrix = np.empty((len(node_ids), len(node_ids)), dtype=np.float64)
    for i, row in enumerate(rows):
        if row[0] != node_ids[i]:
            raise DataError(f"{path}: row order does not match header")
        matrix[i] = [float(v) for v in row[1:]]
    return matrix, node_ids
