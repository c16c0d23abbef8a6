"""Series loading, normalization, windowing, and synthetic generation.

CSV is the single ingestion format: comma-separated decimal features,
an optional single header row, and an optional binary label column. All
functions are pure; datasets are never mutated in place.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, CsvError, InjectionError


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray  # per channel
    std: np.ndarray  # per channel, 1.0 where the raw channel was constant


@dataclass(frozen=True)
class SeriesDataset:
    values: np.ndarray  # T x d float64
    labels: np.ndarray | None = None  # length T, values in {0, 1}
    norm_stats: NormStats | None = None
    name: str = ""

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ContractError("series values must be a T x d array")
        if self.labels is not None:
            if len(self.labels) != len(self.values):
                raise ContractError("labels must have one entry per time step")
            if not np.isin(self.labels, (0, 1)).all():
                raise ContractError("labels must be exactly 0 or 1")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class WindowBatch:
    windows: np.ndarray  # B x W x d
    window_starts: np.ndarray  # length B, strictly increasing by W
    labels: np.ndarray | None = None  # B x W

    @property
    def count(self) -> int:
        return self.windows.shape[0]

    @property
    def width(self) -> int:
        return self.windows.shape[1]


@dataclass(frozen=True)
class Injection:
    kind: str  # spike | level_shift | noise_burst
    start: int
    duration: int
    magnitude: float  # in units of the clean per-channel standard deviation

    KINDS = ("spike", "level_shift", "noise_burst")

    @property
    def end(self) -> int:
        return self.start + self.duration


@dataclass(frozen=True)
class SynthSpec:
    length: int
    channels: int
    noise: float = 0.1  # additive Gaussian noise amplitude on the sine mixture
    injections: tuple = field(default_factory=tuple)
    seed: int = 0
    components: int = 3  # sine components per channel


def load_csv(path, has_header: bool = True, label_column: str | None = None) -> SeriesDataset:
    """Read a T x d series; the label column, when named, must hold {0,1}."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if has_header:
        if not rows:
            raise CsvError(f"{path}: empty file")
        header = [h.strip() for h in rows[0]]
        rows = rows[1:]
    else:
        header = None
    if not rows:
        raise CsvError(f"{path}: no data rows")

    width = len(rows[0])
    label_idx = None
    if label_column is not None:
        if header is not None:
            if label_column not in header:
                raise CsvError(f"{path}: no column named {label_column!r}")
            label_idx = header.index(label_column)
        else:
            try:
                label_idx = int(label_column)
            except ValueError:
                raise CsvError(
                    f"{path}: without a header the label column must be an index"
                ) from None
            if not 0 <= label_idx < width:
                raise CsvError(f"{path}: label column index {label_idx} out of range")

    values = []
    labels = [] if label_idx is not None else None
    for r, row in enumerate(rows):
        if len(row) != width:
            raise CsvError(
                f"{path}: row {r + 1} has {len(row)} cells, expected {width}"
            )
        feats = []
        for c, cell in enumerate(row):
            if c == label_idx:
                cell = cell.strip()
                if cell not in ("0", "1"):
                    raise CsvError(
                        f"{path}: row {r + 1} column {c + 1}: label {cell!r} is not 0/1"
                    )
                labels.append(int(cell))
                continue
            try:
                feats.append(float(cell))
            except ValueError:
                raise CsvError(
                    f"{path}: row {r + 1} column {c + 1}: cannot parse {cell!r}"
                ) from None
        values.append(feats)

    name = str(path)
    return SeriesDataset(
        values=np.asarray(values, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.int64) if labels is not None else None,
        name=name,
    )


def save_csv(path, ds: SeriesDataset):
    """Write features (and labels when present) with a header row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        cols = [f"feat_{i}" for i in range(ds.channels)]
        if ds.labels is not None:
            cols.append("label")
        writer.writerow(cols)
        for t in range(ds.length):
            row = [repr(float(v)) for v in ds.values[t]]
            if ds.labels is not None:
                row.append(str(int(ds.labels[t])))
            writer.writerow(row)


def compute_stats(ds: SeriesDataset) -> NormStats:
    mean = ds.values.mean(axis=0)
    std = ds.values.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)  # constant channels pass through centered
    return NormStats(mean=mean, std=std)


def normalize(ds: SeriesDataset, stats: NormStats | None = None) -> SeriesDataset:
    """Z-score per channel; supplied stats (train split) take precedence."""
    if stats is None:
        stats = compute_stats(ds)
    elif stats.mean.shape != (ds.channels,):
        raise ContractError(
            f"stats cover {stats.mean.shape[0]} channels, series has {ds.channels}"
        )
    values = (ds.values - stats.mean) / stats.std
    return replace(ds, values=values, norm_stats=stats)


def windows(ds: SeriesDataset, window: int, drop_last: bool = True) -> WindowBatch:
    """Cut contiguous non-overlapping windows (stride equals width).

    The trailing partial window is dropped by default; with
    ``drop_last=False`` it is zero padded to full width (padded labels
    are 0). An empty batch is returned when the series is shorter than
    one window and ``drop_last`` is set.
    """
    if window < 1:
        raise ContractError("window must be >= 1")
    t, d = ds.values.shape
    full = t // window
    starts = np.arange(full) * window
    out = ds.values[: full * window].reshape(full, window, d)
    lab = (
        ds.labels[: full * window].reshape(full, window)
        if ds.labels is not None
        else None
    )
    tail = t - full * window
    if tail and not drop_last:
        pad = np.zeros((window, d))
        pad[:tail] = ds.values[full * window:]
        out = np.concatenate([out, pad[None]], axis=0)
        starts = np.concatenate([starts, [full * window]])
        if lab is not None:
            pad_lab = np.zeros(window, dtype=ds.labels.dtype)
            pad_lab[:tail] = ds.labels[full * window:]
            lab = np.concatenate([lab, pad_lab[None]], axis=0)
    return WindowBatch(windows=out, window_starts=starts, labels=lab)


def _validate_injections(spec: SynthSpec):
    occupied = np.zeros(spec.length, dtype=bool)
    for i, inj in enumerate(spec.injections):
        if inj.kind not in Injection.KINDS:
            raise InjectionError(f"injection {i + 1}: unknown kind {inj.kind!r}")
        if inj.duration < 1:
            raise InjectionError(f"injection {i + 1}: duration must be >= 1")
        if inj.start < 0 or inj.end > spec.length:
            raise InjectionError(
                f"injection {i + 1}: [{inj.start}, {inj.end}) outside [0, {spec.length})"
            )
        if occupied[inj.start: inj.end].any():
            raise InjectionError(f"injection {i + 1}: overlaps an earlier injection")
        occupied[inj.start: inj.end] = True


def _base_and_noise(spec: SynthSpec):
    """Shared sine mixture plus two independent noise draws (train, test)."""
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.length)
    base = np.zeros((spec.length, spec.channels))
    for c in range(spec.channels):
        for _ in range(spec.components):
            period = rng.uniform(20.0, 400.0)
            amp = rng.uniform(0.4, 1.0)
            phase = rng.uniform(0.0, 2 * np.pi)
            base[:, c] += amp * np.sin(2 * np.pi * t / period + phase)
    train_noise = rng.normal(0.0, spec.noise, size=base.shape)
    test_noise = rng.normal(0.0, spec.noise, size=base.shape)
    return base, train_noise, test_noise


def synth_generate(spec: SynthSpec) -> SeriesDataset:
    """Deterministic labeled series with the requested anomalies injected."""
    _validate_injections(spec)
    base, _, test_noise = _base_and_noise(spec)
    values = base + test_noise
    sigma = values.std(axis=0)  # clean scale used for injection magnitudes
    labels = np.zeros(spec.length, dtype=np.int64)
    rng = np.random.default_rng(spec.seed + 0x5EED)
    for inj in spec.injections:
        span = slice(inj.start, inj.end)
        if inj.kind == "spike":
            values[span] += inj.magnitude * sigma
        elif inj.kind == "level_shift":
            values[span] -= inj.magnitude * sigma
        elif inj.kind == "noise_burst":
            values[span] += rng.normal(0.0, inj.magnitude * sigma, size=values[span].shape)
        labels[span] = 1
    return SeriesDataset(values=values, labels=labels, name="synthetic")


def synth_train_series(spec: SynthSpec) -> SeriesDataset:
    """Clean companion series sharing the sine mixture of ``synth_generate``."""
    _validate_injections(spec)
    base, train_noise, _ = _base_and_noise(spec)
    return SeriesDataset(
        values=base + train_noise,
        labels=np.zeros(spec.length, dtype=np.int64),
        name="synthetic-train",
    )
