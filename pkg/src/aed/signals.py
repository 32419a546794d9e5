"""Power series I/O, alignment, normalisation and seq2point windowing."""
from __future__ import annotations

import json
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_WINDOW = 599
STALENESS_FACTOR = 3
FORMATS = ("csv", "redd-channel", "ukdale-channel")


class SeriesError(ValueError):
    """Malformed or inconsistent power series."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class SignalSeries:
    timestamps: np.ndarray
    watts: np.ndarray
    role: str = "mains"
    name: str = "mains"
    units: str = "W"

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.int64)
        w = np.asarray(self.watts, dtype=np.float64)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "watts", w)
        if ts.ndim != 1 or ts.shape != w.shape:
            raise SeriesError(f"timestamps {ts.shape} and watts {w.shape} differ in length")
        if len(ts) > 1:
            bad = np.flatnonzero(np.diff(ts) <= 0)
            if bad.size:
                raise SeriesError(f"timestamps not strictly increasing at row {bad[0] + 2}")

    def __len__(self) -> int:
        return len(self.timestamps)

    def check(self) -> "SignalSeries":
        """Checked mode: finite, and non-negative when in Watts."""
        if not np.all(np.isfinite(self.watts)):
            raise SeriesError(f"{self.name}: non-finite readings")
        if self.units == "W" and np.any(self.watts < 0):
            raise SeriesError(f"{self.name}: negative power reading")
        return self

    def native_period(self) -> int:
        if len(self) < 2:
            raise SeriesError(f"{self.name}: need two readings to infer a period")
        return int(np.median(np.diff(self.timestamps)))


@dataclass(frozen=True)
class NormalizationStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"normalisation std must be > 0, got {self.std}")

    @classmethod
    def from_data(cls, values) -> "NormalizationStats":
        v = np.asarray(values, dtype=np.float64)
        std = float(v.std())
        return cls(float(v.mean()), std if std > 0 else 1.0)


# Window length 599 for every row.
TABLE1_STATS = {
    "aggregate": NormalizationStats(522.0, 814.0),
    "kettle": NormalizationStats(700.0, 1000.0),
    "microwave": NormalizationStats(500.0, 800.0),
    "fridge": NormalizationStats(200.0, 400.0),
    "dishwasher": NormalizationStats(700.0, 1000.0),
    "washing machine": NormalizationStats(400.0, 700.0),
}


def builtin_stats(name: str) -> NormalizationStats | None:
    key = name.lower().replace("_", " ").replace("-", " ")
    aliases = {"mains": "aggregate", "dish washer": "dishwasher", "washingmachine": "washing machine",
               "washer": "washing machine"}
    return TABLE1_STATS.get(aliases.get(key, key))


# ---------------------------------------------------------------- file I/O

def parse_series(text: str, role: str = "mains", name: str = "mains") -> SignalSeries:
    ts: list[int] = []
    ws: list[float] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise SeriesError(f"expected 2 columns, got {len(parts)}", lineno)
        try:
            t = float(parts[0])
            w = float(parts[1])
        except ValueError:
            raise SeriesError(f"non-numeric field in {line!r}", lineno) from None
        if t != int(t):
            raise SeriesError(f"timestamp {parts[0]} is not whole seconds", lineno)
        if ts and int(t) <= ts[-1]:
            raise SeriesError(f"non-monotonic timestamp at row {len(ts) + 1}", lineno)
        ts.append(int(t))
        ws.append(w)
    if not ts:
        raise SeriesError("empty series")
    return SignalSeries(np.array(ts, dtype=np.int64), np.array(ws), role=role, name=name)


def load_series(path, format: str = "csv", role: str = "mains", name: str | None = None) -> SignalSeries:
    """Read a two-column ``<unix seconds> <watts>`` file.

    All three formats share the layout; comma and whitespace separators are
    both accepted and ``#`` lines are comments.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown series format {format!r}; expected one of {FORMATS}")
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_series(text, role=role, name=name or path.stem)


def format_series(series: SignalSeries, sep: str = " ") -> str:
    lines = [f"{int(t)}{sep}{float(w)!r}" for t, w in zip(series.timestamps, series.watts)]
    return "\n".join(lines) + "\n"


def write_series(path, series: SignalSeries, sep: str = " ") -> None:
    Path(path).write_text(format_series(series, sep), encoding="utf-8")


# ---------------------------------------------------------------- alignment

def align_resample(mains: SignalSeries, appliance: SignalSeries, period: int | None = None,
                   staleness: int | None = None) -> tuple[SignalSeries, SignalSeries]:
    """Put both series on a shared fixed-period grid over their common span.

    Each grid point takes the most recent reading at or before it
    (forward fill). Grid points where either reading is older than
    ``staleness`` seconds (default three periods) are dropped from both.
    """
    if period is None:
        period = min(mains.native_period(), appliance.native_period())
    if period <= 0:
        raise ValueError(f"period must be positive, got {period}")
    limit = STALENESS_FACTOR * period if staleness is None else staleness
    start = max(mains.timestamps[0], appliance.timestamps[0])
    end = min(mains.timestamps[-1], appliance.timestamps[-1])
    if start > end:
        raise SeriesError(f"no temporal overlap between {mains.name} and {appliance.name}")
    grid = np.arange(start, end + 1, period, dtype=np.int64)

    def fill(s: SignalSeries):
        idx = np.searchsorted(s.timestamps, grid, side="right") - 1
        ok = idx >= 0
        idx = np.maximum(idx, 0)
        ok &= (grid - s.timestamps[idx]) <= limit
        return s.watts[idx], ok

    mw, mok = fill(mains)
    aw, aok = fill(appliance)
    keep = mok & aok
    if not keep.any():
        raise SeriesError("no grid point has fresh readings in both series")
    return (replace(mains, timestamps=grid[keep], watts=mw[keep]),
            replace(appliance, timestamps=grid[keep], watts=aw[keep]))


# ---------------------------------------------------------------- normalisation

def normalize(x, stats: NormalizationStats):
    if isinstance(x, SignalSeries):
        return replace(x, watts=(x.watts - stats.mean) / stats.std, units="normalized")
    return (np.asarray(x, dtype=np.float64) - stats.mean) / stats.std


def denormalize(x, stats: NormalizationStats):
    if isinstance(x, SignalSeries):
        return replace(x, watts=x.watts * stats.std + stats.mean, units="W")
    return np.asarray(x, dtype=np.float64) * stats.std + stats.mean


# ---------------------------------------------------------------- windowing

@dataclass
class WindowBatch:
    windows: np.ndarray   # (B, W) normalised mains
    targets: np.ndarray   # (B,) normalised midpoint appliance readings
    starts: np.ndarray    # (B,) window start index t into the source series
    window_size: int

    @property
    def midpoint_offset(self) -> int:
        return self.window_size // 2

    def __len__(self) -> int:
        return len(self.targets)


def check_window(W: int) -> None:
    if W < 1 or W % 2 == 0:
        raise ValueError(f"window size must be a positive odd number, got {W}")


@dataclass
class WindowDataset:
    """All full windows over one or more aligned (mains, appliance) segments.

    Windows never straddle a segment boundary. Starts index into the
    concatenation of the segments.
    """

    mains: np.ndarray
    targets: np.ndarray
    starts: np.ndarray
    window_size: int
    segment_bounds: list[tuple[int, int]] = field(default_factory=list)

    @classmethod
    def from_arrays(cls, segments: Sequence[tuple[np.ndarray, np.ndarray]], W: int,
                    stride: int = 1) -> "WindowDataset":
        check_window(W)
        if stride < 1:
            raise ValueError(f"stride must be >= 1, got {stride}")
        mains, targets, starts, bounds = [], [], [], []
        offset = 0
        for m, a in segments:
            m = np.asarray(m, dtype=np.float64)
            a = np.asarray(a, dtype=np.float64)
            if m.shape != a.shape:
                raise SeriesError("mains and appliance segments are not aligned")
            T = len(m)
            if T >= W:
                starts.append(offset + np.arange(0, T - W + 1, stride))
            mains.append(m)
            targets.append(a)
            bounds.append((offset, offset + T))
            offset += T
        if not starts:
            longest = max((len(m) for m, _ in segments), default=0)
            raise SeriesError(f"series length {longest} shorter than window {W}")
        return cls(np.concatenate(mains), np.concatenate(targets),
                   np.concatenate(starts).astype(np.int64), W, bounds)

    @classmethod
    def from_series(cls, pairs: Sequence[tuple[SignalSeries, SignalSeries]], W: int,
                    mains_stats: NormalizationStats, appliance_stats: NormalizationStats,
                    stride: int = 1) -> "WindowDataset":
        """Normalise aligned (mains, appliance) pairs and window them."""
        segments = []
        for m, a in pairs:
            if not np.array_equal(m.timestamps, a.timestamps):
                raise SeriesError(f"{m.name} and {a.name} are not aligned; run align_resample first")
            segments.append((normalize(m.watts, mains_stats), normalize(a.watts, appliance_stats)))
        return cls.from_arrays(segments, W, stride)

    def __len__(self) -> int:
        return len(self.starts)

    def batch(self, which, dtype=np.float64) -> WindowBatch:
        s = self.starts[which]
        view = sliding_window_view(self.mains, self.window_size)
        return WindowBatch(view[s].astype(dtype), self.targets[s + self.window_size // 2].astype(dtype),
                           s, self.window_size)

    def iter_batches(self, batch_size: int, rng: np.random.Generator | None = None,
                     dtype=np.float64) -> Iterator[WindowBatch]:
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for i in range(0, len(order), batch_size):
            yield self.batch(order[i:i + batch_size], dtype)

    def subsample(self, max_windows: int) -> "WindowDataset":
        if len(self) <= max_windows:
            return self
        pick = np.linspace(0, len(self) - 1, max_windows).round().astype(np.int64)
        return replace(self, starts=self.starts[pick])


def make_windows(mains, appliance, W: int = DEFAULT_WINDOW, stride: int = 1,
                 batch_size: int | None = None,
                 mains_stats: NormalizationStats | None = None,
                 appliance_stats: NormalizationStats | None = None) -> Iterator[WindowBatch]:
    """Stream full windows ``[t, t + W)`` with target at ``t + W // 2``.

    Yields ``floor((T - W) / stride) + 1`` windows in order, in batches of
    ``batch_size`` (all at once by default). Values are normalised with the
    given stats, or passed through when stats are omitted.
    """
    m = mains.watts if isinstance(mains, SignalSeries) else np.asarray(mains, dtype=np.float64)
    a = appliance.watts if isinstance(appliance, SignalSeries) else np.asarray(appliance, dtype=np.float64)
    if isinstance(mains, SignalSeries) and isinstance(appliance, SignalSeries):
        if not np.array_equal(mains.timestamps, appliance.timestamps):
            raise SeriesError("mains and appliance are not aligned; run align_resample first")
    if mains_stats is not None:
        m = normalize(m, mains_stats)
    if appliance_stats is not None:
        a = normalize(a, appliance_stats)
    ds = WindowDataset.from_arrays([(m, a)], W, stride)
    yield from ds.iter_batches(batch_size or len(ds))


# ---------------------------------------------------------------- manifest

@dataclass
class HouseEntry:
    name: str
    split: str
    mains: Path
    channels: dict[str, Path]


@dataclass
class Manifest:
    appliances: list[str]
    houses: list[HouseEntry]
    normalization: dict[str, NormalizationStats]
    period: int | None = None
    root: Path = Path(".")

    def stats_for(self, name: str) -> NormalizationStats:
        """Manifest override first, then the built-in table."""
        key = "aggregate" if name == "mains" else name
        if key in self.normalization:
            return self.normalization[key]
        stats = builtin_stats(key)
        if stats is None:
            raise KeyError(f"no normalisation stats for {name!r}")
        return stats

    def split(self, split: str) -> list[HouseEntry]:
        return [h for h in self.houses if h.split == split]

    def load_pair(self, house: HouseEntry, appliance: str) -> tuple[SignalSeries, SignalSeries]:
        mains = load_series(house.mains, role="mains", name="mains").check()
        app = load_series(house.channels[appliance], role="appliance", name=appliance).check()
        return align_resample(mains, app, self.period)

    def to_json(self) -> dict:
        def rel(p: Path) -> str:
            try:
                return Path(p).relative_to(self.root).as_posix()
            except ValueError:
                return str(p)

        return {
            "format": "aed-manifest",
            "version": 1,
            "period": self.period,
            "appliances": list(self.appliances),
            "normalization": {k: {"mean": v.mean, "std": v.std} for k, v in self.normalization.items()},
            "houses": [{"name": h.name, "split": h.split, "mains": rel(h.mains),
                        "channels": {k: rel(v) for k, v in h.channels.items()}} for h in self.houses],
        }


def load_manifest(path) -> Manifest:
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    root = path.parent
    appliances = list(doc["appliances"])
    if len(set(appliances)) != len(appliances):
        raise ValueError("appliance names in manifest must be unique")
    houses = []
    for h in doc["houses"]:
        channels = {k: root / v for k, v in h["channels"].items()}
        missing = set(appliances) - set(channels)
        if missing:
            raise ValueError(f"house {h['name']} lacks channels for {sorted(missing)}")
        houses.append(HouseEntry(h["name"], h.get("split", "train"), root / h["mains"], channels))
    norm = {k: NormalizationStats(float(v["mean"]), float(v["std"]))
            for k, v in doc.get("normalization", {}).items()}
    return Manifest(appliances, houses, norm, doc.get("period"), root)


def save_manifest(manifest: Manifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
