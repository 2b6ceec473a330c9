"""Time-series containers, preprocessing and windowing.

Everything here is a pure function over immutable :class:`TimeSeries`
values. Arrays held by a series are flagged read-only on construction.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timedelta
from enum import Enum
from pathlib import Path
from typing import Iterator

import numpy as np

STEPS_PER_DAY = 96
DEFAULT_STEP = timedelta(minutes=15)


class Season(str, Enum):
    WINTER = "winter"
    SPRING = "spring"
    SUMMER = "summer"
    AUTUMN = "autumn"


class Channel(str, Enum):
    OCC = "Occ"
    CO2 = "CO2"
    LIGHT = "Light"
    HVAC = "HVAC"


class SeriesError(ValueError):
    """Raised when a series cannot be processed as requested."""


@dataclass(frozen=True, order=True)
class SeriesId:
    zone: int
    season: Season
    channel: Channel

    @property
    def key(self) -> str:
        return f"z{self.zone}-{self.season.value}-{self.channel.value}"

    def to_dict(self) -> dict:
        return {"zone": self.zone, "season": self.season.value, "channel": self.channel.value}

    @classmethod
    def from_dict(cls, d: dict) -> SeriesId:
        return cls(int(d["zone"]), Season(d["season"]), Channel(d["channel"]))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TimeSeries:
    """A univariate signal on a uniform step grid.

    ``times`` is only set once the index no longer maps linearly onto the
    calendar (after :func:`filter_workdays`); otherwise sample ``i`` sits
    at ``start_time + i * step``.
    """

    id: SeriesId
    start_time: datetime
    values: np.ndarray
    step: timedelta = DEFAULT_STEP
    missing_mask: np.ndarray | None = None
    times: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size < 1:
            raise SeriesError("values must be a nonempty 1-d array")
        if self.step <= timedelta(0):
            raise SeriesError("step must be positive")
        object.__setattr__(self, "values", _frozen(values))
        if self.missing_mask is not None:
            mask = np.asarray(self.missing_mask, dtype=bool)
            if mask.shape != values.shape:
                raise SeriesError("missing_mask must align with values")
            object.__setattr__(self, "missing_mask", _frozen(mask))
        if self.times is not None:
            t = np.asarray(self.times, dtype="datetime64[s]")
            if t.shape != values.shape:
                raise SeriesError("times must align with values")
            object.__setattr__(self, "times", _frozen(t))

    def __len__(self) -> int:
        return self.values.size

    @property
    def has_missing(self) -> bool:
        return self.missing_mask is not None and bool(self.missing_mask.any())

    @property
    def step_seconds(self) -> float:
        return self.step.total_seconds()

    def timestamps(self) -> np.ndarray:
        """Sample timestamps as ``datetime64[s]``."""
        if self.times is not None:
            return self.times
        start = np.datetime64(self.start_time.replace(tzinfo=None), "s")
        offsets = np.arange(len(self), dtype=np.int64) * int(self.step_seconds)
        return start + offsets.astype("timedelta64[s]")

    def slice(self, start: int, stop: int | None = None) -> TimeSeries:
        stop = len(self) if stop is None else stop
        if not 0 <= start < stop <= len(self):
            raise SeriesError(f"bad slice [{start}, {stop}) of series with {len(self)} samples")
        times = self.timestamps()[start:stop]
        first = times[0].astype(datetime)
        mask = None if self.missing_mask is None else self.missing_mask[start:stop]
        return TimeSeries(
            self.id,
            first.replace(tzinfo=self.start_time.tzinfo),
            self.values[start:stop],
            self.step,
            mask,
            None if self.times is None else times,
        )


@dataclass(frozen=True)
class WindowPair:
    context: np.ndarray
    target: np.ndarray
    origin_index: int


@dataclass(frozen=True)
class WindowedDataset:
    """Stride-1 (context, target) pairs cut from one series.

    Stored as two stacked arrays; :attr:`pairs` materialises the
    individual :class:`WindowPair` views.
    """

    contexts: np.ndarray  # (N, C)
    targets: np.ndarray  # (N, H)
    origins: np.ndarray  # (N,)
    source_id: SeriesId | None = None

    def __post_init__(self) -> None:
        for name in ("contexts", "targets", "origins"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if not (len(self.contexts) == len(self.targets) == len(self.origins)):
            raise SeriesError("contexts, targets and origins must have equal length")

    @property
    def C(self) -> int:
        return self.contexts.shape[1]

    @property
    def H(self) -> int:
        return self.targets.shape[1]

    def __len__(self) -> int:
        return len(self.origins)

    @property
    def pairs(self) -> list[WindowPair]:
        return list(iter(self))

    def __iter__(self) -> Iterator[WindowPair]:
        for c, t, o in zip(self.contexts, self.targets, self.origins):
            yield WindowPair(c, t, int(o))

    @staticmethod
    def concat(datasets: list[WindowedDataset]) -> WindowedDataset:
        if not datasets:
            raise SeriesError("nothing to concatenate")
        return WindowedDataset(
            np.concatenate([d.contexts for d in datasets]),
            np.concatenate([d.targets for d in datasets]),
            np.concatenate([d.origins for d in datasets]),
            datasets[0].source_id if len({d.source_id for d in datasets}) == 1 else None,
        )


@dataclass(frozen=True)
class WorkCalendar:
    weekend_days: frozenset[int] = frozenset({5, 6})
    holidays: frozenset[date] = frozenset()

    def __post_init__(self) -> None:
        if not set(self.weekend_days) <= set(range(7)):
            raise SeriesError("weekend_days must be weekday indices in 0..6")

    def is_workday(self, d: date) -> bool:
        return d.weekday() not in self.weekend_days and d not in self.holidays


def interpolate_missing(series: TimeSeries) -> TimeSeries:
    """Fill gaps linearly; leading/trailing gaps take the nearest valid value."""
    if series.missing_mask is None:
        return series
    missing = series.missing_mask | ~np.isfinite(series.values)
    if missing.all():
        raise SeriesError(f"series {series.id.key} has no valid samples to interpolate from")
    idx = np.arange(len(series))
    valid = ~missing
    # np.interp already holds the edge values constant outside the valid range
    filled = np.where(valid, series.values, np.interp(idx, idx[valid], series.values[valid]))
    return replace(series, values=filled, missing_mask=np.zeros(len(series), dtype=bool))


def resample_align(series: TimeSeries, target_step: timedelta) -> TimeSeries:
    """Linearly interpolate onto a ``target_step`` grid.

    The new grid starts at the first multiple of ``target_step`` (counted
    from midnight of the start day) that is at or after ``start_time``.
    """
    if target_step <= timedelta(0):
        raise SeriesError("target_step must be positive")
    if series.times is not None:
        raise SeriesError("cannot resample a series whose index is not calendar-linear")
    if series.has_missing:
        raise SeriesError("interpolate missing samples before resampling")
    step_s = series.step_seconds
    tgt_s = target_step.total_seconds()
    midnight = series.start_time.replace(hour=0, minute=0, second=0, microsecond=0)
    since_midnight = (series.start_time - midnight).total_seconds()
    first = math.ceil(since_midnight / tgt_s - 1e-9) * tgt_s - since_midnight
    span = step_s * (len(series) - 1)
    if first > span + 1e-9:
        raise SeriesError("target grid has no points inside the series span")
    n = int(math.floor((span - first) / tgt_s + 1e-9)) + 1
    grid = first + tgt_s * np.arange(n)
    src = step_s * np.arange(len(series))
    values = np.interp(grid, src, series.values)
    return TimeSeries(
        series.id, series.start_time + timedelta(seconds=first), values, target_step
    )


def energy_to_power(energy: TimeSeries) -> TimeSeries:
    """Per-interval energy in kWh to constant power in W over that interval."""
    bad = np.flatnonzero(energy.values < 0)
    if bad.size:
        raise SeriesError(
            f"negative energy increment at index {int(bad[0])} ({energy.values[bad[0]]} kWh)"
        )
    return replace(energy, values=energy.values * 3.6e6 / energy.step_seconds)


def power_to_energy(power: TimeSeries) -> TimeSeries:
    """Inverse of :func:`energy_to_power`."""
    return replace(power, values=power.values * power.step_seconds / 3.6e6)


def filter_workdays(series: TimeSeries, cal: WorkCalendar | None = None) -> TimeSeries:
    """Drop weekend and holiday samples and close the gaps."""
    cal = WorkCalendar() if cal is None else cal
    times = series.timestamps()
    if times[-1] - times[0] < np.timedelta64(1, "D") - np.timedelta64(int(series.step_seconds), "s"):
        raise SeriesError("series must span at least one day")
    days = times.astype("datetime64[D]")
    uniq = np.unique(days)
    keep_days = np.array([cal.is_workday(d.astype(date)) for d in uniq])
    keep = np.isin(days, uniq[keep_days])
    if not keep.any():
        raise SeriesError(f"no workday samples left in {series.id.key}")
    if keep.all():
        return series
    kept_times = times[keep]
    mask = None if series.missing_mask is None else series.missing_mask[keep]
    return TimeSeries(
        series.id,
        kept_times[0].astype(datetime).replace(tzinfo=series.start_time.tzinfo),
        series.values[keep],
        series.step,
        mask,
        kept_times,
    )


def make_windows(series: TimeSeries | np.ndarray, C: int, H: int) -> WindowedDataset:
    """Every stride-1 (context, target) pair with origins ``C .. T-H``.

    The pair at origin ``i`` has ``context = y[i-C:i]`` and
    ``target = y[i:i+H]`` (0-based), i.e. the last observed sample is
    ``y_i`` in 1-based counting.
    """
    values = series.values if isinstance(series, TimeSeries) else np.asarray(series, dtype=np.float64)
    if C < 1 or H < 1:
        raise SeriesError("C and H must be positive")
    T = values.size
    if T < C + H:
        raise SeriesError(f"series has {T} samples; windows need at least C+H={C + H}")
    view = np.lib.stride_tricks.sliding_window_view(values, C + H)
    return WindowedDataset(
        view[:, :C],
        view[:, C:],
        np.arange(C, T - H + 1),
        series.id if isinstance(series, TimeSeries) else None,
    )


def preprocess(series: TimeSeries, cal: WorkCalendar | None = None,
               target_step: timedelta = DEFAULT_STEP) -> TimeSeries:
    """Interpolate, resample to ``target_step`` and keep workdays only."""
    s = interpolate_missing(series)
    if s.step != target_step or (s.start_time - s.start_time.replace(
            hour=0, minute=0, second=0, microsecond=0)).total_seconds() % target_step.total_seconds():
        s = resample_align(s, target_step)
    return filter_workdays(s, cal)


def split_train_test(series: TimeSeries, test_steps: int,
                     train_steps: int | None = None) -> tuple[TimeSeries, TimeSeries]:
    """Hold out the last ``test_steps`` samples; optionally cap the train length."""
    T = len(series)
    if not 0 < test_steps < T:
        raise SeriesError(f"cannot hold out {test_steps} of {T} samples")
    train_start = 0 if train_steps is None else max(0, T - test_steps - train_steps)
    return series.slice(train_start, T - test_steps), series.slice(T - test_steps)


# --- CSV ----------------------------------------------------------------------


def _parse_ts(text: str) -> datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    return datetime.fromisoformat(text)


def read_csv(path: str | Path, series_id: SeriesId, step: timedelta | None = None) -> TimeSeries:
    """Load a ``timestamp,value`` CSV; empty cells become missing samples.

    Rows must lie on a uniform grid; absent grid points are treated as
    missing too.
    """
    stamps: list[datetime] = []
    vals: list[float] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames[:2]] != ["timestamp", "value"]:
            raise SeriesError(f"{path}: expected header 'timestamp,value'")
        for row in reader:
            stamps.append(_parse_ts(row["timestamp"]))
            cell = (row["value"] or "").strip()
            vals.append(float(cell) if cell else math.nan)
    if not stamps:
        raise SeriesError(f"{path}: no rows")
    secs = np.array([(t - stamps[0]).total_seconds() for t in stamps])
    if np.any(np.diff(secs) <= 0):
        raise SeriesError(f"{path}: timestamps must be strictly increasing")
    if step is None:
        if len(secs) < 2:
            step = DEFAULT_STEP
        else:
            step = timedelta(seconds=float(np.min(np.diff(secs))))
    idx = secs / step.total_seconds()
    if not np.allclose(idx, np.round(idx), atol=1e-6):
        raise SeriesError(f"{path}: timestamps are not on a uniform {step} grid")
    idx = np.round(idx).astype(np.int64)
    values = np.full(idx[-1] + 1, np.nan)
    values[idx] = vals
    mask = ~np.isfinite(values)
    return TimeSeries(series_id, stamps[0], values, step, mask if mask.any() else None)


def write_csv(series: TimeSeries, path: str | Path) -> None:
    times = series.timestamps()
    tz = series.start_time.tzinfo
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "value"])
        for i, (t, v) in enumerate(zip(times, series.values)):
            stamp = t.astype(datetime)
            if tz is not None:
                stamp = stamp.replace(tzinfo=tz)
            missing = series.missing_mask is not None and series.missing_mask[i]
            w.writerow([stamp.isoformat(), "" if missing else repr(float(v))])


def read_manifest(path: str | Path) -> list[tuple[Path, SeriesId]]:
    """Read a JSON manifest ``{"series": [{"path", "zone", "season", "channel"}]}``.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    doc = json.loads(path.read_text())
    out = []
    for entry in doc["series"]:
        p = Path(entry["path"])
        out.append((p if p.is_absolute() else path.parent / p, SeriesId.from_dict(entry)))
    return out
