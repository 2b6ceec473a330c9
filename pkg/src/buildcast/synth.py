"""Seeded multi-zone building signals and a Monte-Carlo quantile oracle.

Each series is ``baseline + activity * zone_gain * season_gain * weekday_mod``
plus Gaussian noise, floored at zero. The activity profile is a smooth
diurnal curve built from each zone's arrival/departure/lunch traits.
Random streams are Philox generators keyed on
``(seed, zone, season, channel)``, so a series never depends on which
other series were generated alongside it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path

import numpy as np

from .series import Channel, Season, SeriesId, TimeSeries, WorkCalendar, filter_workdays, write_csv

SEASON_END = {
    Season.AUTUMN: date(2023, 11, 30),
    Season.WINTER: date(2024, 2, 29),
    Season.SPRING: date(2024, 5, 31),
    Season.SUMMER: date(2024, 8, 31),
}

# nominal magnitude of each channel's activity term; noise_std is relative to it
CHANNEL_SCALE = {Channel.OCC: 25.0, Channel.CO2: 400.0, Channel.LIGHT: 1500.0, Channel.HVAC: 4000.0}
CHANNEL_BASELINE = {Channel.OCC: 0.0, Channel.CO2: 420.0, Channel.LIGHT: 150.0, Channel.HVAC: 600.0}

# how strongly each channel follows the season, multiplied by seasonal_amplitude
SEASON_SENSITIVITY = {
    Channel.OCC: {Season.WINTER: 0.0, Season.SPRING: 0.05, Season.SUMMER: -0.15, Season.AUTUMN: 0.05},
    Channel.CO2: {Season.WINTER: 0.2, Season.SPRING: -0.1, Season.SUMMER: -0.2, Season.AUTUMN: 0.0},
    Channel.LIGHT: {Season.WINTER: 0.25, Season.SPRING: -0.05, Season.SUMMER: -0.2, Season.AUTUMN: 0.05},
    Channel.HVAC: {Season.WINTER: 0.6, Season.SPRING: -0.5, Season.SUMMER: 1.0, Season.AUTUMN: -0.3},
}

# Mon..Fri shape of the weekly modulation; weekends use WEEKEND_LEVEL
WEEKDAY_PATTERN = np.array([-1.0, 0.4, 0.7, 0.4, -1.2])
WEEKEND_LEVEL = 0.05

_SEASON_IDX = {s: i for i, s in enumerate(Season)}
_CHANNEL_IDX = {c: i for i, c in enumerate(Channel)}


@dataclass(frozen=True)
class SynthConfig:
    n_zones: int = 8
    seasons: tuple[Season, ...] = tuple(Season)
    channels: tuple[Channel, ...] = (Channel.OCC,)
    days: int = 147
    steps_per_day: int = 96
    noise_std: float = 0.05
    seasonal_amplitude: float = 0.3
    weekly_modulation: float = 0.15
    seed: int = 0
    relax_zones: tuple[int, ...] = field(default=(6, 7))

    def __post_init__(self) -> None:
        object.__setattr__(self, "seasons", tuple(Season(s) for s in self.seasons))
        object.__setattr__(self, "channels", tuple(Channel(c) for c in self.channels))
        object.__setattr__(self, "relax_zones", tuple(int(z) for z in self.relax_zones))
        if self.n_zones < 1 or self.days < 1 or self.steps_per_day < 1:
            raise ValueError("n_zones, days and steps_per_day must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not self.seasons or not self.channels:
            raise ValueError("need at least one season and one channel")

    @property
    def step(self) -> timedelta:
        return timedelta(days=1) / self.steps_per_day

    def to_json(self) -> str:
        d = asdict(self)
        d["seasons"] = [s.value for s in self.seasons]
        d["channels"] = [c.value for c in self.channels]
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> SynthConfig:
        d = dict(d)
        for k in ("seasons", "channels", "relax_zones"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class ZoneTraits:
    arrival: float  # hour of day
    departure: float
    ramp: float  # hours for the smooth on/off transitions
    lunch_depth: float
    gain: float
    relax: bool


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *key])))


def zone_traits(config: SynthConfig, zone: int) -> ZoneTraits:
    rng = _stream(config.seed, zone, 1_000_003)
    relax = zone in config.relax_zones
    return ZoneTraits(
        arrival=rng.uniform(7.5, 9.5),
        departure=rng.uniform(16.5, 19.5),
        ramp=rng.uniform(0.75, 1.5),
        lunch_depth=rng.uniform(0.15, 0.45),
        gain=rng.uniform(0.6, 1.4),
        relax=relax,
    )


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _bump(hours: np.ndarray, centre: float, width: float) -> np.ndarray:
    """Compactly supported smooth bump, exactly zero beyond ``width``."""
    u = np.clip(1.0 - ((hours - centre) / width) ** 2, 0.0, None)
    return u * u


def occupancy_shape(hours: np.ndarray, tr: ZoneTraits) -> np.ndarray:
    """Unit-peak occupancy curve; exactly zero outside work hours."""
    on = _smoothstep((hours - tr.arrival) / tr.ramp)
    off = _smoothstep((tr.departure - hours) / tr.ramp)
    if tr.relax:
        # break rooms fill up around lunch and mid-afternoon
        core = 0.25 + 0.75 * _bump(hours, 12.5, 1.6) + 0.45 * _bump(hours, 15.5, 1.2)
        return np.minimum(on * off * core, 1.0)
    return on * off * (1.0 - tr.lunch_depth * _bump(hours, 12.5, 1.0))


def _lagged(x: np.ndarray, steps_per_hour: float, tau_hours: float) -> np.ndarray:
    """First-order lag filter applied over one day, started from the day's first value."""
    a = 1.0 - np.exp(-1.0 / (tau_hours * steps_per_hour))
    out = np.empty_like(x)
    acc = x[0]
    for i, v in enumerate(x):
        acc += a * (v - acc)
        out[i] = acc
    return out


def activity_profile(channel: Channel, hours: np.ndarray, tr: ZoneTraits) -> np.ndarray:
    """Unit-scale activity term of one day for a channel."""
    occ = occupancy_shape(hours, tr)
    if channel is Channel.OCC:
        return occ
    if channel is Channel.CO2:
        return _lagged(occ, len(hours) / 24.0, 1.0)
    if channel is Channel.LIGHT:
        lights = _smoothstep((hours - tr.arrival + 0.5) / 0.5) * _smoothstep((tr.departure + 1.0 - hours) / 0.5)
        return 0.6 * lights + 0.4 * occ
    # HVAC starts ahead of arrival and follows occupancy with a lag
    plant = _smoothstep((hours - tr.arrival + 1.5) / 1.0) * _smoothstep((tr.departure + 0.5 - hours) / 1.0)
    return 0.55 * plant + 0.45 * _lagged(occ, len(hours) / 24.0, 0.5)


def season_gain(config: SynthConfig, channel: Channel, season: Season) -> float:
    return 1.0 + config.seasonal_amplitude * SEASON_SENSITIVITY[channel][season]


def weekday_modulation(config: SynthConfig, weekday: int) -> float:
    if weekday >= 5:
        return WEEKEND_LEVEL
    return 1.0 + config.weekly_modulation * WEEKDAY_PATTERN[weekday]


def channel_noise_std(config: SynthConfig, channel: Channel) -> float:
    """Absolute noise standard deviation in the channel's physical units."""
    return config.noise_std * CHANNEL_SCALE[channel]


def series_start(config: SynthConfig, season: Season) -> datetime:
    end = SEASON_END[season]
    start = end - timedelta(days=config.days - 1)
    return datetime(start.year, start.month, start.day)


def deterministic_series(config: SynthConfig, zone: int, season: Season, channel: Channel) -> TimeSeries:
    """The noise-free signal of one (zone, season, channel)."""
    season, channel = Season(season), Channel(channel)
    tr = zone_traits(config, zone)
    spd = config.steps_per_day
    hours = np.arange(spd) * 24.0 / spd
    day_curve = activity_profile(channel, hours, tr)
    start = series_start(config, season)
    weekdays = np.array([(start + timedelta(days=d)).weekday() for d in range(config.days)])
    mods = np.array([weekday_modulation(config, w) for w in weekdays])
    gain = CHANNEL_SCALE[channel] * tr.gain * season_gain(config, channel, season)
    values = CHANNEL_BASELINE[channel] + gain * (mods[:, None] * day_curve[None, :]).ravel()
    return TimeSeries(SeriesId(zone, season, channel), start, values, config.step)


def _noise(config: SynthConfig, zone: int, season: Season, channel: Channel, n: int) -> np.ndarray:
    rng = _stream(config.seed, zone, _SEASON_IDX[season], _CHANNEL_IDX[channel])
    return rng.standard_normal(n) * channel_noise_std(config, channel)


def generate_series(config: SynthConfig, zone: int, season: Season, channel: Channel) -> TimeSeries:
    base = deterministic_series(config, zone, season, channel)
    noisy = np.maximum(base.values + _noise(config, zone, Season(season), Channel(channel), len(base)), 0.0)
    return TimeSeries(base.id, base.start_time, noisy, base.step)


def generate_corpus(config: SynthConfig) -> list[TimeSeries]:
    """One series per (zone, season, channel), ordered by that key."""
    return [
        generate_series(config, z, s, c)
        for z in range(config.n_zones)
        for s in config.seasons
        for c in config.channels
    ]


def write_corpus(corpus: list[TimeSeries], out_dir: str | Path, config: SynthConfig | None = None) -> Path:
    """Write one CSV per series plus a ``manifest.json`` readable by :func:`read_manifest`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in corpus:
        name = f"{s.id.key}.csv"
        write_csv(s, out / name)
        entries.append({"path": name, **s.id.to_dict()})
    doc: dict = {"series": entries}
    if config is not None:
        doc["synth_config"] = json.loads(config.to_json())
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


@dataclass(frozen=True)
class SynthOracle:
    """Ground-truth predictive quantiles for the generator's noise process."""

    config: SynthConfig
    workdays_only: bool = True
    calendar: WorkCalendar = field(default_factory=WorkCalendar)

    def profile(self, zone: int, season: Season, channel: Channel) -> TimeSeries:
        s = deterministic_series(self.config, zone, season, channel)
        return filter_workdays(s, self.calendar) if self.workdays_only else s

    def true_quantiles(self, zone: int, season: Season, channel: Channel, t: int, H: int,
                       betas, n_samples: int = 10_000, oracle_seed: int = 0) -> np.ndarray:
        """Empirical quantiles of ``y[t:t+H]`` given the deterministic profile.

        Returns an array of shape ``(len(betas), H)``.
        """
        betas = np.asarray(betas, dtype=np.float64)
        if np.any((betas <= 0) | (betas >= 1)):
            raise ValueError("betas must lie in (0, 1)")
        prof = self.profile(zone, season, channel).values
        if t < 0 or t + H > prof.size:
            raise ValueError(f"window [{t}, {t + H}) outside series of length {prof.size}")
        sigma = channel_noise_std(self.config, Channel(channel))
        rng = _stream(oracle_seed, zone, _SEASON_IDX[Season(season)], _CHANNEL_IDX[Channel(channel)], t, H)
        draws = np.maximum(prof[t:t + H] + sigma * rng.standard_normal((n_samples, H)), 0.0)
        return np.quantile(draws, betas, axis=0)


def true_quantiles(oracle: SynthOracle, zone: int, season: Season, channel: Channel, t: int, H: int,
                   betas, n_samples: int = 10_000, oracle_seed: int = 0) -> np.ndarray:
    return oracle.true_quantiles(zone, season, channel, t, H, betas, n_samples, oracle_seed)
