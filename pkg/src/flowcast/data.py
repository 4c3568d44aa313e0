"""Basin data: grid/gauge containers, sample windows, file formats and a synthetic basin.

A basin is described by two daily gridded fields (precipitation, 2-m
temperature) and a gauge discharge series sharing one calendar. Samples predict
day ``t`` from days ``t-L .. t-1``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path

import numpy as np

GAUGE_HEADER = ("date", "discharge_m3s")


class DataError(ValueError):
    """Malformed, misaligned or otherwise unusable basin data."""


@dataclass(frozen=True)
class GridSeries:
    variable: str
    start_date: date
    values: np.ndarray  # T x H x W

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[0] < 1:
            raise DataError(f"{self.variable}: grid values must be T x H x W with T >= 1, got {v.shape}")
        if not np.isfinite(v).all():
            raise DataError(f"{self.variable}: grid contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def days(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class GaugeSeries:
    start_date: date
    discharge: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.discharge, dtype=np.float64)
        if q.ndim != 1 or q.size < 1:
            raise DataError(f"discharge must be a non-empty 1-D series, got shape {q.shape}")
        if not np.isfinite(q).all():
            raise DataError("discharge contains non-finite values")
        if (q < 0).any():
            raise DataError("discharge contains negative values")
        object.__setattr__(self, "discharge", q)

    @property
    def days(self) -> int:
        return self.discharge.size

    def dates(self) -> list[date]:
        return [self.start_date + timedelta(days=i) for i in range(self.days)]


@dataclass(frozen=True)
class Sample:
    video: np.ndarray  # L x C x H x W, channels precipitation, temperature, streamflow
    target: float
    day: int  # index of the target day


def check_aligned(precip: GridSeries, temp: GridSeries, gauge: GaugeSeries) -> None:
    """Raise unless all three series share a start date, a length and (for grids) a shape."""
    if not (precip.start_date == temp.start_date == gauge.start_date):
        raise DataError(f"start dates differ: precip {precip.start_date}, temp {temp.start_date}, "
                        f"gauge {gauge.start_date}")
    if not (precip.days == temp.days == gauge.days):
        raise DataError(f"lengths differ: precip {precip.days}, temp {temp.days}, gauge {gauge.days} days")
    if precip.values.shape[1:] != temp.values.shape[1:]:
        raise DataError(f"grid shapes differ: precip {precip.values.shape[1:]}, temp {temp.values.shape[1:]}")


def basin_average(grid: GridSeries) -> np.ndarray:
    """Daily mean over all cells."""
    return grid.values.mean(axis=(1, 2))


def broadcast_streamflow(q: float, height: int, width: int) -> np.ndarray:
    return np.full((height, width), float(q))


def stack_frames(precip: GridSeries, temp: GridSeries, gauge: GaugeSeries) -> np.ndarray:
    """Daily ``T x 3 x H x W`` frames: precipitation, temperature, discharge spread over the grid."""
    check_aligned(precip, temp, gauge)
    t, h, w = precip.values.shape
    frames = np.empty((t, 3, h, w))
    frames[:, 0] = precip.values
    frames[:, 1] = temp.values
    frames[:, 2] = gauge.discharge[:, None, None]
    return frames


def daily_features(precip: GridSeries, temp: GridSeries, gauge: GaugeSeries) -> np.ndarray:
    """Daily ``T x 3`` vectors: basin-mean precipitation, basin-mean temperature, discharge."""
    check_aligned(precip, temp, gauge)
    return np.column_stack([basin_average(precip), basin_average(temp), gauge.discharge])


def sample_windows(n_days: int, lookback: int) -> tuple[np.ndarray, np.ndarray]:
    """Target days ``L .. T-1`` and, per target ``t``, the input days ``t-L .. t-1``."""
    if lookback < 1:
        raise DataError("lookback must be at least 1")
    if n_days <= lookback:
        raise DataError(f"need more than {lookback} days for a lookback of {lookback}, got {n_days}")
    targets = np.arange(lookback, n_days)
    windows = targets[:, None] - lookback + np.arange(lookback)[None, :]
    return targets, windows


def make_video_samples(precip: GridSeries, temp: GridSeries, gauge: GaugeSeries,
                       lookback: int = 182) -> list[Sample]:
    frames = stack_frames(precip, temp, gauge)
    targets, _ = sample_windows(frames.shape[0], lookback)
    # zero-copy windows over the daily frames; every sample's video is a read-only view
    views = np.lib.stride_tricks.sliding_window_view(frames, lookback, axis=0)
    views = np.moveaxis(views, -1, 1)
    q = gauge.discharge
    return [Sample(views[t - lookback], float(q[t]), int(t)) for t in targets]


def make_sequence_samples(precip: GridSeries, temp: GridSeries, gauge: GaugeSeries,
                          lookback: int = 182) -> list[tuple[np.ndarray, float]]:
    feats = daily_features(precip, temp, gauge)
    targets, windows = sample_windows(feats.shape[0], lookback)
    q = gauge.discharge
    return [(feats[w], float(q[t])) for t, w in zip(targets, windows)]


# ---------------------------------------------------------------------------
# file formats


def save_grid_series(grid: GridSeries, path) -> None:
    """JSON header line, then T*H*W little-endian float64 values in (day, row, column) order."""
    header = {"variable": grid.variable, "start_date": grid.start_date.isoformat(),
              "T": grid.days, "H": grid.height, "W": grid.width}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(grid.values, dtype="<f8").tobytes())


def load_grid_series(path) -> GridSeries:
    path = Path(path)
    with open(path, "rb") as fh:
        line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(line.decode("utf-8"))
        variable = str(header["variable"])
        start = date.fromisoformat(header["start_date"])
        t, h, w = (int(header[k]) for k in ("T", "H", "W"))
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed grid header ({exc})") from None
    if min(t, h, w) < 1:
        raise DataError(f"{path}: header extents must be positive, got T={t} H={h} W={w}")
    expected = t * h * w
    if len(payload) % 8 or len(payload) // 8 != expected:
        raise DataError(f"{path}: header declares T*H*W = {expected} values but payload holds "
                        f"{len(payload) / 8:g} ({len(payload)} bytes)")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(t, h, w)
    if not np.isfinite(values).all():
        raise DataError(f"{path}: payload contains non-finite values")
    return GridSeries(variable, start, values)


def save_gauge_series(gauge: GaugeSeries, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(GAUGE_HEADER)
        for d, q in zip(gauge.dates(), gauge.discharge):
            writer.writerow((d.isoformat(), repr(float(q))))


def load_gauge_series(path) -> GaugeSeries:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(c.strip() for c in rows[0]) != GAUGE_HEADER:
        raise DataError(f"{path}: expected header {','.join(GAUGE_HEADER)}")
    body = [r for r in rows[1:] if r]
    if not body:
        raise DataError(f"{path}: no discharge rows")
    try:
        dates = [date.fromisoformat(r[0].strip()) for r in body]
        q = np.array([float(r[1]) for r in body])
    except (IndexError, ValueError) as exc:
        raise DataError(f"{path}: malformed row ({exc})") from None
    for i in range(1, len(dates)):
        if dates[i] - dates[i - 1] != timedelta(days=1):
            raise DataError(f"{path}: dates not consecutive at row {i + 1} ({dates[i - 1]} -> {dates[i]})")
    return GaugeSeries(dates[0], q)


# ---------------------------------------------------------------------------
# synthetic basin


@dataclass(frozen=True)
class SyntheticBasinSpec:
    """Parameters of a cellwise linear-reservoir basin with storm-driven rainfall.

    ``k`` and ``phi`` may be scalars, ``H x W`` arrays, or None for a
    seed-derived heterogeneous field.
    """

    height: int = 8
    width: int = 8
    days: int = 3000
    k: object = None  # storage coefficient per cell, in (0, 1)
    phi: object = None  # effective-rain fraction per cell before the temperature effect
    k_range: tuple[float, float] = (0.03, 0.6)
    phi_range: tuple[float, float] = (0.25, 0.95)
    wet_day_prob: float = 0.35
    seasonal_amplitude: float = 0.5
    storm_mean: float = 12.0  # mm/day at the storm centre
    storm_radius: float = 1.5  # cells
    drizzle: float = 0.3  # mm/day
    constant_precip: float | None = None
    temp_mean: float = 283.0  # K
    temp_amplitude: float = 12.0
    temp_noise: float = 2.0
    temp_gradient: float = 3.0  # K across the grid rows
    temperature_effect: bool = True
    et_midpoint: float = 290.0  # K where the temperature effect halves effective rain
    et_scale: float = 3.0
    initial_storage: float = 0.0
    spinup_days: int = 365
    seed: int = 0
    start_date: date = field(default=date(2000, 1, 1))

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.days < 1:
            raise ValueError("grid extents and days must be positive")
        if self.spinup_days < 0:
            raise ValueError("spinup_days must be non-negative")
        for name in ("k", "phi"):
            v = getattr(self, name)
            if v is None:
                continue
            arr = np.broadcast_to(np.asarray(v, dtype=float), (self.height, self.width))
            if name == "k" and not ((arr > 0) & (arr < 1)).all():
                raise ValueError("storage coefficient k must lie in (0, 1) in every cell")
            if name == "phi" and not ((arr >= 0) & (arr <= 1)).all():
                raise ValueError("effective-rain fraction phi must lie in [0, 1] in every cell")
        lo, hi = self.k_range
        if not 0 < lo <= hi < 1:
            raise ValueError("k_range must lie inside (0, 1)")

    def cell_fields(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Storage coefficient and effective-rain fraction per cell."""
        shape = (self.height, self.width)
        k = self._field(self.k, self.k_range, rng, log=True)
        phi = self._field(self.phi, self.phi_range, rng, log=False)
        return np.broadcast_to(k, shape).copy(), np.broadcast_to(phi, shape).copy()

    def _field(self, value, bounds, rng, log: bool) -> np.ndarray:
        if value is not None:
            return np.asarray(value, dtype=float)
        # smooth ramp along a random direction plus cell noise, mapped into bounds
        rows, cols = np.meshgrid(np.linspace(-1, 1, self.height), np.linspace(-1, 1, self.width),
                                 indexing="ij")
        theta = rng.uniform(0, 2 * math.pi)
        ramp = math.cos(theta) * rows + math.sin(theta) * cols
        u = 0.75 * ramp / max(np.abs(ramp).max(), 1e-12) + 0.25 * rng.uniform(-1, 1, ramp.shape)
        u = (u + 1) / 2
        lo, hi = bounds
        if log:
            return np.exp(np.log(lo) + u * (np.log(hi) - np.log(lo)))
        return lo + u * (hi - lo)


def simulate_reservoir(inflow: np.ndarray, k: np.ndarray, initial_storage) -> tuple[np.ndarray, np.ndarray]:
    """Cellwise linear reservoir ``S[t+1] = S[t] + inflow[t] - k S[t]``.

    Returns outflow ``k S[t]`` for ``t < T`` (``T x H x W``) and storage for
    ``t = 0 .. T`` (``(T+1) x H x W``).
    """
    inflow = np.asarray(inflow, dtype=float)
    k = np.broadcast_to(np.asarray(k, dtype=float), inflow.shape[1:])
    storage = np.empty((inflow.shape[0] + 1,) + inflow.shape[1:])
    storage[0] = initial_storage
    outflow = np.empty_like(inflow)
    for t in range(inflow.shape[0]):
        outflow[t] = k * storage[t]
        storage[t + 1] = storage[t] + inflow[t] - outflow[t]
    return outflow, storage


def _precipitation(spec: SyntheticBasinSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    shape = (n, spec.height, spec.width)
    if spec.constant_precip is not None:
        return np.full(shape, float(spec.constant_precip))
    doy = np.arange(n) - spec.spinup_days
    season = 1.0 + spec.seasonal_amplitude * np.sin(2 * math.pi * (doy - 80) / 365.25)
    wet = rng.random(n) < np.clip(spec.wet_day_prob * season, 0.0, 1.0)
    rows, cols = np.meshgrid(np.arange(spec.height), np.arange(spec.width), indexing="ij")
    out = np.zeros(shape)
    for t in np.flatnonzero(wet):
        n_storms = 1 + rng.poisson(0.7)
        for _ in range(n_storms):
            r0 = rng.uniform(-0.5, spec.height - 0.5)
            c0 = rng.uniform(-0.5, spec.width - 0.5)
            radius = spec.storm_radius * rng.uniform(0.5, 1.5)
            amount = rng.exponential(spec.storm_mean) * season[t]
            out[t] += amount * np.exp(-((rows - r0) ** 2 + (cols - c0) ** 2) / (2 * radius ** 2))
        out[t] += spec.drizzle * rng.exponential(1.0)
    return out


def _temperature(spec: SyntheticBasinSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    doy = np.arange(n) - spec.spinup_days
    cycle = spec.temp_mean + spec.temp_amplitude * np.sin(2 * math.pi * (doy - 110) / 365.25)
    anomaly = np.empty(n)
    a = 0.0
    for t in range(n):
        a = 0.8 * a + rng.normal(0.0, spec.temp_noise * 0.6)
        anomaly[t] = a
    gradient = spec.temp_gradient * (np.linspace(0.5, -0.5, spec.height)[:, None]
                                     * np.ones((1, spec.width)))
    cell_noise = rng.normal(0.0, 0.3 * spec.temp_noise, (n, spec.height, spec.width))
    return (cycle + anomaly)[:, None, None] + gradient[None] + cell_noise


def effective_fraction(spec: SyntheticBasinSpec, phi: np.ndarray, temp: np.ndarray) -> np.ndarray:
    """Share of precipitation reaching storage; warm days lose more to evaporation."""
    if not spec.temperature_effect:
        return np.broadcast_to(phi, temp.shape)
    return phi / (1.0 + np.exp((temp - spec.et_midpoint) / spec.et_scale))


@dataclass(frozen=True)
class SyntheticRun:
    """Every array of a synthetic simulation, spin-up included (``T' = spinup + days``)."""

    k: np.ndarray  # H x W
    phi: np.ndarray  # H x W
    precip: np.ndarray  # T' x H x W
    temp: np.ndarray  # T' x H x W
    inflow: np.ndarray  # effective rain reaching storage, T' x H x W
    outflow: np.ndarray  # T' x H x W
    storage: np.ndarray  # (T' + 1) x H x W
    discharge: np.ndarray  # T', area-normalized


def simulate_synthetic_basin(spec: SyntheticBasinSpec, rng: np.random.Generator | None = None) -> SyntheticRun:
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    k, phi = spec.cell_fields(rng)
    n = spec.days + spec.spinup_days
    precip = _precipitation(spec, n, rng)
    temp = _temperature(spec, n, rng)
    inflow = effective_fraction(spec, phi, temp) * precip
    outflow, storage = simulate_reservoir(inflow, k, spec.initial_storage)
    return SyntheticRun(k, phi, precip, temp, inflow, outflow, storage, outflow.mean(axis=(1, 2)))


def generate_synthetic_basin(spec: SyntheticBasinSpec, rng: np.random.Generator | None = None
                             ) -> tuple[GridSeries, GridSeries, GaugeSeries]:
    """Precipitation, temperature and gauge discharge for a synthetic basin.

    Discharge is the area-normalized sum of cell outflows ``mean_c k_c S_c``.
    The first ``spinup_days`` are simulated and discarded.
    """
    run = simulate_synthetic_basin(spec, rng)
    keep = slice(spec.spinup_days, None)
    return (GridSeries("precipitation", spec.start_date, run.precip[keep]),
            GridSeries("temperature", spec.start_date, run.temp[keep]),
            GaugeSeries(spec.start_date, run.discharge[keep]))
