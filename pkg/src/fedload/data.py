"""Smart-meter data pipeline.

Ingests per-household consumption CSVs, applies the treatment chain
(half-hour -> hourly resampling, null/outlier cleaning, min-max scaling,
chronological train/validation split), windows series for supervised
one-step-ahead forecasting, and generates correlation-controlled synthetic
load data as a stand-in for non-redistributable metering datasets.

All functions are pure: they return new objects and never mutate inputs.
"""

import csv
import logging
from dataclasses import dataclass, replace
from datetime import datetime, timedelta

import numpy as np

from .seeding import rng_for

log = logging.getLogger(__name__)

CSV_HEADER = ["client_id", "acorn_group", "timestamp_iso8601", "kwh"]

# Values treated as an explicit null reading in the kwh column.
_NULL_TOKENS = {"", "null", "nan", "na"}


class DataError(ValueError):
    pass


class ParseError(DataError):
    """A malformed CSV row; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class IngestionError(DataError):
    pass


class ResampleError(DataError):
    pass


class CleaningError(DataError):
    pass


class ScalerError(DataError):
    pass


class SplitError(DataError):
    pass


class WindowError(DataError):
    pass


@dataclass(frozen=True)
class TimeSeries:
    """One client's consumption series at a fixed cadence starting at `start`.

    NaN entries mark null readings prior to `clean`; after cleaning the
    values are finite, non-negative and gap-free.
    """

    client_id: str
    acorn_group: str
    start: datetime
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))

    def __len__(self) -> int:
        return int(self.values.size)

    def timestamps(self, step_hours: float = 1.0) -> list[datetime]:
        step = timedelta(hours=step_hours)
        return [self.start + i * step for i in range(len(self))]


@dataclass(frozen=True)
class ScalerParams:
    """Min-max scaler parameters, fitted on the training portion only."""

    min: float
    max: float

    def __post_init__(self):
        if not (self.max > self.min):
            raise ScalerError(f"degenerate scaler: min={self.min}, max={self.max}")


@dataclass(frozen=True)
class SupervisedWindowSet:
    """Sliding-window supervised examples over one scaled series."""

    lookback: int
    horizon: int
    inputs: np.ndarray  # (n_examples, lookback)
    targets: np.ndarray  # (n_examples, horizon)
    scaler: ScalerParams | None = None

    def __len__(self) -> int:
        return int(self.inputs.shape[0])


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic load generator.

    `shared_weight` blends one population-wide profile into every client's
    series; 0 gives independent clients, 1 makes all clients identical
    (up to noise).
    """

    n_clients: int
    days: int
    daily_amplitude: float = 1.0
    weekly_amplitude: float = 0.3
    noise_std: float = 0.05
    shared_weight: float = 0.8
    seed: int = 0
    acorn_groups: tuple[str, ...] = ("H", "L")

    def __post_init__(self):
        if not 0.0 <= self.shared_weight <= 1.0:
            raise DataError(f"shared_weight must be in [0,1], got {self.shared_weight}")
        if self.n_clients < 1 or self.days < 1:
            raise DataError("n_clients and days must be >= 1")


def ingest_csv(path) -> list[TimeSeries]:
    """Read a consumption CSV into one TimeSeries per client.

    The file must carry the header `client_id,acorn_group,timestamp_iso8601,kwh`.
    Readings are reordered by timestamp per client; the grid must be evenly
    spaced. Null kwh entries become NaN for `clean` to repair.
    """
    per_client: dict[str, list[tuple[datetime, float]]] = {}
    acorn: dict[str, str] = {}
    seen: set[tuple[str, datetime]] = set()

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return []
        if [c.strip().lower() for c in header] != CSV_HEADER:
            raise ParseError(1, f"expected header {','.join(CSV_HEADER)}")
        for line_no, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 4:
                raise ParseError(line_no, f"expected 4 fields, got {len(row)}")
            cid, group, ts_raw, kwh_raw = (f.strip() for f in row)
            if not cid:
                raise ParseError(line_no, "empty client_id")
            try:
                ts = datetime.fromisoformat(ts_raw)
            except ValueError as exc:
                raise ParseError(line_no, f"bad timestamp {ts_raw!r}: {exc}") from exc
            if kwh_raw.lower() in _NULL_TOKENS:
                kwh = float("nan")
            else:
                try:
                    kwh = float(kwh_raw)
                except ValueError as exc:
                    raise ParseError(line_no, f"non-numeric kwh {kwh_raw!r}") from exc
            if (cid, ts) in seen:
                raise IngestionError(f"duplicate reading for client {cid!r} at {ts.isoformat()}")
            seen.add((cid, ts))
            if cid in acorn and acorn[cid] != group:
                raise IngestionError(f"conflicting acorn_group for client {cid!r}")
            acorn.setdefault(cid, group)
            per_client.setdefault(cid, []).append((ts, kwh))

    out = []
    for cid in sorted(per_client):
        rows = sorted(per_client[cid], key=lambda r: r[0])
        times = [t for t, _ in rows]
        if len(times) > 1:
            step = times[1] - times[0]
            if step <= timedelta(0):
                raise IngestionError(f"client {cid!r}: non-increasing timestamps")
            for a, b in zip(times, times[1:]):
                if b - a != step:
                    raise IngestionError(
                        f"client {cid!r}: uneven timestamp grid near {b.isoformat()}"
                    )
        out.append(
            TimeSeries(
                client_id=cid,
                acorn_group=acorn[cid],
                start=times[0],
                values=np.array([v for _, v in rows], dtype=float),
            )
        )
    return out


def write_csv(path, series_list: list[TimeSeries], step_hours: float = 1.0, append: bool = False):
    """Write TimeSeries back out in the ingestion schema."""
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if not append or fh.tell() == 0:
            writer.writerow(CSV_HEADER)
        for s in series_list:
            for ts, v in zip(s.timestamps(step_hours), s.values):
                writer.writerow([s.client_id, s.acorn_group, ts.isoformat(), "" if np.isnan(v) else f"{v:.6f}"])


def resample_hourly(raw: TimeSeries) -> TimeSeries:
    """Collapse a half-hourly series to hourly by summing consecutive pairs."""
    n = len(raw)
    if n % 2 != 0:
        raise ResampleError(f"client {raw.client_id!r}: odd length {n}, cannot pair half-hours")
    hourly = raw.values.reshape(-1, 2).sum(axis=1)
    return replace(raw, values=hourly)


def _loo_outlier_clamp(values: np.ndarray) -> np.ndarray:
    """Clamp spikes above mean+6*std of the *other* non-null readings.

    Leave-one-out statistics keep a single extreme spike from inflating its
    own threshold; nulls are ignored throughout.
    """
    v = values.copy()
    finite = np.isfinite(v)
    n = int(finite.sum())
    if n < 3:
        # leave-one-out statistics need at least two other readings
        return v
    s = v[finite].sum()
    s2 = (v[finite] ** 2).sum()
    x = v[finite]
    mean_loo = (s - x) / (n - 1)
    var_loo = np.maximum((s2 - x**2) / (n - 1) - mean_loo**2, 0.0)
    threshold = mean_loo + 6.0 * np.sqrt(var_loo)
    v[finite] = np.minimum(x, threshold)
    return v


def clean(series: TimeSeries) -> TimeSeries:
    """Repair a series: clamp outliers, interpolate nulls, floor at zero."""
    v = series.values
    if not np.isfinite(v).any():
        raise CleaningError(f"client {series.client_id!r}: all readings are null")
    v = _loo_outlier_clamp(v)
    finite = np.isfinite(v)
    if not finite.all():
        idx = np.arange(v.size)
        # np.interp holds the nearest neighbour constant beyond the ends.
        v = np.interp(idx, idx[finite], v[finite])
    v = np.maximum(v, 0.0)
    return replace(series, values=v)


def fit_scaler(train: TimeSeries | np.ndarray) -> ScalerParams:
    v = train.values if isinstance(train, TimeSeries) else np.asarray(train, dtype=float)
    lo, hi = float(np.min(v)), float(np.max(v))
    if hi == lo:
        raise ScalerError(f"constant series (value {lo}): min-max scaling undefined")
    return ScalerParams(min=lo, max=hi)


def scale(series, params: ScalerParams) -> np.ndarray:
    v = series.values if isinstance(series, TimeSeries) else np.asarray(series, dtype=float)
    scaled = (v - params.min) / (params.max - params.min)
    n_out = int(((scaled < 0.0) | (scaled > 1.0)).sum())
    if n_out:
        log.warning("%d scaled value(s) fall outside [0,1]; passed through linearly", n_out)
    return scaled


def unscale(scaled, params: ScalerParams) -> np.ndarray:
    v = np.asarray(scaled, dtype=float)
    return v * (params.max - params.min) + params.min


def split_train_validation(series: TimeSeries, train_fraction: float) -> tuple[TimeSeries, TimeSeries]:
    """Chronological split; the training part strictly precedes validation."""
    if not 0.0 < train_fraction < 1.0:
        raise SplitError(f"train_fraction must be in (0,1), got {train_fraction}")
    n = len(series)
    if n < 2:
        raise SplitError(f"client {series.client_id!r}: series of length {n} cannot be split")
    n_train = int(n * train_fraction)
    if n_train == 0 or n_train == n:
        raise SplitError(f"split of length-{n} series at fraction {train_fraction} leaves an empty part")
    train = replace(series, values=series.values[:n_train])
    val = replace(
        series,
        start=series.start + timedelta(hours=n_train),
        values=series.values[n_train:],
    )
    return train, val


def make_windows(
    series, lookback: int, horizon: int = 1, scaler: ScalerParams | None = None
) -> SupervisedWindowSet:
    """Slide a (lookback, horizon) window over a scaled series.

    Example i uses readings [i, i+lookback) as input and
    [i+lookback, i+lookback+horizon) as target.
    """
    v = series.values if isinstance(series, TimeSeries) else np.asarray(series, dtype=float)
    if lookback < 1 or horizon < 1:
        raise WindowError("lookback and horizon must be >= 1")
    n = v.size
    count = n - lookback - horizon + 1
    if count < 1:
        raise WindowError(f"series of length {n} too short for lookback={lookback}, horizon={horizon}")
    win = np.lib.stride_tricks.sliding_window_view(v, lookback + horizon)[:count]
    return SupervisedWindowSet(
        lookback=lookback,
        horizon=horizon,
        inputs=win[:, :lookback].copy(),
        targets=win[:, lookback:].copy(),
        scaler=scaler,
    )


_SYNTH_START = datetime(2013, 1, 1)


def _profile(hours: np.ndarray, rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    """Baseline plus daily and weekly sinusoids with random phase/amplitude."""
    base = spec.daily_amplitude + spec.weekly_amplitude
    amp_d = spec.daily_amplitude * rng.uniform(0.7, 1.3)
    amp_w = spec.weekly_amplitude * rng.uniform(0.7, 1.3)
    phase_d = rng.uniform(0.0, 24.0)
    phase_w = rng.uniform(0.0, 168.0)
    return (
        base
        + amp_d * np.sin(2.0 * np.pi * (hours + phase_d) / 24.0)
        + amp_w * np.sin(2.0 * np.pi * (hours + phase_w) / 168.0)
    )


def generate_synthetic(spec: SyntheticSpec) -> list[TimeSeries]:
    """Generate hourly series: rho*shared + (1-rho)*private + noise, floored at 0."""
    hours = np.arange(spec.days * 24, dtype=float)
    shared = _profile(hours, rng_for(spec.seed, "synthetic", "shared"), spec)
    rho = spec.shared_weight
    out = []
    for i in range(spec.n_clients):
        rng = rng_for(spec.seed, "synthetic", "client", i)
        private = _profile(hours, rng, spec)
        noise = rng.normal(0.0, spec.noise_std, size=hours.size) if spec.noise_std > 0 else 0.0
        values = np.maximum(rho * shared + (1.0 - rho) * private + noise, 0.0)
        out.append(
            TimeSeries(
                client_id=f"synth-{i:03d}",
                acorn_group=spec.acorn_groups[i % len(spec.acorn_groups)],
                start=_SYNTH_START,
                values=values,
            )
        )
    return out


@dataclass(frozen=True)
class ClientDataset:
    """Scaled, windowed train/validation data for one simulated client."""

    client_id: str
    acorn_group: str
    train: SupervisedWindowSet
    validation: SupervisedWindowSet
    scaler: ScalerParams
    train_series: np.ndarray | None = None  # scaled training series, for correlation analysis


def prepare_client(
    series: TimeSeries,
    lookback: int = 24,
    horizon: int = 1,
    train_fraction: float = 0.75,
    half_hourly: bool = False,
) -> ClientDataset:
    """Run the full treatment chain for one client.

    Resample (when the input is half-hourly), clean, split chronologically,
    fit the scaler on the training part only, scale both parts and window
    them. The scaler never sees validation data.
    """
    if half_hourly:
        series = resample_hourly(series)
    series = clean(series)
    train_ts, val_ts = split_train_validation(series, train_fraction)
    scaler = fit_scaler(train_ts)
    scaled_train = scale(train_ts, scaler)
    train_windows = make_windows(scaled_train, lookback, horizon, scaler)
    val_windows = make_windows(scale(val_ts, scaler), lookback, horizon, scaler)
    return ClientDataset(
        client_id=series.client_id,
        acorn_group=series.acorn_group,
        train=train_windows,
        validation=val_windows,
        scaler=scaler,
        train_series=scaled_train,
    )
