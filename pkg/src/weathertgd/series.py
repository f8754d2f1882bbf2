"""Weather time-series ingestion, statistics, and prompt serialization.

A series is an ordered list of timestamped observations over up to five
meteorological variables. Parsing validates physical bounds and timestamp
ordering; summarization computes the per-variable statistics that seed the
agent prompts; serialization renders a deterministic plain-text table plus
summary block suitable for inclusion in an LLM prompt.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

from .errors import (
    GapNotAllowed,
    MalformedInput,
    RangeViolation,
    TooShort,
    UnsortedTimestamps,
)

VARIABLES = (
    "temperature_c",
    "pressure_hpa",
    "humidity_pct",
    "wind_speed_ms",
    "precipitation_mm",
)

# (low, high, low_inclusive, high_inclusive); None = unbounded
_BOUNDS = {
    "temperature_c": (-90.0, 60.0, False, False),
    "pressure_hpa": (800.0, 1100.0, False, False),
    "humidity_pct": (0.0, 100.0, True, True),
    "wind_speed_ms": (0.0, None, True, True),
    "precipitation_mm": (0.0, None, True, True),
}

HOUR_SECONDS = 3600.0

TREND_RISING = "rising"
TREND_FALLING = "falling"
TREND_STATIONARY = "stationary"

PERIODIC = "diurnal-periodic"
APERIODIC = "aperiodic"
PERIODIC_UNKNOWN = "unknown"

# Anomaly threshold (in sample standard deviations) and the lag-24
# autocorrelation level above which a variable is labeled diurnal-periodic.
ANOMALY_SIGMA = 3.0
PERIODICITY_THRESHOLD = 0.5


@dataclass(frozen=True)
class Observation:
    """One timestamped measurement row; any variable may be absent."""

    timestamp: datetime
    temperature_c: float | None = None
    pressure_hpa: float | None = None
    humidity_pct: float | None = None
    wind_speed_ms: float | None = None
    precipitation_mm: float | None = None

    def value(self, variable: str) -> float | None:
        return getattr(self, variable)


@dataclass(frozen=True)
class WeatherSeries:
    """Validated, strictly time-ordered multivariate weather series."""

    station_id: str
    observations: tuple[Observation, ...]
    variables_present: frozenset[str]

    def __len__(self) -> int:
        return len(self.observations)

    def values(self, variable: str) -> list[tuple[int, datetime, float]]:
        """(index, timestamp, value) triples where the variable is present."""
        out = []
        for i, obs in enumerate(self.observations):
            v = obs.value(variable)
            if v is not None:
                out.append((i, obs.timestamp, v))
        return out


@dataclass(frozen=True)
class VariableStats:
    """Per-variable summary statistics over present values."""

    mean: float
    sample_std: float
    minimum: float
    maximum: float
    min_timestamp: datetime
    max_timestamp: datetime
    ols_slope: float  # units per hour
    trend_label: str
    anomaly_indices: tuple[int, ...]
    lag24_autocorrelation: float | None
    periodic_label: str


@dataclass(frozen=True)
class SeriesSummary:
    """Summary of a series: one :class:`VariableStats` per present variable."""

    per_variable: dict[str, VariableStats] = field(default_factory=dict)


def _parse_timestamp(raw: str, context: str) -> datetime:
    text = raw.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(text)
    except ValueError as exc:
        raise MalformedInput(f"{context}: bad timestamp {raw!r}") from exc
    if ts.tzinfo is None:
        raise MalformedInput(f"{context}: timestamp {raw!r} has no UTC offset")
    return ts.astimezone(timezone.utc)


def _parse_value(raw: object, variable: str, context: str) -> float | None:
    if raw is None:
        return None
    if isinstance(raw, str):
        raw = raw.strip()
        if raw == "":
            return None
    try:
        value = float(raw)
    except (TypeError, ValueError) as exc:
        raise MalformedInput(f"{context}, column {variable}: bad value {raw!r}") from exc
    if math.isnan(value) or math.isinf(value):
        raise MalformedInput(f"{context}, column {variable}: non-finite value")
    low, high, low_inc, high_inc = _BOUNDS[variable]
    if low is not None and (value < low or (not low_inc and value == low)):
        raise RangeViolation(f"{context}, column {variable}: {value} below bound {low}")
    if high is not None and (value > high or (not high_inc and value == high)):
        raise RangeViolation(f"{context}, column {variable}: {value} above bound {high}")
    return value


def _rows_from_csv(content: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(content))
    if reader.fieldnames is None:
        raise MalformedInput("empty CSV input")
    names = [n.strip() for n in reader.fieldnames]
    if "timestamp" not in names:
        raise MalformedInput("CSV header missing 'timestamp' column")
    unknown = [n for n in names if n != "timestamp" and n not in VARIABLES]
    if unknown:
        raise MalformedInput(f"CSV header has unknown columns: {', '.join(unknown)}")
    return list(reader)


def _rows_from_json(content: str) -> list[dict]:
    try:
        data = json.loads(content)
    except json.JSONDecodeError as exc:
        raise MalformedInput(f"invalid JSON: {exc}") from exc
    if not isinstance(data, list):
        raise MalformedInput("JSON input must be an array of observation objects")
    for i, row in enumerate(data):
        if not isinstance(row, dict):
            raise MalformedInput(f"row {i + 1}: expected an object")
        unknown = [k for k in row if k != "timestamp" and k not in VARIABLES]
        if unknown:
            raise MalformedInput(f"row {i + 1}: unknown fields: {', '.join(unknown)}")
    return data


def _interpolate_gaps(
    observations: list[Observation], variable: str
) -> list[Observation]:
    """Fill interior gaps of one variable by time-weighted linear interpolation.

    Leading and trailing gaps stay absent. Interpolated values never leave
    the [min(neighbors), max(neighbors)] interval by construction.
    """
    present = [(i, obs.timestamp, obs.value(variable)) for i, obs in enumerate(observations) if obs.value(variable) is not None]
    if len(present) < 2:
        return observations
    out = list(observations)
    for (i0, t0, v0), (i1, t1, v1) in zip(present, present[1:]):
        if i1 - i0 == 1:
            continue
        span = (t1 - t0).total_seconds()
        for j in range(i0 + 1, i1):
            frac = (out[j].timestamp - t0).total_seconds() / span
            out[j] = replace(out[j], **{variable: v0 + frac * (v1 - v0)})
    return out


def parse_series(
    data: bytes,
    fmt: str,
    allow_gaps: bool = False,
    station_id: str = "",
) -> WeatherSeries:
    """Parse and validate raw CSV or JSON bytes into a :class:`WeatherSeries`.

    With ``allow_gaps`` set, interior missing values of any variable that is
    present elsewhere in the series are linearly interpolated against elapsed
    time; leading/trailing gaps remain absent. Without it, any gap in an
    otherwise-present variable raises :class:`GapNotAllowed`. Variables absent
    from every row are simply not in ``variables_present``.
    """
    if not data:
        raise MalformedInput("empty input")
    if fmt not in ("csv", "json"):
        raise MalformedInput(f"unsupported format {fmt!r}")
    try:
        content = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedInput(f"input is not valid UTF-8: {exc}") from exc

    raw_rows = _rows_from_csv(content) if fmt == "csv" else _rows_from_json(content)

    observations: list[Observation] = []
    for i, row in enumerate(raw_rows):
        context = f"row {i + 1}"
        ts_raw = row.get("timestamp")
        if ts_raw is None or (isinstance(ts_raw, str) and not ts_raw.strip()):
            raise MalformedInput(f"{context}: missing timestamp")
        ts = _parse_timestamp(str(ts_raw), context)
        values = {v: _parse_value(row.get(v), v, context) for v in VARIABLES}
        if all(v is None for v in values.values()):
            raise MalformedInput(f"{context}: all variables absent")
        observations.append(Observation(timestamp=ts, **values))

    if len(observations) < 2:
        raise TooShort(f"series has {len(observations)} observation(s); need at least 2")
    for prev, cur in zip(observations, observations[1:]):
        if cur.timestamp <= prev.timestamp:
            raise UnsortedTimestamps(
                f"timestamps not strictly increasing at {cur.timestamp.isoformat()}"
            )

    for variable in VARIABLES:
        count = sum(1 for obs in observations if obs.value(variable) is not None)
        if count == 0 or count == len(observations):
            continue
        if not allow_gaps:
            missing_at = next(
                i for i, obs in enumerate(observations) if obs.value(variable) is None
            )
            raise GapNotAllowed(
                f"row {missing_at + 1}: missing {variable} (allow_gaps=false)"
            )
        observations = _interpolate_gaps(observations, variable)

    present = frozenset(
        v for v in VARIABLES if any(obs.value(v) is not None for obs in observations)
    )
    return WeatherSeries(
        station_id=station_id,
        observations=tuple(observations),
        variables_present=present,
    )


def _elapsed_hours(t: datetime, origin: datetime) -> float:
    return (t - origin).total_seconds() / HOUR_SECONDS


def _is_hourly(series: WeatherSeries) -> bool:
    obs = series.observations
    return all(
        (b.timestamp - a.timestamp).total_seconds() == HOUR_SECONDS
        for a, b in zip(obs, obs[1:])
    )


def _pearson(xs: list[float], ys: list[float]) -> float | None:
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    sxx = sum((x - mx) ** 2 for x in xs)
    syy = sum((y - my) ** 2 for y in ys)
    if sxx == 0.0 or syy == 0.0:
        return None
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    return sxy / math.sqrt(sxx * syy)


def _lag24_autocorrelation(series: WeatherSeries, variable: str) -> float | None:
    """Pearson correlation between the series and its 24-step shift.

    Computed only for hourly series of length >= 48 where the variable is
    present at every observation; an exactly 24-hour-periodic signal scores
    1.0 under this estimator.
    """
    if len(series) < 48 or not _is_hourly(series):
        return None
    values = [obs.value(variable) for obs in series.observations]
    if any(v is None for v in values):
        return None
    xs = values[:-24]
    ys = values[24:]
    return _pearson(xs, ys)


def summarize(series: WeatherSeries) -> SeriesSummary:
    """Compute per-variable statistics over present values.

    Sample standard deviation uses the n-1 denominator (0.0 when fewer than
    two values). The OLS slope regresses value against elapsed hours since
    the first present observation of that variable; the trend label compares
    the implied total change |slope * span_hours| against half a standard
    deviation. Anomalies are observations deviating more than three standard
    deviations from the mean, reported as indices into the observation list.
    """
    per_variable: dict[str, VariableStats] = {}
    for variable in VARIABLES:
        triples = series.values(variable)
        if not triples:
            continue
        values = [v for _, _, v in triples]
        n = len(values)
        mean = sum(values) / n
        if n >= 2:
            sample_std = math.sqrt(sum((v - mean) ** 2 for v in values) / (n - 1))
        else:
            sample_std = 0.0

        min_i = min(range(n), key=lambda k: (values[k], k))
        max_i = min(range(n), key=lambda k: (-values[k], k))

        origin = triples[0][1]
        hours = [_elapsed_hours(t, origin) for _, t, _ in triples]
        mh = sum(hours) / n
        denom = sum((h - mh) ** 2 for h in hours)
        if denom > 0.0:
            slope = sum((h - mh) * (v - mean) for h, v in zip(hours, values)) / denom
        else:
            slope = 0.0

        span_hours = hours[-1] - hours[0]
        if abs(slope * span_hours) > 0.5 * sample_std and sample_std > 0.0:
            trend = TREND_RISING if slope > 0 else TREND_FALLING
        else:
            trend = TREND_STATIONARY

        if sample_std > 0.0:
            anomalies = tuple(
                i for (i, _, v) in triples if abs(v - mean) > ANOMALY_SIGMA * sample_std
            )
        else:
            anomalies = ()

        lag24 = _lag24_autocorrelation(series, variable)
        if lag24 is None:
            periodic = PERIODIC_UNKNOWN
        elif lag24 > PERIODICITY_THRESHOLD:
            periodic = PERIODIC
        else:
            periodic = APERIODIC

        per_variable[variable] = VariableStats(
            mean=mean,
            sample_std=sample_std,
            minimum=values[min_i],
            maximum=values[max_i],
            min_timestamp=triples[min_i][1],
            max_timestamp=triples[max_i][1],
            ols_slope=slope,
            trend_label=trend,
            anomaly_indices=anomalies,
            lag24_autocorrelation=lag24,
            periodic_label=periodic,
        )
    return SeriesSummary(per_variable=per_variable)


def select_rows(total: int, max_rows: int) -> list[int]:
    """Evenly spaced row indices including first and last.

    Index i maps to ``i * (total - 1) // (max_rows - 1)``; with
    ``total > max_rows`` this yields ``max_rows`` strictly increasing indices.
    """
    if total <= max_rows:
        return list(range(total))
    return [i * (total - 1) // (max_rows - 1) for i in range(max_rows)]


def render_table(series: WeatherSeries, max_rows: int) -> str:
    """Deterministic CSV-style table of (possibly downsampled) observations."""
    if max_rows < 2:
        raise ValueError("max_rows must be at least 2")
    columns = [v for v in VARIABLES if v in series.variables_present]
    lines = ["timestamp," + ",".join(columns)]
    for i in select_rows(len(series), max_rows):
        obs = series.observations[i]
        cells = [obs.timestamp.isoformat()]
        for v in columns:
            value = obs.value(v)
            cells.append("" if value is None else f"{value:.1f}")
        lines.append(",".join(cells))
    return "\n".join(lines)


def render_summary(summary: SeriesSummary) -> str:
    """Deterministic one-line-per-variable rendering of a summary."""
    lines = []
    for variable, s in summary.per_variable.items():
        parts = [
            f"mean={s.mean:.2f}",
            f"std={s.sample_std:.2f}",
            f"min={s.minimum:.1f}@{s.min_timestamp.isoformat()}",
            f"max={s.maximum:.1f}@{s.max_timestamp.isoformat()}",
            f"slope={s.ols_slope:+.4f}/h",
            f"trend={s.trend_label}",
            f"anomalies={len(s.anomaly_indices)}",
        ]
        if s.lag24_autocorrelation is not None:
            parts.append(f"lag24_r={s.lag24_autocorrelation:.3f}")
        parts.append(f"periodicity={s.periodic_label}")
        lines.append(f"{variable}: " + " ".join(parts))
    return "\n".join(lines)


def serialize_for_prompt(
    series: WeatherSeries, summary: SeriesSummary, max_rows: int = 48
) -> str:
    """Table plus SUMMARY block; byte-identical for identical inputs."""
    return render_table(series, max_rows) + "\n\nSUMMARY\n" + render_summary(summary)
