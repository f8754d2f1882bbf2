"""Shared test fixtures and builders."""

from __future__ import annotations

import json
from datetime import datetime, timedelta, timezone
from pathlib import Path

import pytest

from weathertgd.series import parse_series

BASE_TS = datetime(2024, 3, 1, 0, 0, tzinfo=timezone.utc)


def csv_bytes(rows: list[dict], columns: list[str] | None = None) -> bytes:
    """Render observation dicts as canonical CSV bytes."""
    if columns is None:
        columns = [
            "timestamp",
            "temperature_c",
            "pressure_hpa",
            "humidity_pct",
            "wind_speed_ms",
            "precipitation_mm",
        ]
    lines = [",".join(columns)]
    for row in rows:
        cells = []
        for col in columns:
            value = row.get(col)
            cells.append("" if value is None else str(value))
        lines.append(",".join(cells))
    return "\n".join(lines).encode("utf-8")


def hourly_rows(values: dict[str, list], start: datetime = BASE_TS) -> list[dict]:
    """Build rows from per-variable value lists on an hourly grid."""
    length = max(len(v) for v in values.values())
    rows = []
    for i in range(length):
        row: dict = {"timestamp": (start + timedelta(hours=i)).isoformat()}
        for variable, series in values.items():
            if i < len(series) and series[i] is not None:
                row[variable] = series[i]
        rows.append(row)
    return rows


def make_series(values: dict[str, list], allow_gaps: bool = False, start: datetime = BASE_TS):
    return parse_series(csv_bytes(hourly_rows(values, start)), "csv", allow_gaps=allow_gaps)


def write_script(path: Path, entries: list[dict]) -> Path:
    path.write_text(json.dumps(entries, indent=1), encoding="utf-8")
    return path


# --- scripted run builders ----------------------------------------------------

# Word banks with disjoint vocabulary so distinct captions embed orthogonally
# under the local bag-of-words embedder (cosine 0 << tau_conv).
_CAPTION_BANKS = [
    "Skies stayed overcast while drizzle lingered through the window",
    "Pressure collapsed rapidly as gusty northerlies swept across exposed ridges",
    "Humidity climbed steadily alongside warming afternoons and calm evening intervals",
    "Frontal passage brought abrupt cooling plus intermittent heavy showers overnight",
    "Stable anticyclonic conditions dominated with light winds and clear mornings",
    "Convective bursts punctuated otherwise quiet spells near midweek transitions",
]


def caption_text(index: int) -> str:
    return _CAPTION_BANKS[index % len(_CAPTION_BANKS)]


def gradient_text(role: str, iteration: int) -> str:
    return (
        f"The caption omits the {role} reading from hour {iteration}. "
        f"Add the dominant {role} pattern for step {iteration} explicitly."
    )


def standard_script(
    k_max: int = 5,
    converge_at: int | None = None,
    roles: tuple[str, ...] = ("stat", "phys", "met"),
    seed_text: str | None = None,
    update_texts: dict[int, str] | None = None,
    compress_texts: dict[int, str] | None = None,
) -> list[dict]:
    """Script for a full run: seed, then per-iteration gradients/fusion/update.

    With ``converge_at = j`` the update at loop index j-1 repeats the previous
    caption so the run stops after exactly j iterations.
    """
    seed = seed_text if seed_text is not None else caption_text(0)
    entries = [{"role": "seed", "iteration": 0, "response": seed}]
    current = seed
    for k in range(k_max):
        for role in roles:
            entries.append({"role": role, "iteration": k, "response": gradient_text(role, k)})
        entries.append(
            {
                "role": "fusion",
                "iteration": k,
                "response": f"Blend the round {k} feedback themes into a single directive.",
            }
        )
        if update_texts and k in update_texts:
            update = update_texts[k]
        elif converge_at is not None and k == converge_at - 1:
            update = current
        else:
            update = caption_text(k + 1)
        entries.append({"role": "update", "iteration": k, "response": update})
        if compress_texts and k in compress_texts:
            entries.append({"role": "compress", "iteration": k, "response": compress_texts[k]})
        current = update
    return entries


@pytest.fixture
def small_series():
    return make_series(
        {
            "temperature_c": [10.0, 11.0, 12.5, 12.0, 11.5, 13.0],
            "pressure_hpa": [1012.0, 1011.5, 1011.0, 1010.0, 1009.0, 1008.5],
            "humidity_pct": [70.0, 72.0, 75.0, 74.0, 73.0, 71.0],
            "wind_speed_ms": [3.0, 3.5, 4.0, 5.0, 5.5, 6.0],
            "precipitation_mm": [0.0, 0.0, 0.2, 0.5, 0.1, 0.0],
        }
    )
