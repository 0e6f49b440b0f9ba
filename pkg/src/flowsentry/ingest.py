"""Canonical data model and CSV parsing for link time series and event labels.

All timestamps are stored timezone-aware in UTC. Density is a derived proxy
(flow divided by speed) and is marked missing whenever speed is zero or an
input is missing, so downstream consumers never see an infinite density.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import IO, Iterable, Sequence

SPEED_MAX_KMH = 250.0
FLOW_MAX_VPH = 12000.0

EVENT_CATEGORIES = frozenset(
    {
        "accident",
        "obstruction",
        "breakdown",
        "deviation_from_profile",
        "roadworks",
        "weather",
        "other",
    }
)

# Categories that do not count as non-recurrent congestion events.
RECURRENT_CATEGORIES = frozenset({"roadworks", "weather"})

SERIES_HEADER = ["link_id", "timestamp", "speed_kmh", "flow_vph", "travel_time_s"]
EVENTS_HEADER = ["link_id", "category", "start", "end"]


class ParseError(ValueError):
    """Malformed input; carries the 1-based row number when applicable."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class TrafficSample:
    """One minute-resolution link observation.

    ``density`` (veh/km) is derived as flow/speed when speed is positive and
    both inputs are present, otherwise it is None ("missing").
    """

    link_id: str
    timestamp: datetime
    speed: float | None
    flow: float | None
    travel_time: float | None = None
    density: float | None = field(init=False, default=None)

    def __post_init__(self):
        if self.timestamp.tzinfo is None:
            raise ValueError("timestamp must be timezone-aware")
        object.__setattr__(self, "timestamp", self.timestamp.astimezone(timezone.utc))
        if self.speed is not None and not 0.0 <= self.speed <= SPEED_MAX_KMH:
            raise ValueError(f"speed {self.speed} outside [0, {SPEED_MAX_KMH}] km/h")
        if self.flow is not None and not 0.0 <= self.flow <= FLOW_MAX_VPH:
            raise ValueError(f"flow {self.flow} outside [0, {FLOW_MAX_VPH}] veh/h")
        if self.travel_time is not None and self.travel_time < 0:
            raise ValueError(f"travel_time {self.travel_time} negative")
        if self.speed is not None and self.flow is not None and self.speed > 0:
            object.__setattr__(self, "density", self.flow / self.speed)

    @property
    def has_density(self) -> bool:
        return self.density is not None


@dataclass(frozen=True)
class LinkMeta:
    """Static link attributes; lengths outside the expected range warn."""

    link_id: str
    length_m: float
    location_label: str = ""

    def __post_init__(self):
        if self.length_m <= 0:
            raise ValueError(f"link length {self.length_m} must be positive")
        if not 200.0 <= self.length_m <= 10000.0:
            warnings.warn(
                f"link {self.link_id}: length {self.length_m} m outside the expected 200-10000 m range",
                stacklevel=2,
            )


@dataclass(frozen=True)
class EventLabel:
    """A labelled event interval on a link."""

    link_id: str
    category: str
    start: datetime
    end: datetime

    def __post_init__(self):
        if self.category not in EVENT_CATEGORIES:
            raise ValueError(f"unknown event category {self.category!r}")
        if self.start.tzinfo is None or self.end.tzinfo is None:
            raise ValueError("event instants must be timezone-aware")
        object.__setattr__(self, "start", self.start.astimezone(timezone.utc))
        object.__setattr__(self, "end", self.end.astimezone(timezone.utc))
        if self.end < self.start:
            raise ValueError(f"event end {self.end.isoformat()} precedes start {self.start.isoformat()}")

    @property
    def duration_minutes(self) -> float:
        return (self.end - self.start).total_seconds() / 60.0


def parse_timestamp(text: str) -> datetime:
    """Parse an RFC 3339 timestamp into an aware UTC datetime."""
    raw = text.strip()
    if raw.endswith(("Z", "z")):
        raw = raw[:-1] + "+00:00"
    ts = datetime.fromisoformat(raw)
    if ts.tzinfo is None:
        raise ValueError(f"timestamp {text!r} lacks a UTC offset")
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def _text_reader(source) -> IO[str]:
    if isinstance(source, (str, Path)):
        return open(source, "r", encoding="utf-8", newline="")
    if isinstance(source, bytes):
        return io.StringIO(source.decode("utf-8"))
    if isinstance(source, io.TextIOBase):
        return source
    # binary file-like
    return io.TextIOWrapper(source, encoding="utf-8", newline="")


def _optional_float(text: str, what: str, row: int) -> float | None:
    text = text.strip()
    if text == "":
        return None
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"{what} {text!r} is not numeric", row) from None
    return value


def parse_series(source) -> list[TrafficSample]:
    """Parse a link time-series CSV into samples.

    The header must be ``link_id,timestamp,speed_kmh,flow_vph`` with an
    optional trailing ``travel_time_s`` column. Empty speed/flow cells mark
    missing readings. Timestamps must be strictly increasing per link;
    duplicates are rejected with the offending row number. Gaps are kept as
    gaps (no imputation).
    """
    handle = _text_reader(source)
    reader = csv.reader(handle)
    try:
        header = next(reader, None)
        if header is None:
            raise ParseError("empty input, expected a header row", 1)
        header = [h.strip() for h in header]
        if header not in (SERIES_HEADER, SERIES_HEADER[:4]):
            raise ParseError(f"unexpected header {header!r}", 1)
        has_tt = len(header) == 5

        samples: list[TrafficSample] = []
        last_seen: dict[str, datetime] = {}
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", row_no)
            link_id = row[0].strip()
            if not link_id:
                raise ParseError("empty link_id", row_no)
            try:
                ts = parse_timestamp(row[1])
            except ValueError as exc:
                raise ParseError(str(exc), row_no) from None
            speed = _optional_float(row[2], "speed", row_no)
            flow = _optional_float(row[3], "flow", row_no)
            travel_time = _optional_float(row[4], "travel_time", row_no) if has_tt else None
            prev = last_seen.get(link_id)
            if prev is not None:
                if ts == prev:
                    raise ParseError(f"duplicate timestamp {format_timestamp(ts)} for link {link_id}", row_no)
                if ts < prev:
                    raise ParseError(
                        f"non-monotone timestamp {format_timestamp(ts)} for link {link_id}", row_no
                    )
            last_seen[link_id] = ts
            try:
                samples.append(TrafficSample(link_id, ts, speed, flow, travel_time))
            except ValueError as exc:
                raise ParseError(str(exc), row_no) from None
        return samples
    finally:
        if handle is not source and isinstance(source, (str, Path)):
            handle.close()


def write_series(samples: Iterable[TrafficSample], sink) -> None:
    """Write samples in the canonical series CSV schema (UTF-8, RFC 3339)."""
    own = isinstance(sink, (str, Path))
    handle = open(sink, "w", encoding="utf-8", newline="") if own else sink
    try:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(SERIES_HEADER)
        for s in samples:
            writer.writerow(
                [
                    s.link_id,
                    format_timestamp(s.timestamp),
                    _format_value(s.speed),
                    _format_value(s.flow),
                    _format_value(s.travel_time),
                ]
            )
    finally:
        if own:
            handle.close()


def _format_value(value: float | None) -> str:
    if value is None:
        return ""
    return repr(value)


def parse_events(source) -> list[EventLabel]:
    """Parse an event-label CSV; unknown categories map to ``other`` with a warning."""
    handle = _text_reader(source)
    reader = csv.reader(handle)
    try:
        header = next(reader, None)
        if header is None:
            raise ParseError("empty input, expected a header row", 1)
        if [h.strip() for h in header] != EVENTS_HEADER:
            raise ParseError(f"unexpected header {header!r}", 1)
        labels: list[EventLabel] = []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(f"expected 4 fields, got {len(row)}", row_no)
            link_id = row[0].strip()
            category = row[1].strip().lower()
            if category not in EVENT_CATEGORIES:
                warnings.warn(f"row {row_no}: unknown category {category!r} mapped to 'other'", stacklevel=2)
                category = "other"
            try:
                start = parse_timestamp(row[2])
                end = parse_timestamp(row[3])
                labels.append(EventLabel(link_id, category, start, end))
            except ValueError as exc:
                raise ParseError(str(exc), row_no) from None
        return labels
    finally:
        if handle is not source and isinstance(source, (str, Path)):
            handle.close()


def write_events(labels: Iterable[EventLabel], sink) -> None:
    own = isinstance(sink, (str, Path))
    handle = open(sink, "w", encoding="utf-8", newline="") if own else sink
    try:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(EVENTS_HEADER)
        for label in labels:
            writer.writerow(
                [label.link_id, label.category, format_timestamp(label.start), format_timestamp(label.end)]
            )
    finally:
        if own:
            handle.close()


def nonrecurrent_filter(labels: Sequence[EventLabel]) -> list[EventLabel]:
    """Drop roadworks and weather labels, which are not non-recurrent congestion."""
    return [label for label in labels if label.category not in RECURRENT_CATEGORIES]


def by_link(samples: Iterable[TrafficSample]) -> dict[str, list[TrafficSample]]:
    """Group samples by link, preserving the per-link time order."""
    grouped: dict[str, list[TrafficSample]] = {}
    for s in samples:
        grouped.setdefault(s.link_id, []).append(s)
    return grouped
