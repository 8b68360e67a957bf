"""Raw point events -> per-slot count grids, labels, calendar features, splits."""
from __future__ import annotations

import calendar
import csv
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

CHICAGO_CATEGORIES = (
    "THEFT",
    "BURGLARY",
    "ASSAULT",
    "DECEPTIVE PRACTICE",
    "CRIMINAL DAMAGE",
    "NARCOTICS",
    "BATTERY",
    "ROBBERY",
)

CHICAGO_SCHEMA = {
    "timestamp": "Date",
    "lat": "Latitude",
    "lon": "Longitude",
    "category": "Primary Type",
}

DATASET_MAGIC = b"GDF1"
N_CALENDAR = 6


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    def __post_init__(self):
        if not (self.lat_min < self.lat_max and self.lon_min < self.lon_max):
            raise ValueError(f"degenerate bounding box {self}")

    def contains(self, lat: float, lon: float) -> bool:
        return self.lat_min <= lat <= self.lat_max and self.lon_min <= lon <= self.lon_max

    def normalize(self, lat, lon):
        """Map (lat, lon) to unit-square coordinates (x from lon, y from lat)."""
        x = (np.asarray(lon, dtype=float) - self.lon_min) / (self.lon_max - self.lon_min)
        y = (np.asarray(lat, dtype=float) - self.lat_min) / (self.lat_max - self.lat_min)
        return x, y


CHICAGO_BBOX = BoundingBox(lat_min=41.60, lat_max=42.05, lon_min=-87.9, lon_max=-87.5)
UNIT_BBOX = BoundingBox(0.0, 1.0, 0.0, 1.0)


@dataclass(frozen=True)
class GridSpec:
    """An I x J raster over ``bbox``; row 0 is the southern edge."""

    bbox: BoundingBox
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid needs at least one row and column")

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    def cell_centers(self) -> np.ndarray:
        """Normalized (x, y) of every cell center, row-major, shape (I*J, 2)."""
        return cell_centers(self.rows, self.cols)

    def cell_index(self, x, y):
        """Row and column for normalized coordinates; the upper edge is closed."""
        row = np.clip(np.floor(np.asarray(y) * self.rows).astype(int), 0, self.rows - 1)
        col = np.clip(np.floor(np.asarray(x) * self.cols).astype(int), 0, self.cols - 1)
        return row, col


def cell_centers(rows: int, cols: int) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return np.column_stack([((jj + 0.5) / cols).ravel(), ((ii + 0.5) / rows).ravel()])


@dataclass
class EventRecord:
    timestamp: datetime
    lat: float
    lon: float
    category: str


@dataclass
class EventGrid:
    """Per-slot, per-cell, per-category counts plus calendar features.

    ``counts`` has shape (T, I, J, L) and ``calendar`` shape (T, 6).
    """

    counts: np.ndarray
    calendar: np.ndarray
    start: date = date(2015, 1, 1)
    slot_hours: int = 24
    categories: tuple = ()

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.calendar = np.asarray(self.calendar, dtype=np.float64)
        if self.counts.ndim != 4:
            raise ValueError("counts must be (T, I, J, L)")
        if self.calendar.shape != (self.counts.shape[0], N_CALENDAR):
            raise ValueError("calendar must be (T, 6)")
        if np.any(self.counts < 0):
            raise ValueError("negative event counts")

    @property
    def n_slots(self) -> int:
        return self.counts.shape[0]

    @property
    def shape(self) -> tuple:
        return self.counts.shape[1:3]

    @property
    def n_categories(self) -> int:
        return self.counts.shape[3]

    @property
    def totals(self) -> np.ndarray:
        """E_t for every slot, shape (T, I, J)."""
        return self.counts.sum(axis=3)

    def slot_start(self, t: int) -> datetime:
        return datetime.combine(self.start, datetime.min.time()) + timedelta(hours=self.slot_hours * t)

    def slot_date(self, t: int) -> date:
        return self.slot_start(t).date()

    def subset(self, slots: slice) -> "EventGrid":
        first = range(self.n_slots)[slots].start
        return EventGrid(self.counts[slots], self.calendar[slots],
                         start=self.slot_date(first), slot_hours=self.slot_hours,
                         categories=self.categories)


# ---------------------------------------------------------------------------
# parsing

_TS_FORMATS = ("%m/%d/%Y %I:%M:%S %p", "%m/%d/%Y %H:%M:%S", "%m/%d/%Y")


def parse_timestamp(text: str) -> datetime:
    text = text.strip()
    try:
        return datetime.fromisoformat(text.replace("Z", "+00:00")).replace(tzinfo=None)
    except ValueError:
        pass
    for fmt in _TS_FORMATS:
        try:
            return datetime.strptime(text, fmt)
        except ValueError:
            continue
    raise ValueError(f"unrecognised timestamp {text!r}")


def parse_events(source: TextIO | Iterable[str], schema: dict | None = None,
                 whitelist: Sequence[str] = CHICAGO_CATEGORIES, bbox: BoundingBox = CHICAGO_BBOX,
                 delimiter: str = ",") -> tuple[list[EventRecord], Counter]:
    """Read delimited text into records that pass all filters.

    Returns ``(records, rejects)`` where ``rejects`` counts rows by reason:
    ``bad-parse``, ``non-whitelisted`` or ``out-of-bbox``.
    """
    schema = dict(CHICAGO_SCHEMA if schema is None else schema)
    allowed = {c.strip().upper() for c in whitelist}
    reader = csv.reader(source, delimiter=delimiter)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataFormatError("empty input: header row required") from None
    missing = [col for col in schema.values() if col not in header]
    if missing:
        raise DataFormatError(f"missing mapped column(s) {missing} in header {header}")
    idx = {role: header.index(col) for role, col in schema.items()}

    records, rejects = [], Counter()
    for row in reader:
        if not row:
            continue
        try:
            ts = parse_timestamp(row[idx["timestamp"]])
            lat = float(row[idx["lat"]])
            lon = float(row[idx["lon"]])
            cat = row[idx["category"]].strip().upper()
            if not (math.isfinite(lat) and math.isfinite(lon)):
                raise ValueError
        except (ValueError, IndexError):
            rejects["bad-parse"] += 1
            continue
        if cat not in allowed:
            rejects["non-whitelisted"] += 1
            continue
        if not bbox.contains(lat, lon):
            rejects["out-of-bbox"] += 1
            continue
        records.append(EventRecord(ts, lat, lon, cat))
    return records, rejects


# ---------------------------------------------------------------------------
# rasterization


def rasterize(records: Sequence[EventRecord], grid: GridSpec, slot_hours: int = 24,
              start: date | None = None, n_slots: int | None = None,
              categories: Sequence[str] = CHICAGO_CATEGORIES,
              holidays: Iterable[date] | None = None) -> EventGrid:
    """Count events per (slot, row, col, category).

    The study period starts at midnight of ``start`` (default: the earliest
    record's date) and spans ``n_slots`` slots (default: enough to hold the
    last record). Events outside the period are ignored.
    """
    if 24 % slot_hours and slot_hours % 24:
        raise ValueError("slot_hours must divide or be a multiple of 24")
    cats = [c.upper() for c in categories]
    if start is None:
        start = min(r.timestamp for r in records).date() if records else date(2015, 1, 1)
    origin = datetime.combine(start, datetime.min.time())
    slot_seconds = slot_hours * 3600.0
    slots = np.array([math.floor((r.timestamp - origin).total_seconds() / slot_seconds)
                      for r in records], dtype=np.int64)
    if n_slots is None:
        n_slots = int(slots.max()) + 1 if len(slots) else 1
    lat = np.array([r.lat for r in records], dtype=float)
    lon = np.array([r.lon for r in records], dtype=float)
    cat = np.array([cats.index(r.category.upper()) for r in records], dtype=np.int64)
    x, y = grid.bbox.normalize(lat, lon)
    row, col = grid.cell_index(x, y)
    keep = (slots >= 0) & (slots < n_slots)
    counts = np.zeros((n_slots, grid.rows, grid.cols, len(cats)), dtype=np.int64)
    np.add.at(counts, (slots[keep], row[keep], col[keep], cat[keep]), 1)
    holiday_set = None if holidays is None else set(holidays)
    cal = np.array([calendar_features((origin + timedelta(hours=slot_hours * t)).date(), holiday_set)
                    for t in range(n_slots)]).reshape(n_slots, N_CALENDAR)
    return EventGrid(counts, cal, start=start, slot_hours=slot_hours, categories=tuple(cats))


def rasterize_points(xy: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Count normalized points into an (I, J) array."""
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    row, col = grid.cell_index(xy[:, 0], xy[:, 1])
    out = np.zeros((grid.rows, grid.cols), dtype=np.int64)
    np.add.at(out, (row, col), 1)
    return out


def aggregate_training_grid(grids: EventGrid | np.ndarray) -> np.ndarray:
    """Q = sum over slots of E_t."""
    totals = grids.totals if isinstance(grids, EventGrid) else np.asarray(grids)
    if totals.shape[0] < 1:
        raise ValueError("need at least one slot")
    return totals.sum(axis=0)


def build_labels(grid: EventGrid, t: int) -> np.ndarray:
    """Binary occupancy q_t: 1 where at least one event fell in the cell."""
    if not 0 <= t < grid.n_slots:
        raise IndexError(f"slot {t} outside [0, {grid.n_slots})")
    return (grid.totals[t] >= 1).astype(np.int8)


# ---------------------------------------------------------------------------
# calendar


def _nth_weekday(year, month, weekday, n):
    if n > 0:
        first = date(year, month, 1)
        offset = (weekday - first.weekday()) % 7
        return first + timedelta(days=offset + 7 * (n - 1))
    last = date(year, month, calendar.monthrange(year, month)[1])
    return last - timedelta(days=(last.weekday() - weekday) % 7)


def us_federal_holidays(year: int) -> set[date]:
    days = {
        date(year, 1, 1),
        _nth_weekday(year, 1, calendar.MONDAY, 3),
        _nth_weekday(year, 2, calendar.MONDAY, 3),
        _nth_weekday(year, 5, calendar.MONDAY, -1),
        date(year, 7, 4),
        _nth_weekday(year, 9, calendar.MONDAY, 1),
        _nth_weekday(year, 10, calendar.MONDAY, 2),
        date(year, 11, 11),
        _nth_weekday(year, 11, calendar.THURSDAY, 4),
        date(year, 12, 25),
    }
    if year >= 2021:
        days.add(date(year, 6, 19))
    return days


def calendar_features(day: date, holidays: set | None = None) -> np.ndarray:
    """(is_weekend, is_holiday, day-of-week sin/cos, day-of-year sin/cos) in [0, 1]."""
    if isinstance(day, datetime):
        day = day.date()
    if holidays is None:
        holidays = us_federal_holidays(day.year)
    dow = 2 * math.pi * day.weekday() / 7
    year_len = 366 if calendar.isleap(day.year) else 365
    doy = 2 * math.pi * (day.timetuple().tm_yday - 1) / year_len
    return np.array([
        1.0 if day.weekday() >= 5 else 0.0,
        1.0 if day in holidays else 0.0,
        (math.sin(dow) + 1) / 2,
        (math.cos(dow) + 1) / 2,
        (math.sin(doy) + 1) / 2,
        (math.cos(doy) + 1) / 2,
    ])


# ---------------------------------------------------------------------------
# splits


@dataclass
class Splits:
    train: slice
    val: slice
    test: slice

    def as_dict(self):
        return {"train": self.train, "val": self.val, "test": self.test}


def split_chronological(grids: EventGrid, year: int | None = None,
                        train_months: int = 10, val_months: int = 1) -> Splits:
    """Slot ranges for months 1-10 / 11 / 12 of ``year``."""
    if grids.slot_hours != 24:
        raise ValueError("chronological month splits assume daily slots")
    year = grids.start.year if year is None else year
    first = (date(year, 1, 1) - grids.start).days
    n_days = 366 if calendar.isleap(year) else 365
    missing = [date(year, 1, 1) + timedelta(days=d) for d in range(n_days)
               if not 0 <= first + d < grids.n_slots]
    if missing:
        shown = ", ".join(str(d) for d in missing[:5])
        raise ValueError(f"incomplete year {year}: {len(missing)} missing slots ({shown}{', ...' if len(missing) > 5 else ''})")

    def month_start(m):
        return first + (date(year, m, 1) - date(year, 1, 1)).days

    val_start = month_start(train_months + 1)
    test_start = month_start(train_months + val_months + 1)
    return Splits(slice(first, val_start), slice(val_start, test_start), slice(test_start, first + n_days))


# ---------------------------------------------------------------------------
# processed dataset file: "GDF1", u32 I J L T, u32 counts (T,I,J,L), f64 calendar (T,6)


def save_dataset(grid: EventGrid, path) -> None:
    T, I, J, L = grid.counts.shape
    if grid.counts.max(initial=0) > np.iinfo(np.uint32).max:
        raise OverflowError("cell count exceeds u32")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<4I", I, J, L, T))
        fh.write(grid.counts.astype("<u4").tobytes())
        fh.write(grid.calendar.astype("<f8").tobytes())


def load_dataset(path, start: date | None = None, slot_hours: int = 24,
                 categories: Sequence[str] = ()) -> EventGrid:
    raw = Path(path).read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise DataFormatError(f"{path}: not a GDF1 dataset")
    if len(raw) < 20:
        raise DataFormatError(f"{path}: truncated header")
    I, J, L, T = struct.unpack_from("<4I", raw, 4)
    n_counts = T * I * J * L
    expected = 20 + 4 * n_counts + 8 * T * N_CALENDAR
    if len(raw) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    counts = np.frombuffer(raw, dtype="<u4", count=n_counts, offset=20).reshape(T, I, J, L)
    cal = np.frombuffer(raw, dtype="<f8", count=T * N_CALENDAR, offset=20 + 4 * n_counts)
    return EventGrid(counts.astype(np.int64), cal.reshape(T, N_CALENDAR).copy(),
                     start=start or date(2015, 1, 1), slot_hours=slot_hours,
                     categories=tuple(categories))


# ---------------------------------------------------------------------------
# key=value config text


@dataclass
class DataConfig:
    bbox: BoundingBox = CHICAGO_BBOX
    rows: int = 50
    cols: int = 33
    slot_hours: int = 24
    categories: tuple = CHICAGO_CATEGORIES
    holidays: tuple | None = None
    schema: dict = field(default_factory=lambda: dict(CHICAGO_SCHEMA))
    start: date | None = None
    n_slots: int | None = None
    delimiter: str = ","

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.bbox, self.rows, self.cols)


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataFormatError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text())


def _split_list(v: str) -> list[str]:
    return [item.strip() for item in v.split(",") if item.strip()]


def data_config_from_kv(kv: dict[str, str], base: DataConfig | None = None) -> DataConfig:
    """Overlay recognised keys onto ``base``.

    Keys: ``lat_min lat_max lon_min lon_max rows cols slot_hours categories
    holidays start n_slots delimiter col_timestamp col_lat col_lon col_category``.
    Lists are comma separated; dates are ISO.
    """
    cfg = base or DataConfig()
    bbox = {f: getattr(cfg.bbox, f) for f in ("lat_min", "lat_max", "lon_min", "lon_max")}
    for f in bbox:
        if f in kv:
            bbox[f] = float(kv[f])
    cfg.bbox = BoundingBox(**bbox)
    for f in ("rows", "cols", "slot_hours", "n_slots"):
        if f in kv:
            setattr(cfg, f, int(kv[f]))
    if "categories" in kv:
        cfg.categories = tuple(c.upper() for c in _split_list(kv["categories"]))
    if "holidays" in kv:
        cfg.holidays = tuple(date.fromisoformat(d) for d in _split_list(kv["holidays"]))
    if "start" in kv:
        cfg.start = date.fromisoformat(kv["start"])
    if "delimiter" in kv:
        cfg.delimiter = {"tab": "\t", "\\t": "\t"}.get(kv["delimiter"], kv["delimiter"])
    for role in ("timestamp", "lat", "lon", "category"):
        if f"col_{role}" in kv:
            cfg.schema[role] = kv[f"col_{role}"]
    return cfg
