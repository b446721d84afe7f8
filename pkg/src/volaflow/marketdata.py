"""Quote ingestion, mid-prices, daily realized volatility and z-scoring.

Prices enter as five-minute bid/ask snapshots (schema A) or as precomputed
mid-prices (schema B). Each trading day is reduced to one realized
volatility value; the overnight return between days is never used.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateDataError, InputError

SCHEMA_A = ("symbol", "day", "slot", "bid_price", "bid_volume", "ask_price", "ask_volume")
SCHEMA_B = ("symbol", "day", "slot", "price")
RV_HEADER = ("symbol", "day", "rv_raw")

DEFAULT_SPLIT = (300, 60, 120)
# 22 lags plus one target
MIN_TRAIN_LEN = 23


@dataclass(frozen=True)
class QuoteTick:
    day_index: int
    slot_index: int
    bid_price: float
    bid_volume: float
    ask_price: float
    ask_volume: float

    def __post_init__(self):
        if not (self.bid_price > 0 and self.ask_price > 0):
            raise InputError("quote prices must be positive")
        if not self.bid_price < self.ask_price:
            raise InputError(
                f"crossed quote: bid {self.bid_price} >= ask {self.ask_price}"
            )
        if self.bid_volume < 0 or self.ask_volume < 0:
            raise InputError("quote volumes must be nonnegative")
        if self.bid_volume + self.ask_volume <= 0:
            raise InputError("zero total quote volume; mid-price weight undefined")


@dataclass(frozen=True)
class DayQuotes:
    day_index: int
    ticks: tuple[QuoteTick, ...]

    def __post_init__(self):
        if len(self.ticks) < 2:
            raise InputError(
                f"day {self.day_index} has {len(self.ticks)} tick(s); RV needs at least 2"
            )
        slots = [t.slot_index for t in self.ticks]
        if any(a >= b for a, b in zip(slots, slots[1:])):
            raise InputError(f"day {self.day_index}: slot indices not strictly increasing")
        if any(t.day_index != self.day_index for t in self.ticks):
            raise InputError(f"day {self.day_index}: tick with a different day index")


@dataclass(frozen=True)
class RvSeries:
    """Standardized RV of one symbol, with the moments used to standardize it."""

    symbol: str
    values: np.ndarray
    raw_mean: float
    raw_variance: float

    def raw(self) -> np.ndarray:
        return destandardize(self.values, self.raw_mean, self.raw_variance)


@dataclass
class RvPanel:
    series: list[RvSeries]
    split: tuple[int, int, int] = DEFAULT_SPLIT
    days: list[int] | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.series:
            raise InputError("panel has no series")
        lengths = {len(s.values) for s in self.series}
        if len(lengths) != 1:
            raise InputError(f"series lengths differ: {sorted(lengths)}")
        train, valid, test = self.split
        if train < MIN_TRAIN_LEN:
            raise InputError(f"train_len={train} < {MIN_TRAIN_LEN}")
        if valid < 0 or test < 0:
            raise InputError("split lengths must be nonnegative")
        if train + valid + test > self.length:
            raise InputError(
                f"split {self.split} needs {train + valid + test} days, series have {self.length}"
            )

    @property
    def length(self) -> int:
        return len(self.series[0].values)

    @property
    def symbols(self) -> list[str]:
        return [s.symbol for s in self.series]

    @property
    def values(self) -> np.ndarray:
        """(n_series, T) array of standardized RV."""
        return np.stack([s.values for s in self.series])

    def region(self, name: str) -> tuple[int, int]:
        """Half-open target index range [start, stop) of a split region."""
        train, valid, test = self.split
        bounds = {
            "train": (0, train),
            "validation": (train, train + valid),
            "test": (train + valid, train + valid + test),
        }
        try:
            return bounds[name]
        except KeyError:
            raise ValueError(f"unknown region {name!r}") from None


def mid_price(tick: QuoteTick) -> float:
    """Volume-weighted mid-price.

    The bid price is weighted by the *bid* volume, so a quote with no bid
    volume prices at the ask.
    """
    alpha = tick.bid_volume / (tick.ask_volume + tick.bid_volume)
    return alpha * tick.bid_price + (1.0 - alpha) * tick.ask_price


def rv_from_prices(prices: Sequence[float]) -> float:
    prices = np.asarray(prices, dtype=float)
    if prices.size < 2:
        raise InputError("realized volatility needs at least 2 prices")
    if np.any(prices <= 0):
        raise InputError("prices must be positive")
    returns = np.diff(np.log(prices))
    return float(math.sqrt(np.dot(returns, returns)))


def daily_rv(day: DayQuotes) -> float:
    """Root sum of squared intraday log mid-price returns."""
    return rv_from_prices([mid_price(t) for t in day.ticks])


def standardize(raw: Sequence[float]) -> tuple[np.ndarray, float, float]:
    """Z-score with the population variance; returns (values, mean, variance)."""
    raw = np.asarray(raw, dtype=float)
    if raw.size < 2:
        raise DegenerateDataError("standardize needs at least 2 values")
    mean = float(raw.mean())
    variance = float(np.mean((raw - mean) ** 2))
    if not variance > 0:
        raise DegenerateDataError("zero-variance series cannot be standardized")
    return (raw - mean) / math.sqrt(variance), mean, variance


def destandardize(values: Sequence[float], mean: float, variance: float) -> np.ndarray:
    return np.asarray(values, dtype=float) * math.sqrt(variance) + mean


def make_series(symbol: str, raw: Sequence[float]) -> RvSeries:
    try:
        values, mean, var = standardize(raw)
    except DegenerateDataError as exc:
        raise DegenerateDataError(f"series {symbol!r}: {exc}") from None
    return RvSeries(symbol, values, mean, var)


# -- file ingestion -----------------------------------------------------------


def _read_rows(path: Path, header: Sequence[str]) -> Iterable[tuple[int, dict]]:
    if not path.exists():
        raise InputError(f"input file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(h.strip() for h in reader.fieldnames) != tuple(header):
            raise InputError(f"{path}: expected header {','.join(header)}, got {reader.fieldnames}")
        # row numbers count the header as line 1
        for lineno, row in enumerate(reader, start=2):
            yield lineno, row


def _parse_quote_row(lineno: int, row: dict, schema: str) -> tuple[str, int, int, float]:
    try:
        symbol = row["symbol"].strip()
        day = int(row["day"])
        slot = int(row["slot"])
        if not symbol:
            raise ValueError("empty symbol")
        if schema == "A":
            tick = QuoteTick(
                day, slot,
                float(row["bid_price"]), float(row["bid_volume"]),
                float(row["ask_price"]), float(row["ask_volume"]),
            )
            price = mid_price(tick)
        else:
            price = float(row["price"])
            if not price > 0:
                raise ValueError(f"nonpositive price {price}")
    except (ValueError, TypeError, AttributeError, InputError) as exc:
        raise InputError(f"row {lineno}: {exc}") from None
    return symbol, day, slot, price


def _common_days(by_symbol: dict[str, dict[int, object]]) -> list[int]:
    day_sets = {sym: frozenset(days) for sym, days in by_symbol.items()}
    union = frozenset().union(*day_sets.values())
    offending = sorted(sym for sym, days in day_sets.items() if days != union)
    if offending:
        detail = ", ".join(
            f"{sym} ({len(day_sets[sym])} of {len(union)} days)" for sym in offending
        )
        raise InputError(f"symbols with missing days: {detail}")
    return sorted(union)


def _check_length(n_days: int, split: Sequence[int] | None):
    if split is not None and n_days < sum(split):
        raise InputError(f"series have {n_days} days, split {tuple(split)} needs {sum(split)}")


def quotes_to_rv(path, schema: str = "A") -> dict[str, dict[int, float]]:
    """Read a quote file and return ``{symbol: {day: rv_raw}}``."""
    schema = schema.upper()
    if schema not in ("A", "B"):
        raise InputError(f"unknown schema {schema!r}")
    header = SCHEMA_A if schema == "A" else SCHEMA_B
    prices: dict[str, dict[int, list[tuple[int, int, float]]]] = defaultdict(lambda: defaultdict(list))
    errors = []
    for lineno, row in _read_rows(Path(path), header):
        try:
            symbol, day, slot, price = _parse_quote_row(lineno, row, schema)
        except InputError as exc:
            errors.append(str(exc))
            continue
        prices[symbol][day].append((slot, lineno, price))
    if errors:
        raise InputError("; ".join(errors))
    if not prices:
        raise InputError(f"{path}: no data rows")

    rv: dict[str, dict[int, float]] = {}
    for symbol, days in prices.items():
        rv[symbol] = {}
        for day, ticks in days.items():
            ticks.sort()
            dups = [ln for (prev, _, _), (slot, ln, _) in zip(ticks, ticks[1:]) if slot == prev]
            if dups:
                errors.append(f"row {dups[0]}: duplicate slot for {symbol} day {day}")
                continue
            if len(ticks) < 2:
                errors.append(f"row {ticks[0][1]}: {symbol} day {day} has fewer than 2 ticks")
                continue
            rv[symbol][day] = rv_from_prices([p for _, _, p in ticks])
    if errors:
        raise InputError("; ".join(errors))
    return rv


def panel_from_rv(rv: dict[str, dict[int, float]], split=DEFAULT_SPLIT) -> RvPanel:
    days = _common_days(rv)
    _check_length(len(days), split)
    series = [make_series(sym, [rv[sym][d] for d in days]) for sym in sorted(rv)]
    return RvPanel(series, tuple(split), days)


def ingest_quotes(path, schema: str = "A", split=DEFAULT_SPLIT) -> RvPanel:
    """Quote CSV (schema A or B) to a standardized RV panel."""
    return panel_from_rv(quotes_to_rv(path, schema), split)


def write_rv_csv(path, rv: dict[str, dict[int, float]]):
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RV_HEADER)
        for symbol in sorted(rv):
            for day in sorted(rv[symbol]):
                writer.writerow([symbol, day, repr(float(rv[symbol][day]))])


def read_rv_csv(path) -> dict[str, dict[int, float]]:
    rv: dict[str, dict[int, float]] = defaultdict(dict)
    errors = []
    for lineno, row in _read_rows(Path(path), RV_HEADER):
        try:
            symbol = row["symbol"].strip()
            day = int(row["day"])
            value = float(row["rv_raw"])
            if not math.isfinite(value):
                raise ValueError(f"non-finite rv {value}")
            if day in rv[symbol]:
                raise ValueError(f"duplicate day {day} for {symbol}")
        except (ValueError, TypeError, AttributeError) as exc:
            errors.append(f"row {lineno}: {exc}")
            continue
        rv[symbol][day] = value
    if errors:
        raise InputError("; ".join(errors))
    if not rv:
        raise InputError(f"{path}: no data rows")
    return dict(rv)


def load_rv_panel(path, split=DEFAULT_SPLIT) -> RvPanel:
    return panel_from_rv(read_rv_csv(path), split)


def standardization_sidecar(panel: RvPanel) -> dict:
    return {s.symbol: {"mean": s.raw_mean, "variance": s.raw_variance} for s in panel.series}


def write_sidecar(path, panel: RvPanel):
    Path(path).write_text(json.dumps(standardization_sidecar(panel), indent=2, sort_keys=True))
