"""Price and return panels: ingest, transform, synthesize, persist."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

FREQUENCIES = ("tick", "minute", "hour", "day", "week")
_FREQ_RANK = {f: i for i, f in enumerate(FREQUENCIES)}

PANEL_MAGIC = b"FWTPANEL1\n"
MAX_MISSING_FRACTION = 0.10


class PanelError(ValueError):
    """Raised for malformed, corrupt or too-short panel data."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


def _check_index(symbols: Sequence[str], timestamps: np.ndarray) -> None:
    if len(set(symbols)) != len(symbols):
        raise PanelError("duplicate symbols")
    if len(timestamps) > 1 and not np.all(np.diff(timestamps.astype("int64")) > 0):
        raise PanelError("timestamps must be strictly increasing")


@dataclass(frozen=True)
class PricePanel:
    """Close prices indexed by (symbol, timestamp) at a single frequency."""

    symbols: tuple[str, ...]
    timestamps: np.ndarray  # datetime64[s]
    prices: np.ndarray  # [n_symbols, n_timestamps]
    frequency: str = "day"
    market: str = "SYNTH"
    dropped: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.frequency not in _FREQ_RANK:
            raise PanelError(f"unknown frequency {self.frequency!r}")
        ts = np.asarray(self.timestamps).astype("datetime64[s]")
        prices = np.asarray(self.prices, dtype=np.float64)
        if prices.shape != (len(self.symbols), len(ts)):
            raise PanelError(f"prices shape {prices.shape} does not match index")
        _check_index(self.symbols, ts)
        if not np.all(np.isfinite(prices)) or np.any(prices <= 0):
            raise PanelError("prices must be strictly positive and finite")
        object.__setattr__(self, "symbols", tuple(self.symbols))
        object.__setattr__(self, "timestamps", _frozen(ts))
        object.__setattr__(self, "prices", _frozen(prices))

    @property
    def n_symbols(self) -> int:
        return len(self.symbols)

    @property
    def n_timestamps(self) -> int:
        return len(self.timestamps)

    def index_of(self, symbol: str) -> int:
        try:
            return self.symbols.index(symbol)
        except ValueError:
            raise KeyError(f"symbol {symbol!r} not in panel") from None

    def row(self, symbol: str) -> np.ndarray:
        return self.prices[self.index_of(symbol)]


@dataclass(frozen=True)
class ReturnPanel:
    """Simple returns; ``timestamps[i]`` is the end of the period of ``returns[:, i]``."""

    symbols: tuple[str, ...]
    timestamps: np.ndarray
    returns: np.ndarray  # [n_symbols, n_timestamps]
    kind: str = "plain"
    frequency: str = "day"
    market: str = "SYNTH"

    def __post_init__(self):
        if self.kind not in ("plain", "excess"):
            raise PanelError(f"unknown return kind {self.kind!r}")
        ts = np.asarray(self.timestamps).astype("datetime64[s]")
        r = np.asarray(self.returns, dtype=np.float64)
        if r.ndim != 2 or r.shape != (len(self.symbols), len(ts)):
            raise PanelError(f"returns shape {r.shape} does not match index")
        _check_index(self.symbols, ts)
        if not np.all(np.isfinite(r)):
            raise PanelError("returns must be finite")
        object.__setattr__(self, "symbols", tuple(self.symbols))
        object.__setattr__(self, "timestamps", _frozen(ts))
        object.__setattr__(self, "returns", _frozen(r))

    @property
    def n_symbols(self) -> int:
        return len(self.symbols)

    @property
    def n_timestamps(self) -> int:
        return len(self.timestamps)

    def index_of(self, symbol: str) -> int:
        try:
            return self.symbols.index(symbol)
        except ValueError:
            raise KeyError(f"symbol {symbol!r} not in panel") from None

    def row(self, symbol: str) -> np.ndarray:
        return self.returns[self.index_of(symbol)]

    def window(self, symbol: str, start: int, length: int) -> "SeriesWindow":
        if start < 0 or length < 1 or start + length > self.n_timestamps:
            raise IndexError(f"window [{start}, {start + length}) outside panel")
        return SeriesWindow(symbol, start, length, self.row(symbol)[start : start + length])

    def select(self, symbols: Sequence[str]) -> "ReturnPanel":
        idx = [self.index_of(s) for s in symbols]
        return ReturnPanel(
            tuple(symbols), self.timestamps, self.returns[idx], self.kind, self.frequency, self.market
        )

    def slice_time(self, start: int, stop: int) -> "ReturnPanel":
        return ReturnPanel(
            self.symbols,
            self.timestamps[start:stop],
            self.returns[:, start:stop],
            self.kind,
            self.frequency,
            self.market,
        )


@dataclass(frozen=True)
class SeriesWindow:
    symbol: str
    start: int
    length: int
    values: np.ndarray

    def __post_init__(self):
        if self.length < 1 or len(self.values) != self.length:
            raise PanelError("window length must be >= 1 and match its values")
        object.__setattr__(self, "values", _frozen(np.asarray(self.values, dtype=np.float64)))


# ---------------------------------------------------------------------------
# ingest


def _parse_timestamps(col: pd.Series) -> pd.Series:
    if pd.api.types.is_integer_dtype(col) or pd.api.types.is_float_dtype(col):
        return pd.to_datetime(col.astype("int64"), unit="s")
    as_num = pd.to_numeric(col, errors="coerce")
    if as_num.notna().all():
        return pd.to_datetime(as_num.astype("int64"), unit="s")
    ts = pd.to_datetime(col, errors="coerce", utc=True)
    return ts.dt.tz_convert(None)


def ingest_csv(path: str | Path, market: str, frequency: str) -> PricePanel:
    """Read a long-format ``timestamp,symbol,close`` CSV into a cleaned panel.

    Gaps are forward-filled per symbol (leading gaps back-filled from the
    first observation). Symbols missing more than 10% of the union
    timestamp index are dropped and listed in ``panel.dropped``.
    """
    path = Path(path)
    try:
        df = pd.read_csv(path, encoding="utf-8", dtype={"symbol": str})
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise PanelError(f"cannot read {path}: {exc}") from exc
    missing_cols = {"timestamp", "symbol", "close"} - set(df.columns)
    if missing_cols:
        raise PanelError(f"{path}: missing columns {sorted(missing_cols)}")

    df = df[["timestamp", "symbol", "close"]].copy()
    df["timestamp"] = _parse_timestamps(df["timestamp"])
    df["close"] = pd.to_numeric(df["close"], errors="coerce")
    df = df.dropna()
    if df.empty:
        raise PanelError(f"{path}: zero parseable rows")

    wide = df.pivot_table(index="symbol", columns="timestamp", values="close", aggfunc="last")
    wide = wide.sort_index(axis=0).sort_index(axis=1)
    n_ts = wide.shape[1]
    missing_frac = wide.isna().sum(axis=1) / n_ts
    dropped = tuple(str(s) for s in wide.index[missing_frac > MAX_MISSING_FRACTION])
    kept = wide.loc[missing_frac <= MAX_MISSING_FRACTION]
    if dropped:
        logger.info("dropping %d symbols with >10%% missing cells: %s", len(dropped), dropped)
    if kept.empty:
        raise PanelError(f"{path}: every symbol exceeds the missing-data limit")
    kept = kept.ffill(axis=1).bfill(axis=1)
    values = kept.to_numpy(dtype=np.float64)
    if np.any(values <= 0) or not np.all(np.isfinite(values)):
        raise PanelError(f"{path}: non-positive price after cleaning")
    return PricePanel(
        symbols=tuple(str(s) for s in kept.index),
        timestamps=kept.columns.to_numpy().astype("datetime64[s]"),
        prices=values,
        frequency=frequency,
        market=market,
        dropped=dropped,
    )


# ---------------------------------------------------------------------------
# transforms


def to_returns(panel: PricePanel) -> ReturnPanel:
    if panel.n_timestamps < 2:
        raise PanelError("need at least 2 timestamps to form returns")
    p = panel.prices
    if np.any(p == 0):
        raise PanelError("zero price in panel")
    r = (p[:, 1:] - p[:, :-1]) / p[:, :-1]
    return ReturnPanel(panel.symbols, panel.timestamps[1:], r, "plain", panel.frequency, panel.market)


def excess_returns(panel: ReturnPanel) -> ReturnPanel:
    """De-mean each timestamp by the equal-weight cross-sectional mean."""
    if panel.kind != "plain":
        raise PanelError("excess_returns expects plain returns")
    r = panel.returns - panel.returns.mean(axis=0, keepdims=True)
    return ReturnPanel(panel.symbols, panel.timestamps, r, "excess", panel.frequency, panel.market)


def clip_outliers(panel: ReturnPanel, n_sigma: float = 5.0) -> ReturnPanel:
    """Clip each cell to ``n_sigma`` cross-sectional standard deviations."""
    r = panel.returns
    mu = r.mean(axis=0, keepdims=True)
    sd = r.std(axis=0, keepdims=True)
    clipped = np.clip(r, mu - n_sigma * sd, mu + n_sigma * sd)
    return ReturnPanel(panel.symbols, panel.timestamps, clipped, panel.kind, panel.frequency, panel.market)


def bucket_keys(timestamps: np.ndarray, frequency: str) -> np.ndarray:
    """Calendar bucket id of each timestamp at ``frequency`` (weeks start Monday)."""
    secs = np.asarray(timestamps).astype("datetime64[s]").astype(np.int64)
    if frequency == "tick":
        return secs
    if frequency == "minute":
        return secs // 60
    if frequency == "hour":
        return secs // 3600
    days = secs // 86400
    if frequency == "day":
        return days
    if frequency == "week":
        # 1970-01-05 was a Monday
        return (days - 4) // 7
    raise PanelError(f"unknown frequency {frequency!r}")


def resample(panel: PricePanel, target: str) -> PricePanel:
    """Aggregate to a coarser frequency keeping the last close in each bucket."""
    if target not in _FREQ_RANK:
        raise PanelError(f"unknown frequency {target!r}")
    if _FREQ_RANK[target] <= _FREQ_RANK[panel.frequency]:
        raise PanelError(f"cannot resample {panel.frequency} to {target}: target must be coarser")
    keys = bucket_keys(panel.timestamps, target)
    last = np.flatnonzero(np.r_[keys[1:] != keys[:-1], True])
    return PricePanel(
        panel.symbols, panel.timestamps[last], panel.prices[:, last], target, panel.market
    )


def returns_to_prices(p0: float, returns: Sequence[float]) -> np.ndarray:
    if p0 <= 0:
        raise PanelError("p0 must be positive")
    r = np.asarray(returns, dtype=np.float64)
    if np.any(r <= -1):
        raise PanelError("return <= -1 would drive the price to zero or below")
    return p0 * np.concatenate([[1.0], np.cumprod(1.0 + r)])


# ---------------------------------------------------------------------------
# synthetic data


def synthetic_timestamps(n: int, frequency: str, start: str = "2010-01-04") -> np.ndarray:
    """Trading-calendar timestamps: weekdays, 7 hourly bars per day, 240 minute bars."""
    t0 = np.datetime64(start, "D")
    if frequency == "week":
        # Friday of each week
        first_monday = t0 - ((t0.astype(np.int64) - 4) % 7)
        return (first_monday + 4 + 7 * np.arange(n)).astype("datetime64[s]")
    per_day = {"day": 1, "hour": 7, "minute": 240, "tick": 240 * 60}[frequency]
    n_days = -(-n // per_day) + 1
    days = np.busday_offset(t0, np.arange(n_days), roll="forward")
    days = days.astype("datetime64[s]")
    if frequency == "day":
        return days[:n] + np.timedelta64(15 * 3600, "s")
    step = {"hour": 3600, "minute": 60, "tick": 1}[frequency]
    intraday = np.timedelta64(10 * 3600, "s") + np.arange(per_day) * np.timedelta64(step, "s")
    return (days[:, None] + intraday[None, :]).ravel()[:n]


def block_labels(n_stocks: int, n_factors: int) -> np.ndarray:
    """Factor block of each stock: contiguous, as even as possible."""
    return (np.arange(n_stocks) * n_factors) // n_stocks


def synth_factor_panel(
    n_stocks: int,
    n_steps: int,
    n_factors: int,
    loadings_seed: int,
    noise_vol: float,
    factor_vol: float,
    *,
    frequency: str = "day",
    market: str = "SYNTH",
    start: str = "2010-01-04",
    factors: np.ndarray | None = None,
    vol_regime_scale: float = 1.0,
    vol_regime_switch: float = 0.0,
) -> PricePanel:
    """Block-structured linear factor panel with prices starting at 100.

    Stock ``s`` loads 1 on factor ``block_labels[s]`` and 0 elsewhere. Each
    step is ``r = F[block] + noise_vol * eta``. ``factors`` overrides the
    drawn factor paths (``[n_factors, n_steps - 1]``), which lets two panels
    share factor realizations. ``vol_regime_scale``/``vol_regime_switch``
    add a two-state Markov volatility regime on the factors (off by default).
    """
    if min(n_stocks, n_steps, n_factors) < 1:
        raise ValueError("counts must be >= 1")
    if noise_vol < 0 or factor_vol <= 0:
        raise ValueError("factor_vol must be > 0 and noise_vol >= 0")
    rng = np.random.default_rng(loadings_seed)
    n_ret = n_steps - 1
    if factors is None:
        factors = factor_vol * rng.standard_normal((n_factors, n_ret))
        if vol_regime_switch > 0:
            flips = rng.random((n_factors, n_ret)) < vol_regime_switch
            state = np.cumsum(flips, axis=1) % 2 == 1
            factors = np.where(state, vol_regime_scale * factors, factors)
    else:
        factors = np.asarray(factors, dtype=np.float64)
        if factors.shape != (n_factors, n_ret):
            raise ValueError(f"factors must have shape {(n_factors, n_ret)}")
    eta = rng.standard_normal((n_stocks, n_ret))
    labels = block_labels(n_stocks, n_factors)
    r = factors[labels] + noise_vol * eta
    r = np.maximum(r, -0.95)
    prices = 100.0 * np.concatenate([np.ones((n_stocks, 1)), np.cumprod(1.0 + r, axis=1)], axis=1)
    width = len(str(n_stocks - 1))
    symbols = tuple(f"S{i:0{width}d}" for i in range(n_stocks))
    return PricePanel(symbols, synthetic_timestamps(n_steps, frequency, start), prices, frequency, market)


# ---------------------------------------------------------------------------
# persistence


def save_panel(panel: PricePanel | ReturnPanel, path: str | Path) -> None:
    """Write ``FWTPANEL1`` binary: magic, u32 header length, JSON header,
    int64 epoch-second timestamps, float64 row-major values (all little-endian)."""
    if isinstance(panel, PricePanel):
        kind, values = "price", panel.prices
    else:
        kind, values = panel.kind, panel.returns
    header = {
        "kind": kind,
        "market": panel.market,
        "frequency": panel.frequency,
        "symbols": list(panel.symbols),
        "n_timestamps": int(len(panel.timestamps)),
    }
    if isinstance(panel, PricePanel) and panel.dropped:
        header["dropped"] = list(panel.dropped)
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(PANEL_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(panel.timestamps.astype(np.int64).astype("<i8").tobytes())
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def load_panel(path: str | Path) -> PricePanel | ReturnPanel:
    data = Path(path).read_bytes()
    if not data.startswith(PANEL_MAGIC):
        raise PanelError(f"{path}: not a FWTPANEL1 file")
    off = len(PANEL_MAGIC)
    try:
        (hlen,) = struct.unpack_from("<I", data, off)
        header = json.loads(data[off + 4 : off + 4 + hlen])
    except (struct.error, ValueError) as exc:
        raise PanelError(f"{path}: corrupt header") from exc
    off += 4 + hlen
    n_sym, n_ts = len(header["symbols"]), header["n_timestamps"]
    need = off + 8 * n_ts + 8 * n_sym * n_ts
    if len(data) != need:
        raise PanelError(f"{path}: expected {need} bytes, found {len(data)}")
    ts = np.frombuffer(data, "<i8", n_ts, off).astype("datetime64[s]")
    values = np.frombuffer(data, "<f8", n_sym * n_ts, off + 8 * n_ts).reshape(n_sym, n_ts)
    if header["kind"] == "price":
        return PricePanel(
            tuple(header["symbols"]), ts, values, header["frequency"], header["market"],
            tuple(header.get("dropped", ())),
        )
    return ReturnPanel(
        tuple(header["symbols"]), ts, values, header["kind"], header["frequency"], header["market"]
    )
