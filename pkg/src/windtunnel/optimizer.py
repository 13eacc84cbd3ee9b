"""Long-short backtests, rule-based strategy filtering and simulation-augmented forecaster search."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .evaluation import PortfolioReport
from .market_data import ReturnPanel

PERIODS_PER_YEAR = {"minute": 252 * 240, "hour": 252 * 7, "day": 252, "week": 52}


class SignalError(ValueError):
    pass


class ForecastError(ValueError):
    pass


def periods_per_year(panel: ReturnPanel) -> int:
    try:
        return PERIODS_PER_YEAR[panel.frequency]
    except KeyError:
        raise ValueError(f"no annualization factor for frequency {panel.frequency!r}") from None


# ---------------------------------------------------------------------------
# signals
#
# A signal scores every symbol at step t from returns[:, :t] (Foresight is the
# deliberate exception); positions chosen at t earn returns[:, t].


@dataclass(frozen=True)
class Momentum:
    lookback: int

    def __post_init__(self):
        if self.lookback < 1:
            raise ValueError("lookback must be >= 1")

    @property
    def warmup(self) -> int:
        return self.lookback

    def scores(self, r: np.ndarray, t: int) -> np.ndarray:
        return r[:, t - self.lookback : t].sum(axis=1)


@dataclass(frozen=True)
class Foresight:
    """Peeks at the next ``horizon`` returns; an upper bound for tests."""

    horizon: int

    warmup = 0

    def scores(self, r: np.ndarray, t: int) -> np.ndarray:
        return r[:, t : t + self.horizon].sum(axis=1)


@dataclass(frozen=True)
class ZeroSignal:
    warmup = 0

    def scores(self, r: np.ndarray, t: int) -> np.ndarray:
        return np.zeros(r.shape[0])


@dataclass(frozen=True)
class StrategyConfig:
    signal: object  # int momentum lookback or an object with ``warmup`` and ``scores``
    horizon: int = 20
    rebalance_every: int = 5
    turnover_fraction: float = 0.25
    n_long: int = 5
    n_short: int = 5
    name: str = ""

    def __post_init__(self):
        if not 0 < self.turnover_fraction <= 1:
            raise ValueError("turnover_fraction must be in (0, 1]")
        if self.rebalance_every < 1 or self.horizon < 1:
            raise ValueError("rebalance_every and horizon must be >= 1")
        if self.n_long < 0 or self.n_short < 0 or self.n_long + self.n_short == 0:
            raise ValueError("need at least one position")

    def resolved_signal(self):
        if isinstance(self.signal, (int, np.integer)) and not isinstance(self.signal, bool):
            return Momentum(int(self.signal))
        if not hasattr(self.signal, "scores"):
            raise SignalError(f"unusable signal {self.signal!r}")
        return self.signal

    def describe(self) -> dict:
        sig = self.resolved_signal()
        return {
            "name": self.name,
            "signal": repr(sig),
            "horizon": self.horizon,
            "rebalance_every": self.rebalance_every,
            "turnover_fraction": self.turnover_fraction,
            "n_long": self.n_long,
            "n_short": self.n_short,
        }


def target_weights(scores: np.ndarray, symbols: Sequence[str], n_long: int, n_short: int) -> np.ndarray:
    """Equal-weight legs: +1/n_long on the top scores, -1/n_short on the bottom.

    Symbols are ordered by (score descending, symbol ascending), so ties fall
    back to lexicographic order.
    """
    order = sorted(range(len(symbols)), key=lambda i: (-scores[i], symbols[i]))
    w = np.zeros(len(symbols))
    if n_long:
        w[order[:n_long]] = 1.0 / n_long
    if n_short:
        w[order[len(order) - n_short :]] = -1.0 / n_short
    return w


def simulate_portfolio(
    strategy: StrategyConfig, panel: ReturnPanel, periods_per_year_: int | None = None
) -> PortfolioReport:
    """Backtest ``strategy`` on ``panel``; frictionless, constant weights between rebalances.

    The first rebalance takes the full target; later ones move
    ``turnover_fraction`` of the way from current to target weights.
    """
    r = panel.returns
    N, n = r.shape
    if n <= strategy.horizon:
        raise ValueError(f"panel has {n} steps, needs more than horizon {strategy.horizon}")
    if max(strategy.n_long, strategy.n_short) > N // 2:
        raise ValueError(f"position counts exceed half the universe ({N} symbols)")
    sig = strategy.resolved_signal()
    t0 = int(sig.warmup)
    if t0 >= n:
        raise SignalError(f"signal needs {t0} steps of warmup, panel has {n}")
    ppy = periods_per_year(panel) if periods_per_year_ is None else periods_per_year_
    f = strategy.turnover_fraction
    w = None
    nav = np.empty(n - t0 + 1)
    nav[0] = 1.0
    for k, t in enumerate(range(t0, n)):
        if k % strategy.rebalance_every == 0:
            s = np.asarray(sig.scores(r, t), dtype=np.float64)
            if s.shape != (N,) or not np.all(np.isfinite(s)):
                raise SignalError(f"signal undefined at step {t}")
            target = target_weights(s, panel.symbols, strategy.n_long, strategy.n_short)
            w = target if w is None else w + f * (target - w)
        nav[k + 1] = nav[k] * (1.0 + float(w @ r[:, t]))
        if nav[k + 1] <= 0:
            raise ValueError(f"strategy wiped out at step {t}")
    return PortfolioReport.from_nav(nav, ppy)


# ---------------------------------------------------------------------------
# scenario filtering


@dataclass
class ScenarioSet:
    panels: list[ReturnPanel]
    provenance: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not self.panels:
            raise ValueError("scenario set is empty")
        first = self.panels[0]
        for p in self.panels[1:]:
            if p.symbols != first.symbols or p.n_timestamps != first.n_timestamps:
                raise ValueError("scenario panels must share symbols and window length")
        if not self.provenance:
            self.provenance = [{} for _ in self.panels]
        if len(self.provenance) != len(self.panels):
            raise ValueError("one provenance record per panel")

    def __len__(self) -> int:
        return len(self.panels)


@dataclass(frozen=True)
class Thresholds:
    min_sharpe: float = -math.inf
    max_dd: float = math.inf  # largest tolerated drawdown magnitude
    min_ann_return: float = -math.inf


def violations(report: PortfolioReport, th: Thresholds) -> list[str]:
    out = []
    if report.sharpe < th.min_sharpe:
        out.append("sharpe")
    if -report.max_drawdown > th.max_dd:
        out.append("max_drawdown")
    if report.annualized_return < th.min_ann_return:
        out.append("annualized_return")
    return out


@dataclass
class OptimizationResult:
    surviving: list = field(default_factory=list)  # (config, [PortfolioReport per scenario])
    rejected: list = field(default_factory=list)  # (config, (scenario index, metric))
    table: list[dict] = field(default_factory=list)
    best: dict | None = None

    def to_dict(self) -> dict:
        return {
            "surviving": [
                {"config": c.describe(), "reports": [r.to_dict() for r in reps]} for c, reps in self.surviving
            ],
            "rejected": [
                {"config": c.describe(), "scenario": s, "metric": m} for c, (s, m) in self.rejected
            ],
            "table": self.table,
            "best": self.best,
        }


def rule_based_filter(
    configs: Sequence[StrategyConfig], scenarios: ScenarioSet, thresholds: Thresholds
) -> OptimizationResult:
    """Keep configs that meet every threshold on every scenario (worst case)."""
    if not configs:
        raise ValueError("no configurations to filter")
    res = OptimizationResult()
    for cfg in configs:
        reports = []
        failed = None
        for si, panel in enumerate(scenarios.panels):
            rep = simulate_portfolio(cfg, panel)
            bad = violations(rep, thresholds)
            if bad:
                failed = (si, bad[0])
                break
            reports.append(rep)
        if failed is None:
            res.surviving.append((cfg, reports))
        else:
            res.rejected.append((cfg, failed))
    return res


# ---------------------------------------------------------------------------
# dataset augmentation


@dataclass
class AugmentedSet:
    windows: list[np.ndarray]  # each [n_symbols, history_len + T]
    provenance: list[str]
    with_replacement: bool = False

    def __len__(self) -> int:
        return len(self.windows)

    def count(self, tag: str) -> int:
        return sum(p == tag for p in self.provenance)


def _take(pool: Sequence[np.ndarray], n: int, rng: np.random.Generator) -> tuple[list[np.ndarray], bool]:
    if n == 0:
        return [], False
    if not pool:
        raise ValueError(f"need {n} simulated windows, pool is empty")
    if n <= len(pool):
        return [pool[i] for i in range(n)], False
    idx = rng.integers(0, len(pool), size=n)
    return [pool[i] for i in idx], True


def augment_dataset(
    real: Sequence[np.ndarray],
    sim: Sequence[np.ndarray],
    multiplier: int,
    *,
    vol_sim: Sequence[np.ndarray] = (),
    vol_multiplier: int = 0,
    seed: int = 0,
) -> AugmentedSet:
    """Real windows plus ``multiplier * len(real)`` simulated ones (and optionally
    ``vol_multiplier * len(real)`` high-volatility scenarios).

    Pools are consumed in order; a pool that is too small is resampled with
    replacement and the result is flagged.
    """
    if not real:
        raise ValueError("real window set is empty")
    if multiplier < 0 or vol_multiplier < 0:
        raise ValueError("multipliers must be >= 0")
    rng = np.random.default_rng(seed)
    plain, rep1 = _take(sim, multiplier * len(real), rng)
    vol, rep2 = _take(vol_sim, vol_multiplier * len(real), rng)
    windows = list(real) + plain + vol
    prov = ["real"] * len(real) + ["sim"] * len(plain) + ["vol-sim"] * len(vol)
    return AugmentedSet(windows, prov, rep1 or rep2)


# ---------------------------------------------------------------------------
# forecaster search


@dataclass(frozen=True)
class ForecasterSpec:
    lags: tuple[int, ...] = (1, 5, 20)
    alpha: float = 1.0

    def __post_init__(self):
        if not self.lags or min(self.lags) < 1:
            raise ValueError("lags must be nonempty and >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")


def lag_features(history: np.ndarray, lags: Sequence[int]) -> np.ndarray:
    """Trailing cumulative returns over each lag, de-meaned across symbols: [n_symbols, n_lags]."""
    x = np.stack([history[:, -L:].sum(axis=1) for L in lags], axis=1)
    return x - x.mean(axis=0)


@dataclass(frozen=True)
class LinearSignal:
    """Ridge forecaster scores used as a strategy signal."""

    lags: tuple[int, ...]
    coef: tuple[float, ...]
    scale: tuple[float, ...]

    @property
    def warmup(self) -> int:
        return max(self.lags)

    def scores(self, r: np.ndarray, t: int) -> np.ndarray:
        x = lag_features(r[:, :t], self.lags) / np.asarray(self.scale)
        return x @ np.asarray(self.coef)


def fit_forecaster(windows: Sequence[np.ndarray], history_len: int, spec: ForecasterSpec) -> LinearSignal:
    """Ridge fit of the cross-sectionally de-meaned future sum on lag features."""
    if max(spec.lags) > history_len:
        raise ForecastError(f"lag {max(spec.lags)} exceeds history length {history_len}")
    xs, ys = [], []
    for w in windows:
        w = np.asarray(w, dtype=np.float64)
        y = w[:, history_len:].sum(axis=1)
        xs.append(lag_features(w[:, :history_len], spec.lags))
        ys.append(y - y.mean())
    if not xs:
        raise ForecastError("empty training set")
    X, y = np.concatenate(xs), np.concatenate(ys)
    scale = X.std(axis=0)
    if np.any(scale < 1e-15):
        raise ForecastError("zero-variance feature in training set")
    Xs = X / scale
    coef = np.linalg.solve(Xs.T @ Xs + spec.alpha * np.eye(len(spec.lags)), Xs.T @ y)
    return LinearSignal(tuple(spec.lags), tuple(map(float, coef)), tuple(map(float, scale)))


def model_based_optimize(
    grid: Sequence[ForecasterSpec],
    datasets: Mapping[str, AugmentedSet],
    validation: ReturnPanel,
    strategy: StrategyConfig,
    history_len: int,
) -> OptimizationResult:
    """Fit one forecaster per (grid point, dataset) and rank by validation Sharpe.

    ``strategy`` supplies everything but the signal. Ties keep the earlier row.
    """
    if not grid:
        raise ValueError("forecaster grid is empty")
    res = OptimizationResult()
    for gi, spec in enumerate(grid):
        for name, data in datasets.items():
            signal = fit_forecaster(data.windows, history_len, spec)
            cfg = StrategyConfig(
                signal,
                strategy.horizon,
                strategy.rebalance_every,
                strategy.turnover_fraction,
                strategy.n_long,
                strategy.n_short,
                name=f"grid{gi}/{name}",
            )
            rep = simulate_portfolio(cfg, validation)
            row = {
                "grid_index": gi,
                "lags": list(spec.lags),
                "alpha": spec.alpha,
                "dataset": name,
                "n_windows": len(data),
                **rep.to_dict(),
            }
            res.table.append(row)
            res.surviving.append((cfg, [rep]))
    res.best = max(res.table, key=lambda row: row["sharpe"])
    return res
