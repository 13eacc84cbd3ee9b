"""Top-K similar-stock retrieval, what-if filtering and condition assembly."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from . import kernels
from .market_data import ReturnPanel, SeriesWindow, excess_returns

MEASURES = ("excess_return_correlation", "dtw", "random", "none")
STATS = ("vol", "cumret", "maxdd")


class UndefinedCorrelation(ValueError):
    pass


class RetrievalError(ValueError):
    pass


class PredicateError(ValueError):
    pass


class EmptyPoolError(RetrievalError):
    pass


# ---------------------------------------------------------------------------
# similarity measures


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("pearson needs two equal-length vectors of length >= 2")
    c = kernels.corr_many(a, b[None, :])[0]
    if math.isnan(c):
        raise UndefinedCorrelation("zero-variance input")
    return float(c)


def dtw(a, b, radius: int | None = None) -> float:
    """Unconstrained (or Sakoe-Chiba banded) DTW with absolute-difference cost."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("dtw needs nonempty inputs")
    return float(kernels.dtw(a, b, -1 if radius is None else int(radius)))


# ---------------------------------------------------------------------------
# queries and ranking


@dataclass(frozen=True)
class RetrievalQuery:
    target_symbol: str
    t: int  # history covers [t - history_len, t), future [t, t + T)
    history_len: int = 250
    T: int = 20
    K: int = 16
    measure: str = "excess_return_correlation"
    scope: str | tuple[str, ...] = "same-market"
    predicate: str | None = None
    use_excess: bool = True
    dtw_radius: int | None = None

    def __post_init__(self):
        if self.measure not in MEASURES:
            raise RetrievalError(f"unknown measure {self.measure!r}")
        if self.history_len < 2 or self.T < 1 or self.K < 0:
            raise RetrievalError("need history_len >= 2, T >= 1, K >= 0")
        if (self.K == 0) != (self.measure == "none"):
            raise RetrievalError("K = 0 exactly when measure = 'none'")
        if not isinstance(self.scope, str):
            object.__setattr__(self, "scope", tuple(self.scope))


def rank_candidates(
    target: np.ndarray,
    candidates: np.ndarray,
    labels: Sequence,
    measure: str,
    k: int,
    *,
    seed: int = 0,
    dtw_radius: int | None = None,
    sort_keys: Sequence | None = None,
) -> list[int]:
    """Indices of the ``k`` best candidate rows under ``measure``.

    Ties are broken by ``sort_keys`` (defaults to ``labels``) ascending.
    Zero-variance candidates are ineligible for correlation.
    """
    if measure == "none" or k == 0:
        return []
    n = len(labels)
    keys = labels if sort_keys is None else sort_keys
    if measure == "random":
        if n < k:
            raise RetrievalError(f"need {k} candidates, have {n}")
        order = sorted(range(n), key=lambda i: keys[i])
        rng = np.random.default_rng(seed)
        return [order[i] for i in rng.choice(n, size=k, replace=False)]
    if measure == "excess_return_correlation":
        cost = -np.asarray(kernels.corr_many(target, candidates))
        cost[np.isnan(cost)] = np.inf
    elif measure == "dtw":
        radius = -1 if dtw_radius is None else int(dtw_radius)
        cost = np.asarray(kernels.dtw_many(target, candidates, radius))
    else:
        raise RetrievalError(f"unknown measure {measure!r}")
    eligible = np.flatnonzero(np.isfinite(cost))
    if len(eligible) < k:
        raise RetrievalError(f"need {k} eligible candidates, have {len(eligible)}")
    # only candidates tied with or better than the k-th need the full tie-break sort
    kth = np.partition(cost[eligible], k - 1)[k - 1]
    short = np.flatnonzero(cost <= kth)
    ranked = sorted(short.tolist(), key=lambda i: (cost[i], keys[i]))
    return ranked[:k]


def _similarity_panel(panel: ReturnPanel, use_excess: bool) -> ReturnPanel:
    if use_excess and panel.kind == "plain":
        return excess_returns(panel)
    return panel


def similar_stocks(
    query: RetrievalQuery,
    panel: ReturnPanel,
    *,
    universe: ReturnPanel | None = None,
    seed: int = 0,
) -> list[str]:
    """The K symbols whose history window is most similar to the target's.

    ``universe`` is the panel to search when the scope names another market;
    it must share the target panel's timestamps over the history window.
    """
    if query.target_symbol not in panel.symbols:
        raise RetrievalError(f"target {query.target_symbol!r} not in panel")
    lo, hi = query.t - query.history_len, query.t
    if lo < 0 or hi > panel.n_timestamps:
        raise RetrievalError("target history window outside panel")
    if query.measure == "none":
        return []

    sim = _similarity_panel(panel, query.use_excess)
    target = sim.row(query.target_symbol)[lo:hi]
    if isinstance(query.scope, tuple):
        pool_panel = sim
        symbols = [s for s in query.scope if s != query.target_symbol]
        for s in symbols:
            if s not in pool_panel.symbols:
                raise RetrievalError(f"scope symbol {s!r} not in panel")
    elif query.scope in ("same-market", panel.market):
        pool_panel = sim
        symbols = [s for s in panel.symbols if s != query.target_symbol]
    else:
        if universe is None or universe.market != query.scope:
            raise RetrievalError(f"scope {query.scope!r} needs that market's panel")
        pool_panel = _similarity_panel(universe, query.use_excess)
        if not np.array_equal(pool_panel.timestamps[lo:hi], panel.timestamps[lo:hi]):
            raise RetrievalError("other market panel is not aligned with the target panel")
        symbols = [s for s in pool_panel.symbols if s != query.target_symbol]
    cand = pool_panel.returns[[pool_panel.index_of(s) for s in symbols], lo:hi]
    picked = rank_candidates(
        target, cand, symbols, query.measure, query.K, seed=seed, dtw_radius=query.dtw_radius
    )
    return [symbols[i] for i in picked]


# ---------------------------------------------------------------------------
# candidate windows and what-if predicates


def realized_vol(r: np.ndarray) -> float:
    r = np.asarray(r, dtype=np.float64)
    return float(np.std(r, ddof=1)) if len(r) > 1 else float(abs(r[0]))


def path_max_drawdown(r: np.ndarray) -> float:
    nav = np.concatenate([[1.0], np.cumprod(1.0 + np.asarray(r, dtype=np.float64))])
    return float(np.min(nav / np.maximum.accumulate(nav) - 1.0))


def window_stats(futures: np.ndarray) -> dict[str, np.ndarray]:
    """Row-wise ``vol`` (sample std), ``cumret`` and ``maxdd`` of future slices [n, T]."""
    f = np.atleast_2d(np.asarray(futures, dtype=np.float64))
    vol = f.std(axis=1, ddof=1) if f.shape[1] > 1 else np.abs(f[:, 0])
    nav = np.concatenate([np.ones((f.shape[0], 1)), np.cumprod(1.0 + f, axis=1)], axis=1)
    dd = np.min(nav / np.maximum.accumulate(nav, axis=1) - 1.0, axis=1)
    return {"vol": vol, "cumret": nav[:, -1] - 1.0, "maxdd": dd}


@dataclass(frozen=True, eq=False)
class CandidateWindow:
    symbol: str
    start: int
    history: np.ndarray
    future: np.ndarray

    @cached_property
    def stats(self) -> dict[str, float]:
        return {k: float(v[0]) for k, v in window_stats(self.future).items()}


_TOKEN = re.compile(r"\s*(?:(?P<num>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)"
                    r"|(?P<q>q\(\s*(?P<qp>[^)]*?)\s*\))|(?P<op><=|>=|<|>)|(?P<word>[A-Za-z_]+))")
_CMP = {"<=": np.less_equal, ">=": np.greater_equal, "<": np.less, ">": np.greater}


@dataclass(frozen=True)
class Clause:
    stat: str
    op: str
    value: float
    quantile: bool

    def threshold(self, pool_stats: dict[str, np.ndarray]) -> float:
        if self.quantile:
            return float(np.quantile(pool_stats[self.stat], self.value))
        return self.value

    def __str__(self):
        v = f"q({self.value:g})" if self.quantile else f"{self.value:g}"
        return f"{self.stat} {self.op} {v}"


@dataclass(frozen=True)
class Predicate:
    """Disjunction of conjunctions of clauses (``and`` binds tighter than ``or``)."""

    terms: tuple[tuple[Clause, ...], ...]
    text: str = ""

    def mask(self, pool: Sequence[CandidateWindow] | dict[str, np.ndarray]) -> np.ndarray:
        """Boolean keep-mask over a pool of windows or precomputed :func:`window_stats`."""
        if isinstance(pool, dict):
            stats = pool
        else:
            stats = {s: np.array([w.stats[s] for w in pool]) for s in STATS}
        n = len(stats["vol"])
        out = np.zeros(n, dtype=bool)
        for conj in self.terms:
            m = np.ones(n, dtype=bool)
            for c in conj:
                m &= _CMP[c.op](stats[c.stat], c.threshold(stats))
            out |= m
        return out


def parse_predicate(text: str) -> Predicate:
    """Parse ``stat cmp value (('and'|'or') stat cmp value)*``; value is a float or ``q(p)``."""
    tokens = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise PredicateError(f"cannot parse predicate at {text[pos:]!r}")
        pos = m.end()
        if m.group("num") is not None:
            tokens.append(("num", float(m.group("num"))))
        elif m.group("q") is not None:
            try:
                p = float(m.group("qp"))
            except ValueError:
                raise PredicateError(f"bad quantile {m.group('q')!r}") from None
            if not 0 < p < 1:
                raise PredicateError(f"quantile must lie in (0, 1), got {p}")
            tokens.append(("q", p))
        elif m.group("op") is not None:
            tokens.append(("op", m.group("op")))
        else:
            tokens.append(("word", m.group("word")))

    terms: list[list[Clause]] = [[]]
    i = 0
    while True:
        if i + 3 > len(tokens):
            raise PredicateError(f"incomplete clause in {text!r}")
        (k0, stat), (k1, op), (k2, val) = tokens[i : i + 3]
        if k0 != "word" or stat not in STATS:
            raise PredicateError(f"unknown stat {stat!r}; expected one of {STATS}")
        if k1 != "op":
            raise PredicateError(f"expected comparison after {stat!r}")
        if k2 not in ("num", "q"):
            raise PredicateError(f"expected a number or q(p) after {op!r}")
        terms[-1].append(Clause(stat, op, val, k2 == "q"))
        i += 3
        if i == len(tokens):
            break
        kind, word = tokens[i]
        if kind != "word" or word not in ("and", "or"):
            raise PredicateError(f"expected 'and' or 'or', got {word!r}")
        if word == "or":
            terms.append([])
        i += 1
    return Predicate(tuple(tuple(t) for t in terms), text)


def scenario_filter(
    pool: Sequence[CandidateWindow], predicate: Predicate | str
) -> list[CandidateWindow]:
    """Windows whose future-slice stats satisfy ``predicate``; order preserved."""
    if isinstance(predicate, str):
        predicate = parse_predicate(predicate)
    if not pool:
        raise EmptyPoolError("empty candidate pool")
    keep = predicate.mask(pool)
    out = [w for w, k in zip(pool, keep) if k]
    if not out:
        raise EmptyPoolError(f"no candidate window satisfies {predicate.text or predicate}")
    return out


def candidate_pool(
    panel: ReturnPanel,
    target_symbol: str,
    t: int,
    history_len: int,
    T: int,
    *,
    mode: str = "contemporaneous",
    stride: int = 1,
    universe: ReturnPanel | None = None,
) -> list[CandidateWindow]:
    """Windows available as neighbors for a query anchored at ``t``.

    ``contemporaneous`` uses every other symbol's window ``[t - history_len, t + T)``.
    ``analog`` uses windows of any symbol that end by ``t`` (their futures are
    already realized). ``both`` concatenates the two.
    """
    src = universe if universe is not None else panel
    L = history_len + T
    out: list[CandidateWindow] = []
    if mode in ("contemporaneous", "both"):
        lo = t - history_len
        if lo < 0 or t + T > src.n_timestamps:
            raise RetrievalError("contemporaneous window outside panel")
        for i, s in enumerate(src.symbols):
            if s == target_symbol:
                continue
            row = src.returns[i, lo : t + T]
            out.append(CandidateWindow(s, lo, row[:history_len], row[history_len:]))
    if mode in ("analog", "both"):
        last_start = min(t, src.n_timestamps) - L
        for start in range(last_start, -1, -stride):
            for i, s in enumerate(src.symbols):
                row = src.returns[i, start : start + L]
                out.append(CandidateWindow(s, start, row[:history_len], row[history_len:]))
    if mode not in ("contemporaneous", "analog", "both"):
        raise RetrievalError(f"unknown pool mode {mode!r}")
    return out


def select_from_pool(
    target_history: np.ndarray,
    pool: Sequence[CandidateWindow],
    k: int,
    measure: str,
    *,
    seed: int = 0,
    dtw_radius: int | None = None,
    similarity: Sequence[np.ndarray] | None = None,
) -> list[CandidateWindow]:
    """Top-``k`` pool windows by history similarity; ties by (symbol, start).

    ``similarity`` optionally supplies the series compared against the
    target (e.g. excess returns) in pool order; defaults to each window's history.
    """
    if k == 0 or measure == "none":
        return []
    hist = np.asarray(similarity if similarity is not None else [w.history for w in pool])
    keys = [(w.symbol, w.start) for w in pool]
    idx = rank_candidates(
        np.asarray(target_history), hist, keys, measure, k, seed=seed, dtw_radius=dtw_radius
    )
    return [pool[i] for i in idx]


# ---------------------------------------------------------------------------
# observation matrix


STD_FLOOR = 1e-12


@dataclass(frozen=True)
class ConditionSet:
    """Row-normalized observation matrix and mask.

    Row 0 is the target: ``M[0, history_len:] == 0``, every other cell is 1.
    ``X`` holds z-scores; ``row_mean``/``row_std`` undo them. Target cells of
    ``X`` carry the true future only for training samples (``has_target``);
    otherwise zeros, or NaN sentinels when built with ``sentinel=True``.
    """

    X: np.ndarray
    M: np.ndarray
    row_symbols: tuple[str, ...]
    anchor: tuple[int, int]
    row_mean: np.ndarray
    row_std: np.ndarray
    history_len: int
    has_target: bool = False

    @property
    def T(self) -> int:
        return self.X.shape[1] - self.history_len

    @property
    def K(self) -> int:
        return self.X.shape[0] - 1

    def target_z(self) -> np.ndarray:
        if not self.has_target:
            raise RetrievalError("condition set carries no target future")
        return self.X[0, self.history_len :]

    def denormalize_target(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) * self.row_std[0] + self.row_mean[0]

    def normalize_target(self, r: np.ndarray) -> np.ndarray:
        return (np.asarray(r) - self.row_mean[0]) / self.row_std[0]


def normalize_row(values: np.ndarray, observed: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Z-score ``values`` using only cells where ``observed`` is true."""
    obs = np.asarray(values, dtype=np.float64)[np.asarray(observed, dtype=bool)]
    mean = float(obs.mean())
    std = float(obs.std())
    if std < STD_FLOOR:
        std = 1.0
    return (np.asarray(values, dtype=np.float64) - mean) / std, mean, std


def denormalize_row(z: np.ndarray, mean: float, std: float) -> np.ndarray:
    return np.asarray(z) * std + mean


def build_observation(
    target_history: SeriesWindow | np.ndarray,
    neighbors: Sequence[tuple],
    T: int,
    *,
    target_future: np.ndarray | None = None,
    sentinel: bool = False,
    target_symbol: str | None = None,
    anchor: tuple[int, int] | None = None,
) -> ConditionSet:
    """Stack target history and neighbor (history, future) pairs into X and M."""
    th = np.asarray(getattr(target_history, "values", target_history), dtype=np.float64)
    hl = len(th)
    L = hl + T
    K = len(neighbors)
    X = np.zeros((K + 1, L))
    M = np.ones((K + 1, L))
    M[0, hl:] = 0.0
    means = np.zeros(K + 1)
    stds = np.ones(K + 1)
    symbols = [target_symbol or getattr(target_history, "symbol", "target")]

    row0 = np.zeros(L)
    row0[:hl] = th
    if target_future is not None:
        tf = np.asarray(target_future, dtype=np.float64)
        if len(tf) != T:
            raise RetrievalError(f"target future has length {len(tf)}, expected {T}")
        row0[hl:] = tf
    X[0], means[0], stds[0] = normalize_row(row0, M[0])
    if target_future is None:
        X[0, hl:] = np.nan if sentinel else 0.0

    for r, pair in enumerate(neighbors, start=1):
        hist, fut = pair
        hv = np.asarray(getattr(hist, "values", hist), dtype=np.float64)
        fv = np.asarray(getattr(fut, "values", fut), dtype=np.float64)
        if len(hv) != hl or len(fv) != T:
            raise RetrievalError(
                f"neighbor {r}: lengths ({len(hv)}, {len(fv)}) != ({hl}, {T})"
            )
        X[r], means[r], stds[r] = normalize_row(np.concatenate([hv, fv]), M[r])
        symbols.append(getattr(hist, "symbol", f"n{r}"))

    for a in (X, M, means, stds):
        a.flags.writeable = False
    if anchor is None:
        anchor = (int(getattr(target_history, "start", 0)) + hl, T)
    return ConditionSet(X, M, tuple(symbols), anchor, means, stds, hl, target_future is not None)
