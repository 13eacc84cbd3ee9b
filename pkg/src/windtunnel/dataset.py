"""Condition-set sources: anchors over a return panel plus retrieval settings."""

from __future__ import annotations

from dataclasses import dataclass
from collections.abc import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .market_data import ReturnPanel, excess_returns
from .retrieval import (
    CandidateWindow,
    ConditionSet,
    EmptyPoolError,
    RetrievalError,
    build_observation,
    parse_predicate,
    rank_candidates,
    window_stats,
)


@dataclass(frozen=True)
class RetrievalSettings:
    history_len: int = 250
    T: int = 20
    K: int = 16
    measure: str = "excess_return_correlation"
    use_excess: bool = True
    pool: str = "contemporaneous"  # contemporaneous | analog | both
    stride: int = 1
    dtw_radius: int | None = None
    predicate: str | None = None

    def __post_init__(self):
        if (self.K == 0) != (self.measure == "none"):
            raise RetrievalError("K = 0 exactly when measure = 'none'")
        if self.pool not in ("contemporaneous", "analog", "both"):
            raise RetrievalError(f"unknown pool mode {self.pool!r}")

    @property
    def window(self) -> int:
        return self.history_len + self.T


def anchor_seed(seed: int, symbol_index: int, t: int) -> int:
    ss = np.random.SeedSequence(seed, spawn_key=(symbol_index, t))
    return int(ss.generate_state(1)[0])


class WindowSource:
    """Builds a :class:`ConditionSet` for every (target symbol, anchor t).

    Anchors are the ``t`` with a full history ``[t - history_len, t)`` and,
    for training, a full future ``[t, t + T)``, restricted to
    ``t_min <= t <= t_max``. Neighbors come from ``universe`` (default: the
    panel itself) under the configured pool mode.
    """

    def __init__(
        self,
        panel: ReturnPanel,
        settings: RetrievalSettings,
        *,
        t_min: int | None = None,
        t_max: int | None = None,
        targets: Sequence[str] | None = None,
        universe: ReturnPanel | None = None,
        seed: int = 0,
        with_target: bool = True,
        cache: bool = True,
    ):
        s = settings
        self.panel = panel
        self.settings = s
        self.universe = universe if universe is not None else panel
        self.seed = seed
        self.with_target = with_target
        self._cache: dict | None = {} if cache else None
        self._sim = excess_returns(panel) if s.use_excess and panel.kind == "plain" else panel
        u = self.universe
        self._usim = excess_returns(u) if s.use_excess and u.kind == "plain" else u
        if universe is not None and not np.array_equal(u.timestamps, panel.timestamps):
            raise RetrievalError("universe panel must share the target panel's timestamps")

        # analog-only pools need at least one window ending before the history starts
        first = s.history_len + (s.T if s.pool == "analog" and s.K > 0 else 0)
        lo = first if t_min is None else max(t_min, first)
        # same-period neighbors need a realized future even when the target's is not read
        needs_future = with_target or (s.pool in ("contemporaneous", "both") and s.K > 0)
        hi_limit = panel.n_timestamps - s.T if needs_future else panel.n_timestamps
        hi = hi_limit if t_max is None else min(t_max, hi_limit)
        names = panel.symbols if targets is None else tuple(targets)
        self.targets = [panel.index_of(n) for n in names]
        self.anchors = [(i, t) for t in range(lo, hi + 1) for i in self.targets]
        if not self.anchors:
            raise RetrievalError("no anchors satisfy the window constraints")
        self._predicate = parse_predicate(s.predicate) if s.predicate else None

    def __len__(self) -> int:
        return len(self.anchors)

    def _neighbors(self, i: int, t: int) -> list[CandidateWindow]:
        s = self.settings
        if s.K == 0:
            return []
        hl, T = s.history_len, s.T
        L = hl + T
        target_symbol = self.panel.symbols[i]
        u, usim = self.universe, self._usim
        windows, sims, sym_idx, starts = [], [], [], []
        if s.pool in ("contemporaneous", "both"):
            if t + T > u.n_timestamps:
                raise RetrievalError("contemporaneous neighbors need a realized future")
            js = np.array([j for j, sym in enumerate(u.symbols) if not (sym == target_symbol and u is self.panel)], dtype=int)
            windows.append(u.returns[js, t - hl : t + T])
            sims.append(usim.returns[js, t - hl : t])
            sym_idx.append(js)
            starts.append(np.full(len(js), t - hl))
        if s.pool in ("analog", "both"):
            st = np.arange(t - hl - T, -1, -s.stride)
            if len(st):
                n = u.n_symbols
                view = sliding_window_view(u.returns, L, axis=1)[:, st]  # [n, S, L]
                sview = sliding_window_view(usim.returns, hl, axis=1)[:, st]
                windows.append(view.transpose(1, 0, 2).reshape(-1, L))
                sims.append(sview.transpose(1, 0, 2).reshape(-1, hl))
                sym_idx.append(np.tile(np.arange(n), len(st)))
                starts.append(np.repeat(st, n))
        if not windows:
            raise EmptyPoolError(f"empty candidate pool for anchor {t}")
        rows = np.concatenate(windows)
        sim = np.concatenate(sims)
        sym_idx = np.concatenate(sym_idx)
        starts = np.concatenate(starts)
        if self._predicate is not None:
            keep = self._predicate.mask(window_stats(rows[:, hl:]))
            if not keep.any():
                raise EmptyPoolError(f"no candidate window satisfies {s.predicate!r}")
            rows, sim, sym_idx, starts = rows[keep], sim[keep], sym_idx[keep], starts[keep]
        keys = _WindowKeys(u.symbols, sym_idx, starts)
        idx = rank_candidates(
            self._sim.returns[i, t - hl : t],
            sim,
            keys,
            s.measure,
            s.K,
            seed=anchor_seed(self.seed, i, t),
            dtw_radius=s.dtw_radius,
        )
        return [CandidateWindow(*keys[j], rows[j, :hl], rows[j, hl:]) for j in idx]

    def condition(self, i: int, t: int) -> ConditionSet:
        key = (i, t)
        if self._cache is not None and key in self._cache:
            return self._cache[key]
        s = self.settings
        r = self.panel.returns[i]
        neigh = self._neighbors(i, t)
        future = r[t : t + s.T] if self.with_target else None
        cond = build_observation(
            r[t - s.history_len : t],
            [(w.history, w.future) for w in neigh],
            s.T,
            target_future=future,
            target_symbol=self.panel.symbols[i],
            anchor=(t, s.T),
        )
        cond = _with_symbols(cond, [self.panel.symbols[i]] + [w.symbol for w in neigh])
        if self._cache is not None:
            self._cache[key] = cond
        return cond

    def conditions(self, anchors: Sequence[tuple[int, int]] | None = None) -> list[ConditionSet]:
        return [self.condition(i, t) for i, t in (self.anchors if anchors is None else anchors)]

    def draw(self, rng: np.random.Generator, n: int) -> list[ConditionSet]:
        idx = rng.integers(0, len(self.anchors), size=n)
        return [self.condition(*self.anchors[k]) for k in idx]


class _WindowKeys(Sequence):
    """(symbol, start) tie-break keys, built on demand."""

    def __init__(self, symbols, sym_idx, starts):
        self.symbols, self.sym_idx, self.starts = symbols, sym_idx, starts

    def __len__(self) -> int:
        return len(self.starts)

    def __getitem__(self, k):
        return self.symbols[self.sym_idx[k]], int(self.starts[k])


def _with_symbols(cond: ConditionSet, symbols: list[str]) -> ConditionSet:
    from dataclasses import replace

    return replace(cond, row_symbols=tuple(symbols))


def spaced_anchors(anchors: Sequence[tuple[int, int]], n: int, seed: int) -> list[tuple[int, int]]:
    """Deterministic subset of ``n`` anchors (all when fewer), in original order."""
    if n >= len(anchors):
        return list(anchors)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(anchors), size=n, replace=False))
    return [anchors[i] for i in idx]
