"""Synthetic studies: what-if steering, cross-frequency transfer, simulation-augmented
forecasting, cross-market retrieval and the retrieval-size / step-count grid."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .dataset import RetrievalSettings, WindowSource, spaced_anchors
from .diffusion import make_schedule, sample_many
from .evaluation import (
    ExperimentScale,
    evaluate_paths,
    fit_generator,
    generate_paths,
    split_point,
)
from .market_data import ReturnPanel, synth_factor_panel, to_returns
from .optimizer import (
    ForecasterSpec,
    StrategyConfig,
    augment_dataset,
    model_based_optimize,
)

logger = logging.getLogger(__name__)


def _train_fwt(src: WindowSource, scale: ExperimentScale, seed: int, *, init_from=None, batches=None, lr=None):
    from .denoiser import train
    from .evaluation import _model_config

    return train(
        src,
        _model_config(scale, src.settings, seed),
        make_schedule(scale.H),
        init_from=init_from,
        batches=scale.batches if batches is None else batches,
        lr=scale.lr if lr is None else lr,
        batch_size=scale.batch_size,
        seed=seed,
    ).net


# ---------------------------------------------------------------------------
# what-if


@dataclass(frozen=True)
class WhatIfSetup:
    n_stocks: int = 60
    n_steps: int = 400
    n_factors: int = 6
    noise_vol: float = 0.002
    factor_vol: float = 0.02
    vol_regime_scale: float = 3.0
    vol_regime_switch: float = 0.05
    history_len: int = 32
    T: int = 8
    K: int = 8
    stride: int = 5
    train_fraction: float = 0.7
    predicate: str = "vol >= q(0.75)"


def whatif_experiment(seed: int, setup: WhatIfSetup = WhatIfSetup(), scale: ExperimentScale = ExperimentScale()) -> dict:
    """Mean realized vol of generated paths with and without the predicate, same targets.

    The generator learns on same-period neighbors; at generation time the pool
    adds every earlier analog window so the predicate has scenarios to choose from.
    """
    s = setup
    panel = to_returns(
        synth_factor_panel(
            s.n_stocks, s.n_steps, s.n_factors, seed, s.noise_vol, s.factor_vol,
            vol_regime_scale=s.vol_regime_scale, vol_regime_switch=s.vol_regime_switch,
        )
    )
    split = split_point(panel, s.train_fraction)
    base = RetrievalSettings(history_len=s.history_len, T=s.T, K=s.K)
    model = fit_generator("fwt", WindowSource(panel, base, t_max=split - s.T, seed=seed), make_schedule(scale.H), scale, seed)
    sched = make_schedule(scale.H)
    vols = {}
    anchors = None
    for label, pred in (("base", None), ("whatif", s.predicate)):
        gen = replace(base, pool="both", stride=s.stride, predicate=pred)
        src = WindowSource(panel, gen, t_min=split, seed=seed, with_target=False)
        if anchors is None:
            anchors = spaced_anchors(src.anchors, scale.eval_windows, seed)
        paths = sample_many(src.conditions(anchors), model, sched, seed, scale.n_paths)
        vols[label] = float(np.mean(paths.std(axis=2, ddof=1)))
    return {
        "seed": seed,
        "predicate": s.predicate,
        "base_vol": vols["base"],
        "whatif_vol": vols["whatif"],
        "ratio": vols["whatif"] / vols["base"],
        "n_targets": len(anchors),
    }


# ---------------------------------------------------------------------------
# cross-frequency transfer


@dataclass(frozen=True)
class TransferSetup:
    n_stocks: int = 40
    source_steps: int = 600
    source_factors: int = 4
    source_noise: float = 0.002
    source_factor_vol: float = 0.004
    target_train_steps: int = 40
    target_test_steps: int = 100
    target_factors: int = 8
    target_noise: float = 0.02
    target_factor_vol: float = 0.03
    history_len: int = 32
    T: int = 8
    K: int = 8
    finetune_batches: int = 200
    finetune_lr: float = 5e-4
    eval_windows: int = 60


def transfer_experiment(seed: int, setup: TransferSetup = TransferSetup(), scale: ExperimentScale = ExperimentScale()) -> dict:
    """Hourly pretraining, then zero-shot vs fine-tuned vs from-scratch on a small weekly set.

    The weekly market has finer factor blocks than the hourly one, so some
    retrieved neighbors belong to other blocks and the pretrained weighting of
    neighbors has to adapt.
    """
    s = setup
    settings = RetrievalSettings(history_len=s.history_len, T=s.T, K=s.K)
    hourly = to_returns(
        synth_factor_panel(s.n_stocks, s.source_steps, s.source_factors, 1000 + seed, s.source_noise,
                           s.source_factor_vol, frequency="hour")
    )
    n_weeks = s.history_len + s.target_train_steps + s.target_test_steps + 1
    weekly = to_returns(
        synth_factor_panel(s.n_stocks, n_weeks, s.target_factors, 2000 + seed, s.target_noise,
                           s.target_factor_vol, frequency="week")
    )
    pre = _train_fwt(WindowSource(hourly, settings, seed=seed), scale, seed)
    split = s.history_len + s.target_train_steps
    small = WindowSource(weekly, settings, t_max=split - s.T, seed=seed)
    test = WindowSource(weekly, settings, t_min=split, seed=seed + 1)
    anchors = spaced_anchors(test.anchors, s.eval_windows, seed)
    conds = test.conditions(anchors)
    sched = make_schedule(scale.H)
    fine = _train_fwt(small, scale, seed + 7, init_from=pre, batches=s.finetune_batches, lr=s.finetune_lr)
    scratch = _train_fwt(small, scale, seed + 7, batches=s.finetune_batches)

    from .denoiser import TorchDenoiser

    def score(net) -> float:
        paths = generate_paths(TorchDenoiser(net), conds, sched, seed, scale.n_paths)
        return evaluate_paths(weekly, anchors, paths, s.T).correlation

    return {
        "seed": seed,
        "zero_shot": score(pre),
        "fine_tuned": score(fine),
        "from_scratch": score(scratch),
        "small_set_anchors": len(small),
        "n_eval_windows": len(anchors),
    }


# ---------------------------------------------------------------------------
# simulation-augmented forecasting


def drift_factors(
    n_factors: int,
    n_ret: int,
    rng: np.random.Generator,
    *,
    vol: float,
    drift: float,
    flip_prob: float,
    drift_on: np.ndarray,
) -> np.ndarray:
    """Gaussian factor returns plus a persistent +-``drift`` trend where ``drift_on`` holds.

    The trend sign of each factor flips with probability ``flip_prob`` per step.
    """
    flips = rng.random((n_factors, n_ret)) < flip_prob
    sign = np.where(rng.random((n_factors, 1)) < 0.5, -1.0, 1.0) * np.where(np.cumsum(flips, axis=1) % 2 == 1, -1.0, 1.0)
    return vol * rng.standard_normal((n_factors, n_ret)) + drift * sign * np.asarray(drift_on, dtype=np.float64)


@dataclass(frozen=True)
class EnhancementSetup:
    n_stocks: int = 20
    n_factors: int = 4
    pre_steps: int = 400
    train_steps: int = 80
    val_steps: int = 250
    noise_vol: float = 0.01
    factor_vol: float = 0.01
    drift: float = 0.003
    flip_prob: float = 0.01
    history_len: int = 16
    T: int = 8
    K: int = 4
    stride: int = 4
    multipliers: tuple[int, ...] = (0, 10)
    lags: tuple[int, ...] = (1, 4, 16)
    alpha: float = 1.0
    n_long: int = 5
    n_short: int = 5
    rebalance_every: int = 8


ENHANCEMENT_SCALE = ExperimentScale(H=25)


def simulate_windows(
    src: WindowSource, model, sched, anchors_t: Sequence[int], n_paths: int, seed: int
) -> list[np.ndarray]:
    """Full-universe windows: real history plus one generated future per symbol.

    Returns ``n_paths * len(anchors_t)`` arrays of shape [n_symbols, history_len + T],
    ordered path-major so a prefix holds whole passes over the anchors.
    """
    if n_paths == 0 or not anchors_t:
        return []
    panel, hl, T = src.panel, src.settings.history_len, src.settings.T
    n = panel.n_symbols
    conds = src.conditions([(i, t) for t in anchors_t for i in range(n)])
    paths = sample_many(conds, model, sched, seed, n_paths).reshape(len(anchors_t), n, n_paths, T)
    return [
        np.concatenate([panel.returns[:, t - hl : t], paths[w, :, p, :]], axis=1)
        for p in range(n_paths)
        for w, t in enumerate(anchors_t)
    ]


def regime_shift_panel(seed: int, s: EnhancementSetup = EnhancementSetup()) -> tuple[ReturnPanel, int, int]:
    """Trending factors, then a trendless stretch, then trends again.

    Returns ``(panel, train_start, val_start)``.
    """
    rng = np.random.default_rng(seed)
    n_ret = s.pre_steps + s.train_steps + s.val_steps
    on = np.ones(n_ret, dtype=bool)
    on[s.pre_steps : s.pre_steps + s.train_steps] = False
    f = drift_factors(s.n_factors, n_ret, rng, vol=s.factor_vol, drift=s.drift, flip_prob=s.flip_prob, drift_on=on)
    panel = to_returns(synth_factor_panel(s.n_stocks, n_ret + 1, s.n_factors, seed, s.noise_vol, s.factor_vol, factors=f))
    return panel, s.pre_steps, s.pre_steps + s.train_steps


def enhancement_experiment(
    seed: int, setup: EnhancementSetup = EnhancementSetup(), scale: ExperimentScale = ENHANCEMENT_SCALE
) -> dict:
    """Validation Sharpe of a ridge long-short strategy trained on real windows plus
    ``m`` times as many generated windows, for each multiplier ``m``.

    The generator learns from the trending period using earlier analog windows
    as neighbors; real training windows come from the trendless stretch; the
    strategy is scored on the final trending stretch.
    """
    s = setup
    panel, train_start, val_start = regime_shift_panel(seed, s)
    hl, T = s.history_len, s.T
    settings = RetrievalSettings(history_len=hl, T=T, K=s.K, pool="analog", stride=s.stride)
    sched = make_schedule(scale.H)
    model = fit_generator("fwt", WindowSource(panel, settings, t_max=train_start - T, seed=seed), sched, scale, seed)

    anchors_t = list(range(train_start + hl, val_start - T + 1, T))
    real = [panel.returns[:, t - hl : t + T] for t in anchors_t]
    src = WindowSource(panel, settings, t_min=train_start + hl, t_max=val_start - T, seed=seed, with_target=False)
    sims = simulate_windows(src, model, sched, anchors_t, max(s.multipliers), seed)
    datasets = {f"{m}x": augment_dataset(real, sims, m, seed=seed) for m in s.multipliers}
    validation = panel.slice_time(val_start - max(s.lags), panel.n_timestamps)
    strategy = StrategyConfig(max(s.lags), horizon=T, rebalance_every=s.rebalance_every,
                              n_long=s.n_long, n_short=s.n_short)
    res = model_based_optimize([ForecasterSpec(s.lags, s.alpha)], datasets, validation, strategy, hl)
    return {
        "seed": seed,
        "sharpe": {row["dataset"]: row["sharpe"] for row in res.table},
        "table": res.table,
        "n_real_windows": len(real),
    }


# ---------------------------------------------------------------------------
# cross-market retrieval


def cross_market_experiment(
    target: ReturnPanel,
    source: ReturnPanel,
    *,
    history_len: int = 32,
    T: int = 8,
    K: int = 8,
    scale: ExperimentScale = ExperimentScale(),
    seed: int = 0,
    train_fraction: float = 0.7,
) -> dict:
    """Generate ``target``-market futures with neighbors drawn from ``source`` versus
    from the target market itself; the generator is trained on the source market."""
    s = RetrievalSettings(history_len=history_len, T=T, K=K)
    split = split_point(target, train_fraction)
    sched = make_schedule(scale.H)
    model = fit_generator("fwt", WindowSource(source, s, t_max=split - T, seed=seed), sched, scale, seed)
    out = {"seed": seed, "target_market": target.market, "source_market": source.market}
    anchors = None
    for label, universe in (("same_market", None), ("cross_market", source)):
        src = WindowSource(target, s, t_min=split, universe=universe, seed=seed + 1)
        if anchors is None:
            anchors = spaced_anchors(src.anchors, scale.eval_windows, seed)
        paths = generate_paths(model, src.conditions(anchors), sched, seed, scale.n_paths)
        out[label] = evaluate_paths(target, anchors, paths, T).to_dict()
    return out


# ---------------------------------------------------------------------------
# sensitivity grid


def sensitivity_grid(
    panel: ReturnPanel,
    ks: Sequence[int],
    steps: Sequence[int],
    *,
    history_len: int = 32,
    T: int = 8,
    scale: ExperimentScale = ExperimentScale(),
    seed: int = 0,
    train_fraction: float = 0.7,
) -> list[dict]:
    """One (market_ranking, correlation) cell per (K, diffusion steps) pair."""
    split = split_point(panel, train_fraction)
    cells = []
    for k in ks:
        measure = "none" if k == 0 else "excess_return_correlation"
        s = RetrievalSettings(history_len=history_len, T=T, K=k, measure=measure)
        train_src = WindowSource(panel, s, t_max=split - T, seed=seed)
        test_src = WindowSource(panel, s, t_min=split, seed=seed + 1)
        anchors = spaced_anchors(test_src.anchors, scale.eval_windows, seed)
        conds = test_src.conditions(anchors)
        for H in steps:
            sc = replace(scale, H=H)
            sched = make_schedule(H)
            model = fit_generator("fwt", train_src, sched, sc, seed)
            rep = evaluate_paths(panel, anchors, generate_paths(model, conds, sched, seed, sc.n_paths), T)
            cells.append({"K": k, "steps": H, "market_ranking": rep.market_ranking, "correlation": rep.correlation})
            logger.info("sensitivity K=%d H=%d: ranking %.4f corr %.4f", k, H, rep.market_ranking, rep.correlation)
    return cells
