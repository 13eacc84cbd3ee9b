"""``windtunnel`` command line: one subcommand per pipeline stage.

Every command writes ``report.json`` and the fully resolved ``config.yaml``
(with the tool version) into ``paths.out_dir``. Rerunning a command with
``--config <out_dir>/config.yaml`` rewrites the same bytes.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, apply_overrides, dump_config, load_config

logger = logging.getLogger("windtunnel")

PANEL_FILE = "panel.fwtp"
CHECKPOINT_FILE = "model.fwtc"


class MissingInput(FileNotFoundError):
    pass


# exit codes by error family
EXIT_CODES = {
    "config_error": 2,
    "missing_input": 3,
    "checkpoint_mismatch": 4,
    "data_error": 5,
    "retrieval_error": 6,
    "internal_error": 1,
}


# ---------------------------------------------------------------------------
# shared plumbing


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(obj, path: Path) -> None:
    from .evaluation import write_json

    write_json(obj, path)


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _finish(cfg: RunConfig, command: str, report: dict) -> dict:
    out = _out_dir(cfg)
    (out / "config.yaml").write_text(dump_config(cfg, __version__))
    report = {"schema_version": 1, "command": command, "tool_version": __version__, **report}
    _write_json(report, out / "report.json")
    return report


def _require(path: str | None, what: str) -> Path:
    if not path:
        raise MissingInput(f"no {what} given (set paths.{what} or pass --{what.replace('_', '-')})")
    p = Path(path)
    if not p.is_file():
        raise MissingInput(f"{what} not found: {p}")
    return p


def _load_panels(path: str | None, what: str = "panel"):
    """``(price_panel_or_None, return_panel)``."""
    from .market_data import PricePanel, load_panel, to_returns

    panel = load_panel(_require(path, what))
    if isinstance(panel, PricePanel):
        return panel, to_returns(panel)
    return None, panel


def _settings(cfg: RunConfig, **over):
    from .dataset import RetrievalSettings

    r = cfg.retrieval
    base = RetrievalSettings(
        history_len=r.history_len,
        T=r.T,
        K=r.K,
        measure=r.measure,
        use_excess=r.use_excess,
        pool=r.pool,
        stride=r.stride,
        dtw_radius=r.dtw_radius,
        predicate=r.predicate,
    )
    return replace(base, **over)


def _model_config(cfg: RunConfig):
    from .denoiser import ModelConfig

    m, r = cfg.model, cfg.retrieval
    return ModelConfig(
        layers=m.layers,
        heads=m.heads,
        d_model=m.d_model,
        step_embed_dim=m.step_embed_dim,
        ff_mult=m.ff_mult,
        K=r.K,
        history_len=r.history_len,
        T=r.T,
        seed=cfg.seed_for("init"),
    )


def _schedule(cfg: RunConfig):
    from .diffusion import make_schedule

    s = cfg.schedule
    return make_schedule(s.H, s.beta_min, s.beta_max)


def _scale(cfg: RunConfig, n_paths: int | None = None):
    from .evaluation import ExperimentScale

    m, t = cfg.model, cfg.train
    return ExperimentScale(
        layers=m.layers,
        heads=m.heads,
        d_model=m.d_model,
        step_embed_dim=m.step_embed_dim,
        ff_mult=m.ff_mult,
        batches=t.batches,
        batch_size=t.batch_size,
        lr=t.lr,
        H=cfg.schedule.H,
        n_paths=cfg.evaluate.n_paths if n_paths is None else n_paths,
        eval_windows=cfg.evaluate.eval_windows,
    )


def _load_model(cfg: RunConfig):
    """Checkpoint from ``paths.checkpoint``, checked against the configured architecture."""
    from .denoiser import CheckpointError, TorchDenoiser, load_checkpoint

    net, _ = load_checkpoint(_require(cfg.paths.checkpoint, "checkpoint"))
    want = _model_config(cfg).fingerprint()
    if net.fingerprint != want:
        raise CheckpointError(
            f"checkpoint fingerprint {net.fingerprint} does not match configured model {want}"
        )
    return TorchDenoiser(net)


def _split(cfg: RunConfig, panel) -> int:
    from .evaluation import split_point

    return split_point(panel, cfg.train.train_fraction)


def _targets(cfg: RunConfig, panel) -> list[str]:
    names = [str(s) for s in cfg.generate.targets] or list(panel.symbols)
    for n in names:
        panel.index_of(n)
    return names


def _anchor_t(cfg: RunConfig, panel) -> int:
    t = panel.n_timestamps if cfg.generate.t is None else cfg.generate.t
    if not cfg.retrieval.history_len <= t <= panel.n_timestamps:
        raise ValueError(f"generate.t={t} outside [{cfg.retrieval.history_len}, {panel.n_timestamps}]")
    return t


def _write_ensemble(out: Path, stem: str, paths: np.ndarray, p0: float) -> dict:
    """Trajectory and quantile-band CSVs for one [n_paths, T] ensemble."""
    from .diffusion import quantile_bands
    from .market_data import returns_to_prices

    prices = np.stack([returns_to_prices(p0, p)[1:] for p in paths])
    traj = out / f"{stem}_trajectories.csv"
    _write_rows(
        traj,
        ("path_id", "step", "return", "price"),
        ((k, s + 1, paths[k, s], prices[k, s]) for k in range(paths.shape[0]) for s in range(paths.shape[1])),
    )
    rb, pb = quantile_bands(paths), quantile_bands(prices)
    bands = out / f"{stem}_bands.csv"
    _write_rows(
        bands,
        ("step", "return_q25", "return_median", "return_q75", "price_q25", "price_median", "price_q75"),
        ((s + 1, rb[0, s], rb[1, s], rb[2, s], pb[0, s], pb[1, s], pb[2, s]) for s in range(paths.shape[1])),
    )
    return {"trajectories": traj.name, "bands": bands.name}


def _generate(cfg, model, prices, returns, settings, t: int, label: str, out: Path, tag: str = "") -> dict:
    from .dataset import WindowSource
    from .diffusion import sample_many

    names = _targets(cfg, returns)
    src = WindowSource(returns, settings, t_min=t, t_max=t, targets=names, seed=cfg.seed_for(f"{label}/retrieval"),
                       with_target=False)
    conds = src.conditions([(returns.index_of(n), t) for n in names])
    paths = sample_many(conds, model, _schedule(cfg), cfg.seed_for(f"{label}/sample"), cfg.generate.n_paths)
    per = {}
    for name, cond, ens in zip(names, conds, paths):
        p0 = float(prices.prices[prices.index_of(name), t]) if prices is not None else 1.0
        files = _write_ensemble(out, f"{tag}{name}", ens, p0)
        per[name] = {
            **files,
            "neighbors": list(cond.row_symbols[1:]),
            "mean_realized_vol": float(np.mean(ens.std(axis=1, ddof=1))) if ens.shape[1] > 1 else None,
        }
    return per


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(cfg: RunConfig) -> dict:
    from .market_data import ingest_csv, save_panel

    src = _require(cfg.paths.csv, "csv")
    panel = ingest_csv(src, cfg.data.market, cfg.data.frequency)
    out = _out_dir(cfg)
    save_panel(panel, out / PANEL_FILE)
    return {
        "panel": PANEL_FILE,
        "market": panel.market,
        "frequency": panel.frequency,
        "n_symbols": len(panel.symbols),
        "n_timestamps": len(panel.timestamps),
        "dropped_symbols": list(panel.dropped),
    }


def cmd_synth_data(cfg: RunConfig) -> dict:
    from .market_data import save_panel, synth_factor_panel

    d = cfg.data
    factors = None
    if d.factor_seed is not None:
        rng = np.random.default_rng(d.factor_seed)
        factors = d.factor_vol * rng.standard_normal((d.n_factors, d.n_steps - 1))
    panel = synth_factor_panel(
        d.n_stocks,
        d.n_steps,
        d.n_factors,
        cfg.seed_for("synth-data"),
        d.noise_vol,
        d.factor_vol,
        frequency=d.frequency,
        market=d.market,
        start=d.start,
        factors=factors,
        vol_regime_scale=d.vol_regime_scale,
        vol_regime_switch=d.vol_regime_switch,
    )
    save_panel(panel, _out_dir(cfg) / PANEL_FILE)
    return {"panel": PANEL_FILE, "n_symbols": d.n_stocks, "n_timestamps": d.n_steps, "market": d.market}


def cmd_train(cfg: RunConfig) -> dict:
    from .dataset import WindowSource
    from .denoiser import save_checkpoint, train

    _, returns = _load_panels(cfg.paths.panel)
    T = cfg.retrieval.T
    src = WindowSource(returns, _settings(cfg), t_max=_split(cfg, returns) - T, seed=cfg.seed_for("train/retrieval"))
    init_from = cfg.train.init_from
    if init_from is not None:
        _require(init_from, "init_from")
    mc = _model_config(cfg)
    res = train(
        src,
        mc,
        _schedule(cfg),
        init_from=init_from,
        batches=cfg.train.batches,
        lr=cfg.train.lr,
        batch_size=cfg.train.batch_size,
        seed=cfg.seed_for("train"),
        objective=cfg.train.objective,
    )
    res.trainer.state.rng_state = res.trainer.rng.bit_generator.state
    save_checkpoint(res.net, res.trainer.state, _out_dir(cfg) / CHECKPOINT_FILE)
    losses = res.losses
    return {
        "checkpoint": CHECKPOINT_FILE,
        "fingerprint": mc.fingerprint(),
        "param_count": mc.param_count(),
        "n_train_anchors": len(src),
        "batches": len(losses),
        "loss_first": losses[0] if losses else None,
        "loss_last": losses[-1] if losses else None,
        "loss_mean_last_10pct": float(np.mean(losses[-max(1, len(losses) // 10) :])) if losses else None,
        "fine_tuned_from": init_from,
    }


def cmd_generate(cfg: RunConfig) -> dict:
    prices, returns = _load_panels(cfg.paths.panel)
    model = _load_model(cfg)
    t = _anchor_t(cfg, returns)
    settings = _settings(cfg, pool=cfg.generate.pool)
    per = _generate(cfg, model, prices, returns, settings, t, "generate", _out_dir(cfg))
    return {"anchor_t": t, "n_paths": cfg.generate.n_paths, "pool": settings.pool, "targets": per}


def _held_out(cfg: RunConfig, returns, universe=None, label="evaluate"):
    from .dataset import WindowSource, spaced_anchors

    src = WindowSource(returns, _settings(cfg), t_min=_split(cfg, returns), universe=universe,
                       seed=cfg.seed_for(f"{label}/retrieval"))
    return src, spaced_anchors(src.anchors, cfg.evaluate.eval_windows, cfg.seed_for(f"{label}/anchors"))


def cmd_evaluate(cfg: RunConfig) -> dict:
    from .evaluation import evaluate_paths, generate_paths

    _, returns = _load_panels(cfg.paths.panel)
    model = _load_model(cfg)
    src, anchors = _held_out(cfg, returns)
    paths = generate_paths(model, src.conditions(anchors), _schedule(cfg), cfg.seed_for("evaluate/sample"),
                           cfg.evaluate.n_paths)
    rep = evaluate_paths(returns, anchors, paths, cfg.retrieval.T)
    out = _out_dir(cfg)
    _write_rows(
        out / "per_stock.csv",
        ("symbol", "correlation", "market_ranking"),
        ((s, v["correlation"], v["market_ranking"]) for s, v in rep.per_stock.items()),
    )
    return {"evaluation": rep.to_dict(), "per_stock_csv": "per_stock.csv"}


def cmd_whatif(cfg: RunConfig) -> dict:
    prices, returns = _load_panels(cfg.paths.panel)
    model = _load_model(cfg)
    t = _anchor_t(cfg, returns)
    out = _out_dir(cfg)
    base = _settings(cfg, pool=cfg.whatif.pool, predicate=None)
    cond = _settings(cfg, pool=cfg.whatif.pool, predicate=cfg.whatif.predicate)
    # both runs share the sampling label so only the retrieval pool differs
    plain = _generate(cfg, model, prices, returns, base, t, "whatif", out, tag="base_")
    steered = _generate(cfg, model, prices, returns, cond, t, "whatif", out, tag="whatif_")
    vb = [v["mean_realized_vol"] for v in plain.values()]
    vw = [v["mean_realized_vol"] for v in steered.values()]
    ratio = None
    if None not in vb and None not in vw and np.mean(vb) > 0:
        ratio = float(np.mean(vw) / np.mean(vb))
    return {
        "anchor_t": t,
        "predicate": cfg.whatif.predicate,
        "pool": cfg.whatif.pool,
        "base": plain,
        "whatif": steered,
        "vol_ratio": ratio,
    }


def cmd_cross_market(cfg: RunConfig) -> dict:
    from .evaluation import evaluate_paths, generate_paths

    _, target = _load_panels(cfg.paths.panel)
    _, source = _load_panels(cfg.paths.source_panel, "source_panel")
    model = _load_model(cfg)
    sched = _schedule(cfg)
    out = {"target_market": target.market, "source_market": source.market}
    for label, universe in (("same_market", None), ("cross_market", source)):
        src, anchors = _held_out(cfg, target, universe=universe, label="cross-market")
        paths = generate_paths(model, src.conditions(anchors), sched, cfg.seed_for("cross-market/sample"),
                               cfg.evaluate.n_paths)
        out[label] = evaluate_paths(target, anchors, paths, cfg.retrieval.T).to_dict()
    return out


def cmd_ablate(cfg: RunConfig) -> dict:
    from .evaluation import ABLATION_COLUMNS, run_ablation, write_csv

    _, returns = _load_panels(cfg.paths.panel)
    r = cfg.retrieval
    cells = run_ablation(
        returns,
        list(cfg.ablate.methods),
        list(cfg.ablate.models),
        history_len=r.history_len,
        T=r.T,
        K=r.K,
        scale=_scale(cfg),
        seed=cfg.seed_for("ablate"),
        train_fraction=cfg.train.train_fraction,
    )
    rows = [c.to_dict() for c in cells]
    write_csv(rows, ABLATION_COLUMNS, _out_dir(cfg) / "ablation.csv")
    return {"cells": rows, "table_csv": "ablation.csv"}


def cmd_sensitivity(cfg: RunConfig) -> dict:
    from .evaluation import write_csv
    from .experiments import sensitivity_grid

    _, returns = _load_panels(cfg.paths.panel)
    cells = sensitivity_grid(
        returns,
        [int(k) for k in cfg.sensitivity.ks],
        [int(h) for h in cfg.sensitivity.steps],
        history_len=cfg.retrieval.history_len,
        T=cfg.retrieval.T,
        scale=_scale(cfg),
        seed=cfg.seed_for("sensitivity"),
        train_fraction=cfg.train.train_fraction,
    )
    write_csv(cells, ("K", "steps", "market_ranking", "correlation"), _out_dir(cfg) / "sensitivity.csv")
    return {"ks": list(cfg.sensitivity.ks), "steps": list(cfg.sensitivity.steps), "cells": cells,
            "table_csv": "sensitivity.csv"}


def _strategies(cfg: RunConfig):
    from .optimizer import StrategyConfig

    o = cfg.optimize
    out = []
    for k, spec in enumerate(o.strategies):
        if not isinstance(spec, dict) or "signal" not in spec:
            raise ConfigError(f"optimize.strategies[{k}] needs a 'signal' (momentum lookback)")
        extra = set(spec) - {"name", "signal", "horizon", "rebalance_every", "turnover_fraction", "n_long", "n_short"}
        if extra:
            raise ConfigError(f"optimize.strategies[{k}]: unknown keys {sorted(extra)}")
        out.append(
            StrategyConfig(
                int(spec["signal"]),
                horizon=spec.get("horizon", o.horizon),
                rebalance_every=spec.get("rebalance_every", o.rebalance_every),
                turnover_fraction=spec.get("turnover_fraction", o.turnover_fraction),
                n_long=spec.get("n_long", o.n_long),
                n_short=spec.get("n_short", o.n_short),
                name=str(spec.get("name", f"strategy{k}")),
            )
        )
    return out


def cmd_optimize(cfg: RunConfig) -> dict:
    from .dataset import WindowSource
    from .experiments import simulate_windows
    from .market_data import ReturnPanel
    from .optimizer import (
        ForecasterSpec,
        ScenarioSet,
        StrategyConfig,
        Thresholds,
        augment_dataset,
        model_based_optimize,
        rule_based_filter,
    )

    o, r = cfg.optimize, cfg.retrieval
    _, returns = _load_panels(cfg.paths.panel)
    split = _split(cfg, returns)
    hl, T = r.history_len, r.T
    model = _load_model(cfg) if cfg.paths.checkpoint else None
    sched = _schedule(cfg)

    # scenarios: consecutive chunks of the held-out stretch, plus generated windows
    test = returns.slice_time(split, returns.n_timestamps)
    n = max(1, o.n_scenarios)
    bounds = np.linspace(0, test.n_timestamps, n + 1).astype(int)
    real_chunks = [test.slice_time(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
    panels, prov = real_chunks, [{"source": "real", "start": int(split + a)} for a in bounds[:-1]]
    if model is not None:
        settings = _settings(cfg, pool=cfg.generate.pool, predicate=o.scenario_predicate)
        src = WindowSource(returns, settings, t_min=split, t_max=split, seed=cfg.seed_for("optimize/retrieval"),
                           with_target=False)
        gen = simulate_windows(src, model, sched, [split], n, cfg.seed_for("optimize/scenarios"))
        ts = returns.timestamps[split - hl : split - hl + hl + T]
        sim_panels = [ReturnPanel(returns.symbols, ts, w, returns.kind, returns.frequency, returns.market) for w in gen]
        scen_len = min(p.n_timestamps for p in real_chunks + sim_panels)
        panels = [p.slice_time(p.n_timestamps - scen_len, p.n_timestamps) for p in real_chunks + sim_panels]
        prov = prov + [{"source": "sim", "seed_label": "optimize/scenarios", "path": k,
                        "predicate": o.scenario_predicate} for k in range(len(sim_panels))]
    scenarios = ScenarioSet(panels, prov)
    th = Thresholds(**o.thresholds)
    rule = rule_based_filter(_strategies(cfg), scenarios, th)

    # model-based search over simulation-augmented training sets
    mults = [int(m) for m in o.multipliers] if model is not None else [0]
    gen_src = WindowSource(returns, _settings(cfg, pool=cfg.generate.pool), t_max=split - T,
                           seed=cfg.seed_for("optimize/retrieval"), with_target=False)
    first = min(t for _, t in gen_src.anchors) if model is not None else hl
    anchors_t = list(range(first, split - T + 1, T))
    if not anchors_t:
        raise ValueError("training stretch too short for a single window")
    real = [returns.returns[:, t - hl : t + T] for t in anchors_t]
    sims = []
    if model is not None and max(mults) > 0:
        sims = simulate_windows(gen_src, model, sched, anchors_t, max(mults), cfg.seed_for("optimize/augment"))
    datasets = {f"{m}x": augment_dataset(real, sims, m, seed=cfg.seed_for("optimize/augment")) for m in mults}
    grid = [ForecasterSpec(tuple(int(x) for x in g["lags"]), float(g.get("alpha", 1.0))) for g in o.grid]
    warm = max(max(g.lags) for g in grid)
    validation = returns.slice_time(max(0, split - warm), returns.n_timestamps)
    template = StrategyConfig(warm, horizon=o.horizon, rebalance_every=o.rebalance_every,
                              turnover_fraction=o.turnover_fraction, n_long=o.n_long, n_short=o.n_short)
    mb = model_based_optimize(grid, datasets, validation, template, hl)
    from .evaluation import write_csv

    cols = ("grid_index", "lags", "alpha", "dataset", "n_windows", "annualized_return", "max_drawdown", "sharpe")
    write_csv([{**row, "lags": " ".join(map(str, row["lags"]))} for row in mb.table], cols,
              _out_dir(cfg) / "model_based.csv")
    return {
        "scenarios": scenarios.provenance,
        "thresholds": o.thresholds,
        "rule_based": rule.to_dict(),
        "model_based": {"table": mb.table, "best": mb.best, "table_csv": "model_based.csv"},
    }


COMMANDS = {
    "ingest": cmd_ingest,
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "whatif": cmd_whatif,
    "cross-market": cmd_cross_market,
    "ablate": cmd_ablate,
    "optimize": cmd_optimize,
    "sensitivity": cmd_sensitivity,
}

# flag -> config key
FLAG_KEYS = {
    "seed": "seed",
    "out": "paths.out_dir",
    "panel": "paths.panel",
    "source_panel": "paths.source_panel",
    "csv": "paths.csv",
    "checkpoint": "paths.checkpoint",
    "market": "data.market",
    "frequency": "data.frequency",
    "init_from": "train.init_from",
    "batches": "train.batches",
    "targets": "generate.targets",
    "n_paths": "generate.n_paths",
    "t": "generate.t",
    "predicate": "whatif.predicate",
    "methods": "ablate.methods",
    "models": "ablate.models",
    "k": "sensitivity.ks",
    "steps": "sensitivity.steps",
}
LIST_FLAGS = {"targets", "methods", "models", "k", "steps"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set retrieval.K=8")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="windtunnel", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"windtunnel {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    inputs = {
        "ingest": ["csv", "market", "frequency"],
        "synth-data": ["market", "frequency"],
        "train": ["panel", "init_from", "batches"],
        "generate": ["panel", "checkpoint", "targets", "n_paths", "t"],
        "evaluate": ["panel", "checkpoint"],
        "whatif": ["panel", "checkpoint", "targets", "n_paths", "t", "predicate"],
        "cross-market": ["panel", "source_panel", "checkpoint"],
        "ablate": ["panel", "methods", "models"],
        "optimize": ["panel", "checkpoint"],
        "sensitivity": ["panel", "k", "steps"],
    }
    types_ = {"batches": int, "n_paths": int, "t": int}
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        for flag in inputs[name]:
            sp.add_argument("--" + flag.replace("_", "-"), dest=flag, type=types_.get(flag, str),
                            help="comma-separated list" if flag in LIST_FLAGS else None)
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    sets = list(args.set)
    for flag, key in FLAG_KEYS.items():
        val = getattr(args, flag, None)
        if val is None:
            continue
        if flag in LIST_FLAGS:
            items = [x.strip() for x in str(val).split(",") if x.strip()]
            val = [int(x) for x in items] if flag in ("k", "steps") else items
        sets.append(f"{key}={json.dumps(val)}")
    return apply_overrides(cfg, sets) if sets else cfg


def _classify(exc: BaseException) -> str:
    from .denoiser import CheckpointError
    from .market_data import PanelError
    from .retrieval import PredicateError, RetrievalError

    if isinstance(exc, ConfigError):
        return "config_error"
    if isinstance(exc, (MissingInput, FileNotFoundError)):
        return "missing_input"
    if isinstance(exc, CheckpointError):
        return "checkpoint_mismatch"
    if isinstance(exc, (RetrievalError, PredicateError)):
        return "retrieval_error"
    if isinstance(exc, (PanelError, ValueError, KeyError)):
        return "data_error"
    return "internal_error"


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        import torch

        torch.set_num_threads(cfg.runtime.threads)
        report = COMMANDS[args.command](cfg)
        _finish(cfg, args.command, report)
    except Exception as exc:  # every failure becomes one JSON object
        kind = _classify(exc)
        err = {"error": {"type": kind, "exception": type(exc).__name__, "message": str(exc), "command": args.command}}
        if isinstance(exc, ConfigError) and exc.line is not None:
            err["error"]["line"] = exc.line
        if kind == "internal_error":
            logger.debug("unhandled error", exc_info=True)
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return EXIT_CODES[kind]
    print(json.dumps({"ok": True, "command": args.command, "out_dir": cfg.paths.out_dir}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
