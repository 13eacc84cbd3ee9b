"""Generation-quality and portfolio metrics, baseline generators and the ablation harness."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import RetrievalSettings, WindowSource, spaced_anchors
from .diffusion import CondBatch, NoiseSchedule, sample_many
from .market_data import ReturnPanel
from .retrieval import ConditionSet, UndefinedCorrelation, pearson

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class SharpeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# generation quality


def sim_real_correlation(real_future, generated) -> float:
    """Pearson correlation with the real future; a 2-D ensemble is reduced to its mean path."""
    g = np.asarray(generated, dtype=np.float64)
    if g.ndim == 2:
        g = g.mean(axis=0)
    return pearson(real_future, g)


def ranking_details(real_future, generated, universe_futures: Mapping[str, Sequence[float]]):
    """``(percentile, skipped_symbols)``; see :func:`market_ranking`."""
    g = np.asarray(generated, dtype=np.float64)
    if g.ndim == 2:
        g = g.mean(axis=0)
    gen = pearson(real_future, g)
    below = 0.0
    total = 1
    skipped = []
    for sym, fut in universe_futures.items():
        try:
            c = pearson(real_future, fut)
        except UndefinedCorrelation:
            skipped.append(sym)
            continue
        total += 1
        if c < gen:
            below += 1.0
        elif c == gen:
            below += 0.5
    return (1.0 + below) / total, skipped


def market_ranking(real_future, generated, universe_futures: Mapping[str, Sequence[float]]) -> float:
    """Share of candidates (generated path plus every universe stock) whose
    correlation with the real future is at most the generated path's; ties
    with universe stocks count half. Zero-variance universe stocks are skipped."""
    pct, skipped = ranking_details(real_future, generated, universe_futures)
    if skipped:
        logger.debug("market_ranking skipped degenerate candidates: %s", skipped)
    return pct


@dataclass
class GenEvalReport:
    correlation: float
    market_ranking: float
    universe_size: int
    n_windows: int
    per_stock: dict = field(default_factory=dict)
    skipped: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return d


def evaluate_paths(
    panel: ReturnPanel,
    anchors: Sequence[tuple[int, int]],
    paths: Sequence[np.ndarray],
    T: int,
    *,
    universe: ReturnPanel | None = None,
) -> GenEvalReport:
    """Score generated ensembles against the realized futures of their anchors.

    The ranking universe is every other symbol of ``universe`` (default: the
    target panel) over the same future interval.
    """
    u = universe if universe is not None else panel
    corrs, ranks, per = [], [], {}
    skipped = 0
    n_candidates = 1
    for (i, t), ens in zip(anchors, paths):
        real = panel.returns[i, t : t + T]
        sym = panel.symbols[i]
        others = {s: u.returns[j, t : t + T] for j, s in enumerate(u.symbols) if s != sym or u is not panel}
        try:
            c = sim_real_correlation(real, ens)
            r, sk = ranking_details(real, ens, others)
        except UndefinedCorrelation:
            skipped += 1
            continue
        corrs.append(c)
        ranks.append(r)
        n_candidates = 1 + len(others) - len(sk)
        per.setdefault(sym, []).append((c, r))
    if not corrs:
        raise UndefinedCorrelation("every evaluation window was degenerate")
    per_stock = {
        s: {"correlation": float(np.mean([c for c, _ in v])), "market_ranking": float(np.mean([r for _, r in v]))}
        for s, v in sorted(per.items())
    }
    return GenEvalReport(
        correlation=float(np.mean(corrs)),
        market_ranking=float(np.mean(ranks)),
        universe_size=n_candidates,
        n_windows=len(corrs),
        per_stock=per_stock,
        skipped=skipped,
    )


# ---------------------------------------------------------------------------
# portfolio metrics


def annualized_return(nav, periods_per_year: int = 252) -> float:
    nav = np.asarray(nav, dtype=np.float64)
    if len(nav) < 2:
        raise ValueError("nav needs at least 2 points")
    if np.any(nav <= 0):
        raise ValueError("nav must be positive")
    return float((nav[-1] / nav[0]) ** (periods_per_year / (len(nav) - 1)) - 1.0)


def max_drawdown(nav) -> float:
    nav = np.asarray(nav, dtype=np.float64)
    if len(nav) == 0 or np.any(nav <= 0):
        raise ValueError("nav must be nonempty and positive")
    return float(min(0.0, np.min(nav / np.maximum.accumulate(nav) - 1.0)))


def sharpe(period_returns, periods_per_year: int = 252) -> float:
    """Mean over sample standard deviation, annualized; zero risk-free rate."""
    r = np.asarray(period_returns, dtype=np.float64)
    if len(r) < 2:
        raise SharpeError("need at least 2 returns")
    sd = float(np.std(r, ddof=1))
    if sd == 0.0 or sd < 1e-15 * max(1.0, float(np.max(np.abs(r)))):
        raise SharpeError("zero standard deviation")
    return float(r.mean() / sd * math.sqrt(periods_per_year))


@dataclass
class PortfolioReport:
    annualized_return: float
    max_drawdown: float
    sharpe: float
    nav: np.ndarray

    @classmethod
    def from_nav(cls, nav, periods_per_year: int = 252) -> "PortfolioReport":
        nav = np.asarray(nav, dtype=np.float64)
        r = nav[1:] / nav[:-1] - 1.0
        try:
            s = sharpe(r, periods_per_year)
        except SharpeError:
            s = 0.0
        return cls(annualized_return(nav, periods_per_year), max_drawdown(nav), s, nav)

    def to_dict(self, with_nav: bool = False) -> dict:
        d = {
            "annualized_return": self.annualized_return,
            "max_drawdown": self.max_drawdown,
            "sharpe": self.sharpe,
        }
        if with_nav:
            d["nav"] = self.nav.tolist()
        return d


# ---------------------------------------------------------------------------
# generators


class LinearGenerator:
    """Ridge regression from the flattened observed cells to the normalized future."""

    def __init__(self, ridge: float = 1.0):
        self.ridge = ridge
        self.coef: np.ndarray | None = None

    @staticmethod
    def _features(conds: Sequence[ConditionSet]) -> np.ndarray:
        rows = []
        for c in conds:
            obs = c.M.astype(bool)
            rows.append(np.concatenate([[1.0], c.X[obs]]))
        return np.asarray(rows)

    def fit(self, conds: Sequence[ConditionSet]) -> "LinearGenerator":
        F = self._features(conds)
        Y = np.stack([c.target_z() for c in conds])
        if F.shape[1] > 1 and np.all(F[:, 1:].std(axis=0) == 0):
            raise ValueError("degenerate training set: zero-variance features")
        reg = self.ridge * np.eye(F.shape[1])
        reg[0, 0] = 0.0
        self.coef = np.linalg.solve(F.T @ F + reg, F.T @ Y)
        return self

    def predict(self, conds: Sequence[ConditionSet]) -> np.ndarray:
        if self.coef is None:
            raise RuntimeError("fit the generator first")
        return self._features(conds) @ self.coef


@dataclass(frozen=True)
class ExperimentScale:
    """Model and training sizes shared by the synthetic experiments."""

    layers: int = 2
    heads: int = 4
    d_model: int = 32
    step_embed_dim: int = 64
    ff_mult: int = 2
    batches: int = 500
    batch_size: int = 16
    lr: float = 1e-3
    H: int = 50
    n_paths: int = 4
    eval_windows: int = 40


def _model_config(scale: ExperimentScale, s: RetrievalSettings, seed: int):
    from .denoiser import ModelConfig

    return ModelConfig(
        layers=scale.layers,
        heads=scale.heads,
        d_model=scale.d_model,
        step_embed_dim=scale.step_embed_dim,
        ff_mult=scale.ff_mult,
        K=s.K,
        history_len=s.history_len,
        T=s.T,
        seed=seed,
    )


def fit_generator(kind: str, train_src: WindowSource, sched: NoiseSchedule, scale: ExperimentScale, seed: int):
    """Train a generator of ``kind`` (fwt | transformer | linear); returns a predictor."""
    from .denoiser import TorchDenoiser, train

    s = train_src.settings
    if kind == "fwt":
        res = train(train_src, _model_config(scale, s, seed), sched, batches=scale.batches,
                    lr=scale.lr, batch_size=scale.batch_size, seed=seed)
        return TorchDenoiser(res.net)
    if kind == "transformer":
        res = train(train_src, _model_config(scale, s, seed), sched, batches=scale.batches,
                    lr=scale.lr, batch_size=scale.batch_size, seed=seed, objective="direct")
        return _DirectPredictor(res.net)
    if kind == "linear":
        return LinearGenerator().fit(train_src.conditions())
    raise NotImplementedError(f"generator kind {kind!r} is not implemented")


class _DirectPredictor:
    def __init__(self, net):
        self.net = net

    def predict(self, conds: Sequence[ConditionSet]) -> np.ndarray:
        from .denoiser import TorchDenoiser

        batch = CondBatch.stack(conds)
        B, T = len(conds), batch.T
        return TorchDenoiser(self.net).predict_noise(np.zeros((B, T)), np.ones(B, dtype=int), batch)


def generate_paths(model, conds: Sequence[ConditionSet], sched: NoiseSchedule, seed: int, n_paths: int) -> list[np.ndarray]:
    """De-normalized ensembles, one [n_paths, T] array per condition."""
    if hasattr(model, "predict_noise"):
        return list(sample_many(conds, model, sched, seed, n_paths))
    z = model.predict(conds)
    return [c.denormalize_target(row)[None, :] for c, row in zip(conds, z)]


# ---------------------------------------------------------------------------
# ablation


MODEL_KINDS = ("fwt", "transformer", "gan", "linear")


@dataclass
class AblationCell:
    method: str
    model: str
    market_ranking: float | None
    correlation: float | None
    status: str = "ok"

    def to_dict(self) -> dict:
        return asdict(self)


def split_point(panel: ReturnPanel, train_fraction: float) -> int:
    return int(round(train_fraction * panel.n_timestamps))


def run_ablation(
    panel: ReturnPanel,
    methods: Sequence[str],
    models: Sequence[str],
    *,
    history_len: int = 32,
    T: int = 8,
    K: int = 8,
    scale: ExperimentScale = ExperimentScale(),
    seed: int = 0,
    train_fraction: float = 0.7,
) -> list[AblationCell]:
    """Evaluate every (retrieval method, generator) pair on the same held-out windows.

    Training anchors have futures ending before the split; evaluation anchors
    start at or after it. Cells that cannot be trained are reported with a
    status instead of being dropped.
    """
    from .diffusion import make_schedule

    sched = make_schedule(scale.H)
    split = split_point(panel, train_fraction)
    cells = []
    eval_anchors = None
    for method in methods:
        k = 0 if method == "none" else K
        s = RetrievalSettings(history_len=history_len, T=T, K=k, measure=method)
        train_src = WindowSource(panel, s, t_max=split - T, seed=seed)
        test_src = WindowSource(panel, s, t_min=split, seed=seed + 1)
        if eval_anchors is None:
            eval_anchors = spaced_anchors(test_src.anchors, scale.eval_windows, seed)
        conds = test_src.conditions(eval_anchors)
        for kind in models:
            try:
                model = fit_generator(kind, train_src, sched, scale, seed)
            except NotImplementedError:
                cells.append(AblationCell(method, kind, None, None, "not implemented"))
                continue
            except Exception as exc:  # report, never omit
                logger.warning("ablation cell (%s, %s) failed: %s", method, kind, exc)
                cells.append(AblationCell(method, kind, None, None, f"failed: {exc}"))
                continue
            paths = generate_paths(model, conds, sched, seed, scale.n_paths)
            rep = evaluate_paths(panel, eval_anchors, paths, T)
            cells.append(AblationCell(method, kind, rep.market_ranking, rep.correlation))
            logger.info("ablation %s/%s: ranking %.4f corr %.4f", method, kind, rep.market_ranking, rep.correlation)
    return cells


# ---------------------------------------------------------------------------
# report writers

ABLATION_COLUMNS = ("method", "model", "market_ranking", "correlation", "status")


def write_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_csv(rows: Sequence[Mapping], columns: Sequence[str], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v
