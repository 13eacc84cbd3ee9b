"""Conditional DDPM machinery: schedule, forward noising, training batches, sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .retrieval import ConditionSet

DDPM_REFERENCE_STEPS = 1000
DDPM_BETA_MIN = 1e-4
DDPM_BETA_MAX = 0.02


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are 0-indexed: entry ``h - 1`` belongs to diffusion step ``h``."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    @property
    def H(self) -> int:
        return len(self.beta)

    def check_step(self, h) -> np.ndarray:
        h = np.asarray(h)
        if np.any(h < 1) or np.any(h > self.H):
            raise ScheduleError(f"diffusion step out of range 1..{self.H}")
        return h

    def to_dict(self) -> dict:
        return {"H": self.H, "beta": self.beta.tolist()}


def default_beta_range(H: int) -> tuple[float, float]:
    """DDPM's 1000-step linear range rescaled to ``H`` steps."""
    scale = DDPM_REFERENCE_STEPS / H
    return min(DDPM_BETA_MIN * scale, 0.5), min(DDPM_BETA_MAX * scale, 0.999)


def make_schedule(
    H: int = 100,
    beta_min: float | None = None,
    beta_max: float | None = None,
    kind: str = "linear",
) -> NoiseSchedule:
    """Linear beta schedule; omitted bounds default to :func:`default_beta_range`."""
    if kind != "linear":
        raise ScheduleError(f"unsupported schedule kind {kind!r}")
    if H < 1:
        raise ScheduleError("H must be >= 1")
    dmin, dmax = default_beta_range(H)
    beta_min = dmin if beta_min is None else beta_min
    beta_max = dmax if beta_max is None else beta_max
    if not 0 < beta_min <= beta_max < 1:
        raise ScheduleError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    beta = np.linspace(beta_min, beta_max, H)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = (1.0 - prev) / (1.0 - alpha_bar) * beta
    for a in (beta, alpha, alpha_bar, posterior_var):
        a.flags.writeable = False
    return NoiseSchedule(beta, alpha, alpha_bar, posterior_var)


def _per_sample(v: np.ndarray, like: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(v.shape + (1,) * (np.ndim(like) - v.ndim))


def forward_noise(x0, h, eps, sched: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_h) x0 + sqrt(1 - abar_h) eps``; ``h`` may be per-sample."""
    h = sched.check_step(h)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError("x0 and eps shapes differ")
    ab = _per_sample(sched.alpha_bar[h - 1], x0)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def posterior_mean(xh, eps_hat, h, sched: NoiseSchedule) -> np.ndarray:
    h = sched.check_step(h)
    xh = np.asarray(xh, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if xh.shape != eps_hat.shape:
        raise ValueError("xh and eps_hat shapes differ")
    a = _per_sample(sched.alpha[h - 1], xh)
    b = _per_sample(sched.beta[h - 1], xh)
    ab = _per_sample(sched.alpha_bar[h - 1], xh)
    return (xh - b / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)


# ---------------------------------------------------------------------------
# batches


@dataclass(frozen=True)
class CondBatch:
    """Stacked condition tensors ``X``/``M`` of shape [B, K+1, L]."""

    X: np.ndarray
    M: np.ndarray
    history_len: int

    @property
    def T(self) -> int:
        return self.X.shape[2] - self.history_len

    @classmethod
    def stack(cls, conds: Sequence[ConditionSet], repeats: int = 1) -> "CondBatch":
        if not conds:
            raise ValueError("empty batch")
        hl = conds[0].history_len
        shape = conds[0].X.shape
        for c in conds:
            if c.X.shape != shape or c.history_len != hl:
                raise ValueError("condition sets in a batch must share shape")
        X = np.repeat(np.stack([c.X for c in conds]), repeats, axis=0)
        M = np.repeat(np.stack([c.M for c in conds]), repeats, axis=0)
        return cls(X, M, hl)


@dataclass(frozen=True)
class DiffusionSample:
    """One training batch per the noising recipe; ``xh_target`` is built from ``eps``."""

    cond: CondBatch
    x0_target: np.ndarray  # [B, T]
    h: np.ndarray  # [B]
    eps: np.ndarray  # [B, T]
    xh_target: np.ndarray  # [B, T]


class SampleSource(Protocol):
    def draw(self, rng: np.random.Generator, n: int) -> list[ConditionSet]: ...


class ListSource:
    """Sample source over a fixed list of training condition sets."""

    def __init__(self, conds: Sequence[ConditionSet]):
        if not conds:
            raise ValueError("empty data source")
        self.conds = list(conds)

    def __len__(self):
        return len(self.conds)

    def draw(self, rng: np.random.Generator, n: int) -> list[ConditionSet]:
        idx = rng.integers(0, len(self.conds), size=n)
        return [self.conds[i] for i in idx]


def draw_sample(
    source: SampleSource | Sequence[ConditionSet],
    sched: NoiseSchedule,
    rng: np.random.Generator,
    batch_size: int,
) -> DiffusionSample:
    if not hasattr(source, "draw"):
        source = ListSource(source)
    conds = source.draw(rng, batch_size)
    if not conds:
        raise ValueError("empty data source")
    cond = CondBatch.stack(conds)
    x0 = np.stack([c.target_z() for c in conds])
    h = rng.integers(1, sched.H + 1, size=len(conds))
    eps = rng.standard_normal(x0.shape)
    return DiffusionSample(cond, x0, h, eps, forward_noise(x0, h, eps, sched))


class Denoiser(Protocol):
    def predict_noise(self, xh_target: np.ndarray, h: np.ndarray, cond: CondBatch) -> np.ndarray: ...


def noise_loss(eps: np.ndarray, eps_hat: np.ndarray) -> float:
    return float(np.mean((np.asarray(eps) - np.asarray(eps_hat)) ** 2))


def train_step(source, denoiser, sched: NoiseSchedule, rng: np.random.Generator, batch_size: int = 32):
    """One Algorithm-1 step: returns ``(loss, gradients)``.

    Gradients are returned when ``denoiser`` exposes ``loss_and_gradients``
    (the network); plain predictors return ``None``.
    """
    batch = draw_sample(source, sched, rng, batch_size)
    if hasattr(denoiser, "loss_and_gradients"):
        return denoiser.loss_and_gradients(batch)
    eps_hat = denoiser.predict_noise(batch.xh_target, batch.h, batch.cond)
    return noise_loss(batch.eps, eps_hat), None


# ---------------------------------------------------------------------------
# sampling


class AnalyticGaussianDenoiser:
    """Exact noise predictor when the target is standard normal and independent of the condition."""

    def __init__(self, sched: NoiseSchedule):
        self.sched = sched

    def predict_noise(self, xh_target, h, cond=None):
        ab = _per_sample(self.sched.alpha_bar[np.asarray(h) - 1], xh_target)
        return np.asarray(xh_target) * np.sqrt(1.0 - ab)


class OracleNoiseDenoiser:
    """Recovers the injected noise from the true target stored in training conditions."""

    def __init__(self, sched: NoiseSchedule):
        self.sched = sched

    def predict_noise(self, xh_target, h, cond: CondBatch):
        x0 = cond.X[:, 0, cond.history_len :]
        ab = _per_sample(self.sched.alpha_bar[np.asarray(h) - 1], xh_target)
        return (np.asarray(xh_target) - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)


def path_rng(seed: int, path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(path,)))


def sample_batch(
    cond: CondBatch,
    denoiser,
    sched: NoiseSchedule,
    seeds: Sequence[tuple[int, int]],
) -> np.ndarray:
    """Reverse-diffuse one path per batch row; row ``i`` draws from ``path_rng(*seeds[i])``.

    Returns normalized target trajectories [B, T].
    """
    B, T = cond.X.shape[0], cond.T
    if len(seeds) != B:
        raise ValueError("one seed pair per batch row")
    noise = np.stack([path_rng(s, p).standard_normal((sched.H + 1, T)) for s, p in seeds])
    x = noise[:, 0]
    for h in range(sched.H, 0, -1):
        hv = np.full(B, h)
        eps_hat = np.asarray(denoiser.predict_noise(x, hv, cond), dtype=np.float64)
        if eps_hat.shape != x.shape:
            raise ValueError(f"denoiser returned shape {eps_hat.shape}, expected {x.shape}")
        mu = posterior_mean(x, eps_hat, hv, sched)
        x = mu + np.sqrt(sched.posterior_var[h - 1]) * noise[:, h] if h > 1 else mu
    return x


def sample(
    cond: ConditionSet,
    denoiser,
    sched: NoiseSchedule,
    seed: int,
    n_paths: int,
    *,
    chunk: int = 256,
) -> np.ndarray:
    """Ensemble of ``n_paths`` de-normalized return trajectories, shape [n_paths, T]."""
    return sample_many([cond], denoiser, sched, seed, n_paths, chunk=chunk)[0]


def sample_many(
    conds: Sequence[ConditionSet],
    denoiser,
    sched: NoiseSchedule,
    seed: int,
    n_paths: int,
    *,
    chunk: int = 256,
) -> np.ndarray:
    """Sample ``n_paths`` per condition set; result [n_conds, n_paths, T].

    Path ``p`` of condition ``c`` draws from the stream ``(seed, c * n_paths + p)``,
    so results do not depend on ``chunk``.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    jobs = [(c, p) for c in range(len(conds)) for p in range(n_paths)]
    T = conds[0].T
    out = np.empty((len(conds), n_paths, T))
    for lo in range(0, len(jobs), chunk):
        part = jobs[lo : lo + chunk]
        batch = CondBatch.stack([conds[c] for c, _ in part])
        z = sample_batch(batch, denoiser, sched, [(seed, c * n_paths + p) for c, p in part])
        for (c, p), row in zip(part, z):
            out[c, p] = conds[c].denormalize_target(row)
    return out


def quantile_bands(paths: np.ndarray, qs: Sequence[float] = (0.25, 0.5, 0.75)) -> np.ndarray:
    """Pointwise quantiles of an ensemble [n_paths, T] -> [len(qs), T]."""
    return np.quantile(np.asarray(paths), qs, axis=0)
