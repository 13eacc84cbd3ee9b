"""Conditional noise predictor with factorized time/stock attention, trainer and checkpoints.

Architecture (``d = d_model``, ``f = ff_mult * d``, ``s = step_embed_dim``):

* cell input: ``Linear(2 -> d)`` on (value, observed flag), plus a fixed
  sinusoidal encoding of the column index, plus a learned row embedding
  ``[K + 1, d]``, plus the step embedding;
* step embedding: sinusoidal(h, s) -> ``Linear(s -> d)`` -> SiLU -> ``Linear(d -> d)``;
* ``layers`` pre-norm blocks of time attention (within each row), stock
  attention (within each column) and a GELU feed-forward ``d -> f -> d``;
* ``Linear(d -> 1)`` head on the un-normalized residual stream, read on the
  target cells only. Without a closing norm the output can scale with the
  input value, which keeps the reverse chain stable when a path drifts.

Parameter count::

    3d + (K+1)d + (sd + d + d^2 + d)
    + layers * (6d + 2(4d^2 + 4d) + 2fd + f + d)
    + d + 1
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .diffusion import CondBatch, DiffusionSample, NoiseSchedule, draw_sample

CKPT_MAGIC = b"FWTCKPT1"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    heads: int = 8
    d_model: int = 64
    step_embed_dim: int = 128
    K: int = 16
    history_len: int = 250
    T: int = 20
    seed: int = 0
    ff_mult: int = 2
    row_encoding: bool = True

    def __post_init__(self):
        for name in ("layers", "heads", "d_model", "step_embed_dim", "history_len", "T", "ff_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.step_embed_dim % 2:
            raise ValueError("step_embed_dim must be even")

    def arch(self) -> dict:
        return {
            "layers": self.layers,
            "heads": self.heads,
            "d_model": self.d_model,
            "step_embed_dim": self.step_embed_dim,
            "K": self.K,
            "ff_mult": self.ff_mult,
        }

    def fingerprint(self) -> str:
        """Hash of the fields that determine parameter shapes."""
        blob = json.dumps(self.arch(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def param_count(self) -> int:
        d, s, f, R = self.d_model, self.step_embed_dim, self.ff_mult * self.d_model, self.K + 1
        block = 6 * d + 2 * (4 * d * d + 4 * d) + 2 * f * d + f + d
        return 3 * d + R * d + (s * d + d + d * d + d) + self.layers * block + d + 1


def sinusoidal(pos: torch.Tensor, dim: int) -> torch.Tensor:
    """[..., dim] encoding with sin on even and cos on odd channels."""
    i = torch.arange(0, dim, 2, dtype=pos.dtype)
    freq = torch.exp(-math.log(10000.0) * i / dim)
    ang = pos.unsqueeze(-1) * freq
    out = torch.zeros(pos.shape + (dim,), dtype=pos.dtype)
    out[..., 0::2] = torch.sin(ang)
    out[..., 1::2] = torch.cos(ang)
    return out


class Attention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, s, d = x.shape
        dh = d // self.heads
        q, k, v = self.qkv(x).view(n, s, 3, self.heads, dh).permute(2, 0, 3, 1, 4)
        y = nn.functional.scaled_dot_product_attention(q, k, v)
        y = y.transpose(1, 2).reshape(n, s, d)
        return self.out(y)


class Block(nn.Module):
    def __init__(self, d: int, heads: int, ff: int):
        super().__init__()
        self.ln_time = nn.LayerNorm(d)
        self.attn_time = Attention(d, heads)
        self.ln_rows = nn.LayerNorm(d)
        self.attn_rows = Attention(d, heads)
        self.ln_ff = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, ff)
        self.ff2 = nn.Linear(ff, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, R, L, d = x.shape
        y = self.attn_time(self.ln_time(x).reshape(B * R, L, d)).reshape(B, R, L, d)
        x = x + y
        z = self.ln_rows(x).transpose(1, 2).reshape(B * L, R, d)
        x = x + self.attn_rows(z).reshape(B, L, R, d).transpose(1, 2)
        return x + self.ff2(nn.functional.gelu(self.ff1(self.ln_ff(x))))


class DenoiserNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config
        d = c.d_model
        self.config = c
        self.input_proj = nn.Linear(2, d)
        self.row_embed = nn.Parameter(torch.zeros(c.K + 1, d))
        self.step_in = nn.Linear(c.step_embed_dim, d)
        self.step_out = nn.Linear(d, d)
        self.blocks = nn.ModuleList(Block(d, c.heads, c.ff_mult * d) for _ in range(c.layers))
        self.head = nn.Linear(d, 1)

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()

    def forward(self, xh_target, X, M, h, history_len: int, *, use_row_encoding: bool | None = None):
        """Noise estimate on the target cells, shape [B, T].

        Target cells (``M == 0``) of ``X`` are never read; their value
        channel is taken from ``xh_target``.
        """
        B, R, L = X.shape
        if R != self.config.K + 1:
            raise ValueError(f"expected {self.config.K + 1} rows, got {R}")
        T = L - history_len
        if xh_target.shape != (B, T):
            raise ValueError(f"xh_target shape {tuple(xh_target.shape)} != {(B, T)}")
        dtype = self.head.weight.dtype
        observed = M > 0
        value = torch.where(observed, X, torch.zeros((), dtype=dtype))
        noisy = torch.zeros_like(value)
        noisy[:, 0, history_len:] = xh_target
        value = torch.where(observed, value, noisy)
        x = self.input_proj(torch.stack([value, M], dim=-1))
        x = x + sinusoidal(torch.arange(L, dtype=dtype), self.config.d_model)
        if self.config.row_encoding if use_row_encoding is None else use_row_encoding:
            x = x + self.row_embed[:, None, :]
        step = self.step_out(nn.functional.silu(self.step_in(sinusoidal(h.to(dtype), self.config.step_embed_dim))))
        x = x + step[:, None, None, :]
        for block in self.blocks:
            x = block(x)
        out = self.head(x).squeeze(-1)
        return out[:, 0, history_len:]


def init(config: ModelConfig, dtype: torch.dtype = torch.float32) -> DenoiserNet:
    """Deterministic init from ``config.seed``.

    Linear weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); all biases zero;
    LayerNorm gain 1; row embedding ~ N(0, 0.02^2).
    """
    net = DenoiserNet(config)
    rng = np.random.default_rng(config.seed)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name == "row_embed":
                vals = 0.02 * rng.standard_normal(p.shape)
            elif name.endswith(".bias"):
                vals = np.zeros(p.shape)
            elif ".ln_" in name or name.startswith("ln_"):
                vals = np.ones(p.shape)
            else:
                bound = 1.0 / math.sqrt(p.shape[1])
                vals = rng.uniform(-bound, bound, size=p.shape)
            p.copy_(torch.from_numpy(vals))
    return net.to(dtype)


def _tensor(a, dtype) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a), dtype=dtype)


class TorchDenoiser:
    """Adapts a :class:`DenoiserNet` to the numpy predictor interface used by sampling."""

    def __init__(self, net: DenoiserNet):
        self.net = net

    def predict_noise(self, xh_target, h, cond: CondBatch) -> np.ndarray:
        dtype = self.net.head.weight.dtype
        with torch.no_grad():
            out = self.net(
                _tensor(xh_target, dtype),
                _tensor(cond.X, dtype),
                _tensor(cond.M, dtype),
                torch.as_tensor(np.asarray(h), dtype=torch.long),
                cond.history_len,
            )
        return out.double().numpy()


def forward(net: DenoiserNet, xh_target, x0_cond, M, h, history_len: int) -> np.ndarray:
    cond = CondBatch(np.asarray(x0_cond, dtype=np.float64), np.asarray(M, dtype=np.float64), history_len)
    return TorchDenoiser(net).predict_noise(xh_target, np.asarray(h), cond)


def batch_loss(net: DenoiserNet, batch: DiffusionSample, objective: str = "noise") -> torch.Tensor:
    """Mean squared error over target cells: noise target (default) or the clean target."""
    dtype = net.head.weight.dtype
    if objective == "noise":
        xh, h, target = batch.xh_target, batch.h, batch.eps
    elif objective == "direct":
        xh, h, target = np.zeros_like(batch.x0_target), np.ones_like(batch.h), batch.x0_target
    else:
        raise ValueError(f"unknown objective {objective!r}")
    pred = net(
        _tensor(xh, dtype),
        _tensor(batch.cond.X, dtype),
        _tensor(batch.cond.M, dtype),
        torch.as_tensor(np.asarray(h), dtype=torch.long),
        batch.cond.history_len,
    )
    return torch.mean((_tensor(target, dtype) - pred) ** 2)


def gradients(net: DenoiserNet, batch: DiffusionSample, objective: str = "noise"):
    """``(loss, {name: grad})`` of the batch loss; raises on a non-finite loss."""
    net.zero_grad(set_to_none=True)
    loss = batch_loss(net, batch, objective)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()}")
    loss.backward()
    grads = {n: p.grad.detach().clone() for n, p in net.named_parameters()}
    return float(loss.item()), grads


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainerState:
    lr: float = 1.5e-4
    batch_size: int = 32
    batches: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    rng_state: dict | None = None
    objective: str = "noise"


class Trainer:
    """Adam on the denoising loss with a single numpy stream for every random draw."""

    def __init__(self, net: DenoiserNet, sched: NoiseSchedule, state: TrainerState | None = None, seed: int = 0):
        self.net = net
        self.sched = sched
        self.state = state or TrainerState()
        self.rng = np.random.default_rng(seed)
        if self.state.rng_state is not None:
            self.rng.bit_generator.state = self.state.rng_state
        for name, p in net.named_parameters():
            self.state.m.setdefault(name, torch.zeros_like(p))
            self.state.v.setdefault(name, torch.zeros_like(p))
        self.losses: list[float] = []

    def loss_and_gradients(self, batch: DiffusionSample):
        return gradients(self.net, batch, self.state.objective)

    def step(self, source) -> float:
        st = self.state
        batch = draw_sample(source, self.sched, self.rng, st.batch_size)
        try:
            loss, grads = self.loss_and_gradients(batch)
        except TrainingError as exc:
            raise TrainingError(f"step {st.step}: {exc}; h={batch.h.tolist()}") from exc
        st.step += 1
        c1 = 1.0 - st.beta1**st.step
        c2 = 1.0 - st.beta2**st.step
        with torch.no_grad():
            for name, p in self.net.named_parameters():
                g = grads[name]
                m, v = st.m[name], st.v[name]
                m.mul_(st.beta1).add_(g, alpha=1.0 - st.beta1)
                v.mul_(st.beta2).addcmul_(g, g, value=1.0 - st.beta2)
                p.sub_(st.lr * (m / c1) / ((v / c2).sqrt() + st.eps))
        self.losses.append(loss)
        return loss

    def run(self, source, batches: int | None = None) -> list[float]:
        n = self.state.batches if batches is None else batches
        return [self.step(source) for _ in range(n)]

    def save(self, path: str | Path) -> None:
        self.state.rng_state = self.rng.bit_generator.state
        save_checkpoint(self.net, self.state, path)

    @classmethod
    def resume(cls, path: str | Path, sched: NoiseSchedule) -> "Trainer":
        net, state = load_checkpoint(path)
        return cls(net, sched, state)


@dataclass
class TrainResult:
    net: DenoiserNet
    losses: list[float]
    trainer: Trainer


def train(
    source,
    config: ModelConfig,
    sched: NoiseSchedule,
    *,
    init_from: str | Path | DenoiserNet | None = None,
    batches: int = 500,
    lr: float = 1.5e-4,
    batch_size: int = 32,
    seed: int | None = None,
    objective: str = "noise",
    dtype: torch.dtype = torch.float32,
) -> TrainResult:
    """Run ``batches`` Adam steps; ``init_from`` fine-tunes loaded weights with a fresh optimizer."""
    if init_from is None:
        net = init(config, dtype)
    else:
        if isinstance(init_from, DenoiserNet):
            base = init_from
        else:
            base, _ = load_checkpoint(init_from)
        if base.fingerprint != config.fingerprint():
            raise CheckpointError(
                f"checkpoint fingerprint {base.fingerprint} does not match config {config.fingerprint()}"
            )
        net = init(replace(base.config, row_encoding=config.row_encoding), dtype)
        net.load_state_dict(base.state_dict())
    state = TrainerState(lr=lr, batch_size=batch_size, batches=batches, objective=objective)
    trainer = Trainer(net, sched, state, seed=config.seed if seed is None else seed)
    losses = trainer.run(source, batches)
    return TrainResult(net, losses, trainer)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: magic "FWTCKPT1" | u8 version | u32 header length | JSON header |
# float32 LE tensor payload | u32 CRC32 of everything before it.
# The header directory lists (name, shape, offset) for every tensor.


def _tensors(net: DenoiserNet, state: TrainerState | None) -> list[tuple[str, torch.Tensor]]:
    out = [(f"param/{n}", p.detach()) for n, p in net.named_parameters()]
    if state is not None:
        for n, _ in net.named_parameters():
            if n in state.m:
                out.append((f"adam_m/{n}", state.m[n]))
                out.append((f"adam_v/{n}", state.v[n]))
    return out


def save_checkpoint(net: DenoiserNet, state: TrainerState | None, path: str | Path) -> None:
    payload = io.BytesIO()
    directory = []
    for name, t in _tensors(net, state):
        arr = t.detach().cpu().numpy().astype("<f4")
        directory.append({"name": name, "shape": list(arr.shape), "offset": payload.tell()})
        payload.write(arr.tobytes())
    header = {
        "config": asdict(net.config),
        "fingerprint": net.fingerprint,
        "tensors": directory,
        "trainer": None,
    }
    if state is not None:
        header["trainer"] = {
            k: getattr(state, k)
            for k in ("lr", "batch_size", "batches", "beta1", "beta2", "eps", "step", "rng_state", "objective")
        }
    blob = json.dumps(header, sort_keys=True).encode()
    body = CKPT_MAGIC + struct.pack("<BI", CKPT_VERSION, len(blob)) + blob + payload.getvalue()
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float32):
    """Return ``(net, trainer_state_or_None)``; raises :class:`CheckpointError` on corruption."""
    data = Path(path).read_bytes()
    if len(data) < len(CKPT_MAGIC) + 9 or not data.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a FWTCKPT1 checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    version, hlen = struct.unpack_from("<BI", body, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = len(CKPT_MAGIC) + 5
    header = json.loads(body[off : off + hlen])
    payload = body[off + hlen :]
    config = ModelConfig(**header["config"])
    if config.fingerprint() != header["fingerprint"]:
        raise CheckpointError(f"{path}: fingerprint does not match stored config")
    tensors = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(payload, "<f4", n, entry["offset"]).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy()).to(dtype)
    net = DenoiserNet(config).to(dtype)
    params = {k[len("param/") :]: v for k, v in tensors.items() if k.startswith("param/")}
    try:
        net.load_state_dict(params)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: tensor directory does not match architecture") from exc
    state = None
    if header["trainer"] is not None:
        state = TrainerState(**header["trainer"])
        for n, _ in net.named_parameters():
            if f"adam_m/{n}" in tensors:
                state.m[n] = tensors[f"adam_m/{n}"]
                state.v[n] = tensors[f"adam_v/{n}"]
    return net, state
