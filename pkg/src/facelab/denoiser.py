"""Conditional noise-prediction network and its training loop.

The denoiser eps(x_t, t, c) is a small conditional UNet over grayscale
grids. Conditions are a discrete vocabulary standing in for text prompts;
id 0 is the null condition (classifier-free dropout target) and one id is
reserved as the negative condition used by guidance.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import images
from .rngs import stream
from .schedule import NoiseSchedule

NULL_CONDITION = "null"
NEGATIVE_CONDITION = "degraded"
DEFAULT_VOCAB = (NULL_CONDITION, NEGATIVE_CONDITION, "faces1", "faces2", "faces3", "faces4")


@dataclass(frozen=True)
class ConditionVocab:
    names: tuple[str, ...] = DEFAULT_VOCAB

    def __post_init__(self):
        if NULL_CONDITION not in self.names or NEGATIVE_CONDITION not in self.names:
            raise ValueError("vocabulary must include the null and negative conditions")

    def id_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown condition {name!r}") from None

    @property
    def null_id(self) -> int:
        return self.names.index(NULL_CONDITION)

    @property
    def negative_id(self) -> int:
        return self.names.index(NEGATIVE_CONDITION)


def _timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of t scaled to [0, 1]."""
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = t[:, None] * freqs[None, :] * 1000.0
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class FilmBlock(nn.Module):
    """Two 3x3 convs with a per-channel scale/shift from the embedding."""

    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm = nn.GroupNorm(min(8, c_out), c_out)
        self.film = nn.Linear(emb_dim, 2 * c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)

    def forward(self, x, emb):
        h = self.norm(self.conv1(x))
        scale, shift = self.film(emb)[:, :, None, None].chunk(2, dim=1)
        h = F.silu(h * (1.0 + scale) + shift)
        return self.conv2(h)


class CondUNet(nn.Module):
    """Small 2-level UNet; input and output are (N, C, H, W) with H, W % 4 == 0."""

    def __init__(self, channels: int = 24, vocab_size: int = len(DEFAULT_VOCAB), emb_dim: int = 64, in_channels: int = 1):
        super().__init__()
        c = channels
        self.emb_dim = emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.cond_emb = nn.Embedding(vocab_size, emb_dim)
        self.enc1 = FilmBlock(in_channels, c, emb_dim)
        self.down1 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.enc2 = FilmBlock(2 * c, 2 * c, emb_dim)
        self.down2 = nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1)
        self.mid = FilmBlock(4 * c, 4 * c, emb_dim)
        self.up1 = nn.Conv2d(4 * c, 2 * c, 3, padding=1)
        self.dec1 = FilmBlock(4 * c, 2 * c, emb_dim)
        self.up2 = nn.Conv2d(2 * c, c, 3, padding=1)
        self.dec2 = FilmBlock(2 * c, c, emb_dim)
        self.out = nn.Conv2d(c, in_channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x, t_frac, cond_id):
        emb = self.time_mlp(_timestep_embedding(t_frac, self.emb_dim)) + self.cond_emb(cond_id)
        h1 = self.enc1(x, emb)
        h2 = self.enc2(F.silu(self.down1(F.silu(h1))), emb)
        m = self.mid(F.silu(self.down2(F.silu(h2))), emb)
        u1 = F.interpolate(F.silu(m), scale_factor=2, mode="nearest")
        d1 = self.dec1(torch.cat([self.up1(u1), h2], dim=1), emb)
        u2 = F.interpolate(F.silu(d1), scale_factor=2, mode="nearest")
        d2 = self.dec2(torch.cat([self.up2(u2), h1], dim=1), emb)
        return self.out(F.silu(d2))


@dataclass
class Denoiser:
    """Network weights plus the condition vocabulary and training provenance."""

    net: CondUNet
    vocab: ConditionVocab = field(default_factory=ConditionVocab)
    timesteps: int = 200
    trained_steps: int = 0

    @property
    def is_trained(self) -> bool:
        return self.trained_steps > 0

    def predict(self, x_t: np.ndarray, t: int, cond_id: int) -> np.ndarray:
        """eps prediction for a single (H, W, C) image grid."""
        return self.predict_batch(x_t[None], np.full(1, t), np.full(1, cond_id))[0]

    def predict_batch(self, x_t: np.ndarray, t: np.ndarray, cond_id: np.ndarray) -> np.ndarray:
        """eps prediction for a stack of images, shape (N, H, W, C)."""
        if np.any(cond_id < 0) or np.any(cond_id >= len(self.vocab.names)):
            raise KeyError("condition id outside vocabulary")
        dtype = next(self.net.parameters()).dtype
        xb = images.batch_to_torch(list(x_t), dtype=dtype)
        tb = torch.as_tensor(np.asarray(t, dtype=np.float64) / self.timesteps, dtype=dtype)
        cb = torch.as_tensor(np.asarray(cond_id), dtype=torch.long)
        with torch.no_grad():
            eps = self.net.eval()(xb, tb, cb)
        return eps.double().numpy().transpose(0, 2, 3, 1)

    def clone(self) -> "Denoiser":
        return Denoiser(
            net=copy.deepcopy(self.net),
            vocab=self.vocab,
            timesteps=self.timesteps,
            trained_steps=self.trained_steps,
        )


def make_denoiser(seed: int = 0, channels: int = 24, vocab: ConditionVocab | None = None, timesteps: int = 200) -> Denoiser:
    vocab = vocab or ConditionVocab()
    gen = torch.Generator().manual_seed(seed & 0x7FFFFFFF)
    with torch.random.fork_rng():
        torch.manual_seed(gen.initial_seed())
        net = CondUNet(channels=channels, vocab_size=len(vocab.names))
    return Denoiser(net=net, vocab=vocab, timesteps=timesteps)


def parameter_hash(dm: Denoiser) -> str:
    """Content hash of the weights; identifies the checkpoint for on-policy checks."""
    h = hashlib.sha256()
    for name, p in sorted(dm.net.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.detach().numpy()).tobytes())
    return h.hexdigest()


@dataclass
class DenoiserTrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 2e-4
    null_dropout: float = 0.1
    seed: int = 0
    log_every: int = 200


def denoising_loss(dm: Denoiser, batch: list[tuple[np.ndarray, int]], schedule: NoiseSchedule, rng: np.random.Generator) -> torch.Tensor:
    """Noise-prediction objective: mean over the batch of ||eps - eps_hat||^2.

    The norm sums over grid elements; t is uniform on {1..T} and eps is
    standard normal, both drawn from the supplied stream so the loss is a
    deterministic function of (parameters, rng state).
    """
    if not batch:
        raise ValueError("empty batch")
    dtype = next(dm.net.parameters()).dtype
    x0 = np.stack([images.as_image(x) for x, _ in batch])
    conds = np.array([c for _, c in batch], dtype=np.int64)
    ts = rng.integers(1, schedule.T + 1, size=len(batch))
    eps = rng.standard_normal(x0.shape)
    a = schedule.alpha[ts][:, None, None, None]
    s = schedule.sigma[ts][:, None, None, None]
    x_t = a * x0 + s * eps
    xb = images.batch_to_torch(list(x_t), dtype=dtype)
    eb = images.batch_to_torch(list(eps), dtype=dtype)
    tb = torch.as_tensor(ts.astype(np.float64) / schedule.T, dtype=dtype)
    cb = torch.as_tensor(conds)
    pred = dm.net(xb, tb, cb)
    return ((pred - eb) ** 2).sum(dim=(1, 2, 3)).mean()


def train_denoiser(
    dm: Denoiser,
    dataset: list[tuple[np.ndarray, int]],
    schedule: NoiseSchedule,
    config: DenoiserTrainConfig,
) -> list[float]:
    """Train in place; returns the loss trace."""
    rng = stream(config.seed, "dm-train")
    opt = torch.optim.AdamW(dm.net.parameters(), lr=config.lr)
    null_id = dm.vocab.null_id
    trace = []
    dm.net.train()
    for step in range(config.steps):
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        batch = []
        for i in idx:
            x, c = dataset[i]
            if rng.random() < config.null_dropout:
                c = null_id
            batch.append((x, c))
        loss = denoising_loss(dm, batch, schedule, rng)
        if not torch.isfinite(loss):
            raise RuntimeError(f"denoiser training diverged at step {step}: loss={loss.item()}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(float(loss.item()))
    dm.net.eval()
    dm.trained_steps += config.steps
    return trace
