"""Denoising diffusion decoder: units + speaker embedding -> mel frames.

The noise predictor is a stack of dilated residual conv blocks (DiffWave /
DiffSinger style). Each block adds a timestep projection, a unit-conditioning
projection, and applies a layer norm whose scale and shift come from the
speaker embedding. Classifier-free guidance swaps the unit conditioning for
a learned null vector.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .. import checkpoint
from ..errors import RangeError, ShapeError
from ..layers import lengths_to_mask, pad_list
from ..units import resample_units


@dataclass
class DiffusionConfig:
    n_mels: int = 80
    unit_dim: int = 64
    spk_dim: int = 32
    channels: int = 128
    layers: int = 8
    dilation_cycle: int = 4
    kernel_size: int = 3
    steps: int = 100  # N
    beta_start: float = 1e-4
    beta_end: float = 0.06
    p_uncond: float = 0.1
    guidance: float = 1.0  # w at inference
    frames_per_unit: float = 2.0  # mel frames per unit frame (20 ms units / 10 ms mels)
    # per-step loss weight 1 + min((1 - abar) / abar, cap): adds a capped x0-space term so
    # high-noise steps, where conditioning matters most, get a usable gradient. 0 = plain eps loss.
    x0_weight_cap: float = 0.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("need at least one diffusion step")
        if not 0.0 < self.beta_start < self.beta_end < 1.0:
            raise ValueError("need 0 < beta_start < beta_end < 1")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ValueError("p_uncond must lie in [0, 1]")


def linear_betas(n: int, start: float, end: float) -> torch.Tensor:
    return torch.linspace(start, end, n, dtype=torch.float64)


class ConditionalLayerNorm(nn.Module):
    """LayerNorm over channels whose gain and bias are predicted from a speaker vector."""

    def __init__(self, channels: int, spk_dim: int):
        super().__init__()
        self.scale = nn.Linear(spk_dim, channels)
        self.shift = nn.Linear(spk_dim, channels)
        nn.init.zeros_(self.scale.weight)
        nn.init.ones_(self.scale.bias)
        nn.init.zeros_(self.shift.weight)
        nn.init.zeros_(self.shift.bias)

    def forward(self, x: torch.Tensor, spk: torch.Tensor) -> torch.Tensor:
        # x: (B, C, T)
        h = F.layer_norm(x.transpose(1, 2), (x.shape[1],))
        return (h * self.scale(spk)[:, None, :] + self.shift(spk)[:, None, :]).transpose(1, 2)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, dilation: int, kernel_size: int, spk_dim: int):
        super().__init__()
        self.step_proj = nn.Linear(channels, channels)
        self.conv = nn.Conv1d(channels, 2 * channels, kernel_size, padding=dilation * (kernel_size // 2), dilation=dilation)
        self.cond = nn.Conv1d(channels, 2 * channels, 1)
        self.norm = ConditionalLayerNorm(channels, spk_dim)
        self.out = nn.Conv1d(channels, 2 * channels, 1)

    def forward(self, x, step, cond, spk, valid):
        h = x + self.step_proj(step)[:, :, None]
        h = self.conv(h) + self.cond(cond)
        gate, filt = h.chunk(2, dim=1)
        h = torch.sigmoid(gate) * torch.tanh(filt)
        h = self.norm(h, spk) * valid
        res, skip = self.out(h).chunk(2, dim=1)
        return (x + res) / math.sqrt(2.0), skip


class DiffusionDecoder(nn.Module):
    def __init__(self, config: DiffusionConfig = DiffusionConfig()):
        super().__init__()
        self.config = c = config
        betas = linear_betas(c.steps, c.beta_start, c.beta_end)
        self.register_buffer("betas", betas)
        self.register_buffer("alphas_bar", torch.cumprod(1.0 - betas, dim=0))
        self.register_buffer("mel_mean", torch.zeros(c.n_mels))
        self.register_buffer("mel_std", torch.ones(c.n_mels))
        self.register_buffer("norm_fitted", torch.zeros((), dtype=torch.bool))
        self.null_units = nn.Parameter(torch.zeros(c.unit_dim))
        self.cond_net = nn.Sequential(
            nn.Conv1d(c.unit_dim, c.channels, 3, padding=1),
            nn.SiLU(),
            nn.Conv1d(c.channels, c.channels, 3, padding=1),
        )
        self.input_proj = nn.Conv1d(c.n_mels, c.channels, 1)
        self.step_mlp = nn.Sequential(nn.Linear(c.channels, 4 * c.channels), nn.SiLU(), nn.Linear(4 * c.channels, c.channels))
        self.blocks = nn.ModuleList(
            [ResidualBlock(c.channels, 2 ** (i % c.dilation_cycle), c.kernel_size, c.spk_dim) for i in range(c.layers)]
        )
        self.skip_proj = nn.Conv1d(c.channels, c.channels, 1)
        self.output = nn.Conv1d(c.channels, c.n_mels, 1)
        nn.init.zeros_(self.output.weight)
        nn.init.zeros_(self.output.bias)
        self.null_uses = 0  # conditioning rows replaced by the null vector during training

    # -- schedule ------------------------------------------------------
    @property
    def n_steps(self) -> int:
        return self.config.steps

    def _check_step(self, n) -> torch.Tensor:
        n = torch.as_tensor(n, dtype=torch.long)
        if n.numel() == 0 or int(n.min()) < 1 or int(n.max()) > self.n_steps:
            raise RangeError(f"timestep must lie in [1, {self.n_steps}]")
        return n

    def q_sample(self, x0: torch.Tensor, n, eps: torch.Tensor) -> torch.Tensor:
        """x_n = sqrt(abar_n) x0 + sqrt(1 - abar_n) eps. ``n`` is 1-based (scalar or per batch row)."""
        if eps.shape != x0.shape:
            raise ShapeError(f"noise shape {tuple(eps.shape)} != data shape {tuple(x0.shape)}")
        n = self._check_step(n)
        abar = self.alphas_bar[n - 1].to(x0.dtype)
        if abar.ndim == 1:
            abar = abar.view(-1, *([1] * (x0.ndim - 1)))
        return abar.sqrt() * x0 + (1.0 - abar).sqrt() * eps

    # -- normalisation -------------------------------------------------
    def set_normalizer(self, mels) -> None:
        x = np.concatenate([np.asarray(m, dtype=np.float64) for m in mels])
        self.mel_mean.copy_(torch.as_tensor(x.mean(0)))
        self.mel_std.copy_(torch.as_tensor(x.std(0) + 1e-5))
        self.norm_fitted.fill_(True)

    def normalize(self, mel) -> torch.Tensor:
        return (torch.as_tensor(np.asarray(mel), dtype=torch.float32) - self.mel_mean) / self.mel_std

    def denormalize(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.mel_std + self.mel_mean

    # -- network -------------------------------------------------------
    def step_embedding(self, n: torch.Tensor) -> torch.Tensor:
        half = self.config.channels // 2
        dt = self.mel_mean.dtype
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dt) / half)
        args = n.to(dt)[:, None] * freqs[None] * (1000.0 / self.n_steps)
        return self.step_mlp(torch.cat([args.sin(), args.cos()], dim=-1))

    def predict_noise(self, x_n, n, units, spk, valid=None, uncond=None) -> torch.Tensor:
        """eps prediction. x_n: (B, T, n_mels); units: (B, T, U); spk: (B, S); uncond: (B,) bool."""
        b, t, _ = x_n.shape
        if units.shape[:2] != (b, t):
            raise ShapeError(f"units {tuple(units.shape[:2])} do not match mel frames {(b, t)}")
        if units.shape[2] != self.config.unit_dim:
            raise ShapeError(f"unit dim {units.shape[2]} != {self.config.unit_dim}")
        if valid is None:
            valid = torch.ones(b, t, dtype=torch.bool)
        n = self._check_step(n)
        if n.ndim == 0:
            n = n.expand(b)
        feats = torch.log(units.clamp_min(1e-6))
        if uncond is not None and bool(uncond.any()):
            feats = torch.where(uncond[:, None, None], self.null_units.to(feats.dtype).expand_as(feats), feats)
        v = valid[:, None, :].to(x_n.dtype)
        cond = self.cond_net(feats.transpose(1, 2) * v) * v
        h = self.input_proj(x_n.transpose(1, 2)) * v
        step = self.step_embedding(n)
        skips = 0.0
        for block in self.blocks:
            h, skip = block(h, step, cond, spk, v)
            skips = skips + skip
        # the skip path is layer-normed per frame; the residual stream keeps the input scale
        out = self.output(F.silu(self.skip_proj(skips / math.sqrt(len(self.blocks)))) + h)
        return (out * v).transpose(1, 2)

    # -- persistence ---------------------------------------------------
    def save(self, path, meta=None):
        return checkpoint.save(path, "diffusion", asdict(self.config), self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "DiffusionDecoder":
        payload = checkpoint.load(path, "diffusion")
        model = cls(DiffusionConfig(**payload["config"]))
        model.load_state_dict(payload["state_dict"])
        model.meta = payload["meta"]
        model.eval()
        return model

    def clone(self) -> "DiffusionDecoder":
        return copy.deepcopy(self)


def guided_noise(eps_cond, eps_uncond, w: float):
    """Classifier-free guidance: (1 + w) * eps_cond - w * eps_uncond."""
    if tuple(np.shape(eps_cond)) != tuple(np.shape(eps_uncond)):
        raise ShapeError(f"guidance inputs differ in shape: {np.shape(eps_cond)} vs {np.shape(eps_uncond)}")
    return (1.0 + w) * eps_cond - w * eps_uncond


def unit_frames_for(decoder: DiffusionDecoder, units: np.ndarray, n_frames: int | None = None) -> np.ndarray:
    units = np.asarray(units, dtype=np.float64)
    if units.ndim != 2 or units.shape[1] != decoder.config.unit_dim:
        raise ShapeError(f"expected (T, {decoder.config.unit_dim}) units, got {units.shape}")
    if n_frames is None:
        n_frames = max(1, int(round(len(units) * decoder.config.frames_per_unit)))
    return resample_units(units, n_frames)


def diffusion_loss(decoder: DiffusionDecoder, mels, units, spk, generator: torch.Generator | None = None, p_uncond=None) -> torch.Tensor:
    """Noise-prediction MSE for a batch.

    ``mels`` are already-normalised (T_i, n_mels) arrays/tensors and ``units``
    must be frame-aligned with them. ``spk`` is (B, spk_dim).
    """
    c = decoder.config
    if len(mels) != len(units):
        raise ShapeError("mels and units differ in batch size")
    for m, u in zip(mels, units):
        if len(m) != len(u):
            raise ShapeError(f"unit frames {len(u)} != mel frames {len(m)}")
    p_uncond = c.p_uncond if p_uncond is None else p_uncond
    dt = decoder.mel_mean.dtype
    x0, lengths = pad_list([torch.as_tensor(np.asarray(m), dtype=dt) for m in mels])
    u, _ = pad_list([torch.as_tensor(np.asarray(x), dtype=dt) for x in units])
    valid = lengths_to_mask(lengths, x0.shape[1])
    b = x0.shape[0]
    n = torch.randint(1, c.steps + 1, (b,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=dt)
    drop = torch.rand(b, generator=generator) < p_uncond
    decoder.null_uses += int(drop.sum())
    x_n = decoder.q_sample(x0, n, eps)
    pred = decoder.predict_noise(x_n, n, u, torch.as_tensor(np.asarray(spk), dtype=dt), valid, drop)
    mask = valid[..., None].to(x0.dtype)
    if c.x0_weight_cap > 0:
        ab = decoder.alphas_bar[n - 1].to(x0.dtype)
        mask = mask * (1.0 + ((1.0 - ab) / ab).clamp(max=c.x0_weight_cap))[:, None, None]
        return ((pred - eps) ** 2 * mask).sum() / (valid.sum() * c.n_mels)
    return ((pred - eps) ** 2 * mask).sum() / (mask.sum() * c.n_mels)


def train_step(decoder: DiffusionDecoder, optimizer, mels, units, spk, generator=None, grad_clip: float = 1.0) -> float:
    decoder.train()
    loss = diffusion_loss(decoder, mels, units, spk, generator)
    optimizer.zero_grad()
    loss.backward()
    torch.nn.utils.clip_grad_norm_(decoder.parameters(), grad_clip)
    optimizer.step()
    return loss.item()


def sample(decoder: DiffusionDecoder, units, spk, w: float | None = None, seed: int = 0, n_frames: int | None = None, normalized: bool = False) -> np.ndarray:
    """Ancestral sampling from x_N ~ N(0, I); returns (T, n_mels) mel frames.

    Unit conditioning is linearly interpolated to the mel frame rate first.
    """
    c = decoder.config
    w = c.guidance if w is None else w
    u = torch.as_tensor(unit_frames_for(decoder, units, n_frames), dtype=torch.float32)[None]
    spk_t = torch.as_tensor(np.asarray(spk), dtype=torch.float32).reshape(1, -1)
    if spk_t.shape[1] != c.spk_dim:
        raise ShapeError(f"speaker embedding dim {spk_t.shape[1]} != {c.spk_dim}")
    gen = torch.Generator().manual_seed(int(seed))
    t = u.shape[1]
    x = torch.randn((1, t, c.n_mels), generator=gen)
    betas = decoder.betas.to(torch.float32)
    abar = decoder.alphas_bar.to(torch.float32)
    was_training = decoder.training
    decoder.eval()
    try:
        with torch.no_grad():
            for n in range(c.steps, 0, -1):
                if w == 0:
                    eps = decoder.predict_noise(x, n, u, spk_t)
                else:
                    both = decoder.predict_noise(
                        torch.cat([x, x]), n, torch.cat([u, u]), torch.cat([spk_t, spk_t]), uncond=torch.tensor([False, True])
                    )
                    eps = guided_noise(both[:1], both[1:], w)
                beta, ab = betas[n - 1], abar[n - 1]
                mean = (x - beta / (1.0 - ab).sqrt() * eps) / (1.0 - beta).sqrt()
                if n > 1:
                    var = beta * (1.0 - abar[n - 2]) / (1.0 - ab)
                    x = mean + var.sqrt() * torch.randn(x.shape, generator=gen)
                else:
                    x = mean
            out = x[0] if normalized else decoder.denormalize(x)[0]
    finally:
        decoder.train(was_training)
    return out.numpy().astype(np.float32)
