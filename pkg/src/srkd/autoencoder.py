"""KL-regularized autoencoder: the frozen latent codec for the teacher.

The encoder maps a replicated-channel slice to a Gaussian posterior over a
4-channel latent; the decoder mirrors it.  No dropout anywhere.  Squared
errors are means per element so loss magnitudes are resolution-independent.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, NumericError, ShapeError
from .nets import Downsample, ResBlock, Upsample, norm_layer
from .optim import DivergenceGuard, build_optimizer, build_warmup
from .rng import np_rng, torch_gen

log = logging.getLogger(__name__)

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0


@dataclass(frozen=True)
class AEConfig:
    in_res: int = 64
    in_ch: int = 3
    base_ch: int = 32
    ch_mult: tuple[int, ...] = (1, 2, 4)
    res_blocks_per_stage: int = 2
    latent_ch: int = 4
    latent_scale: float = 0.2
    kl_weight: float = 1e-6

    def __post_init__(self):
        factor = self.downsample_factor
        if self.in_res % factor:
            raise ConfigurationError(
                f"in_res {self.in_res} not divisible by the downsample factor {factor}"
            )

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.ch_mult) - 1)

    @property
    def latent_res(self) -> int:
        return self.in_res // self.downsample_factor

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_ch, self.latent_res, self.latent_res)

    @staticmethod
    def paper_scale() -> "AEConfig":
        return AEConfig(in_res=256, base_ch=128, ch_mult=(1, 2, 4, 4))


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian over the latent; logvar clamped to [-30, 20]."""

    mean: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        self.logvar = self.logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)

    def sample(self, noise: torch.Tensor) -> torch.Tensor:
        if noise.shape != self.mean.shape:
            raise ShapeError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(self.mean.shape)}")
        return self.mean + torch.exp(0.5 * self.logvar) * noise

    def kl_per_element(self) -> torch.Tensor:
        return 0.5 * (self.mean**2 + torch.exp(self.logvar) - 1.0 - self.logvar)


@dataclass
class LatentTensor:
    """Latent sample stored pre-scaling; `scaled()` applies the factor once
    on entry to the diffusion process."""

    data: torch.Tensor
    scale: float = 0.2

    def scaled(self) -> torch.Tensor:
        return self.data * self.scale


class KLAutoencoder(nn.Module):
    def __init__(self, cfg: AEConfig):
        super().__init__()
        self.cfg = cfg
        chs = [cfg.base_ch * m for m in cfg.ch_mult]

        enc = [nn.Conv2d(cfg.in_ch, chs[0], 3, padding=1)]
        ch = chs[0]
        for i, out_ch in enumerate(chs):
            for _ in range(cfg.res_blocks_per_stage):
                enc.append(ResBlock(ch, out_ch))
                ch = out_ch
            if i < len(chs) - 1:
                enc.append(Downsample(ch))
        self.encoder_blocks = nn.ModuleList(enc)
        self.enc_norm = norm_layer(ch)
        self.enc_out = nn.Conv2d(ch, 2 * cfg.latent_ch, 3, padding=1)

        dec = [nn.Conv2d(cfg.latent_ch, chs[-1], 3, padding=1)]
        ch = chs[-1]
        for i, out_ch in reversed(list(enumerate(chs))):
            for _ in range(cfg.res_blocks_per_stage):
                dec.append(ResBlock(ch, out_ch))
                ch = out_ch
            if i > 0:
                dec.append(Upsample(ch))
        self.decoder_blocks = nn.ModuleList(dec)
        self.dec_norm = norm_layer(ch)
        self.dec_out = nn.Conv2d(ch, cfg.in_ch, 3, padding=1)

    def encode(self, x: torch.Tensor) -> GaussianPosterior:
        if x.shape[-2:] != (self.cfg.in_res, self.cfg.in_res) or x.shape[-3] != self.cfg.in_ch:
            raise ShapeError(
                f"encoder expects (*, {self.cfg.in_ch}, {self.cfg.in_res}, {self.cfg.in_res}),"
                f" got {tuple(x.shape)}"
            )
        h = x
        for block in self.encoder_blocks:
            h = block(h)
        h = self.enc_out(F.silu(self.enc_norm(h)))
        mean, logvar = h.chunk(2, dim=-3)
        if not torch.isfinite(mean).all() or not torch.isfinite(logvar).all():
            raise NumericError("encoder produced non-finite posterior statistics")
        return GaussianPosterior(mean=mean, logvar=logvar)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        expected = (self.cfg.latent_ch, self.cfg.latent_res, self.cfg.latent_res)
        if tuple(z.shape[-3:]) != expected:
            raise ShapeError(f"decoder expects latent (*, {expected}), got {tuple(z.shape)}")
        h = z
        for block in self.decoder_blocks:
            h = block(h)
        return self.dec_out(F.silu(self.dec_norm(h)))


def encode(model: KLAutoencoder, x: torch.Tensor) -> GaussianPosterior:
    return model.encode(x)


def sample_posterior(p: GaussianPosterior, noise: torch.Tensor, scale: float = 0.2) -> LatentTensor:
    return LatentTensor(data=p.sample(noise), scale=scale)


def decode(model: KLAutoencoder, z) -> torch.Tensor:
    data = z.data if isinstance(z, LatentTensor) else z
    return model.decode(data)


def ae_loss(x: torch.Tensor, x_hat: torch.Tensor, posterior: GaussianPosterior,
            kl_weight: float) -> tuple[torch.Tensor, dict]:
    """Mean-per-element reconstruction MSE plus weighted mean-per-element KL."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if not torch.isfinite(x).all() or not torch.isfinite(x_hat).all():
        raise NumericError("ae_loss received non-finite inputs")
    rec = F.mse_loss(x_hat, x)
    kl = posterior.kl_per_element().mean()
    total = rec + kl_weight * kl
    return total, {"rec": float(rec.detach()), "kl": float(kl.detach()),
                   "total": float(total.detach())}


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)

    def append(self, step: int, parts: dict) -> None:
        self.steps.append({"step": step, **parts})


def train_ae(
    slices: np.ndarray,
    cfg: AEConfig,
    lr: float = 1e-4,
    weight_decay: float = 1e-4,
    batch_size: int = 8,
    steps: int = 1000,
    seed: int = 0,
    log_every: int = 100,
) -> tuple[KLAutoencoder, TrainHistory]:
    """Train the autoencoder on an (N, C, H, W) slice array."""
    if slices.ndim != 4 or slices.shape[0] == 0:
        raise ConfigurationError(f"need a non-empty (N, C, H, W) slice array, got {slices.shape}")
    with torch.random.fork_rng():
        torch.manual_seed(torch_gen(seed, "ae-init").initial_seed())
        model = KLAutoencoder(cfg)
    opt = build_optimizer(model.parameters(), lr=lr, weight_decay=weight_decay)
    sched = build_warmup(opt)
    guard = DivergenceGuard()
    draw = np_rng(seed, "ae-batches")
    noise_gen = torch_gen(seed, "ae-noise")
    history = TrainHistory()

    data = torch.from_numpy(np.ascontiguousarray(slices, dtype=np.float32))
    model.train()
    for step in range(steps):
        idx = draw.integers(0, data.shape[0], size=batch_size)
        x = data[idx]
        posterior = model.encode(x)
        noise = torch.randn(posterior.mean.shape, generator=noise_gen)
        z = posterior.sample(noise)
        x_hat = model.decode(z)
        loss, parts = ae_loss(x, x_hat, posterior, cfg.kl_weight)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        guard.check(parts["total"], what="autoencoder")
        history.append(step, parts)
        if log_every and step % log_every == 0:
            log.info("ae step %d rec=%.5f kl=%.3f", step, parts["rec"], parts["kl"])
    model.eval()
    return model, history


def freeze(model: nn.Module) -> nn.Module:
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return model


def weight_hash(model: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()
