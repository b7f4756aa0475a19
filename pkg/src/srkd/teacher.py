"""Guided conditional latent denoiser, its training loop, and full-volume
inference with tri-axial fusion.

The U-Net takes the noised latent concatenated with the encoded-condition
feature map (8 channels in, 4 out).  The bias-field map is injected
additively at every downsampling stage entry and the gradient-warp map at
every upsampling stage entry, both through zero-initialized projections, so
guidance starts as a strict refinement.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .autoencoder import KLAutoencoder
from .distill import FeatureBank, standardize_map
from .errors import ConfigurationError, NumericError, ShapeError
from .nets import (
    AttentionBlock,
    Downsample,
    ResBlock,
    TimeEmbedding,
    Upsample,
    norm_layer,
    zero_module,
)
from .optim import DivergenceGuard, build_optimizer, build_warmup
from .phantom import GuidancePair
from .rng import torch_gen
from .schedule import (
    DdimPlan,
    EmaState,
    NoiseSchedule,
    ddim_sample,
    ema_update,
    forward_noise_batch,
    x0_estimate_batch,
)
from .volume import Axis, Slice, Volume, extract_slice, fuse_axes, stack_slices

log = logging.getLogger(__name__)

REC_LOSS_WEIGHT = 0.1


@dataclass(frozen=True)
class TeacherConfig:
    in_ch: int = 8
    out_ch: int = 4
    base_ch: int = 64
    ch_mult: tuple[int, ...] = (1, 2, 4)
    res_blocks: int = 2
    attn_spatial: tuple[int, ...] = (8,)
    heads: int = 8
    context_dim: int = 64
    input_spatial: int = 16
    use_bias_guidance: bool = True
    use_warp_guidance: bool = True

    def __post_init__(self):
        if self.in_ch != 2 * self.out_ch:
            raise ConfigurationError(
                "the denoiser input concatenates the latent with an equally "
                f"wide condition map, so in_ch must be 2*out_ch; got {self.in_ch}/{self.out_ch}"
            )
        if self.input_spatial % (2 ** (len(self.ch_mult) - 1)):
            raise ConfigurationError("input_spatial must be divisible by the downsample factor")

    @staticmethod
    def paper_scale() -> "TeacherConfig":
        return TeacherConfig(
            base_ch=320,
            ch_mult=(1, 2, 4, 4),
            attn_spatial=(32, 16, 8),
            heads=8,
            context_dim=768,
            input_spatial=32,
        )


@dataclass(frozen=True)
class CondEncoderConfig:
    """Condition encoder settings.

    kind "conv" is the small trained-from-scratch encoder used at desk
    scale; kind "patch-transformer" describes the large pretrained-style
    encoder shape and exists for parameter accounting only.
    """

    kind: str = "conv"
    in_ch: int = 3
    in_res: int = 64
    base_ch: int = 32
    out_ch: int = 4
    n_down: int = 2
    context_dim: int = 64
    # patch-transformer shape parameters
    patch: int = 32
    width: int = 1024
    layers: int = 24
    tf_heads: int = 16
    mlp_dim: int = 4096

    def __post_init__(self):
        if self.kind not in ("conv", "patch-transformer"):
            raise ConfigurationError(f"unknown condition encoder kind {self.kind!r}")

    @staticmethod
    def paper_scale() -> "CondEncoderConfig":
        return CondEncoderConfig(kind="patch-transformer", in_res=224, context_dim=768)


class CondEncoder(nn.Module):
    """Small conv encoder: a latent-resolution feature map plus a pooled
    context embedding for cross-attention."""

    def __init__(self, cfg: CondEncoderConfig):
        super().__init__()
        self.cfg = cfg
        layers = [nn.Conv2d(cfg.in_ch, cfg.base_ch, 3, padding=1), nn.SiLU()]
        ch = cfg.base_ch
        for _ in range(cfg.n_down):
            out_ch = min(ch * 2, 4 * cfg.base_ch)
            layers += [nn.Conv2d(ch, out_ch, 3, stride=2, padding=1), nn.SiLU()]
            ch = out_ch
        layers += [nn.Conv2d(ch, ch, 3, padding=1), nn.SiLU()]
        self.body = nn.Sequential(*layers)
        self.feat_head = nn.Conv2d(ch, cfg.out_ch, 3, padding=1)
        self.ctx_head = nn.Linear(ch, cfg.context_dim)

    def forward(self, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.body(y)
        feat = self.feat_head(h)
        pooled = h.mean(dim=(-1, -2))
        ctx = self.ctx_head(pooled)[:, None, :]
        return feat, ctx


class PatchTransformerEncoder(nn.Module):
    """Patch-embedding transformer encoder at the published large-encoder
    shape; built only for parameter accounting, never trained here."""

    def __init__(self, cfg: CondEncoderConfig):
        super().__init__()
        n_tokens = (cfg.in_res // cfg.patch) ** 2 + 1
        w = cfg.width
        self.patch_embed = nn.Conv2d(cfg.in_ch, w, cfg.patch, stride=cfg.patch)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, w))
        self.pos_embed = nn.Parameter(torch.zeros(1, n_tokens, w))
        blocks = []
        for _ in range(cfg.layers):
            blocks.append(
                nn.ModuleDict(
                    {
                        "ln1": nn.LayerNorm(w),
                        "qkv": nn.Linear(w, 3 * w),
                        "proj": nn.Linear(w, w),
                        "ln2": nn.LayerNorm(w),
                        "fc1": nn.Linear(w, cfg.mlp_dim),
                        "fc2": nn.Linear(cfg.mlp_dim, w),
                    }
                )
            )
        self.blocks = nn.ModuleList(blocks)
        self.ln_final = nn.LayerNorm(w)
        self.proj_out = nn.Linear(w, cfg.context_dim, bias=False)
        self.heads = cfg.tf_heads

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        from .nets import _attention

        b = y.shape[0]
        tokens = self.patch_embed(y).flatten(2).transpose(1, 2)
        tokens = torch.cat([self.cls_token.expand(b, -1, -1), tokens], dim=1)
        tokens = tokens + self.pos_embed
        for blk in self.blocks:
            h = blk["ln1"](tokens)
            q, k, v = blk["qkv"](h).chunk(3, dim=-1)
            tokens = tokens + blk["proj"](_attention(q, k, v, self.heads))
            h = blk["ln2"](tokens)
            tokens = tokens + blk["fc2"](F.gelu(blk["fc1"](h)))
        return self.proj_out(self.ln_final(tokens[:, 0]))


def build_cond_encoder(cfg: CondEncoderConfig) -> nn.Module:
    if cfg.kind == "conv":
        return CondEncoder(cfg)
    return PatchTransformerEncoder(cfg)


class GuidedUNet(nn.Module):
    """Latent-space denoiser with per-stage bias/warp guidance injection."""

    def __init__(self, cfg: TeacherConfig):
        super().__init__()
        self.cfg = cfg
        chs = [cfg.base_ch * m for m in cfg.ch_mult]
        time_dim = cfg.base_ch * 4
        self.time_embed = TimeEmbedding(cfg.base_ch, time_dim)
        self.conv_in = nn.Conv2d(cfg.in_ch, chs[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        self.bias_projs = nn.ModuleList()
        self.down_spatials: list[int] = []
        ch = chs[0]
        spatial = cfg.input_spatial
        skip_chs = [ch]
        for i, out_ch in enumerate(chs):
            self.down_spatials.append(spatial)
            if cfg.use_bias_guidance:
                self.bias_projs.append(zero_module(nn.Conv2d(1, ch, 1, bias=False)))
            blocks, attns = nn.ModuleList(), nn.ModuleList()
            for _ in range(cfg.res_blocks):
                blocks.append(ResBlock(ch, out_ch, time_dim))
                ch = out_ch
                attns.append(
                    AttentionBlock(ch, cfg.heads, cfg.context_dim)
                    if spatial in cfg.attn_spatial
                    else None
                )
                skip_chs.append(ch)
            self.down_blocks.append(blocks)
            self.down_attn.append(attns)
            if i < len(chs) - 1:
                self.downsamples.append(Downsample(ch))
                skip_chs.append(ch)
                spatial //= 2

        self.mid_block1 = ResBlock(ch, ch, time_dim)
        self.mid_attn = AttentionBlock(ch, cfg.heads, cfg.context_dim)
        self.mid_block2 = ResBlock(ch, ch, time_dim)

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        self.warp_projs = nn.ModuleList()
        self.up_spatials: list[int] = []
        for i in range(len(chs) - 1, -1, -1):
            out_ch = chs[i]
            self.up_spatials.append(spatial)
            if cfg.use_warp_guidance:
                self.warp_projs.append(zero_module(nn.Conv2d(2, ch, 1, bias=False)))
            blocks, attns = nn.ModuleList(), nn.ModuleList()
            for _ in range(cfg.res_blocks + 1):
                blocks.append(ResBlock(ch + skip_chs.pop(), out_ch, time_dim))
                ch = out_ch
                attns.append(
                    AttentionBlock(ch, cfg.heads, cfg.context_dim)
                    if spatial in cfg.attn_spatial
                    else None
                )
            self.up_blocks.append(blocks)
            self.up_attn.append(attns)
            if i > 0:
                self.upsamples.append(Upsample(ch))
                spatial *= 2

        self.out_norm = norm_layer(ch)
        self.out_conv = zero_module(nn.Conv2d(ch, cfg.out_ch, 3, padding=1))

    @staticmethod
    def _check(h: torch.Tensor, where: str) -> torch.Tensor:
        if h.is_meta:
            return h
        if not torch.isfinite(h).all():
            raise NumericError(f"non-finite activations after {where}")
        return h

    def _inject(self, h, proj, field, where):
        pooled = F.adaptive_avg_pool2d(field, h.shape[-2:])
        return self._check(h + proj(pooled), where)

    def forward(
        self,
        z_t: torch.Tensor,
        t: torch.Tensor,
        cond_feat: torch.Tensor,
        context: torch.Tensor,
        bias_map: torch.Tensor | None = None,
        warp_map: torch.Tensor | None = None,
        return_mid: bool = False,
    ):
        if cond_feat.shape[-3:] != z_t.shape[-3:]:
            raise ShapeError(
                f"condition feature {tuple(cond_feat.shape)} must match latent {tuple(z_t.shape)}"
            )
        emb = self.time_embed(t)
        h = self._check(self.conv_in(torch.cat([z_t, cond_feat], dim=-3)), "conv_in")
        hs = [h]
        for i, (blocks, attns) in enumerate(zip(self.down_blocks, self.down_attn)):
            if self.cfg.use_bias_guidance and bias_map is not None:
                h = self._inject(h, self.bias_projs[i], bias_map - 1.0, f"bias injection {i}")
            for block, attn in zip(blocks, attns):
                h = block(h, emb)
                if attn is not None:
                    h = attn(h, context)
                hs.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)
                hs.append(h)
            self._check(h, f"down stage {i}")
        h = self.mid_block1(h, emb)
        h = self.mid_attn(h, context)
        h = self.mid_block2(h, emb)
        mid = self._check(h, "middle block")
        for i, (blocks, attns) in enumerate(zip(self.up_blocks, self.up_attn)):
            if self.cfg.use_warp_guidance and warp_map is not None:
                h = self._inject(h, self.warp_projs[i], warp_map, f"warp injection {i}")
            for block, attn in zip(blocks, attns):
                h = block(torch.cat([h, hs.pop()], dim=-3), emb)
                if attn is not None:
                    h = attn(h, context)
            if i < len(self.upsamples):
                h = self.upsamples[i](h)
            self._check(h, f"up stage {i}")
        out = self.out_conv(F.silu(self.out_norm(h)))
        out = self._check(out, "output projection")
        return (out, mid) if return_mid else out


def teacher_denoise(
    unet: GuidedUNet,
    z_t: torch.Tensor,
    t,
    cond_feat: torch.Tensor,
    context: torch.Tensor,
    guidance: GuidancePair | None = None,
) -> torch.Tensor:
    """Functional denoiser entry point; guidance is optional."""
    if isinstance(t, int):
        t = torch.full((z_t.shape[0],), t, dtype=torch.long)
    bias_map = warp_map = None
    if guidance is not None:
        bias_map, warp_map = guidance_tensors(guidance, z_t.shape[0])
    return unet(z_t, t, cond_feat, context, bias_map, warp_map)


def guidance_tensors(pair: GuidancePair, batch: int) -> tuple[torch.Tensor, torch.Tensor]:
    bias = torch.from_numpy(pair.bias.astype(np.float32))[None, None].repeat(batch, 1, 1, 1)
    warp = torch.from_numpy(pair.warp.astype(np.float32))[None].repeat(batch, 1, 1, 1)
    return bias, warp


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TeacherTrainState:
    unet: GuidedUNet
    cond_enc: CondEncoder
    ae: KLAutoencoder
    sched: NoiseSchedule
    opt: torch.optim.Optimizer
    lr_sched: object
    ema: EmaState
    guard: DivergenceGuard
    t_gen: torch.Generator
    noise_gen: torch.Generator
    latent_scale: float = 0.2
    rec_weight: float = REC_LOSS_WEIGHT
    step: int = 0

    def named_ema_params(self):
        for name, p in self.unet.named_parameters():
            yield f"unet.{name}", p
        for name, p in self.cond_enc.named_parameters():
            yield f"cond.{name}", p


def init_teacher_training(
    cfg: TeacherConfig,
    cond_cfg: CondEncoderConfig,
    ae: KLAutoencoder,
    sched: NoiseSchedule,
    lr: float = 2e-4,
    weight_decay: float = 1e-4,
    ema_decay: float = 0.99,
    latent_scale: float = 0.2,
    seed: int = 0,
) -> TeacherTrainState:
    from .autoencoder import freeze

    freeze(ae)
    with torch.random.fork_rng():
        torch.manual_seed(torch_gen(seed, "teacher-init").initial_seed())
        unet = GuidedUNet(cfg)
        cond_enc = build_cond_encoder(cond_cfg)
    params = list(unet.parameters()) + list(cond_enc.parameters())
    opt = build_optimizer(params, lr=lr, weight_decay=weight_decay)
    state = TeacherTrainState(
        unet=unet,
        cond_enc=cond_enc,
        ae=ae,
        sched=sched,
        opt=opt,
        lr_sched=build_warmup(opt),
        ema=None,  # type: ignore[arg-type]
        guard=DivergenceGuard(),
        t_gen=torch_gen(seed, "teacher-t"),
        noise_gen=torch_gen(seed, "teacher-noise"),
        latent_scale=latent_scale,
    )
    state.ema = EmaState.init(state.named_ema_params(), decay=ema_decay)
    return state


def teacher_train_step(state: TeacherTrainState, batch: dict) -> dict:
    """One optimization step on a slice batch.

    batch keys: x (B,3,R,R) target slices, y (B,3,R,R) condition slices,
    bias (B,1,R,R), warp (B,2,R,R); optionally post_mu/post_logvar with the
    precomputed frozen-encoder posterior of x.
    """
    x, y = batch["x"], batch["y"]
    b = x.shape[0]
    with torch.no_grad():
        if "post_mu" in batch:
            mu, logvar = batch["post_mu"], batch["post_logvar"]
        else:
            posterior = state.ae.encode(x)
            mu, logvar = posterior.mean, posterior.logvar
        post_noise = torch.randn(mu.shape, generator=state.noise_gen)
        z0 = (mu + torch.exp(0.5 * logvar) * post_noise) * state.latent_scale

    t = torch.randint(0, state.sched.T, (b,), generator=state.t_gen)
    eps = torch.randn(z0.shape, generator=state.noise_gen)
    z_t = forward_noise_batch(state.sched, z0, t, eps)

    cond_feat, ctx = state.cond_enc(y)
    eps_pred = state.unet(
        z_t,
        t,
        cond_feat,
        ctx,
        batch.get("bias") if state.unet.cfg.use_bias_guidance else None,
        batch.get("warp") if state.unet.cfg.use_warp_guidance else None,
    )
    l_diff = F.mse_loss(eps_pred, eps)

    z0_hat = x0_estimate_batch(state.sched, z_t, eps_pred, t)
    x_hat = state.ae.decode(z0_hat / state.latent_scale)
    l_rec = F.mse_loss(x_hat, x)

    loss = l_diff + state.rec_weight * l_rec
    state.opt.zero_grad(set_to_none=True)
    loss.backward()
    state.opt.step()
    state.lr_sched.step()
    ema_update(state.ema, state.named_ema_params())
    parts = {
        "diff": float(l_diff.detach()),
        "rec": float(l_rec.detach()),
        "total": float(loss.detach()),
    }
    state.guard.check(parts["total"], what="teacher")
    state.step += 1
    return parts


def materialize_ema(state: TeacherTrainState) -> tuple[GuidedUNet, CondEncoder]:
    """Copies of the U-Net and condition encoder carrying the EMA weights."""
    import copy

    unet = copy.deepcopy(state.unet)
    cond = copy.deepcopy(state.cond_enc)
    with torch.no_grad():
        for name, p in unet.named_parameters():
            p.copy_(state.ema.shadow[f"unet.{name}"])
        for name, p in cond.named_parameters():
            p.copy_(state.ema.shadow[f"cond.{name}"])
    unet.eval()
    cond.eval()
    return unet, cond


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def _replicate_channels(arr: np.ndarray, channels: int) -> np.ndarray:
    return np.repeat(arr[:, None, :, :], channels, axis=1)


def teacher_infer_volume(
    unet: GuidedUNet,
    cond_enc: CondEncoder,
    ae: KLAutoencoder,
    sched: NoiseSchedule,
    plan: DdimPlan,
    y: Volume,
    guidance: dict,
    seed: int = 0,
    latent_scale: float = 0.2,
    chunk: int = 64,
) -> Volume:
    """Reconstruct the full volume: per axis, denoise every slice from shared
    Gaussian noise conditioned on the matching condition slice, decode, stack,
    then fuse the three axis volumes by averaging."""
    latent_shape = (unet.cfg.out_ch, unet.cfg.input_spatial, unet.cfg.input_spatial)
    eps = torch.randn((1,) + latent_shape, generator=torch_gen(seed, "teacher-infer"))
    per_axis = {}
    with torch.inference_mode():
        for axis in Axis:
            extent = axis.extent(y.shape)
            planes = np.stack([extract_slice(y, axis, d).data for d in range(extent)])
            recon = np.empty_like(planes, dtype=np.float32)
            pair = guidance.get(axis) if guidance else None
            for lo in range(0, extent, chunk):
                hi = min(lo + chunk, extent)
                y_batch = torch.from_numpy(
                    _replicate_channels(planes[lo:hi], 3).astype(np.float32)
                )
                cond_feat, ctx = cond_enc(y_batch)
                n = hi - lo
                if pair is not None:
                    bias_map, warp_map = guidance_tensors(pair, n)
                else:
                    bias_map = warp_map = None

                def denoise(z, t_scalar):
                    t = torch.full((z.shape[0],), t_scalar, dtype=torch.long)
                    return unet(
                        z,
                        t,
                        cond_feat,
                        ctx,
                        bias_map if unet.cfg.use_bias_guidance else None,
                        warp_map if unet.cfg.use_warp_guidance else None,
                    )

                z = ddim_sample(sched, plan, denoise, eps.repeat(n, 1, 1, 1))
                decoded = ae.decode(z / latent_scale)
                recon[lo:hi] = (
                    decoded[:, 0].clamp(0.0, 1.0).to(torch.float32).numpy()
                )
            slices = [
                Slice(data=recon[d], axis=axis, depth=d, channels=1) for d in range(extent)
            ]
            per_axis[axis] = stack_slices(slices, axis, spacing=y.spacing)
    fused = fuse_axes(per_axis)
    return Volume(
        data=np.clip(fused.data, 0.0, 1.0).astype(np.float32), spacing=y.spacing
    )


def extract_feature_bank(
    unet: GuidedUNet,
    cond_enc: CondEncoder,
    sched: NoiseSchedule,
    plan: DdimPlan,
    y_slice: Slice,
    guidance: GuidancePair | None,
    K: int,
    seed: int = 0,
    out_res: int = 64,
) -> FeatureBank:
    """Tap the U-Net middle-block activation at each inference step and keep
    K evenly spaced maps (reduced to one channel, resized, standardized)."""
    S = plan.steps
    if K > S:
        raise ConfigurationError(f"bank size K={K} exceeds the plan's {S} steps")
    latent_shape = (unet.cfg.out_ch, unet.cfg.input_spatial, unet.cfg.input_spatial)
    eps = torch.randn((1,) + latent_shape, generator=torch_gen(seed, "feature-bank"))
    collected: list[tuple[int, torch.Tensor]] = []
    with torch.inference_mode():
        y_batch = torch.from_numpy(
            _replicate_channels(y_slice.data[None], 3).astype(np.float32)
        )
        cond_feat, ctx = cond_enc(y_batch)
        if guidance is not None:
            bias_map, warp_map = guidance_tensors(guidance, 1)
        else:
            bias_map = warp_map = None

        def denoise(z, t_scalar):
            t = torch.full((z.shape[0],), t_scalar, dtype=torch.long)
            out, mid = unet(
                z,
                t,
                cond_feat,
                ctx,
                bias_map if unet.cfg.use_bias_guidance else None,
                warp_map if unet.cfg.use_warp_guidance else None,
                return_mid=True,
            )
            collected.append((t_scalar, mid))
            return out

        ddim_sample(sched, plan, denoise, eps)
    assert len(collected) == S
    keep = np.unique(np.round(np.linspace(0, S - 1, K)).astype(int))
    assert len(keep) == K
    entries = []
    for idx in keep:
        step, mid = collected[idx]
        reduced = mid.mean(dim=1, keepdim=True)
        resized = F.interpolate(reduced, size=(out_res, out_res), mode="bilinear", align_corners=False)
        entries.append((step, standardize_map(resized[0, 0].numpy())))
    return FeatureBank(entries=entries)
