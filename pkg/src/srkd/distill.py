"""Progressive distillation: degradation pyramid, student network and losses,
and stage-allocated multi-scale inference.

The student is a plain image-space denoiser with 2 input channels (noised
target plus the previous-stage condition) and 1 output channel.  It never
touches the autoencoder, the condition encoder, or the guidance maps.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

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
from .phantom import FieldStrength, gaussian_blur
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
from .volume import Axis, Volume, extract_slice, fuse_axes, stack_slices

log = logging.getLogger(__name__)

#: Fraction of stages allocated to the coarse-to-mid hop (4 of 20 at N=20).
COARSE_STAGE_FRACTION = 0.2


@dataclass(frozen=True)
class DistillationPlan:
    """Stage count N, per-stage degradation ratios, blur constant, and the
    field-pair to stage-range mapping."""

    N: int
    k: float
    ratios: tuple[float, ...]
    stage_map: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.N < 2:
            raise ConfigurationError(f"stage count N must be >= 2, got {self.N}")
        r = tuple(float(x) for x in self.ratios)
        if len(r) != self.N:
            raise ConfigurationError(f"need {self.N} ratios, got {len(r)}")
        if any(b >= a for a, b in zip(r, r[1:])):
            raise ConfigurationError("degradation ratios must be strictly decreasing")
        if r[-1] != 0.0:
            raise ConfigurationError("the final ratio must be exactly 0")
        if self.k < 0:
            raise ConfigurationError("blur constant k must be >= 0")
        object.__setattr__(self, "ratios", r)

    def ratio(self, n: int) -> float:
        """Degradation ratio for 1-based stage n."""
        if not 1 <= n <= self.N:
            raise ConfigurationError(f"stage {n} outside 1..{self.N}")
        return self.ratios[n - 1]

    def sigma(self, n: int) -> float:
        return self.k * self.ratio(n)

    def stages_for(self, from_: FieldStrength, to: FieldStrength) -> list[int]:
        key = (from_, to)
        if key in self.stage_map:
            return list(self.stage_map[key])
        if from_ is FieldStrength.F1_5 and to is FieldStrength.F7:
            lo = self.stage_map.get((FieldStrength.F1_5, FieldStrength.F3))
            hi = self.stage_map.get((FieldStrength.F3, FieldStrength.F7))
            if lo is not None and hi is not None:
                return list(lo) + list(hi)
        raise ConfigurationError(
            f"no stage allocation for field pair {from_.label} -> {to.label}"
        )

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "k": self.k,
            "ratios": list(self.ratios),
            "stage_map": {
                f"{a.label}>{b.label}": [rng.start, rng.stop]
                for (a, b), rng in self.stage_map.items()
            },
        }

    @staticmethod
    def from_dict(d: dict) -> "DistillationPlan":
        stage_map = {}
        for key, (start, stop) in d["stage_map"].items():
            a, b = key.split(">")
            stage_map[(FieldStrength.from_label(a), FieldStrength.from_label(b))] = range(start, stop)
        return DistillationPlan(N=d["N"], k=d["k"], ratios=tuple(d["ratios"]), stage_map=stage_map)


def build_plan(
    N: int,
    k: float = 2.0,
    field_pairs: tuple = (
        (FieldStrength.F1_5, FieldStrength.F3),
        (FieldStrength.F3, FieldStrength.F7),
    ),
) -> DistillationPlan:
    """Linear ratio ladder r_n = (N-n)/N with a 20/80 coarse/fine stage split."""
    if N < 2:
        raise ConfigurationError(f"stage count N must be >= 2, got {N}")
    ratios = tuple((N - n) / N for n in range(1, N + 1))
    n_coarse = math.ceil(COARSE_STAGE_FRACTION * N)
    ranges = [range(1, n_coarse + 1), range(n_coarse + 1, N + 1)]
    if len(field_pairs) != 2:
        raise ConfigurationError("expected exactly two field pairs (coarse hop, fine hop)")
    stage_map = {pair: rng for pair, rng in zip(field_pairs, ranges)}
    return DistillationPlan(N=N, k=k, ratios=ratios, stage_map=stage_map)


def degrade_image(img: np.ndarray, plan: DistillationPlan, n: int) -> np.ndarray:
    """Stage-n intermediate target: Gaussian blur with sigma = k * r_n."""
    return gaussian_blur(img, plan.sigma(n))


def degrade_target(o7t, plan: DistillationPlan, n: int):
    """Slice-typed wrapper around degrade_image."""
    from .volume import Slice

    if isinstance(o7t, Slice):
        return Slice(
            data=degrade_image(o7t.data, plan, n),
            axis=o7t.axis,
            depth=o7t.depth,
            channels=o7t.channels,
        )
    return degrade_image(np.asarray(o7t), plan, n)


# ---------------------------------------------------------------------------
# Student network
# ---------------------------------------------------------------------------

_FORBIDDEN_PARAM_MARKERS = ("bias_proj", "warp_proj", "guidance", "cond_enc", "ae.", "encoder_kl")


@dataclass(frozen=True)
class StudentConfig:
    in_ch: int = 2
    out_ch: int = 1
    inner_ch: int = 16
    ch_mult: tuple[int, ...] = (1, 2, 4)
    res_blocks: int = 2
    attn_spatial: tuple[int, ...] = (16,)
    heads: int = 4
    input_spatial: int = 64
    T: int = 500

    def __post_init__(self):
        if self.in_ch != self.out_ch + 1:
            raise ConfigurationError(
                "student takes the noised image plus one concatenated condition channel"
            )
        if self.input_spatial % (2 ** (len(self.ch_mult) - 1)):
            raise ConfigurationError("input_spatial must be divisible by the downsample factor")

    @staticmethod
    def paper_scale() -> "StudentConfig":
        return StudentConfig(
            inner_ch=64,
            ch_mult=(1, 2, 2, 4, 4, 8, 8, 16),
            attn_spatial=(16,),
            heads=8,
            input_spatial=256,
            T=2000,
        )


class StudentUNet(nn.Module):
    """Image-space conditional denoiser; the condition is concatenated
    pixel-wise, there is no latent codec and no guidance input."""

    def __init__(self, cfg: StudentConfig):
        super().__init__()
        self.cfg = cfg
        chs = [cfg.inner_ch * m for m in cfg.ch_mult]
        time_dim = cfg.inner_ch * 4
        self.time_embed = TimeEmbedding(cfg.inner_ch, time_dim)
        self.conv_in = nn.Conv2d(cfg.in_ch, chs[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        ch = chs[0]
        spatial = cfg.input_spatial
        skip_chs = [ch]
        for i, out_ch in enumerate(chs):
            blocks, attns = nn.ModuleList(), nn.ModuleList()
            for _ in range(cfg.res_blocks):
                blocks.append(ResBlock(ch, out_ch, time_dim, shortcut="conv3"))
                ch = out_ch
                attns.append(
                    AttentionBlock(ch, cfg.heads) if spatial in cfg.attn_spatial else None
                )
                skip_chs.append(ch)
            self.down_blocks.append(blocks)
            self.down_attn.append(attns)
            if i < len(chs) - 1:
                self.downsamples.append(Downsample(ch))
                skip_chs.append(ch)
                spatial //= 2
        self._min_spatial = spatial

        self.mid_block1 = ResBlock(ch, ch, time_dim, shortcut="conv3")
        self.mid_attn = AttentionBlock(ch, cfg.heads) if spatial in cfg.attn_spatial else None
        self.mid_block2 = ResBlock(ch, ch, time_dim, shortcut="conv3")

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in range(len(chs) - 1, -1, -1):
            out_ch = chs[i]
            blocks, attns = nn.ModuleList(), nn.ModuleList()
            for _ in range(cfg.res_blocks + 1):
                blocks.append(ResBlock(ch + skip_chs.pop(), out_ch, time_dim, shortcut="conv3"))
                ch = out_ch
                attns.append(
                    AttentionBlock(ch, cfg.heads) if spatial in cfg.attn_spatial else None
                )
            self.up_blocks.append(blocks)
            self.up_attn.append(attns)
            if i > 0:
                self.upsamples.append(Upsample(ch))
                spatial *= 2

        self.out_norm = norm_layer(ch)
        self.out_conv = zero_module(nn.Conv2d(ch, cfg.out_ch, 3, padding=1))
        self._assert_standalone()

    def _assert_standalone(self) -> None:
        bad = [
            name
            for name, _ in self.named_parameters()
            if any(marker in name for marker in _FORBIDDEN_PARAM_MARKERS)
        ]
        if bad:
            raise ConfigurationError(
                f"student parameter tree references guidance/AE tensors: {bad[:3]}"
            )

    def forward(self, img_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if img_t.shape != cond.shape:
            raise ShapeError(
                f"noised image {tuple(img_t.shape)} and condition {tuple(cond.shape)} must match"
            )
        if img_t.shape[-3] != self.cfg.out_ch:
            raise ShapeError(f"expected {self.cfg.out_ch}-channel image, got {img_t.shape[-3]}")
        emb = self.time_embed(t)
        h = self.conv_in(torch.cat([img_t, cond], dim=-3))
        hs = [h]
        for i, (blocks, attns) in enumerate(zip(self.down_blocks, self.down_attn)):
            for block, attn in zip(blocks, attns):
                h = block(h, emb)
                if attn is not None:
                    h = attn(h)
                hs.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)
                hs.append(h)
        h = self.mid_block1(h, emb)
        if self.mid_attn is not None:
            h = self.mid_attn(h)
        h = self.mid_block2(h, emb)
        for i, (blocks, attns) in enumerate(zip(self.up_blocks, self.up_attn)):
            for block, attn in zip(blocks, attns):
                h = block(torch.cat([h, hs.pop()], dim=-3), emb)
                if attn is not None:
                    h = attn(h)
            if i < len(self.upsamples):
                h = self.upsamples[i](h)
        out = self.out_conv(F.silu(self.out_norm(h)))
        if not out.is_meta and not torch.isfinite(out).all():
            raise NumericError("student denoiser produced non-finite output")
        return out


def student_denoise(model: StudentUNet, img_t: torch.Tensor, t, cond: torch.Tensor) -> torch.Tensor:
    if isinstance(t, int):
        t = torch.full((img_t.shape[0],), t, dtype=torch.long)
    return model(img_t, t, cond)


# ---------------------------------------------------------------------------
# Feature bank and distillation loss
# ---------------------------------------------------------------------------


def standardize_map(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float32)
    return (m - m.mean()) / (m.std() + 1e-8)


@dataclass
class FeatureBank:
    """K (step index, standardized 2-D map) pairs from one teacher inference."""

    entries: list

    def __post_init__(self):
        for step, m in self.entries:
            if not np.all(np.isfinite(m)):
                raise NumericError(f"feature bank entry at step {step} is non-finite")

    @property
    def K(self) -> int:
        return len(self.entries)

    def steps(self) -> list[int]:
        return [s for s, _ in self.entries]

    def maps(self) -> np.ndarray:
        return np.stack([m for _, m in self.entries], axis=0)


def feature_alignment_loss(
    x0_std: torch.Tensor, bank_maps: torch.Tensor, ratios: torch.Tensor
) -> torch.Tensor:
    """Per-sample ratio-weighted mean squared distance to every bank map.

    x0_std: (B, 1, R, R) standardized clean estimates; bank_maps: (B, K, R, R);
    ratios: (B,).  The stage sum of the distillation objective is realized in
    expectation over the sampled stage, so this returns the per-draw term.
    """
    if bank_maps.ndim != 4 or bank_maps.shape[0] != x0_std.shape[0]:
        raise ShapeError(
            f"bank maps {tuple(bank_maps.shape)} incompatible with {tuple(x0_std.shape)}"
        )
    per_map = ((x0_std - bank_maps) ** 2).mean(dim=(-1, -2))  # (B, K)
    per_sample = per_map.mean(dim=1)  # mean over K
    return (ratios * per_sample).mean()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class StudentTrainState:
    model: StudentUNet
    sched: NoiseSchedule
    plan: DistillationPlan
    opt: torch.optim.Optimizer
    lr_sched: object
    ema: EmaState
    guard: DivergenceGuard
    stage_gen: torch.Generator
    t_gen: torch.Generator
    noise_gen: torch.Generator
    lambda_distill: float = 0.1
    step: int = 0


def init_student_training(
    cfg: StudentConfig,
    sched: NoiseSchedule,
    plan: DistillationPlan,
    lr: float = 1e-4,
    weight_decay: float = 1e-4,
    ema_decay: float = 0.99,
    lambda_distill: float = 0.1,
    seed: int = 0,
) -> StudentTrainState:
    with torch.random.fork_rng():
        torch.manual_seed(torch_gen(seed, "student-init").initial_seed())
        model = StudentUNet(cfg)
    opt = build_optimizer(model.parameters(), lr=lr, weight_decay=weight_decay)
    return StudentTrainState(
        model=model,
        sched=sched,
        plan=plan,
        opt=opt,
        lr_sched=build_warmup(opt),
        ema=EmaState.init(model.named_parameters(), decay=ema_decay),
        guard=DivergenceGuard(),
        stage_gen=torch_gen(seed, "student-stages"),
        t_gen=torch_gen(seed, "student-t"),
        noise_gen=torch_gen(seed, "student-noise"),
        lambda_distill=lambda_distill,
    )


def student_train_step(
    state: StudentTrainState,
    o7t: np.ndarray,
    lr_cond: np.ndarray,
    banks: dict,
    sample_ids: list[str],
) -> dict:
    """One optimization step on a batch of teacher-output slices.

    o7t / lr_cond: (B, R, R) float arrays; banks: sample id -> FeatureBank.
    A stage n is drawn uniformly per sample; the noising target is the
    stage-n degraded teacher output and the condition is the stage-(n-1)
    image, stage 0 being the low-resolution input.
    """
    plan = state.plan
    batch = o7t.shape[0]
    for sid in sample_ids:
        if sid not in banks:
            raise ConfigurationError(f"no precomputed feature bank for sample {sid}")

    stages = (
        torch.randint(1, plan.N + 1, (batch,), generator=state.stage_gen).tolist()
    )
    targets, conds, ratios = [], [], []
    for i, n in enumerate(stages):
        targets.append(degrade_image(o7t[i], plan, n))
        conds.append(lr_cond[i] if n == 1 else degrade_image(o7t[i], plan, n - 1))
        ratios.append(plan.ratio(n))
    target = torch.from_numpy(np.stack(targets)[:, None].astype(np.float32))
    cond = torch.from_numpy(np.stack(conds)[:, None].astype(np.float32))
    ratio_t = torch.tensor(ratios, dtype=torch.float32)

    t = torch.randint(0, state.sched.T, (batch,), generator=state.t_gen)
    eps = torch.randn(target.shape, generator=state.noise_gen)
    z_t = forward_noise_batch(state.sched, target, t, eps)
    eps_pred = state.model(z_t, t, cond)
    l_diff = F.mse_loss(eps_pred, eps)

    x0_hat = x0_estimate_batch(state.sched, z_t, eps_pred, t)
    mu = x0_hat.mean(dim=(-1, -2), keepdim=True)
    sd = x0_hat.std(dim=(-1, -2), keepdim=True) + 1e-8
    x0_std = (x0_hat - mu) / sd
    bank_maps = torch.from_numpy(
        np.stack([banks[sid].maps() for sid in sample_ids]).astype(np.float32)
    )
    l_dist = feature_alignment_loss(x0_std, bank_maps, ratio_t)

    loss = l_diff + state.lambda_distill * l_dist
    state.opt.zero_grad(set_to_none=True)
    loss.backward()
    state.opt.step()
    state.lr_sched.step()
    ema_update(state.ema, state.model.named_parameters())
    parts = {
        "diff": float(l_diff.detach()),
        "distill": float(l_dist.detach()),
        "total": float(loss.detach()),
    }
    state.guard.check(parts["total"], what="student")
    state.step += 1
    return parts


# ---------------------------------------------------------------------------
# Multi-scale inference
# ---------------------------------------------------------------------------


def student_infer(
    model_or_fn,
    input_volume: Volume,
    from_: FieldStrength,
    to: FieldStrength,
    plan: DistillationPlan,
    sched: NoiseSchedule,
    ddim_plan: DdimPlan,
    seed: int = 0,
    stage_hook=None,
) -> Volume:
    """Iterate the allocated stages; each stage denoises every slice of every
    axis conditioned on the previous stage's volume, then fuses the three
    axis reconstructions."""
    stages = plan.stages_for(from_, to)
    current = input_volume
    shape = input_volume.shape

    if isinstance(model_or_fn, nn.Module):
        model = model_or_fn

        def denoise(z, t_scalar, cond):
            t = torch.full((z.shape[0],), t_scalar, dtype=torch.long)
            with torch.inference_mode():
                return model(z, t, cond)

    else:
        denoise = model_or_fn

    for n in stages:
        # One starting noise per stage (shared by every slice, per Alg. 2
        # style); distinct slice shapes of non-cubic volumes get their own
        # deterministic draw.
        eps_by_shape: dict[tuple[int, int], torch.Tensor] = {}
        per_axis = {}
        for axis in Axis:
            extent = axis.extent(shape)
            hw = _slice_shape(shape, axis)
            if hw not in eps_by_shape:
                eps_by_shape[hw] = torch.randn(
                    (1, 1) + hw, generator=torch_gen(seed, "student-infer", n, f"{hw[0]}x{hw[1]}")
                )
            cond_np = np.stack(
                [extract_slice(current, axis, d).data for d in range(extent)]
            )
            cond = torch.from_numpy(cond_np[:, None].astype(np.float32))
            noise = eps_by_shape[hw].repeat(extent, 1, 1, 1)
            out = ddim_sample(
                sched,
                ddim_plan,
                lambda z, t, c=cond: denoise(z, t, c),
                noise,
            )
            arr = out.detach().clone().clamp(0.0, 1.0).to(torch.float32).numpy()[:, 0]
            slices = [
                extract_slice_like(arr[d], axis, d) for d in range(extent)
            ]
            per_axis[axis] = stack_slices(slices, axis, spacing=input_volume.spacing)
        current = fuse_axes(per_axis)
        current = Volume(
            data=np.clip(current.data, 0.0, 1.0).astype(np.float32),
            spacing=input_volume.spacing,
        )
        if stage_hook is not None:
            stage_hook(n, current)
    return current


def _slice_shape(shape: tuple[int, int, int], axis: Axis) -> tuple[int, int]:
    h, w, d = shape
    return {(Axis.AXIAL): (h, w), (Axis.CORONAL): (w, d), (Axis.SAGITTAL): (h, d)}[axis]


def extract_slice_like(data2d: np.ndarray, axis: Axis, depth: int):
    from .volume import Slice

    return Slice(data=data2d, axis=axis, depth=depth, channels=1)
